"""Command-line entry point: synth, train, extract, score, eval, params."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, metrics
from .model import (PRESETS, Config, build_model, format_parameter_counts, load_config, load_model,
                    parse_config, save_model)
from .train import extract_all, score_trials, train

log = logging.getLogger("serialspk")


def cmd_synth(args) -> int:
    out = Path(args.out)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    corpus = data.synth_corpus(args.speakers, args.utts, (args.min_frames, args.max_frames), args.seed,
                               dim=args.dim, heldout_per_speaker=args.heldout)
    for name, utts in (("train", corpus.utterances), ("heldout", corpus.heldout)):
        entries = []
        for u in utts:
            rel = f"feats/{u.utt_id}.feat"
            data.write_features(out / rel, u.frames)
            entries.append((u.utt_id, u.speaker, rel))
        data.write_manifest(out / f"{name}.manifest", entries)
    data.write_trials(out / "trials.txt", corpus.trials)
    print(f"wrote {len(corpus.utterances)} train and {len(corpus.heldout)} held-out utterances, "
          f"{len(corpus.trials)} trials to {out}")
    return 0


def _config(args) -> Config:
    base = Config()
    if getattr(args, "preset", None):
        base = base.replace(**PRESETS[args.preset])
    if args.config:
        return parse_config(Path(args.config).read_text(encoding="utf-8"), base)
    return base


def cmd_train(args) -> int:
    cfg = _config(args)
    manifest = args.manifest or cfg.manifest
    if not manifest:
        print("error: no training manifest (set 'manifest' in the config or pass --manifest)", file=sys.stderr)
        return 2
    utts = data.load_manifest(manifest, cfg.input_dim)
    speakers = sorted({u.speaker for u in utts})
    if len(speakers) != cfg.num_speakers:
        print(f"error: manifest has {len(speakers)} speakers but num_speakers = {cfg.num_speakers}",
              file=sys.stderr)
        return 2
    index = {s: i for i, s in enumerate(speakers)}
    model = build_model(cfg)
    result = train(model, utts, [index[u.speaker] for u in utts], cfg)
    save_model(args.out, model)
    if args.loss_log:
        with open(args.loss_log, "w", encoding="utf-8") as fh:
            for i, (loss, acc) in enumerate(zip(result.losses, result.accuracies)):
                fh.write(f"{i} {loss!r} {acc!r}\n")
    print(f"trained {len(result.losses)} steps; final loss {result.losses[-1]:.4f}; saved {args.out}")
    return 0


def cmd_extract(args) -> int:
    model = load_model(args.model, load_config(args.config) if args.config else None)
    utts = data.load_manifest(args.manifest, model.cfg.input_dim)
    embs = extract_all(model, utts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for utt_id, e in embs.items():
        rel = f"{utt_id}.emb"
        data.write_features(out / rel, e[None, :])
        entries.append((utt_id, "-", rel))
    data.write_manifest(out / "embeddings.manifest", entries)
    print(f"extracted {len(embs)} embeddings of dim {model.emb_dim} to {out}")
    return 0


def _load_embeddings(path: str) -> dict[str, np.ndarray]:
    p = Path(path)
    manifest = p / "embeddings.manifest" if p.is_dir() else p
    return {u.utt_id: u.frames[0].astype(np.float64) for u in data.load_manifest(manifest)}


def cmd_score(args) -> int:
    embs = _load_embeddings(args.embeddings)
    trials = data.read_trials(args.trials)
    with open(args.out, "w", encoding="utf-8") as fh:
        for e, t, s in score_trials(embs, trials):
            fh.write(f"{e} {t} {s:.12g}\n")
    print(f"scored {len(trials)} trials to {args.out}")
    return 0


def read_scores(path: str) -> dict[tuple[str, str], float]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected '<enroll> <test> <score>'")
        out[(parts[0], parts[1])] = float(parts[2])
    return out


def cmd_eval(args) -> int:
    scores = read_scores(args.scores)
    trials = data.read_trials(args.trials)
    missing = [(e, t) for e, t, _ in trials if (e, t) not in scores]
    if missing:
        print(f"error: {len(missing)} trials have no score, e.g. {missing[0]}", file=sys.stderr)
        return 2
    s = [scores[(e, t)] for e, t, _ in trials]
    labels = [tgt for *_, tgt in trials]
    print(metrics.format_metrics(metrics.evaluate(s, labels)))
    return 0


def cmd_params(args) -> int:
    sys.stdout.write(format_parameter_counts(build_model(_config(args))))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="serialspk", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus, manifests and trial list")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=16)
    p.add_argument("--utts", type=int, default=20)
    p.add_argument("--heldout", type=int, default=4)
    p.add_argument("--min-frames", type=int, default=150)
    p.add_argument("--max-frames", type=int, default=400)
    p.add_argument("--dim", type=int, default=26)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--config")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="extract embeddings for a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("score", help="cosine-score a trial list")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="EER and minDCF of a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--trials", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="per-component parameter counts")
    p.add_argument("--config")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.set_defaults(func=cmd_params)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
