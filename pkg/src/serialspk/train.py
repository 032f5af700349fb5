"""Training loop, embedding extraction, and trial scoring."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .data import FrameSequence, chunk_and_batch, energy_vad, sliding_cmn
from .metrics import cosine_score
from .model import Config, SpeakerNet
from .optim import AdamW, EpochDecay
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)


def preprocess(frames: np.ndarray, cfg: Config) -> np.ndarray:
    if cfg.cmn_window > 0:
        frames = sliding_cmn(frames, cfg.cmn_window)
    if cfg.vad:
        frames = energy_vad(frames, cfg.vad_k)
    return frames


def train(model: SpeakerNet, utterances: Sequence[FrameSequence], labels: Sequence[int],
          cfg: Config | None = None, epochs: int | None = None) -> TrainResult:
    """Speaker-classification training on random fixed-length crops."""
    cfg = cfg or model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= cfg.num_speakers):
        raise ValueError(f"labels must lie in [0, {cfg.num_speakers})")
    dt = cfg.np_dtype
    prepared = [FrameSequence(preprocess(u.frames, cfg).astype(dt), u.utt_id, u.speaker) for u in utterances]
    opt = AdamW(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                weight_decay=cfg.weight_decay)
    schedule = EpochDecay(opt, cfg.lr_decay)
    data_rng = np.random.default_rng([cfg.seed, 2])
    result = TrainResult()
    step = 0
    for epoch in range(epochs):
        for x, y in chunk_and_batch(prepared, labels, cfg.batch_size, data_rng, cfg.chunk_frames):
            _, logits = model.forward(Tensor(x), training=True)
            loss = tn.cross_entropy(logits, y)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at step {step} (epoch {epoch})")
            loss.backward()
            opt.step()
            opt.zero_grad()
            result.losses.append(value)
            result.accuracies.append(float(np.mean(logits.data.argmax(axis=1) == y)))
            result.lrs.append(opt.lr)
            step += 1
        log.info("epoch %d: loss %.4f lr %.2e", epoch, result.losses[-1], opt.lr)
        schedule.step()
    return result


def extract_embedding(model: SpeakerNet, frames: np.ndarray) -> np.ndarray:
    """Full-utterance eval-mode embedding."""
    frames = np.asarray(frames, dtype=model.cfg.np_dtype)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError(f"expected a [T >= 1, d] feature matrix, got {frames.shape}")
    emb = model.embed(Tensor(frames[None]), training=False)
    return emb.data[0].copy()


def extract_all(model: SpeakerNet, utterances: Sequence[FrameSequence]) -> dict[str, np.ndarray]:
    return {u.utt_id: extract_embedding(model, preprocess(u.frames, model.cfg)) for u in utterances}


def classify_accuracy(model: SpeakerNet, utterances: Sequence[FrameSequence], labels: Sequence[int]) -> float:
    hits = 0
    for u, y in zip(utterances, labels):
        x = np.asarray(preprocess(u.frames, model.cfg), dtype=model.cfg.np_dtype)
        _, logits = model.forward(Tensor(x[None]), training=False)
        hits += int(np.argmax(logits.data[0]) == y)
    return hits / max(len(utterances), 1)


def score_trials(embeddings: dict[str, np.ndarray], trials: Sequence[tuple[str, str, bool]]
                 ) -> list[tuple[str, str, float]]:
    out = []
    for e, t, _ in trials:
        if e not in embeddings or t not in embeddings:
            raise KeyError(f"no embedding for trial ({e}, {t})")
        out.append((e, t, cosine_score(embeddings[e], embeddings[t])))
    return out
