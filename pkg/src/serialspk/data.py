"""Feature files, front-end normalization, synthetic corpora, and batching."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import kernels

FEATURE_MAGIC = b"SAEF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FeatureFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


@dataclass
class FrameSequence:
    frames: np.ndarray
    utt_id: str
    speaker: str | None = None

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def write_features(path: str | Path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError(f"feature matrix must be [T >= 1, d], got {frames.shape}")
    payload = np.ascontiguousarray(frames, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, frames.shape[0], frames.shape[1]))
        fh.write(payload)


def parse_features(buf: bytes, utt_id: str = "", expected_dim: int | None = None) -> FrameSequence:
    if len(buf) < _HEADER.size:
        raise FeatureFormatError("truncated header", len(buf))
    magic, version, T, d = _HEADER.unpack_from(buf)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"bad magic {magic!r}", 0)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"unsupported version {version}", 4)
    if T == 0:
        raise FeatureFormatError("header declares zero frames", 8)
    if d == 0 or (expected_dim is not None and d != expected_dim):
        raise FeatureFormatError(f"feature dim {d} does not match expected {expected_dim}", 12)
    need = _HEADER.size + 4 * T * d
    if len(buf) < need:
        raise FeatureFormatError(f"truncated payload: need {need} bytes, have {len(buf)}", len(buf))
    if len(buf) > need:
        raise FeatureFormatError("trailing bytes after payload", need)
    frames = np.frombuffer(buf, dtype="<f4", count=T * d, offset=_HEADER.size).reshape(T, d)
    return FrameSequence(frames.astype(np.float32), utt_id)


def read_features(path: str | Path, expected_dim: int | None = None) -> FrameSequence:
    path = Path(path)
    return parse_features(path.read_bytes(), path.stem, expected_dim)


def sliding_cmn(x: np.ndarray, window_frames: int = 300) -> np.ndarray:
    """Subtract the mean of a centered window (truncated at the edges) from each frame."""
    if window_frames < 1:
        raise ValueError("CMN window must be at least one frame")
    x = np.asarray(x)
    return x - kernels.sliding_mean(x, int(window_frames))


def energy_vad(x: np.ndarray, k: float = 0.5) -> np.ndarray:
    """Keep frames whose c0 exceeds ``mean(c0) - k * std(c0)``; never returns zero frames."""
    x = np.asarray(x)
    c0 = x[:, 0].astype(np.float64)
    keep = c0 > c0.mean() - k * c0.std()
    if np.ptp(c0) == 0:
        keep[:] = True
    if not keep.any():
        keep[np.argmax(c0)] = True
    return x[keep]


# ---------------------------------------------------------------- synthetic corpus

@dataclass
class SyntheticSpeakerModel:
    basis: np.ndarray
    offset: np.ndarray
    smoothing: float
    noise: float


@dataclass
class Corpus:
    utterances: list[FrameSequence]
    speakers: list[str]
    trials: list[tuple[str, str, bool]] = field(default_factory=list)
    heldout: list[FrameSequence] = field(default_factory=list)

    def label_of(self, utt: FrameSequence) -> int:
        return self.speakers.index(utt.speaker)

    def labels(self) -> np.ndarray:
        index = {s: i for i, s in enumerate(self.speakers)}
        return np.array([index[u.speaker] for u in self.utterances], dtype=np.int64)


def make_speakers(num_speakers: int, dim: int, rank: int, rng: np.random.Generator,
                  smoothing: float = 0.8, noise: float = 0.3, min_distance: float = 1.0
                  ) -> list[SyntheticSpeakerModel]:
    speakers: list[SyntheticSpeakerModel] = []
    while len(speakers) < num_speakers:
        basis = rng.normal(scale=1.0 / math.sqrt(rank), size=(dim, rank))
        if any(np.linalg.norm(basis - s.basis) < min_distance for s in speakers):
            continue
        offset = rng.normal(scale=0.5, size=dim)
        speakers.append(SyntheticSpeakerModel(basis, offset, smoothing, noise))
    return speakers


def synth_utterance(spk: SyntheticSpeakerModel, num_frames: int, rng: np.random.Generator) -> np.ndarray:
    rank = spk.basis.shape[1]
    z = np.empty((num_frames, rank))
    innov = rng.normal(size=(num_frames, rank)) * math.sqrt(1 - spk.smoothing ** 2)
    z[0] = rng.normal(size=rank)
    for t in range(1, num_frames):
        z[t] = spk.smoothing * z[t - 1] + innov[t]
    x = z @ spk.basis.T + spk.offset + spk.noise * rng.normal(size=(num_frames, spk.basis.shape[0]))
    return x.astype(np.float32)


def synth_corpus(num_speakers: int, utts_per_speaker: int, frames_range: tuple[int, int] = (150, 400),
                 seed: int = 0, dim: int = 26, rank: int = 8, heldout_per_speaker: int = 4,
                 nontargets_per_utt: int = 3) -> Corpus:
    """Deterministic multi-speaker corpus with a held-out split and a trial list over it.

    Trials pair every two held-out utterances of a speaker (targets) and each
    held-out utterance with utterances of ``nontargets_per_utt`` other speakers.
    """
    lo, hi = frames_range
    if num_speakers < 2:
        raise ValueError("need at least two speakers")
    if utts_per_speaker < 1 or lo < 1 or hi < lo:
        raise ValueError(f"degenerate corpus ranges: utts={utts_per_speaker}, frames={frames_range}")
    if heldout_per_speaker == 1:
        raise ValueError("held-out split needs 0 or at least 2 utterances per speaker")
    rng = np.random.default_rng(seed)
    models = make_speakers(num_speakers, dim, rank, rng)
    names = [f"spk{i:04d}" for i in range(num_speakers)]
    train: list[FrameSequence] = []
    heldout: list[FrameSequence] = []
    for name, model in zip(names, models):
        for j in range(utts_per_speaker + heldout_per_speaker):
            frames = synth_utterance(model, int(rng.integers(lo, hi + 1)), rng)
            utt = FrameSequence(frames, f"{name}-utt{j:04d}", name)
            (train if j < utts_per_speaker else heldout).append(utt)
    trials = make_trials(heldout, nontargets_per_utt, rng) if heldout else []
    return Corpus(train, names, trials, heldout)


def make_trials(utts: Sequence[FrameSequence], nontargets_per_utt: int, rng: np.random.Generator
                ) -> list[tuple[str, str, bool]]:
    by_spk: dict[str, list[str]] = {}
    for u in utts:
        by_spk.setdefault(u.speaker, []).append(u.utt_id)
    spks = sorted(by_spk)
    trials = []
    for s in spks:
        ids = by_spk[s]
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                trials.append((ids[i], ids[j], True))
    for s in spks:
        others = [o for o in spks if o != s]
        for uid in by_spk[s]:
            for o in rng.choice(others, size=min(nontargets_per_utt, len(others)), replace=False):
                trials.append((uid, str(rng.choice(by_spk[o])), False))
    return trials


# ---------------------------------------------------------------- chunking

def crop(frames: np.ndarray, chunk_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Random fixed-length window; shorter utterances are wrap-padded from frame 0."""
    T = frames.shape[0]
    if T == 0:
        raise ValueError("cannot crop an empty utterance")
    if T < chunk_frames:
        return frames[np.arange(chunk_frames) % T]
    start = int(rng.integers(0, T - chunk_frames + 1))
    return frames[start:start + chunk_frames]


def chunk_and_batch(utterances: Sequence[FrameSequence], labels: Sequence[int], batch_size: int,
                    rng: np.random.Generator, chunk_frames: int = 200) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One shuffled epoch of ``([B, chunk, d] crops, [B] labels)``; the last batch may be short."""
    if not utterances:
        raise ValueError("empty corpus")
    order = rng.permutation(len(utterances))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        x = np.stack([crop(utterances[i].frames, chunk_frames, rng) for i in idx])
        yield x, np.asarray([labels[i] for i in idx], dtype=np.int64)


def num_batches(n_utts: int, batch_size: int) -> int:
    return -(-n_utts // batch_size)


# ---------------------------------------------------------------- text formats

def write_manifest(path: str | Path, entries: Sequence[tuple[str, str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt, spk, rel in entries:
            fh.write(f"{utt} {spk} {rel}\n")


def read_manifest(path: str | Path) -> list[tuple[str, str, str]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected '<utt> <spk> <path>', got {line!r}")
        out.append((parts[0], parts[1], parts[2]))
    return out


def load_manifest(path: str | Path, expected_dim: int | None = None) -> list[FrameSequence]:
    base = Path(path).parent
    utts = []
    for utt, spk, rel in read_manifest(path):
        seq = read_features(base / rel, expected_dim)
        seq.utt_id, seq.speaker = utt, spk
        utts.append(seq)
    return utts


def write_trials(path: str | Path, trials: Sequence[tuple[str, str, bool]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e, t, target in trials:
            fh.write(f"{e} {t} {'target' if target else 'nontarget'}\n")


def read_trials(path: str | Path) -> list[tuple[str, str, bool]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
            raise ValueError(f"{path}:{lineno}: expected '<enroll> <test> target|nontarget', got {line!r}")
        out.append((parts[0], parts[1], parts[2] == "target"))
    return out
