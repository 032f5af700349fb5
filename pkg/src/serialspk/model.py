"""Model configuration, assembly, parameter accounting, and checkpoints."""

from __future__ import annotations

import dataclasses
import struct
from collections import OrderedDict
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as tn
from .layers import DenseParams, Module, NormParams, TdnnLayerParams, batch_norm, dense, tdnn_forward
from .pooling import (AttentiveStatParams, SelfAttentivePoolParams, attentive_stats_pool,
                      self_attentive_pool, statistics_pool)
from .serialized import SerializedStackParams, serialized_heads
from .tensor import Tensor

ARCHITECTURES = ("stat_pool", "attentive_stat", "self_attentive", "serialized")


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # model
    arch: str = "serialized"
    layers: int = 2
    input_dim: int = 26
    tdnn_channels: int = 128
    tdnn_final: int = 256
    contexts: str = "-2,-1,0,1,2;-2,0,2;-3,0,3;0;0"
    d: int = 64
    d_k: int = 32
    d_ff: int = 128
    d_emb: int = 64
    xvector_dim: int = 64
    attn_hidden: int = 64
    key_dim: int = 64
    num_speakers: int = 16
    dropout: float = 0.1
    seed: int = 0
    dtype: str = "float32"
    # optimization
    lr: float = 3e-3
    lr_decay: float = 0.6
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 32
    chunk_frames: int = 200
    # data
    manifest: str = ""
    cmn_window: int = 0
    vad: bool = False
    vad_k: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown arch {self.arch!r}; choose from {ARCHITECTURES}")
        for name in ("input_dim", "tdnn_channels", "tdnn_final", "d", "d_k", "d_ff", "d_emb", "xvector_dim",
                     "attn_hidden", "key_dim", "num_speakers", "epochs", "batch_size", "chunk_frames"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.arch == "serialized" and self.layers < 1:
            raise ConfigError("serialized architecture needs layers >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if len(self.context_list()) != 5:
            raise ConfigError("contexts must list five TDNN layers separated by ';'")

    def context_list(self) -> list[list[int]]:
        try:
            return [[int(v) for v in part.split(",")] for part in self.contexts.split(";")]
        except ValueError as exc:
            raise ConfigError(f"bad contexts {self.contexts!r}") from exc

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)


PRESETS = {
    "desk": {},
    "paper": dict(layers=6, tdnn_channels=512, tdnn_final=1500, d=256, d_k=128, d_ff=512, d_emb=256,
                  xvector_dim=512, attn_hidden=500, key_dim=500, num_speakers=5994, batch_size=512,
                  lr=1e-3, cmn_window=300, vad=True),
}


def _coerce(field: dataclasses.Field, raw: str):
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    if kind == "bool":
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{field.name}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse ``key = value`` lines; ``preset = paper|desk`` may come first."""
    known = {f.name: f for f in fields(Config)}
    values: dict[str, object] = {}
    preset = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            if raw not in PRESETS:
                raise ConfigError(f"line {lineno}: unknown preset {raw!r}")
            preset = raw
            continue
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(known[key], raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {raw!r}") from exc
    cfg = base or Config()
    if preset:
        cfg = cfg.replace(**PRESETS[preset])
    return cfg.replace(**values)


def load_config(path: str | Path) -> Config:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: Config) -> str:
    out = []
    for f in fields(Config):
        val = getattr(cfg, f.name)
        out.append(f"{f.name} = {str(val).lower() if isinstance(val, bool) else val}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- networks

class Classifier(Module):
    """Hidden fully-connected layer (ReLU, batch norm) then the speaker softmax layer."""

    def __init__(self, in_dim: int, hidden: int, num_speakers: int, rng, dtype):
        self.fc = DenseParams(in_dim, hidden, rng, dtype=dtype)
        self.fc_norm = NormParams(hidden, dtype=dtype, running=True)
        # zero-initialized output: loss starts at ln(num_speakers)
        self.output = DenseParams(hidden, num_speakers, rng, dtype=dtype, zero=True)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = batch_norm(tn.relu(dense(x, self.fc)), self.fc_norm, training)
        return dense(h, self.output)


class SpeakerNet(Module):
    def __init__(self, cfg: Config):
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        self.cfg = cfg
        ctx = cfg.context_list()
        C = cfg.tdnn_channels
        self.frontend = [
            TdnnLayerParams(cfg.input_dim, C, ctx[0], rng, dtype=dt),
            TdnnLayerParams(C, C, ctx[1], rng, dtype=dt),
            TdnnLayerParams(C, C, ctx[2], rng, dtype=dt),
        ]
        if cfg.arch == "serialized":
            self.frontend.append(TdnnLayerParams(C, cfg.d, ctx[3], rng, activation=False, dtype=dt))
            self.stack = SerializedStackParams(cfg.layers, cfg.d, cfg.d_k, cfg.d_ff, cfg.d_emb, rng,
                                               cfg.dropout, dt)
            emb_dim = cfg.d_emb
        else:
            self.frontend.append(TdnnLayerParams(C, C, ctx[3], rng, dtype=dt))
            self.frontend.append(TdnnLayerParams(C, cfg.tdnn_final, ctx[4], rng, dtype=dt))
            if cfg.arch == "attentive_stat":
                self.pool = AttentiveStatParams(cfg.tdnn_final, cfg.attn_hidden, rng, dt)
            elif cfg.arch == "self_attentive":
                self.pool = SelfAttentivePoolParams(C, cfg.key_dim, rng, dt)
            self.embedding = DenseParams(2 * cfg.tdnn_final, cfg.xvector_dim, rng, dtype=dt)
            self.embed_norm = NormParams(cfg.xvector_dim, dtype=dt, running=True)
            emb_dim = cfg.xvector_dim
        self.emb_dim = emb_dim
        self.classifier = Classifier(emb_dim, emb_dim, cfg.num_speakers, rng, dt)
        self.dropout_rng = np.random.default_rng([cfg.seed, 1])

    def embed(self, x: Tensor, training: bool = False) -> Tensor:
        """Speaker embedding ``[B, emb_dim]`` for frames ``[B, T, input_dim]``."""
        if x.shape[-2] == 0:
            raise tn.ShapeError("cannot embed an utterance with zero frames")
        h = x
        key_src = None
        for i, layer in enumerate(self.frontend):
            h = tdnn_forward(h, layer, training)
            if i == 3:
                key_src = h
        arch = self.cfg.arch
        if arch == "serialized":
            return serialized_heads(h, self.stack, training, self.dropout_rng)
        if arch == "stat_pool":
            stats = statistics_pool(h)
        elif arch == "attentive_stat":
            stats = attentive_stats_pool(h, self.pool)
        else:
            stats = self_attentive_pool(h, self.pool, key_input=key_src)
        return dense(stats.concat(), self.embedding)

    def forward(self, x: Tensor, training: bool = False) -> tuple[Tensor, Tensor]:
        """Returns ``(embedding, logits)``."""
        emb = self.embed(x, training)
        norm = self.stack.out_norm if self.cfg.arch == "serialized" else self.embed_norm
        act = batch_norm(tn.relu(emb), norm, training)
        return emb, self.classifier(act, training)


def build_model(cfg: Config) -> SpeakerNet:
    return SpeakerNet(cfg)


def parameter_counts(model: Module) -> "OrderedDict[str, int]":
    """Trainable scalars per component (parameter name minus its final field)."""
    counts: OrderedDict[str, int] = OrderedDict()
    for name, p in model.named_parameters():
        comp = name.rsplit(".", 1)[0]
        counts[comp] = counts.get(comp, 0) + int(p.data.size)
    return counts


def count_parameters(model: Module) -> int:
    return model.num_parameters()


def format_parameter_counts(model: Module) -> str:
    counts = parameter_counts(model)
    lines = [f"{name} {n}" for name, n in counts.items()]
    total = sum(counts.values())
    out = sum(n for name, n in counts.items() if name.startswith("classifier.output"))
    lines.append(f"total {total}")
    lines.append(f"total_without_output_layer {total - out}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"SAEM"
CKPT_VERSION = 1


def model_state(model: Module) -> "OrderedDict[str, np.ndarray]":
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, p in model.named_parameters():
        state[name] = p.data
    for name, buf in model.named_buffers():
        state[name] = buf
    return state


def write_checkpoint(path: str | Path, state: "OrderedDict[str, np.ndarray]") -> None:
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", buf, pos)
            shape = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if pos + 4 * size > len(buf):
                raise ValueError(f"{path}: truncated tensor {name!r} at byte {pos}")
            state[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint at byte {pos}") from exc
    return state


def load_state(model: Module, state: "OrderedDict[str, np.ndarray]") -> None:
    targets = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    missing = (set(targets) | set(buffers)) - set(state)
    if missing:
        raise ValueError(f"checkpoint lacks {sorted(missing)[:5]}")
    for name, arr in state.items():
        if name in targets:
            dst = targets[name].data
        elif name in buffers:
            dst = buffers[name]
        else:
            raise ValueError(f"checkpoint has unknown tensor {name!r}")
        if dst.shape != arr.shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {dst.shape}")
        dst[...] = arr


def save_model(path: str | Path, model: SpeakerNet) -> None:
    """Checkpoint at ``path`` plus its config next to it at ``path + '.conf'``."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_checkpoint(path, model_state(model))
    Path(str(path) + ".conf").write_text(dump_config(model.cfg), encoding="utf-8")


def load_model(path: str | Path, cfg: Config | None = None) -> SpeakerNet:
    if cfg is None:
        cfg = load_config(str(path) + ".conf")
    model = build_model(cfg)
    load_state(model, read_checkpoint(path))
    return model
