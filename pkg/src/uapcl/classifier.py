"""Small transformer-encoder detector over ``T x D`` frame features.

Input projection, ``n_blocks`` post-norm encoder blocks (multi-head
self-attention and a GELU feed-forward, each wrapped in residual + layer
norm), temporal mean pooling, dropout and a one-logit head.  There is no
positional encoding; the synthetic features carry no temporal order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError, ValidationError, VersionError
from .serialize import read_container, write_container

FORMAT_VERSION = "ufckpt-1"
LN_EPS = 1e-5


@dataclass(frozen=True)
class ClassifierConfig:
    n_blocks: int = 2
    n_heads: int = 2
    model_dim: int = 8
    ff_dim: int = 16
    dropout_p: float = 0.2
    feat_dim: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValidationError("model_dim must be divisible by n_heads")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError("dropout_p must lie in [0, 1)")

    def param_shapes(self) -> dict[str, tuple]:
        """Canonical parameter names and shapes, in checkpoint order."""
        M, F = self.model_dim, self.ff_dim
        shapes = {"in.w": (self.feat_dim, M), "in.b": (M,)}
        for i in range(self.n_blocks):
            p = f"block{i}."
            for name in ("q", "k", "v", "o"):
                shapes[p + name + ".w"] = (M, M)
                shapes[p + name + ".b"] = (M,)
            shapes[p + "ln1.g"] = (M,)
            shapes[p + "ln1.b"] = (M,)
            shapes[p + "ff1.w"] = (M, F)
            shapes[p + "ff1.b"] = (F,)
            shapes[p + "ff2.w"] = (F, M)
            shapes[p + "ff2.b"] = (M,)
            shapes[p + "ln2.g"] = (M,)
            shapes[p + "ln2.b"] = (M,)
        shapes["head.w"] = (M, 1)
        shapes["head.b"] = (1,)
        return shapes


class ClassifierParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ClassifierConfig, tensors: dict[str, ad.Tensor]):
        expected = config.param_shapes()
        if list(tensors) != list(expected):
            raise ShapeError("parameter names do not match config")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ShapeError(f"{name}: shape {tensors[name].shape}, config expects {shape}")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name):
        return self.tensors[name]

    def values(self):
        return list(self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self, requires_grad=False) -> "ClassifierParams":
        return ClassifierParams(self.config, {k: ad.Tensor(t.data, requires_grad=requires_grad)
                                              for k, t in self.tensors.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, t in self.tensors.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ClassifierSnapshot:
    """Frozen parameters of a finished stage; the next stage's teacher."""

    params: ClassifierParams
    config: ClassifierConfig
    stage: int

    @classmethod
    def of(cls, params: ClassifierParams, stage: int) -> "ClassifierSnapshot":
        frozen = {}
        for k, t in params.tensors.items():
            arr = np.array(t.data)
            arr.setflags(write=False)
            frozen[k] = ad.Tensor._wrap(arr)
        return cls(ClassifierParams(params.config, frozen), params.config, stage)

    def checksum(self) -> str:
        return self.params.checksum()

    def logits(self, x):
        return forward(self.params, x, "eval")[0]

    def embed(self, x):
        return forward(self.params, x, "eval")[1]


def init_params(config: ClassifierConfig) -> ClassifierParams:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11]))
    tensors = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".w"):
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".g"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        tensors[name] = ad.Tensor(arr, requires_grad=True)
    return ClassifierParams(config, tensors)


def _linear(x, params, name):
    return ad.matmul(x, params[name + ".w"]) + params[name + ".b"]


def _attention(h, params, prefix, n_heads):
    B, T, M = h.shape
    dh = M // n_heads

    def heads(name):
        return ad.transpose(ad.reshape(_linear(h, params, prefix + name), (B, T, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    ctx = ad.matmul(ad.softmax_rows(scores), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, T, M))
    return _linear(ctx, params, prefix + "o")


def forward(params: ClassifierParams, x, mode: str = "eval", rng: np.random.Generator | None = None):
    """Return ``(logit, pooled)`` for a ``T x D`` block or a ``B x T x D`` batch.

    ``pooled`` is the time-averaged output of the last encoder block, taken
    before dropout; it is the distillation tap.  Dropout is applied only in
    train mode and draws its mask from ``rng``.
    """
    cfg = params.config
    x = x if isinstance(x, ad.Tensor) else ad.Tensor._wrap(np.asarray(x, dtype=np.float64))
    single = x.ndim == 2
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[-1] != cfg.feat_dim:
        raise ShapeError(f"expected [B, T, {cfg.feat_dim}] features, got {x.shape}")

    h = _linear(x, params, "in")
    for i in range(cfg.n_blocks):
        p = f"block{i}."
        h = ad.layer_norm(h + _attention(h, params, p, cfg.n_heads), params[p + "ln1.g"], params[p + "ln1.b"], LN_EPS)
        ff = _linear(ad.gelu(_linear(h, params, p + "ff1")), params, p + "ff2")
        h = ad.layer_norm(h + ff, params[p + "ln2.g"], params[p + "ln2.b"], LN_EPS)
    pooled = ad.mean_over_time(h)

    z = pooled
    if mode == "train" and cfg.dropout_p > 0:
        if rng is None:
            raise ValidationError("train-mode dropout needs an rng")
        keep = rng.random(pooled.shape) >= cfg.dropout_p
        z = pooled * (keep / (1.0 - cfg.dropout_p))
    elif mode not in ("train", "eval"):
        raise ValidationError(f"unknown mode {mode!r}")
    logit = ad.reshape(_linear(z, params, "head"), (pooled.shape[0],))
    if single:
        logit = ad.reshape(logit, ())
        pooled = ad.reshape(pooled, (cfg.model_dim,))
    return logit, pooled


def head_logit(params: ClassifierParams, pooled):
    """Logits from pooled embeddings ``[B, M]`` with no dropout."""
    return ad.reshape(_linear(pooled, params, "head"), (pooled.shape[0],))


def predict(params, x) -> np.ndarray:
    """1 (spoof) where the logit is strictly positive, else 0 (bona fide)."""
    logit = forward(params, x, "eval")[0].data
    return (logit > 0).astype(np.int64)


def predict_logit(logit) -> int:
    return int(float(logit) > 0)


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(params: ClassifierParams, path, stage: int = 0) -> None:
    shapes = params.config.param_shapes()
    header = {
        "format": FORMAT_VERSION,
        "config": asdict(params.config),
        "stage": stage,
        "params": [[name, list(shape)] for name, shape in shapes.items()],
    }
    write_container(path, header, [params[name].data for name in shapes])


def load_checkpoint(path, config: ClassifierConfig | None = None) -> ClassifierSnapshot:
    """Load a snapshot; with ``config`` given, shapes must agree with it."""
    header, records = read_container(path)
    if header.get("format") != FORMAT_VERSION:
        raise VersionError(f"checkpoint format {header.get('format')!r}, expected {FORMAT_VERSION!r}")
    stored = ClassifierConfig(**header["config"])
    target = config or stored
    names = [n for n, _ in header["params"]]
    if len(names) != len(records):
        raise ShapeError(f"header lists {len(names)} tensors, file holds {len(records)}")
    expected = target.param_shapes()
    if names != list(expected):
        raise ShapeError("checkpoint parameter layout does not match the requested config")
    tensors = {}
    for (name, shape), arr in zip(header["params"], records):
        if tuple(shape) != arr.shape:
            raise ShapeError(f"{name}: header shape {tuple(shape)} vs payload {arr.shape}")
        if arr.shape != expected[name]:
            raise ShapeError(f"{name}: checkpoint shape {arr.shape} vs config shape {expected[name]}")
        tensors[name] = ad.Tensor(arr)
    return ClassifierSnapshot.of(ClassifierParams(target, tensors), int(header["stage"]))


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]
