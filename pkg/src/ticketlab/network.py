"""TinyResNet backbone with swappable task heads.

The model is ``stem conv -> [conv/bn/relu + skip] * depth -> global average
pool -> head``. Only block convolution weights are prunable; the stem, the
norm parameters and every head parameter sit outside the mask.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .mask import LayoutMismatch, Mask
from .tensor import DimensionError, conv2d, conv2d_backward, kaiming_init

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
HEAD_KINDS = ("classifier", "projector")


class StaleTape(RuntimeError):
    """A tape was replayed twice or against a different parameter layout."""


@dataclass(frozen=True)
class ModelConfig:
    width: int = 16
    depth: int = 2
    use_batchnorm: bool = True
    head_kind: str = "classifier"
    head_dim: int = 10
    in_channels: int = 3

    def validate(self) -> "ModelConfig":
        if self.width < 4:
            raise DimensionError(f"width must be >= 4, got {self.width}")
        if not 2 <= self.depth <= 6:
            raise DimensionError(f"depth must be in [2, 6], got {self.depth}")
        if self.head_kind not in HEAD_KINDS:
            raise DimensionError(f"unknown head kind {self.head_kind!r}")
        if self.head_dim < (2 if self.head_kind == "classifier" else 1):
            raise DimensionError(f"invalid head dim {self.head_dim}")
        if self.in_channels < 1:
            raise DimensionError("in_channels must be positive")
        return self

    def with_head(self, kind: str, dim: int) -> "ModelConfig":
        return replace(self, head_kind=kind, head_dim=dim).validate()


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | linear | batchnorm | relu | globalavgpool
    name: str
    dims: tuple
    prunable: bool = False


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple
    offset: int
    block: str

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class Layout:
    """Canonical flattening of the prunable tensors into ``[0, d1)``."""

    entries: tuple

    @classmethod
    def from_shapes(cls, items) -> "Layout":
        entries, offset = [], 0
        for name, shape, block in items:
            e = LayoutEntry(name, tuple(int(s) for s in shape), offset, block)
            entries.append(e)
            offset += e.size
        return cls(tuple(entries))

    @property
    def size(self) -> int:
        return sum(e.size for e in self.entries)

    @property
    def layout_id(self) -> str:
        text = ";".join(f"{e.name}:{'x'.join(map(str, e.shape))}" for e in self.entries)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def entry(self, name: str) -> LayoutEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def flatten(self, tensors: dict) -> np.ndarray:
        if not self.entries:
            return np.zeros(0)
        return np.concatenate([np.asarray(tensors[e.name], dtype=np.float64).ravel()
                               for e in self.entries])

    def split(self, vec: np.ndarray) -> dict:
        return {e.name: vec[e.offset:e.offset + e.size].reshape(e.shape) for e in self.entries}

    def index_of(self, name: str, flat_offset: int) -> int:
        e = self.entry(name)
        if not 0 <= flat_offset < e.size:
            raise IndexError(flat_offset)
        return e.offset + flat_offset

    def empty_mask(self) -> Mask:
        return Mask.zeros(self.size, self.layout_id)

    def full_mask(self) -> Mask:
        return Mask.ones(self.size, self.layout_id)


def _block_label(name: str) -> str:
    if name.startswith("block"):
        return "B" + name.split(".")[0][len("block"):]
    return name.split(".")[0]


@dataclass
class ParamStore:
    """Model parameters split into backbone, head and non-trainable buffers."""

    config: ModelConfig
    backbone: dict
    head: dict
    buffers: dict
    prunable: tuple

    @property
    def layout(self) -> Layout:
        return Layout.from_shapes(
            (n, self.backbone[n].shape, _block_label(n)) for n in self.prunable)

    @property
    def d1(self) -> int:
        return sum(self.backbone[n].size for n in self.prunable)

    @property
    def d2(self) -> int:
        return sum(v.size for v in self.head.values())

    def trainable(self) -> dict:
        return {**self.backbone, **self.head}

    def copy(self) -> "ParamStore":
        return ParamStore(self.config,
                          {k: v.copy() for k, v in self.backbone.items()},
                          {k: v.copy() for k, v in self.head.items()},
                          {k: v.copy() for k, v in self.buffers.items()},
                          tuple(self.prunable))

    def with_trainable(self, values: dict) -> "ParamStore":
        return ParamStore(self.config,
                          {k: values[k] for k in self.backbone},
                          {k: values[k] for k in self.head},
                          dict(self.buffers), tuple(self.prunable))

    def identical(self, other: "ParamStore") -> bool:
        """Bitwise equality of every tensor and of the config."""
        if self.config != other.config or self.prunable != other.prunable:
            return False
        for a, b in ((self.backbone, other.backbone), (self.head, other.head),
                     (self.buffers, other.buffers)):
            if list(a) != list(b):
                return False
            for k in a:
                if a[k].shape != b[k].shape or a[k].tobytes() != b[k].tobytes():
                    return False
        return True


def layer_specs(config: ModelConfig) -> list[LayerSpec]:
    w, c = config.width, config.in_channels
    specs = [LayerSpec("conv", "stem.conv", (w, c, 3, 3), False)]
    if config.use_batchnorm:
        specs.append(LayerSpec("batchnorm", "stem.bn", (w,)))
    specs.append(LayerSpec("relu", "stem.relu", ()))
    for i in range(1, config.depth + 1):
        specs.append(LayerSpec("conv", f"block{i}.conv", (w, w, 3, 3), True))
        if config.use_batchnorm:
            specs.append(LayerSpec("batchnorm", f"block{i}.bn", (w,)))
        specs.append(LayerSpec("relu", f"block{i}.relu", ()))
    specs.append(LayerSpec("globalavgpool", "pool", ()))
    if config.head_kind == "classifier":
        specs.append(LayerSpec("linear", "head.fc", (config.head_dim, w)))
    else:
        specs += [LayerSpec("linear", "head.fc1", (w, w)), LayerSpec("relu", "head.relu", ()),
                  LayerSpec("linear", "head.fc2", (config.head_dim, w))]
    return specs


def init_head(config: ModelConfig, rng: np.random.Generator) -> dict:
    w = config.width
    if config.head_kind == "classifier":
        return {"head.fc.weight": kaiming_init((config.head_dim, w), rng),
                "head.fc.bias": np.zeros(config.head_dim)}
    return {"head.fc1.weight": kaiming_init((w, w), rng),
            "head.fc1.bias": np.zeros(w),
            "head.fc2.weight": kaiming_init((config.head_dim, w), rng),
            "head.fc2.bias": np.zeros(config.head_dim)}


def build(config: ModelConfig, rng: np.random.Generator) -> tuple[ParamStore, list[LayerSpec]]:
    """Initialize a model; conv and linear weights are He-normal, biases zero."""
    config.validate()
    w = config.width
    backbone, buffers, prunable = {}, {}, []

    def norm(prefix: str) -> None:
        if config.use_batchnorm:
            backbone[f"{prefix}.bn.weight"] = np.ones(w)
            backbone[f"{prefix}.bn.bias"] = np.zeros(w)
            buffers[f"{prefix}.bn.running_mean"] = np.zeros(w)
            buffers[f"{prefix}.bn.running_var"] = np.ones(w)

    backbone["stem.conv.weight"] = kaiming_init((w, config.in_channels, 3, 3), rng)
    if not config.use_batchnorm:
        backbone["stem.conv.bias"] = np.zeros(w)
    norm("stem")
    for i in range(1, config.depth + 1):
        name = f"block{i}.conv.weight"
        backbone[name] = kaiming_init((w, w, 3, 3), rng)
        prunable.append(name)
        norm(f"block{i}")
    head = init_head(config, rng)
    return ParamStore(config, backbone, head, buffers, tuple(prunable)), layer_specs(config)


def attach_head(params: ParamStore, kind: str, dim: int, rng: np.random.Generator) -> ParamStore:
    """Same backbone (shared arrays), freshly initialized head of the given kind."""
    config = params.config.with_head(kind, dim)
    return ParamStore(config, dict(params.backbone), init_head(config, rng),
                      dict(params.buffers), tuple(params.prunable))


def mask_tensors(params: ParamStore, mask: Mask) -> dict:
    layout = params.layout
    mask.check(layout.layout_id, layout.size)
    bits = mask.to_bool().astype(np.float64)
    return layout.split(bits)


def apply_mask(params: ParamStore, mask: Mask) -> ParamStore:
    m = mask_tensors(params, mask)
    out = params.copy()
    for name, bits in m.items():
        out.backbone[name] = out.backbone[name] * bits
    return out


@dataclass
class Tape:
    layout_id: str
    train: bool
    x: np.ndarray
    steps: list = field(default_factory=list)
    batch_stats: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    used: bool = False
    params: ParamStore | None = None


def _bn_forward(x, gamma, beta, rmean, rvar, train):
    if train:
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    else:
        mu, var = rmean, rvar
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv, gamma), (mu, var)


def _bn_backward(dy, cache, train):
    xhat, inv, gamma = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if train:
        dx = inv[None, :, None, None] * (
            dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
    else:
        dx = dxhat * inv[None, :, None, None]
    return dx, dgamma, dbeta


def _norm_or_bias(params, prefix, u, train, tape):
    p = params.backbone
    if params.config.use_batchnorm:
        y, cache, stats = _bn_forward(u, p[f"{prefix}.bn.weight"], p[f"{prefix}.bn.bias"],
                                      params.buffers[f"{prefix}.bn.running_mean"],
                                      params.buffers[f"{prefix}.bn.running_var"], train)
        if train:
            tape.batch_stats[prefix] = (stats[0], stats[1], u.shape[0] * u.shape[2] * u.shape[3])
        return y, cache
    bias = p.get(f"{prefix}.conv.bias")
    return (u + bias[None, :, None, None], None) if bias is not None else (u, None)


def forward(params: ParamStore, mask: Mask, x: np.ndarray, train: bool = True):
    """Evaluate ``f(x; mask * theta, head)``.

    With ``train=True`` batch norm normalizes by batch statistics (recorded on
    the tape for :func:`update_running_stats`); otherwise running statistics.
    """
    x = np.asarray(x, dtype=np.float64)
    cfg = params.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"expected B×{cfg.in_channels}×H×W input, got {x.shape}")
    layout = params.layout
    masks = mask_tensors(params, mask)
    tape = Tape(layout.layout_id, train, x, masks=masks, params=params)
    p = params.backbone

    s = conv2d(x, p["stem.conv.weight"], 1, 1)
    s, cache = _norm_or_bias(params, "stem", s, train, tape)
    h = np.maximum(s, 0.0)
    tape.steps.append(("stem", cache, s > 0))
    for i in range(1, cfg.depth + 1):
        name = f"block{i}.conv.weight"
        w = p[name] * masks[name]
        u = conv2d(h, w, 1, 1)
        u, cache = _norm_or_bias(params, f"block{i}", u, train, tape)
        tape.steps.append((f"block{i}", h, w, cache, u > 0))
        h = h + np.maximum(u, 0.0)
    pooled = h.mean(axis=(2, 3))
    tape.steps.append(("pool", h.shape))
    hd = params.head
    if cfg.head_kind == "classifier":
        out = pooled @ hd["head.fc.weight"].T + hd["head.fc.bias"]
        tape.steps.append(("classifier", pooled))
    else:
        z1 = pooled @ hd["head.fc1.weight"].T + hd["head.fc1.bias"]
        a1 = np.maximum(z1, 0.0)
        out = a1 @ hd["head.fc2.weight"].T + hd["head.fc2.bias"]
        tape.steps.append(("projector", pooled, z1 > 0, a1))
    return out, tape


def backward(tape: Tape, output_grad: np.ndarray) -> dict:
    """Reverse-mode gradients for every trainable tensor of the recorded forward.

    Gradients of prunable weights are multiplied by their mask bits, so masked
    coordinates come back exactly zero.
    """
    if tape.used:
        raise StaleTape("tape already consumed")
    params = tape.params
    if params.layout.layout_id != tape.layout_id:
        raise StaleTape("parameter layout changed since forward")
    tape.used = True
    g = np.asarray(output_grad, dtype=np.float64)
    grads = {}
    hd = params.head
    steps = list(tape.steps)

    kind = steps.pop()
    if kind[0] == "classifier":
        pooled = kind[1]
        grads["head.fc.weight"] = g.T @ pooled
        grads["head.fc.bias"] = g.sum(axis=0)
        gp = g @ hd["head.fc.weight"]
    else:
        _, pooled, act, a1 = kind
        grads["head.fc2.weight"] = g.T @ a1
        grads["head.fc2.bias"] = g.sum(axis=0)
        gz = (g @ hd["head.fc2.weight"]) * act
        grads["head.fc1.weight"] = gz.T @ pooled
        grads["head.fc1.bias"] = gz.sum(axis=0)
        gp = gz @ hd["head.fc1.weight"]

    _, hshape = steps.pop()
    gh = np.broadcast_to(gp[:, :, None, None] / (hshape[2] * hshape[3]), hshape).copy()

    bn = params.config.use_batchnorm
    while len(steps) > 1:
        prefix, h_in, w, cache, act = steps.pop()
        gu = gh * act
        if bn:
            gu, dgamma, dbeta = _bn_backward(gu, cache, tape.train)
            grads[f"{prefix}.bn.weight"] = dgamma
            grads[f"{prefix}.bn.bias"] = dbeta
        dh, dw = conv2d_backward(h_in, w, gu, 1, 1)
        name = f"{prefix}.conv.weight"
        grads[name] = dw * tape.masks[name]
        gh = gh + dh

    _, cache, act = steps.pop()
    gs = gh * act
    if bn:
        gs, dgamma, dbeta = _bn_backward(gs, cache, tape.train)
        grads["stem.bn.weight"] = dgamma
        grads["stem.bn.bias"] = dbeta
    else:
        grads["stem.conv.bias"] = gs.sum(axis=(0, 2, 3))
    _, grads["stem.conv.weight"] = conv2d_backward(
        tape.x, params.backbone["stem.conv.weight"], gs, 1, 1, input_grad=False)
    order = list(params.backbone) + list(params.head)
    return {k: grads[k] for k in order}


def update_running_stats(params: ParamStore, batch_stats: dict,
                         momentum: float = BN_MOMENTUM) -> ParamStore:
    """Fold batch statistics into running buffers (unbiased variance)."""
    if not batch_stats:
        return params
    buffers = dict(params.buffers)
    for prefix, (mu, var, n) in batch_stats.items():
        unbiased = var * n / max(n - 1, 1)
        rm, rv = f"{prefix}.bn.running_mean", f"{prefix}.bn.running_var"
        buffers[rm] = (1 - momentum) * buffers[rm] + momentum * mu
        buffers[rv] = (1 - momentum) * buffers[rv] + momentum * unbiased
    return ParamStore(params.config, params.backbone, params.head, buffers, params.prunable)


def check_layout(params: ParamStore, mask: Mask) -> None:
    layout = params.layout
    if mask.layout_id != layout.layout_id or mask.size != layout.size:
        raise LayoutMismatch(f"mask {mask.layout_id} does not fit model layout {layout.layout_id}")
