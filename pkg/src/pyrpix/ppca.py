"""Pyramid pixel context adaption: per-pixel gates from multi-scale cross-channel context.

Pipeline on a feature map ``x`` of shape [B, C, H, W]:

    T    = concat(cross_channel_pool(x, s) for s in scales)      [B, D, H, W]
    T_n  = normalize(T)             (PN by default; BN/IN/LN/NONE for ablations)
    Z    = adapt(T_n)               (PFC by default; CONV1x1/CONV5x5/SUM)
    g    = sigmoid(Z)                                             [B, 1, H, W]
    y    = g * x

Inputs of shape [C, H, W] are accepted and treated as a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor

NORM_KINDS = ("PN", "BN", "IN", "LN", "NONE")
ADAPTION_KINDS = ("PFC", "CONV1x1", "CONV5x5", "SUM")
INIT_KINDS = ("ZERO", "ONE")


class PpcaError(ValueError):
    pass


def scales_for_count(k: int) -> tuple[int, ...]:
    """Scale count k -> (1, 2, 4, ..., 2**(k-1)); k=3 is the default pyramid."""
    if k < 1:
        raise PpcaError(f"scale count must be >= 1, got {k}")
    return tuple(2 ** i for i in range(k))


@dataclass(frozen=True)
class PpcaConfig:
    scales: tuple[int, ...] = (1, 2, 4)
    norm_kind: str = "PN"
    adaption_kind: str = "PFC"
    init_kind: str = "ZERO"
    epsilon: float = 1e-5
    bn_momentum: float = 0.9
    height: int | None = None
    width: int | None = None
    channels: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if not self.scales:
            raise PpcaError("scales must be nonempty")
        if self.norm_kind not in NORM_KINDS:
            raise PpcaError(f"norm_kind must be one of {NORM_KINDS}, got {self.norm_kind!r}")
        if self.adaption_kind not in ADAPTION_KINDS:
            raise PpcaError(f"adaption_kind must be one of {ADAPTION_KINDS}, got {self.adaption_kind!r}")
        if self.init_kind not in INIT_KINDS:
            raise PpcaError(f"init_kind must be one of {INIT_KINDS}, got {self.init_kind!r}")
        if not self.epsilon >= 0:
            raise PpcaError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.channels is not None:
            for s in self.scales:
                if not 1 <= s <= self.channels:
                    raise PpcaError(f"scale {s} outside [1, {self.channels}] channels")

    @property
    def context_dim(self) -> int:
        return sum(self.scales)

    def at_site(self, channels: int, height: int, width: int) -> "PpcaConfig":
        return replace(self, channels=channels, height=height, width=width)


@dataclass
class PpcaState:
    """Learnable adaption weights plus BN-variant running statistics."""

    weight: Tensor | None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def weight_shape(cfg: PpcaConfig) -> tuple | None:
    d = cfg.context_dim
    if cfg.adaption_kind == "PFC":
        if cfg.height is None or cfg.width is None:
            raise PpcaError("PFC adaption needs the spatial size (height, width)")
        return (d, cfg.height, cfg.width)
    if cfg.adaption_kind == "CONV1x1":
        return (1, d, 1, 1)
    if cfg.adaption_kind == "CONV5x5":
        return (1, d, 5, 5)
    return None


def init_state(cfg: PpcaConfig) -> PpcaState:
    shape = weight_shape(cfg)
    if shape is None:
        return PpcaState(weight=None)
    fill = 0.0 if cfg.init_kind == "ZERO" else 1.0
    return PpcaState(weight=Tensor(np.full(shape, fill), requires_grad=True, name="ppca.W"))


def group_sizes(channels: int, s: int) -> list[int]:
    """Contiguous partition of ``channels`` into ``s`` groups; the first C mod s get one extra."""
    if not 1 <= s <= channels:
        raise PpcaError(f"group count {s} must lie in [1, {channels}]")
    base, extra = divmod(channels, s)
    return [base + (1 if g < extra else 0) for g in range(s)]


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    x = T.as_tensor(x)
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise T.ShapeError(f"expected [C,H,W] or [B,C,H,W], got {x.shape}")
    return x, False


def _unbatch(t: Tensor, was_unbatched: bool) -> Tensor:
    return T.reshape(t, t.shape[1:]) if was_unbatched else t


def cross_channel_pool(x, s: int) -> Tensor:
    """Mean over each of ``s`` contiguous channel groups, per pixel."""
    xb, ub = _batched(x)
    B, C, H, W = xb.shape
    sizes = group_sizes(C, s)
    if C % s == 0:
        out = T.reshape(xb, (B, s, C // s, H, W)).mean(axis=2)
    else:
        parts, start = [], 0
        for n in sizes:
            parts.append(xb[:, start: start + n].mean(axis=1, keepdims=True))
            start += n
        out = T.concat(parts, axis=1)
    return _unbatch(out, ub)


def ccpp(x, scales) -> Tensor:
    """Cross-channel pyramid pooling: concatenated group means, D = sum(scales) maps."""
    scales = tuple(scales)
    if not scales:
        raise PpcaError("scales must be nonempty")
    xb, ub = _batched(x)
    out = T.concat([cross_channel_pool(xb, s) for s in scales], axis=1)
    return _unbatch(out, ub)


def _standardize(t: Tensor, axes, eps: float) -> Tensor:
    mu = t.mean(axis=axes, keepdims=True)
    delta = T.sqrt(t.var(axis=axes, keepdims=True)) + eps
    return (t - mu) / delta


def pixel_normalize(t, eps: float = 1e-5) -> Tensor:
    """Standardize the D context values at every pixel: (t - mu) / (sqrt(var) + eps)."""
    tb, ub = _batched(t)
    return _unbatch(_standardize(tb, 1, eps), ub)


def alt_normalize(t, kind: str, state: PpcaState | None = None, eps: float = 1e-5,
                  training: bool = True, momentum: float = 0.9) -> Tensor:
    """Ablation normalizers over [B, D, H, W] context maps.

    BN uses batch statistics per map while training and updates ``state``'s
    running statistics; in eval mode it reads them back.
    """
    tb, ub = _batched(t)
    if kind == "NONE":
        out = tb
    elif kind == "PN":
        out = _standardize(tb, 1, eps)
    elif kind == "IN":
        out = _standardize(tb, (2, 3), eps)
    elif kind == "LN":
        out = _standardize(tb, (1, 2, 3), eps)
    elif kind == "BN":
        if state is None:
            raise PpcaError("BN normalization needs a PpcaState for running statistics")
        if training:
            mu = tb.mean(axis=(0, 2, 3), keepdims=True)
            var = tb.var(axis=(0, 2, 3), keepdims=True)
            if state.running_mean is None:
                state.running_mean, state.running_var = mu.data.copy(), var.data.copy()
            else:
                state.running_mean = momentum * state.running_mean + (1 - momentum) * mu.data
                state.running_var = momentum * state.running_var + (1 - momentum) * var.data
            out = (tb - mu) / (T.sqrt(var) + eps)
        else:
            if state.running_mean is None:
                raise PpcaError("BN normalization in eval mode before any running statistics were accumulated")
            out = (tb - state.running_mean) / (np.sqrt(state.running_var) + eps)
    else:
        raise PpcaError(f"unknown normalization kind {kind!r}")
    return _unbatch(out, ub)


def adapt(t_hat, state: PpcaState, kind: str) -> Tensor:
    """Collapse normalized contexts to one gate per pixel: g = sigmoid(Z)."""
    tb, ub = _batched(t_hat)
    w = state.weight
    if kind == "SUM":
        if w is not None:
            raise PpcaError("SUM adaption carries no weights")
        z = tb.sum(axis=1, keepdims=True)
    elif kind == "PFC":
        if w is None or w.shape != tb.shape[1:]:
            raise PpcaError(f"PFC weight shape {None if w is None else w.shape} does not match contexts {tb.shape[1:]}")
        z = (tb * w).sum(axis=1, keepdims=True)
    elif kind in ("CONV1x1", "CONV5x5"):
        k = 1 if kind == "CONV1x1" else 5
        if w is None or w.shape != (1, tb.shape[1], k, k):
            raise PpcaError(f"{kind} weight shape {None if w is None else w.shape} does not match D={tb.shape[1]}")
        z = T.conv2d(tb, w, stride=1, padding=k // 2)
    else:
        raise PpcaError(f"unknown adaption kind {kind!r}")
    return _unbatch(T.sigmoid(z), ub)


def ppca_forward(x, cfg: PpcaConfig, state: PpcaState, training: bool = True,
                 trace: dict | None = None) -> tuple[Tensor, Tensor]:
    """Recalibrate ``x`` by its pixel attention map; returns (y, g).

    When ``trace`` is a dict it receives the raw contexts ``T`` and the
    normalized contexts ``T_hat`` (detached arrays) for export.
    """
    xb, ub = _batched(x)
    _, C, H, W = xb.shape
    if cfg.height is not None and (H, W) != (cfg.height, cfg.width):
        raise T.ShapeError(f"PPCA configured for {cfg.height}x{cfg.width}, got {H}x{W}")
    if cfg.channels is not None and C != cfg.channels:
        raise T.ShapeError(f"PPCA configured for {cfg.channels} channels, got {C}")
    t = ccpp(xb, cfg.scales)
    t_hat = alt_normalize(t, cfg.norm_kind, state, cfg.epsilon, training, cfg.bn_momentum)
    g = adapt(t_hat, state, cfg.adaption_kind)
    y = g * xb
    if trace is not None:
        trace["T"] = t.data
        trace["T_hat"] = t_hat.data
    return _unbatch(y, ub), _unbatch(g, ub)


class PpcaModule:
    """Stateful wrapper holding a site's config and learnable weights."""

    def __init__(self, cfg: PpcaConfig):
        self.cfg = cfg
        self.state = init_state(cfg)
        self.last_trace: dict = {}

    def parameters(self) -> dict[str, Tensor]:
        return {} if self.state.weight is None else {"W": self.state.weight}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        if self.state.running_mean is not None:
            out["running_mean"] = self.state.running_mean
            out["running_var"] = self.state.running_var
        return out

    def load_buffers(self, bufs: dict[str, np.ndarray]):
        if "running_mean" in bufs:
            self.state.running_mean = bufs["running_mean"]
            self.state.running_var = bufs["running_var"]

    def __call__(self, x, training: bool = True, trace: bool = False):
        rec = {} if trace else None
        y, g = ppca_forward(x, self.cfg, self.state, training, rec)
        if trace:
            self.last_trace = rec
        return y, g
