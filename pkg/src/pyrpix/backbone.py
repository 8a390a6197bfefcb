"""Residual backbone with pluggable attention (PPCA, SE or none)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .ppca import PpcaConfig, PpcaModule
from .tensor import Tensor

ATTENTION_KINDS = ("PPCA", "SE", "NONE")
ATTN_POSITIONS = ("pre_add", "post_add")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    channels: int
    stride: int = 1
    height: int | None = None
    width: int | None = None

    def __post_init__(self):
        for name in ("blocks", "channels", "stride"):
            if getattr(self, name) < 1:
                raise SpecError(f"stage {name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class NetworkSpec:
    stages: tuple[StageSpec, ...]
    input_shape: tuple[int, int, int] = (1, 28, 28)
    stem_kernel: int = 3
    stem_stride: int = 1
    stem_pool: bool = False
    stem_channels: int | None = None
    attention: str = "PPCA"
    num_classes: int = 2
    ppca: PpcaConfig | None = None
    se_reduction: int = 16
    attn_position: str = "pre_add"

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if self.attention not in ATTENTION_KINDS:
            raise SpecError(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        if self.attn_position not in ATTN_POSITIONS:
            raise SpecError(f"attn_position must be one of {ATTN_POSITIONS}, got {self.attn_position!r}")
        if not self.stages:
            raise SpecError("at least one stage is required")
        if self.stem_kernel % 2 == 0:
            raise SpecError(f"stem kernel must be odd, got {self.stem_kernel}")
        if self.num_classes < 2:
            raise SpecError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.attention == "PPCA" and self.ppca is None:
            object.__setattr__(self, "ppca", PpcaConfig())
        if self.attention != "PPCA" and self.ppca is not None:
            object.__setattr__(self, "ppca", None)

    @property
    def stem_width(self) -> int:
        return self.stem_channels or self.stages[0].channels


def _floor_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def resolve(spec: NetworkSpec) -> NetworkSpec:
    """Fill in every stage's (height, width) from the input size and strides.

    Extents follow floor arithmetic.  Stages that already state their size
    must agree with it.
    """
    _, h, w = spec.input_shape
    k = spec.stem_kernel
    h, w = _floor_extent(h, k, spec.stem_stride, k // 2), _floor_extent(w, k, spec.stem_stride, k // 2)
    if spec.stem_pool:
        h, w = _floor_extent(h, 3, 2, 1), _floor_extent(w, 3, 2, 1)
    stages = []
    for i, st in enumerate(spec.stages):
        h, w = _floor_extent(h, 3, st.stride, 1), _floor_extent(w, 3, st.stride, 1)
        if h < 1 or w < 1:
            raise SpecError(f"stage {i} collapses to {h}x{w}")
        if st.height is not None and (st.height, st.width) != (h, w):
            raise SpecError(
                f"inconsistent spatial arithmetic at stage {i}: declared {st.height}x{st.width}, derived {h}x{w}")
        stages.append(replace(st, height=h, width=w))
    return replace(spec, stages=tuple(stages))


def mini_spec(attention: str = "PPCA", num_classes: int = 2, ppca: PpcaConfig | None = None,
              **kw) -> NetworkSpec:
    """Desk-scale network for 28x28x1 inputs: stages N=[2,2,2], C=[16,32,64]."""
    stages = (StageSpec(2, 16, 1), StageSpec(2, 32, 2), StageSpec(2, 64, 2))
    return resolve(NetworkSpec(stages=stages, input_shape=(1, 28, 28), attention=attention,
                               num_classes=num_classes, ppca=ppca, **kw))


def resnet18_spec(input_size: int = 224, attention: str = "PPCA", num_classes: int = 4,
                  in_channels: int = 3, **kw) -> NetworkSpec:
    """ResNet18 shape: 7x7/2 stem, 3x3/2 max pool, basic blocks N=[2,2,2,2], C=[64,128,256,512]."""
    stages = (StageSpec(2, 64, 1), StageSpec(2, 128, 2), StageSpec(2, 256, 2), StageSpec(2, 512, 2))
    return resolve(NetworkSpec(stages=stages, input_shape=(in_channels, input_size, input_size),
                               stem_kernel=7, stem_stride=2, stem_pool=True, attention=attention,
                               num_classes=num_classes, **kw))


PRESETS = {"mini": mini_spec, "resnet18": resnet18_spec}


# -- layers ---------------------------------------------------------------

class Conv2d:
    def __init__(self, cin, cout, k, stride=1, rng=None, bias=False):
        rng = rng or np.random.default_rng(0)
        bound = math.sqrt(6.0 / (cin * k * k))
        self.weight = Tensor(rng.uniform(-bound, bound, size=(cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.stride, self.padding = stride, k // 2

    def parameters(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.stride, self.padding, bias=self.bias, allow_floor=True)


class BatchNorm2d:
    def __init__(self, c, momentum=0.9, eps=1e-5):
        self.gamma = Tensor(np.ones((1, c, 1, 1)), requires_grad=True)
        self.beta = Tensor(np.zeros((1, c, 1, 1)), requires_grad=True)
        self.running_mean = np.zeros((1, c, 1, 1))
        self.running_var = np.ones((1, c, 1, 1))
        self.momentum, self.eps = momentum, eps

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_buffers(self, bufs):
        self.running_mean, self.running_var = bufs["running_mean"], bufs["running_var"]

    def __call__(self, x, training=True):
        if training:
            out, mu, var = T.batch_norm(x, self.gamma, self.beta, (0, 2, 3), self.eps)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mu
            self.running_var = m * self.running_var + (1 - m) * var
            return out
        else:
            xn = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return xn * self.gamma + self.beta


class Linear:
    def __init__(self, fin, fout, rng=None, bias=True, zero=False):
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / math.sqrt(fin)
        w = np.zeros((fin, fout)) if zero else rng.uniform(-bound, bound, size=(fin, fout))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(fout), requires_grad=True) if bias else None

    def parameters(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def __call__(self, x):
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


def se_hidden(channels: int, r: int) -> int:
    return max(1, math.ceil(channels / r))


def se_block(x, fc1: Tensor, fc2: Tensor) -> Tensor:
    """Squeeze (GAP) -> FC -> ReLU -> FC -> sigmoid -> channel rescale of [B, C, H, W]."""
    B, C = x.shape[:2]
    s = x.mean(axis=(2, 3))
    gate = T.sigmoid(T.relu(s @ fc1) @ fc2)
    return x * T.reshape(gate, (B, C, 1, 1))


class SEBlock:
    """Bias-free SE gate: 2*C*ceil(C/r) parameters."""

    def __init__(self, channels, r=16, rng=None, zero=False):
        hidden = se_hidden(channels, r)
        self.fc1 = Linear(channels, hidden, rng, bias=False, zero=zero)
        self.fc2 = Linear(hidden, channels, rng, bias=False, zero=zero)

    def parameters(self):
        return {"fc1": self.fc1.weight, "fc2": self.fc2.weight}

    def __call__(self, x):
        return se_block(x, self.fc1.weight, self.fc2.weight)


class ResidualBlock:
    """Basic residual block; attention acts on the branch before (or after) the skip sum."""

    def __init__(self, cin, cout, stride, height, width, spec: NetworkSpec, rng):
        self.conv1 = Conv2d(cin, cout, 3, stride, rng)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, 1, rng)
        self.bn2 = BatchNorm2d(cout)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, stride, rng)
            self.proj_bn = BatchNorm2d(cout)
        self.position = spec.attn_position
        self.attention = None
        if spec.attention == "PPCA":
            self.attention = PpcaModule(spec.ppca.at_site(cout, height, width))
        elif spec.attention == "SE":
            self.attention = SEBlock(cout, spec.se_reduction, rng)

    def modules(self):
        out = {"conv1": self.conv1, "bn1": self.bn1, "conv2": self.conv2, "bn2": self.bn2}
        if self.proj is not None:
            out["proj"] = self.proj
            out["proj_bn"] = self.proj_bn
        if self.attention is not None:
            out["attn"] = self.attention
        return out

    def _attend(self, h, training, trace):
        if isinstance(self.attention, PpcaModule):
            return self.attention(h, training, trace)
        return self.attention(h), None

    def __call__(self, x, training=True, trace=False):
        h = T.relu(self.bn1(self.conv1(x), training))
        h = self.bn2(self.conv2(h), training)
        skip = x if self.proj is None else self.proj_bn(self.proj(x), training)
        g = None
        if self.attention is not None and self.position == "pre_add":
            h, g = self._attend(h, training, trace)
        out = h + skip
        if self.attention is not None and self.position == "post_add":
            out, g = self._attend(out, training, trace)
        return T.relu(out), g


ROLE_BY_MODULE = {Conv2d: "conv", BatchNorm2d: "bn", Linear: "classifier", SEBlock: "attention",
                  PpcaModule: "attention"}


class Network:
    def __init__(self, spec: NetworkSpec, seed: int = 0):
        spec = resolve(spec)
        self.spec = spec
        rng = np.random.default_rng(seed)
        cin = spec.input_shape[0]
        self.stem = Conv2d(cin, spec.stem_width, spec.stem_kernel, spec.stem_stride, rng)
        self.stem_bn = BatchNorm2d(spec.stem_width)
        self.stages: list[list[ResidualBlock]] = []
        c = spec.stem_width
        for st in spec.stages:
            blocks = []
            for b in range(st.blocks):
                stride = st.stride if b == 0 else 1
                blocks.append(ResidualBlock(c, st.channels, stride, st.height, st.width, spec, rng))
                c = st.channels
            self.stages.append(blocks)
        self.fc = Linear(c, spec.num_classes, rng)
        self.feature_dim = c
        self.attn_maps: dict[tuple[int, int], Tensor] = {}

    def modules(self) -> dict:
        out = {"stem": self.stem, "stem_bn": self.stem_bn}
        for s, blocks in enumerate(self.stages):
            for b, blk in enumerate(blocks):
                for name, m in blk.modules().items():
                    out[f"stage{s}.block{b}.{name}"] = m
        out["fc"] = self.fc
        return out

    def named_parameters(self) -> list[tuple[str, Tensor, str]]:
        """(name, tensor, role) for every learnable tensor, role in {conv, bn, attention, classifier}."""
        out = []
        for mname, m in self.modules().items():
            role = ROLE_BY_MODULE[type(m)]
            for pname, p in m.parameters().items():
                out.append((f"{mname}.{pname}", p, role))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p, _ in self.named_parameters()]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for mname, m in self.modules().items():
            if hasattr(m, "buffers"):
                for bname, arr in m.buffers().items():
                    out[f"{mname}.{bname}"] = arr
        return out

    def load_buffers(self, bufs: dict[str, np.ndarray]):
        for mname, m in self.modules().items():
            if hasattr(m, "load_buffers"):
                mine = {k[len(mname) + 1:]: v for k, v in bufs.items() if k.startswith(mname + ".")}
                if mine:
                    m.load_buffers(mine)

    def ppca_sites(self) -> dict[tuple[int, int], PpcaModule]:
        return {(s, b): blk.attention for s, blocks in enumerate(self.stages)
                for b, blk in enumerate(blocks) if isinstance(blk.attention, PpcaModule)}

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def forward(self, batch, mode: str = "train", trace: bool = False):
        """Returns (logits [B, K], features [B, C_last], attention maps keyed by (stage, block))."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        training = mode == "train"
        x = T.as_tensor(batch)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise T.ShapeError(f"expected batch [B, {', '.join(map(str, self.spec.input_shape))}], got {x.shape}")
        h = T.relu(self.stem_bn(self.stem(x), training))
        if self.spec.stem_pool:
            h = T.maxpool2d(h, 3, 2, 1)
        maps = {}
        for s, blocks in enumerate(self.stages):
            for b, blk in enumerate(blocks):
                h, g = blk(h, training, trace)
                if g is not None:
                    maps[(s, b)] = g
        features = h.mean(axis=(2, 3))
        logits = self.fc(features)
        self.attn_maps = maps
        return logits, features, maps

    __call__ = forward


def build(spec: NetworkSpec, seed: int = 0) -> Network:
    return Network(spec, seed)


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(net: Network, directory) -> Path:
    """Write every parameter and buffer as a PXT1 file plus a ``manifest.txt`` index."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    entries = [(n, p.data, role) for n, p, role in net.named_parameters()]
    entries += [(n, arr, "buffer") for n, arr in net.buffers().items()]
    for name, arr, role in entries:
        fname = name.replace(".", "_") + ".pxt"
        T.save_tensor(d / fname, arr)
        shape = "x".join(map(str, arr.shape))
        lines.append(f"{name} = {fname} {shape} {role}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")
    (d / "network.txt").write_text("".join(f"{k} = {v}\n" for k, v in spec_to_kv(net.spec).items()))
    return d


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(t) for t in v.split(",") if t.strip())


def spec_to_kv(spec: NetworkSpec) -> dict[str, str]:
    """Flat text form of a spec; stages are ``blocks x channels / stride`` joined by ``;``."""
    kv = {
        "stages": ";".join(f"{st.blocks}x{st.channels}/{st.stride}" for st in spec.stages),
        "input_shape": ",".join(map(str, spec.input_shape)),
        "stem_kernel": str(spec.stem_kernel),
        "stem_stride": str(spec.stem_stride),
        "stem_pool": str(spec.stem_pool).lower(),
        "stem_channels": str(spec.stem_channels or ""),
        "attention": spec.attention,
        "num_classes": str(spec.num_classes),
        "se_reduction": str(spec.se_reduction),
        "attn_position": spec.attn_position,
    }
    if spec.ppca is not None:
        p = spec.ppca
        kv.update({"ppca.scales": ",".join(map(str, p.scales)), "ppca.norm_kind": p.norm_kind,
                   "ppca.adaption_kind": p.adaption_kind, "ppca.init_kind": p.init_kind,
                   "ppca.epsilon": repr(p.epsilon), "ppca.bn_momentum": repr(p.bn_momentum)})
    return kv


def parse_stages(text: str) -> tuple[StageSpec, ...]:
    """``"2x16/1;2x32/2"`` -> stage specs (stride defaults to 1)."""
    out = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        try:
            bc, _, stride = part.partition("/")
            blocks, channels = bc.split("x")
            out.append(StageSpec(int(blocks), int(channels), int(stride or 1)))
        except ValueError as e:
            raise SpecError(f"bad stage {part!r}; expected BLOCKSxCHANNELS/STRIDE") from e
    return tuple(out)


def spec_from_kv(kv: dict[str, str]) -> NetworkSpec:
    ppca = None
    if kv.get("attention", "PPCA") == "PPCA":
        ppca = PpcaConfig(scales=_ints(kv.get("ppca.scales", "1,2,4")),
                          norm_kind=kv.get("ppca.norm_kind", "PN"),
                          adaption_kind=kv.get("ppca.adaption_kind", "PFC"),
                          init_kind=kv.get("ppca.init_kind", "ZERO"),
                          epsilon=float(kv.get("ppca.epsilon", 1e-5)),
                          bn_momentum=float(kv.get("ppca.bn_momentum", 0.9)))
    return resolve(NetworkSpec(
        stages=parse_stages(kv["stages"]), input_shape=_ints(kv.get("input_shape", "1,28,28")),
        stem_kernel=int(kv.get("stem_kernel", 3)), stem_stride=int(kv.get("stem_stride", 1)),
        stem_pool=kv.get("stem_pool", "false").lower() == "true",
        stem_channels=int(kv["stem_channels"]) if kv.get("stem_channels") else None,
        attention=kv.get("attention", "PPCA"), num_classes=int(kv.get("num_classes", 2)),
        ppca=ppca, se_reduction=int(kv.get("se_reduction", 16)),
        attn_position=kv.get("attn_position", "pre_add")))


def read_checkpoint_manifest(directory) -> list[tuple[str, str, tuple, str]]:
    out = []
    for line in (Path(directory) / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        name, rest = (s.strip() for s in line.split("=", 1))
        fname, shape, role = rest.split()
        dims = tuple(int(v) for v in shape.split("x")) if shape else ()
        out.append((name, fname, dims, role))
    return out


def load_checkpoint(net: Network, directory) -> Network:
    d = Path(directory)
    params = {n: p for n, p, _ in net.named_parameters()}
    bufs = {}
    for name, fname, shape, role in read_checkpoint_manifest(d):
        arr = T.load_tensor(d / fname).data
        if arr.shape != shape:
            raise ValueError(f"checkpoint entry {name}: file shape {arr.shape} != manifest {shape}")
        if role == "buffer":
            bufs[name] = arr
        else:
            if name not in params:
                raise KeyError(f"checkpoint parameter {name} not present in network")
            if params[name].shape != arr.shape:
                raise ValueError(f"checkpoint parameter {name}: shape {arr.shape} != network {params[name].shape}")
            params[name].data = arr.copy()
    net.load_buffers(bufs)
    return net


def load_network(directory) -> Network:
    """Rebuild the network described by ``network.txt`` and load its weights."""
    d = Path(directory)
    kv = {}
    for line in (d / "network.txt").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
    return load_checkpoint(build(spec_from_kv(kv)), d)
