"""Parameter and FLOP accounting, plus closed-form cost formulas evaluated from a spec.

FLOP conventions for the measured count (per sample):

* conv / linear: 2 x multiply-accumulates
* batch norm: 2 per element (folded scale and shift)
* residual add, ReLU: 1 per element
* PPCA, per pixel with C channels and D contexts: pooling C per scale,
  normalization 5D + 4, PFC adaption 2D - 1, sigmoid 4, gating C
* SE: squeeze C*H*W, two bias-free FC layers 2 x MACs, sigmoid 4C, rescale C*H*W

The reconciled PPCA figure counts 7 multiplies + 1 gating multiply per pixel
per block (8 * sum N_s H_s W_s) and is reported next to the measured one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import backbone as bb
from .ppca import PpcaModule

ROLES = ("conv", "bn", "attention", "classifier")


@dataclass
class CostReport:
    total_params: int = 0
    params_by_role: dict = field(default_factory=dict)
    total_flops: int = 0
    attention_flops: int = 0
    per_stage: list = field(default_factory=list)
    formulas: dict = field(default_factory=dict)

    @property
    def attention_params(self) -> int:
        return self.params_by_role.get("attention", 0)

    def rows(self) -> list[dict]:
        out = [{"item": "total params", "value": self.total_params}]
        out += [{"item": f"{r} params", "value": self.params_by_role.get(r, 0)} for r in ROLES]
        out += [{"item": "total flops", "value": self.total_flops},
                {"item": "attention flops", "value": self.attention_flops}]
        for i, st in enumerate(self.per_stage):
            out.append({"item": f"stage{i} params", "value": st["params"]})
            out.append({"item": f"stage{i} flops", "value": st["flops"]})
        out += [{"item": f"formula {k}", "value": v} for k, v in self.formulas.items()]
        return out


def count_params(net: bb.Network) -> CostReport:
    by_role = {r: 0 for r in ROLES}
    for _, p, role in net.named_parameters():
        by_role[role] += p.size
    rep = CostReport(total_params=sum(by_role.values()), params_by_role=by_role)
    for s, blocks in enumerate(net.stages):
        n = 0
        for blk in blocks:
            for m in blk.modules().values():
                n += sum(p.size for p in m.parameters().values())
        rep.per_stage.append({"params": n, "flops": 0})
    return rep


# -- formulas ---------------------------------------------------------------

def _stage_sums(spec: bb.NetworkSpec):
    for st in spec.stages:
        if st.height is None or st.width is None:
            raise bb.SpecError("unresolved spatial dims; call backbone.resolve first")
    nhw = sum(st.blocks * st.height * st.width for st in spec.stages)
    nc2 = sum(st.blocks * st.channels ** 2 for st in spec.stages)
    nhw2c = sum(st.blocks * (st.height * st.width) ** 2 * st.channels for st in spec.stages)
    return nhw, nc2, nhw2c


def ppca_params_formula(spec: bb.NetworkSpec, context_dim: int = 7) -> int:
    nhw, _, _ = _stage_sums(spec)
    return context_dim * nhw


def ppca_flops_formula(spec: bb.NetworkSpec) -> int:
    nhw, _, _ = _stage_sums(spec)
    return 8 * nhw


def se_params_formula(spec: bb.NetworkSpec, r: int | None = None) -> float:
    r = r or spec.se_reduction
    _, nc2, _ = _stage_sums(spec)
    return 2 * nc2 / r


def se_flops_formula(spec: bb.NetworkSpec, r: int | None = None) -> float:
    r = r or spec.se_reduction
    _, nc2, _ = _stage_sums(spec)
    return 4 * nc2 / r


def nl_params_formula(spec: bb.NetworkSpec, r: int | None = None) -> float:
    r = r or spec.se_reduction
    _, nc2, _ = _stage_sums(spec)
    return (2 + r) / r * nc2


def nl_flops_formula(spec: bb.NetworkSpec) -> int:
    _, _, nhw2c = _stage_sums(spec)
    return 4 * nhw2c


def eval_formulas(spec: bb.NetworkSpec) -> dict:
    """Closed-form costs from stage geometry alone (no network is built)."""
    d = spec.ppca.context_dim if spec.ppca is not None else 7
    return {
        "ppca_params": ppca_params_formula(spec, d),
        "ppca_flops": ppca_flops_formula(spec),
        "se_params": se_params_formula(spec),
        "se_flops": se_flops_formula(spec),
        "nl_params": nl_params_formula(spec),
        "nl_flops": nl_flops_formula(spec),
    }


# -- measured flops -----------------------------------------------------------

def conv_flops(cin, cout, k, ho, wo) -> int:
    return 2 * cin * k * k * cout * ho * wo


def ppca_flops(channels: int, h: int, w: int, scales, adaption: str = "PFC") -> int:
    d = sum(scales)
    per_pixel = channels * len(scales) + 5 * d + 4 + 4 + channels
    if adaption == "PFC":
        per_pixel += 2 * d - 1
    elif adaption == "SUM":
        per_pixel += d - 1
    elif adaption == "CONV1x1":
        per_pixel += 2 * d - 1
    else:
        per_pixel += 2 * d * 25 - 1
    return per_pixel * h * w


def se_flops(channels: int, h: int, w: int, r: int) -> int:
    hidden = bb.se_hidden(channels, r)
    return 2 * channels * h * w + 2 * (2 * channels * hidden) + 4 * channels


def count_flops(net: bb.Network, input_shape=None) -> CostReport:
    """Measured per-sample FLOP estimate with the attention share split out."""
    spec = net.spec
    c, h, w = input_shape or spec.input_shape
    if (c, h, w) != spec.input_shape:
        stages = tuple(replace(st, height=None, width=None) for st in spec.stages)
        spec = bb.resolve(replace(spec, input_shape=(c, h, w), stages=stages))
    rep = count_params(net)
    k = spec.stem_kernel
    h = (h + 2 * (k // 2) - k) // spec.stem_stride + 1
    w = (w + 2 * (k // 2) - k) // spec.stem_stride + 1
    cw = spec.stem_width
    total = conv_flops(c, cw, k, h, w) + 3 * cw * h * w
    if spec.stem_pool:
        h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        total += 8 * cw * h * w
    attn = 0
    cin = cw
    for s, st in enumerate(spec.stages):
        stage_flops = 0
        for b in range(st.blocks):
            stride = st.stride if b == 0 else 1
            ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
            f = conv_flops(cin, st.channels, 3, ho, wo) + conv_flops(st.channels, st.channels, 3, ho, wo)
            f += 2 * 2 * st.channels * ho * wo + st.channels * ho * wo  # two BNs, inner ReLU
            if stride != 1 or cin != st.channels:
                f += conv_flops(cin, st.channels, 1, ho, wo) + 2 * st.channels * ho * wo
            f += 2 * st.channels * ho * wo  # skip add, outer ReLU
            if spec.attention == "PPCA":
                a = ppca_flops(st.channels, ho, wo, spec.ppca.scales, spec.ppca.adaption_kind)
            elif spec.attention == "SE":
                a = se_flops(st.channels, ho, wo, spec.se_reduction)
            else:
                a = 0
            attn += a
            stage_flops += f + a
            h, w, cin = ho, wo, st.channels
        rep.per_stage[s]["flops"] = stage_flops
        total += stage_flops
    total += cin * h * w + 2 * cin * spec.num_classes + spec.num_classes
    rep.total_flops = total
    rep.attention_flops = attn
    rep.formulas = eval_formulas(spec)
    return rep


def ppca_module_params(mod: PpcaModule) -> int:
    return sum(p.size for p in mod.parameters().values())
