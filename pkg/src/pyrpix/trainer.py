"""SGD training with a step-decay schedule, run manifests and the ablation driver."""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import tensor as T
from .data import Dataset, batches
from .losses import LossConfig, hybrid_loss
from .metrics import EvalResult, evaluate, to_csv
from .ppca import PpcaConfig, PpcaError, scales_for_count

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "split", "acc", "auc", "f1", "loss", "lr")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.025
    decay_factor: float = 5.0
    decay_every: int = 5
    epochs: int = 30
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    eval_every: int = 1
    augment_pad: int = 0

    def __post_init__(self):
        if not self.lr0 >= 0:
            raise ValueError(f"lr0 must be >= 0, got {self.lr0}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or self.decay_every < 1 or self.eval_every < 1:
            raise ValueError("batch_size, decay_every and eval_every must be >= 1")

    @classmethod
    def paper_schedule(cls, **kw) -> "TrainConfig":
        """150 epochs, lr 0.025 divided by 5 every 25 epochs, batch 32."""
        return cls(epochs=150, decay_every=25, **kw)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 / cfg.decay_factor ** (epoch // cfg.decay_every)


def code_version() -> str:
    """sha256 over this package's source files, in path order."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


@dataclass
class RunManifest:
    config: dict
    dataset: str
    code_version: str
    out_dir: str | None
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_acc: float = float("nan")

    def as_kv(self) -> dict[str, str]:
        flat = {"dataset": self.dataset, "code_version": self.code_version,
                "out_dir": self.out_dir or "", "best_epoch": str(self.best_epoch),
                "best_acc": repr(self.best_acc)}
        for k, v in _flatten(self.config).items():
            flat[f"config.{k}"] = str(v)
        return flat

    def write(self, path):
        Path(path).write_text("".join(f"{k} = {v}\n" for k, v in self.as_kv().items()))


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


class SGD:
    """v <- momentum * v + (grad + wd * p);  p <- p - lr * v."""

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.momentum, self.weight_decay = momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data = p.data - lr * v


def predict(net: bb.Network, ds: Dataset, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits for every sample, in dataset order."""
    out = []
    with T.no_grad():
        for x, _ in batches(ds, batch_size, shuffle=False):
            logits, _, _ = net.forward(x, "eval")
            out.append(logits.data)
    return np.concatenate(out)


def evaluate_net(net: bb.Network, ds: Dataset, batch_size: int = 64) -> EvalResult:
    return evaluate(predict(net, ds, batch_size), ds.labels)


def _snapshot(net: bb.Network):
    return ([p.data.copy() for p in net.parameters()],
            {k: v.copy() for k, v in net.buffers().items()})


def _restore(net: bb.Network, snap):
    params, bufs = snap
    for p, arr in zip(net.parameters(), params):
        p.data = arr.copy()
    net.load_buffers({k: v.copy() for k, v in bufs.items()})


def _param_norms(net: bb.Network) -> str:
    return ", ".join(f"{n}={np.linalg.norm(p.data):.3g}" for n, p, _ in net.named_parameters())


def train(net: bb.Network, ds_train: Dataset, ds_val: Dataset | None, cfg: TrainConfig,
          out_dir=None, dataset_ref: str = "in-memory") -> RunManifest:
    """Run SGD on the hybrid loss; keeps the best-validation-ACC weights in ``net``.

    With ``out_dir`` the manifest is written before training starts, then the
    metric log and the best/final checkpoints.
    """
    manifest = RunManifest(config=asdict(cfg) | {"network": _spec_dict(net.spec)},
                           dataset=dataset_ref, code_version=code_version(),
                           out_dir=None if out_dir is None else str(out_dir))
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest.write(out / "manifest.txt")
    opt = SGD(net.parameters(), cfg.momentum, cfg.weight_decay)
    best = None
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        losses, correct, seen = [], 0, 0
        for b, (x, y) in enumerate(batches(ds_train, cfg.batch_size, True, cfg.seed, epoch, cfg.augment_pad)):
            logits, feats, _ = net.forward(x, "train")
            loss, _ = hybrid_loss(logits, feats, y, cfg.loss)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {b}; "
                                       f"parameter norms: {_param_norms(net)}")
            net.zero_grad()
            loss.backward()
            opt.step(lr)
            if not all(np.isfinite(p.data).all() for p in net.parameters()):
                raise TrainingDiverged(f"non-finite parameters after epoch {epoch}, batch {b} (loss {value}); "
                                       f"parameter norms: {_param_norms(net)}")
            losses.append(value * len(y))
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(y)
        manifest.log.append({"epoch": epoch, "split": "train", "acc": 100.0 * correct / seen,
                             "auc": float("nan"), "f1": float("nan"), "loss": sum(losses) / seen, "lr": lr})
        if ds_val is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            res = evaluate_net(net, ds_val)
            manifest.log.append({"epoch": epoch, "split": "val", "acc": res.acc, "auc": res.auc,
                                 "f1": res.f1, "loss": float("nan"), "lr": lr})
            log.info("epoch %d lr %.3g train loss %.4f val acc %.2f", epoch, lr,
                     manifest.log[-2]["loss"], res.acc)
            # ties go to the later epoch
            if best is None or res.acc >= manifest.best_acc:
                manifest.best_acc, manifest.best_epoch = res.acc, epoch
                best = _snapshot(net)
    if out is not None:
        (out / "metrics.csv").write_text(to_csv(manifest.log))
        bb.save_checkpoint(net, out / "final")
    if best is not None:
        _restore(net, best)
    if out is not None:
        if best is not None:
            bb.save_checkpoint(net, out / "best")
        manifest.write(out / "manifest.txt")
    return manifest


def _spec_dict(spec: bb.NetworkSpec) -> dict:
    d = asdict(spec)
    d["stages"] = ";".join(f"{s['blocks']}x{s['channels']}/{s['stride']}@{s['height']}x{s['width']}"
                           for s in d["stages"])
    if d.get("ppca"):
        d["ppca"] = {k: v for k, v in d["ppca"].items() if k not in ("height", "width", "channels")}
    return d


# -- ablations --------------------------------------------------------------

LAMBDA_ROWS = (1.0, 0.0, 0.9, 0.8, 0.7, 0.6, 0.5)
NORM_LABELS = {"PN": "PN", "BN": "BN", "IN": "IN", "LN": "LN", "NONE": "Original"}
ADAPT_LABELS = {"PFC": "PFC", "CONV1x1": "Conv1x1", "CONV5x5": "Conv5x5", "SUM": "Sum"}

AXES = {
    "scales": (1, 2, 3, 4, 5, 6, 7),
    "norm": ("PN", "BN", "IN", "LN", "NONE"),
    "init": ("ZERO", "ONE"),
    "adaption": ("PFC", "CONV1x1", "CONV5x5", "SUM"),
    "lambda": LAMBDA_ROWS,
}


def cell_label(axis: str, value) -> str:
    if axis == "scales":
        return str(value)
    if axis == "norm":
        return NORM_LABELS[value]
    if axis == "init":
        return "W=0" if value == "ZERO" else "W=1"
    if axis == "adaption":
        return ADAPT_LABELS[value]
    lam = float(value)
    if lam == 1.0:
        return "CE (lambda=1)"
    if lam == 0.0:
        return "SCL (lambda=0)"
    return f"HL (lambda={lam:g})"


def apply_cell(spec: bb.NetworkSpec, cfg: TrainConfig, axis: str, value):
    ppca = spec.ppca or PpcaConfig()
    if axis == "scales":
        ppca = replace(ppca, scales=scales_for_count(int(value)))
    elif axis == "norm":
        ppca = replace(ppca, norm_kind=value)
    elif axis == "init":
        ppca = replace(ppca, init_kind=value)
    elif axis == "adaption":
        ppca = replace(ppca, adaption_kind=value)
    elif axis == "lambda":
        return spec, replace(cfg, loss=replace(cfg.loss, lam=float(value)))
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")
    return replace(spec, attention="PPCA", ppca=ppca), cfg


def ablation_cells(axes: dict | None = None, mask=None) -> list[tuple[str, object]]:
    """One-axis-at-a-time cells; ``mask(axis, value) -> bool`` filters them."""
    axes = axes or AXES
    cells = [(a, v) for a, values in axes.items() for v in values]
    return [c for c in cells if mask is None or mask(*c)]


def _run_cell(spec, cfg, axis, value, ds_train, ds_val):
    row = {"axis": axis, "config": cell_label(axis, value), "acc": float("nan"),
           "auc": float("nan"), "f1": float("nan"), "status": "ok"}
    try:
        cspec, ccfg = apply_cell(spec, cfg, axis, value)
        net = bb.build(cspec, seed=ccfg.seed)
    except (PpcaError, bb.SpecError) as e:
        row["status"] = f"skipped: {e}"
        log.warning("ablation cell %s=%s skipped: %s", axis, value, e)
        return row
    train(net, ds_train, ds_val, ccfg)
    res = evaluate_net(net, ds_val)
    row.update(acc=res.acc, auc=res.auc, f1=res.f1)
    return row


def ablate(cells, spec: bb.NetworkSpec, cfg: TrainConfig, ds_train: Dataset, ds_val: Dataset,
           workers: int = 1, out_dir=None) -> list[dict]:
    """Train and evaluate one seeded network per cell; rows come back in cell order."""
    jobs = [(spec, cfg, a, v, ds_train, ds_val) for a, v in cells]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(lambda j: _run_cell(*j), jobs))
    else:
        rows = [_run_cell(*j) for j in jobs]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for axis in dict.fromkeys(r["axis"] for r in rows):
            sub = [r for r in rows if r["axis"] == axis]
            (out / f"ablation_{axis}.csv").write_text(to_csv(sub))
    return rows
