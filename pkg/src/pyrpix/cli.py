"""Command-line entry point: ``pyrpix <command> [flags]``.

Every flag maps to one ``section.key`` config entry.  Values are resolved as
flag > config file > defaults, with ``PYRPIX_SEED`` consulted for the seed
only when neither flag nor file sets it.  The resolved configuration is
written to ``<out>/run-config.txt`` before any work starts; it is itself a
valid ``--config`` file, so a run can be replayed from it.

Exit codes: 0 success, 1 usage/validation error, 2 internal failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback
from dataclasses import dataclass, replace
from pathlib import Path


from . import backbone as bb
from . import complexity, data, export, gradcheck, trainer
from .losses import LossConfig, LossError
from .metrics import MetricError, to_csv, to_table
from .ppca import PpcaConfig, PpcaError

log = logging.getLogger("pyrpix")

COMMANDS = ("train", "eval", "ablate", "gradcheck", "count", "synth", "export-attn")


class UsageError(Exception):
    pass


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


@dataclass(frozen=True)
class Option:
    key: str
    flag: str
    type: type
    default: object
    help: str

    @property
    def section(self) -> str:
        return self.key.split(".", 1)[0]


OPTIONS = [
    Option("run.seed", "--seed", int, 0, "seed for weights, shuffling and synthesis (env PYRPIX_SEED is the fallback)"),
    Option("run.out", "--out", str, "pyrpix-runs", "output directory; the run config is written here first"),
    Option("data.dir", "--data", str, "", "dataset directory from `synth` (empty: generate synth preset lesion28 in memory)"),
    Option("data.val_fraction", "--val-fraction", float, 0.2, "validation share when the directory has no val split"),
    Option("network.spec", "--spec", str, "mini", "backbone preset: mini or resnet18"),
    Option("network.input", "--input", int, 0, "square input size (0: preset default)"),
    Option("network.in_channels", "--in-channels", int, 0, "input channels (0: from data, else preset default)"),
    Option("network.attention", "--attention", str, "PPCA", "attention kind: PPCA, SE or NONE"),
    Option("network.num_classes", "--num-classes", int, 0, "classes (0: from data, else preset default)"),
    Option("network.attn_position", "--attn-position", str, "pre_add", "attention before (pre_add) or after (post_add) the skip sum"),
    Option("network.se_reduction", "--se-reduction", int, 16, "SE reduction ratio r"),
    Option("ppca.scales", "--scales", str, "1,2,4", "cross-channel pooling scales, comma separated"),
    Option("ppca.norm", "--norm", str, "PN", "context normalization: PN, BN, IN, LN or NONE"),
    Option("ppca.adaption", "--adaption", str, "PFC", "context adaption: PFC, CONV1x1, CONV5x5 or SUM"),
    Option("ppca.init", "--init", str, "ZERO", "adaption weight init: ZERO or ONE"),
    Option("ppca.epsilon", "--epsilon", float, 1e-5, "normalization stabilizer added to the standard deviation"),
    Option("loss.lambda", "--lambda", float, 0.5, "hybrid weight: lambda*CE + (1-lambda)*SCL"),
    Option("loss.tau", "--tau", float, 0.07, "contrastive temperature"),
    Option("loss.include_self", "--include-self", _bool, False, "count each anchor as its own positive"),
    Option("loss.scl_form", "--scl-form", str, "as_typeset", "contrastive form: as_typeset or log_inside"),
    Option("train.epochs", "--epochs", int, 30, "training epochs"),
    Option("train.lr0", "--lr", float, 0.025, "initial learning rate"),
    Option("train.decay_factor", "--decay-factor", float, 5.0, "learning rate divisor per decay step"),
    Option("train.decay_every", "--decay-every", int, 5, "epochs between learning rate decays"),
    Option("train.batch_size", "--batch-size", int, 32, "mini-batch size"),
    Option("train.momentum", "--momentum", float, 0.9, "SGD momentum"),
    Option("train.weight_decay", "--weight-decay", float, 0.0, "L2 weight decay"),
    Option("train.augment_pad", "--augment-pad", int, 0, "pad-and-crop augmentation margin (0: off)"),
    Option("train.paper_schedule", "--paper-schedule", _bool, False, "150 epochs with decay every 25 (overrides epochs/decay_every)"),
    Option("model.checkpoint", "--checkpoint", str, "", "checkpoint directory (contains manifest.txt and network.txt)"),
    Option("eval.split", "--split", str, "val", "dataset split to evaluate or export: train or val"),
    Option("ablate.axes", "--axes", str, "scales,norm,init,adaption,lambda", "ablation axes, comma separated"),
    Option("ablate.cells_per_axis", "--cells-per-axis", int, 0, "cells trained per axis (0: all); the rest are listed as not run"),
    Option("ablate.workers", "--workers", int, 1, "parallel cell workers"),
    Option("gradcheck.module", "--module", str, "tensor", "gradient check target: tensor, ppca, losses or network"),
    Option("gradcheck.trials", "--trials", int, 20, "seeded trials"),
    Option("count.format", "--format", str, "table", "output format: table or csv"),
    Option("synth.preset", "--preset", str, "lesion28", "synthetic preset: lesion28 or lesion28-quadrant"),
    Option("synth.n", "--n", int, 0, "sample count (0: preset default)"),
    Option("synth.contrast", "--contrast", float, -1.0, "lesion contrast (negative: preset default)"),
    Option("export.indices", "--indices", str, "0", "sample indices to export, comma separated"),
]
BY_KEY = {o.key: o for o in OPTIONS}

SECTIONS = {
    "train": ("run", "data", "network", "ppca", "loss", "train"),
    "eval": ("run", "data", "model", "eval"),
    "ablate": ("run", "data", "network", "ppca", "loss", "train", "ablate"),
    "gradcheck": ("run", "gradcheck"),
    "count": ("run", "network", "ppca", "count"),
    "synth": ("run", "data", "synth"),
    "export-attn": ("run", "data", "model", "eval", "export"),
}


def keys_help() -> str:
    lines = ["config keys (file section.key = value; flag in parentheses; default after '='):"]
    for o in OPTIONS:
        lines.append(f"  {o.key} ({o.flag}) = {o.default!r}  {o.help}")
    lines.append("  --config FILE names the config file itself and is not a key")
    return "\n".join(lines)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pyrpix", description="PPCA attention networks at desk scale.",
                epilog=keys_help(), formatter_class=argparse.RawDescriptionHelpFormatter, allow_abbrev=False)
    sub = p.add_subparsers(dest="command", metavar="command", required=True, parser_class=_Parser)
    for cmd in COMMANDS:
        opts = [o for o in OPTIONS if o.section in SECTIONS[cmd]]
        sp = sub.add_parser(cmd, allow_abbrev=False, formatter_class=argparse.RawDescriptionHelpFormatter,
                            epilog="\n".join(f"  {o.key} = {o.default!r}" for o in opts),
                            help=f"{cmd} command")
        sp.add_argument("--config", default=None, help="key = value config file with [section] headers")
        for o in opts:
            sp.add_argument(o.flag, dest=o.key, default=None, metavar=o.type.__name__.lstrip("_").upper(),
                            help=f"{o.help} [{o.key}, default {o.default!r}]")
    return p


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``[section]`` headers prefix the following keys."""
    out, section = {}, ""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        key = f"{section}.{k}" if section and "." not in k else k
        if key not in BY_KEY:
            raise UsageError(f"{path}:{n}: unknown config key {key!r}")
        out[key] = v
    return out


def resolve_config(ns: argparse.Namespace, env=None) -> dict:
    env = os.environ if env is None else env
    file_vals = read_config(ns.config) if ns.config else {}
    cfg = {}
    for o in OPTIONS:
        if o.section not in SECTIONS[ns.command]:
            continue
        raw = getattr(ns, o.key, None)
        if raw is None:
            raw = file_vals.get(o.key)
        if raw is None and o.key == "run.seed" and env.get("PYRPIX_SEED"):
            raw = env["PYRPIX_SEED"]
        try:
            cfg[o.key] = o.default if raw is None else o.type(raw)
        except ValueError as e:
            raise UsageError(f"{o.flag} ({o.key}): {e}") from e
    return cfg


def write_run_config(cfg: dict, command: str, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"# pyrpix {command}, code {trainer.code_version()}"]
    section = None
    for key, v in cfg.items():
        sec, name = key.split(".", 1)
        if sec != section:
            lines.append(f"[{sec}]")
            section = sec
        lines.append(f"{name} = {str(v).lower() if isinstance(v, bool) else v}")
    (out / "run-config.txt").write_text("\n".join(lines) + "\n")


# -- config -> objects ----------------------------------------------------------

def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def ppca_config(cfg) -> PpcaConfig:
    return PpcaConfig(scales=_ints(cfg["ppca.scales"]), norm_kind=cfg["ppca.norm"],
                      adaption_kind=cfg["ppca.adaption"], init_kind=cfg["ppca.init"],
                      epsilon=cfg["ppca.epsilon"])


def network_spec(cfg, num_classes: int = 0, in_channels: int = 0) -> bb.NetworkSpec:
    name = cfg["network.spec"]
    if name not in bb.PRESETS:
        raise UsageError(f"--spec must be one of {sorted(bb.PRESETS)}, got {name!r}")
    attention = cfg["network.attention"]
    kw = dict(attention=attention, ppca=ppca_config(cfg) if attention == "PPCA" else None,
              se_reduction=cfg["network.se_reduction"], attn_position=cfg["network.attn_position"])
    k = cfg["network.num_classes"] or num_classes
    if k:
        kw["num_classes"] = k
    spec = bb.PRESETS[name](**kw)
    c, h, w = spec.input_shape
    c = cfg["network.in_channels"] or in_channels or c
    size = cfg["network.input"]
    shape = (c, size or h, size or w)
    if shape != spec.input_shape:
        stages = tuple(replace(st, height=None, width=None) for st in spec.stages)
        spec = bb.resolve(replace(spec, input_shape=shape, stages=stages))
    return spec


def loss_config(cfg) -> LossConfig:
    return LossConfig(lam=cfg["loss.lambda"], tau=cfg["loss.tau"],
                      include_self_in_positives=cfg["loss.include_self"], scl_form=cfg["loss.scl_form"])


def train_config(cfg) -> trainer.TrainConfig:
    kw = dict(lr0=cfg["train.lr0"], decay_factor=cfg["train.decay_factor"], batch_size=cfg["train.batch_size"],
              momentum=cfg["train.momentum"], weight_decay=cfg["train.weight_decay"], seed=cfg["run.seed"],
              loss=loss_config(cfg), augment_pad=cfg["train.augment_pad"])
    if cfg["train.paper_schedule"]:
        return trainer.TrainConfig.paper_schedule(**kw)
    return trainer.TrainConfig(epochs=cfg["train.epochs"], decay_every=cfg["train.decay_every"], **kw)


def load_splits(cfg) -> tuple[data.Dataset, data.Dataset, str]:
    d = cfg["data.dir"]
    if not d:
        ds = data.synth_generate(replace(data.SYNTH_PRESETS["lesion28"], seed=cfg["run.seed"]))
        tr, va = data.split(ds, cfg["data.val_fraction"], seed=cfg["run.seed"])
        return tr, va, f"synth:lesion28:seed={cfg['run.seed']}"
    path = Path(d)
    if not (path / "train-manifest.txt").exists():
        raise UsageError(f"--data {d}: no train-manifest.txt (create one with `pyrpix synth`)")
    tr = data.load_dataset_dir(path, "train")
    if (path / "val-manifest.txt").exists():
        va = data.load_dataset_dir(path, "val")
    else:
        tr, va = data.split(tr, cfg["data.val_fraction"], seed=cfg["run.seed"])
    return tr, va, str(path.resolve())


def _pick_split(cfg, tr, va) -> data.Dataset:
    split = cfg["eval.split"]
    if split not in ("train", "val"):
        raise UsageError(f"--split must be train or val, got {split!r}")
    return tr if split == "train" else va


def _load_model(cfg) -> bb.Network:
    ckpt = cfg["model.checkpoint"]
    if not ckpt:
        raise UsageError("--checkpoint is required")
    if not (Path(ckpt) / "network.txt").exists():
        raise UsageError(f"--checkpoint {ckpt}: no network.txt")
    return bb.load_network(ckpt)


# -- commands -------------------------------------------------------------------

def cmd_train(cfg, out: Path) -> int:
    tr, va, ref = load_splits(cfg)
    spec = network_spec(cfg, tr.num_classes, tr.images.shape[1])
    tcfg = train_config(cfg)
    net = bb.build(spec, seed=cfg["run.seed"])
    m = trainer.train(net, tr, va, tcfg, out_dir=out, dataset_ref=ref)
    print(to_table([r for r in m.log if r["split"] == "val"]))
    print(f"best val acc {m.best_acc:.2f} at epoch {m.best_epoch}; outputs in {out}")
    return 0


def cmd_eval(cfg, out: Path) -> int:
    net = _load_model(cfg)
    tr, va, _ = load_splits(cfg)
    res = trainer.evaluate_net(net, _pick_split(cfg, tr, va))
    rows = [{"split": cfg["eval.split"], "acc": res.acc, "auc": res.auc, "f1": res.f1}]
    (out / "eval.csv").write_text(to_csv(rows))
    print(to_table(rows))
    return 0


def cmd_ablate(cfg, out: Path) -> int:
    tr, va, _ = load_splits(cfg)
    spec = network_spec(cfg, tr.num_classes, tr.images.shape[1])
    tcfg = train_config(cfg)
    axes = [a.strip() for a in cfg["ablate.axes"].split(",") if a.strip()]
    for a in axes:
        if a not in trainer.AXES:
            raise UsageError(f"--axes: unknown axis {a!r}; choose from {sorted(trainer.AXES)}")
    limit = cfg["ablate.cells_per_axis"]
    cells = trainer.ablation_cells({a: trainer.AXES[a] for a in axes})
    rank = {}
    chosen = []
    for a, v in cells:
        rank[a] = rank.get(a, 0) + 1
        if not limit or rank[a] <= limit:
            chosen.append((a, v))
    done = {(r["axis"], r["config"]): r for r in trainer.ablate(chosen, spec, tcfg, tr, va, cfg["ablate.workers"])}
    rows = []
    for a, v in cells:
        label = trainer.cell_label(a, v)
        rows.append(done.get((a, label)) or {"axis": a, "config": label, "acc": float("nan"),
                                            "auc": float("nan"), "f1": float("nan"), "status": "not run"})
    for a in axes:
        sub = [r for r in rows if r["axis"] == a]
        (out / f"ablation_{a}.csv").write_text(to_csv(sub))
        print(f"[{a}]")
        print(to_table(sub))
        ran = sorted((r for r in sub if r["status"] == "ok"), key=lambda r: -r["acc"])
        if ran:
            print("ordering by acc: " + " > ".join(r["config"] for r in ran))
    return 0


def cmd_gradcheck(cfg, out: Path) -> int:
    module = cfg["gradcheck.module"]
    if module not in gradcheck.MODULES:
        raise UsageError(f"--module must be one of {sorted(gradcheck.MODULES)}, got {module!r}")
    if cfg["gradcheck.trials"] < 1:
        raise UsageError("--trials must be >= 1")
    worst = gradcheck.run(module, cfg["gradcheck.trials"], cfg["run.seed"])
    rows = [{"group": k, "max_rel_error": v, "pass": v < gradcheck.THRESHOLD} for k, v in worst.items()]
    (out / f"gradcheck_{module}.csv").write_text(to_csv(rows))
    print(to_table(rows))
    ok = all(r["pass"] for r in rows)
    print(f"{module}: {'PASS' if ok else 'FAIL'} (threshold {gradcheck.THRESHOLD:g}, {cfg['gradcheck.trials']} trials)")
    return 0 if ok else 1


def cmd_count(cfg, out: Path) -> int:
    spec = network_spec(cfg)
    net = bb.build(spec, seed=cfg["run.seed"])
    rep = complexity.count_flops(net)
    rows = [{"item": "ppca extra params (formula)", "value": rep.formulas["ppca_params"]},
            {"item": "se extra params (formula)", "value": rep.formulas["se_params"]},
            {"item": f"{spec.attention.lower()} attention params (measured)", "value": rep.attention_params}]
    rows += rep.rows()
    (out / "count.csv").write_text(to_csv(rows))
    fmt = cfg["count.format"]
    if fmt not in ("table", "csv"):
        raise UsageError(f"--format must be table or csv, got {fmt!r}")
    print(to_table(rows) if fmt == "table" else to_csv(rows), end="" if fmt == "csv" else "\n")
    return 0


def cmd_synth(cfg, out: Path) -> int:
    preset = cfg["synth.preset"]
    if preset not in data.SYNTH_PRESETS:
        raise UsageError(f"--preset must be one of {sorted(data.SYNTH_PRESETS)}, got {preset!r}")
    spec = replace(data.SYNTH_PRESETS[preset], seed=cfg["run.seed"])
    if cfg["synth.n"]:
        spec = replace(spec, n=cfg["synth.n"])
    if cfg["synth.contrast"] >= 0:
        spec = replace(spec, contrast=cfg["synth.contrast"])
    ds = data.synth_generate(spec)
    tr, va = data.split(ds, cfg["data.val_fraction"], seed=cfg["run.seed"])
    extra = {"preset": preset, "seed": str(spec.seed), "contrast": repr(spec.contrast), "n": str(spec.n)}
    data.save_dataset_dir(replace(tr, split="train"), out, "train", extra)
    data.save_dataset_dir(replace(va, split="val"), out, "val", extra)
    print(f"wrote {len(tr)} train and {len(va)} val samples to {out}")
    return 0


def cmd_export_attn(cfg, out: Path) -> int:
    net = _load_model(cfg)
    tr, va, _ = load_splits(cfg)
    ds = _pick_split(cfg, tr, va)
    try:
        idx = _ints(cfg["export.indices"])
    except ValueError as e:
        raise UsageError(f"--indices: {e}") from e
    for i in idx:
        if not 0 <= i < len(ds):
            raise UsageError(f"--indices: sample {i} outside the {len(ds)}-sample {cfg['eval.split']} split")
    for note in export.export_attn(net, ds, idx, out):
        print(note)
    print(f"exported {len(idx)} samples x {len(net.ppca_sites())} attention sites to {out}")
    return 0


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck,
            "count": cmd_count, "synth": cmd_synth, "export-attn": cmd_export_attn}

CONTRACT_ERRORS = (UsageError, bb.SpecError, PpcaError, LossError, MetricError, data.IdxError,
                   trainer.TrainingDiverged, FileNotFoundError, ValueError, IndexError)


def run(argv=None, env=None) -> int:
    try:
        ns = make_parser().parse_args(argv)
        cfg = resolve_config(ns, env)
        out = Path(cfg["run.out"])
        write_run_config(cfg, ns.command, out)
        return HANDLERS[ns.command](cfg, out)
    except CONTRACT_ERRORS as e:
        print(f"pyrpix: error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


def main():
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
