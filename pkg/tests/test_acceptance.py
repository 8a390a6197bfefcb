"""End-to-end acceptance checks, one test per criterion.

Each test records its key numbers as user properties; the conftest hook prints
one pass/fail line per criterion at the end of the run.
"""
import csv
import re
import time
from dataclasses import replace

import numpy as np
import pytest

from pyrpix import backbone as bb
from pyrpix import cli, data, export, gradcheck, trainer
from pyrpix import complexity as cx
from pyrpix import metrics as M
from pyrpix import ppca as pp
from pyrpix import tensor as T
from pyrpix.losses import LossConfig, cross_entropy, hybrid_loss, scl
from pyrpix.tensor import Tensor

from test_losses import paired_labels, scl_loop
from test_metrics import P20, Y20, auc_pairs


def run_cli(capsys, *argv):
    code = cli.run([str(a) for a in argv], env={})
    out = capsys.readouterr()
    return code, out.out, out.err


def read_rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def small_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert cli.run(["synth", "--n", "60", "--seed", "3", "--out", str(d)], env={}) == 0
    return d


# 1 -------------------------------------------------------------------------------

def test_criterion_01_gradient_fidelity(record_property):
    t0 = time.perf_counter()
    worst = {}
    for module in ("tensor", "ppca", "losses", "network"):
        errs = gradcheck.run(module, trials=20, seed=0)
        worst[module] = max(errs.values())
        record_property(module, f"{worst[module]:.2e}")
    elapsed = time.perf_counter() - t0
    record_property("seconds", f"{elapsed:.1f}")
    assert gradcheck.H == 1e-5 and gradcheck.THRESHOLD == 1e-4
    assert all(v < 1e-4 for v in worst.values()), worst
    assert elapsed < 120


# 2 -------------------------------------------------------------------------------

def test_criterion_02_ccpp_pn_oracles(record_property):
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1))
    t = pp.ccpp(x, (1, 2, 4)).data.ravel()
    np.testing.assert_allclose(t, [2.5, 1.5, 3.5, 1, 2, 3, 4], rtol=0, atol=1e-12)
    eps = 1e-5
    t_hat = pp.pixel_normalize(pp.ccpp(x, (1, 2, 4)), eps).data.ravel()
    expect = np.array([0, -1, 1, -1.5, -0.5, 0.5, 1.5]) / (1 + eps)
    np.testing.assert_allclose(t_hat, expect, rtol=0, atol=1e-12)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        c, h, w = rng.integers(4, 20), rng.integers(1, 9), rng.integers(1, 9)
        tt = pp.ccpp(Tensor(rng.normal(scale=rng.uniform(0.1, 50), size=(c, h, w))), (1, 2, 4))
        worst = max(worst, np.abs(pp.pixel_normalize(tt).data.mean(axis=0)).max())
    record_property("max_pixel_mean", f"{worst:.1e}")
    assert worst < 1e-12


# 3 -------------------------------------------------------------------------------

def random_specs(n, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        stages = tuple(bb.StageSpec(int(rng.integers(1, 3)), int(rng.choice([4, 6, 8, 12])),
                                    int(rng.choice([1, 2]))) for _ in range(rng.integers(1, 4)))
        size = int(rng.integers(6, 21))
        yield bb.resolve(bb.NetworkSpec(stages=stages, input_shape=(int(rng.integers(1, 4)), size, size),
                                        stem_pool=bool(rng.integers(0, 2)),
                                        num_classes=int(rng.integers(2, 6))))


def param_delta(spec):
    with_attn = cx.count_params(bb.build(spec)).total_params
    without = cx.count_params(bb.build(replace(spec, attention="NONE"))).total_params
    return with_attn - without


def test_criterion_03_param_delta_audit(record_property):
    for spec in random_specs(50):
        nhw = sum(s.blocks * s.height * s.width for s in spec.stages)
        assert param_delta(spec) == 7 * nhw == cx.ppca_params_formula(spec)
    r18 = bb.resnet18_spec(224)
    delta = param_delta(r18)
    record_property("resnet18_224_delta", delta)
    assert delta == 58310 == cx.ppca_params_formula(r18)


# 4 -------------------------------------------------------------------------------

def test_criterion_04_attention_flops_negligible(record_property):
    spec = bb.mini_spec()
    rep = cx.count_flops(bb.build(spec))
    ratio = rep.attention_flops / rep.total_flops
    record_property("attention_flops", rep.attention_flops)
    record_property("total_flops", rep.total_flops)
    record_property("ratio", f"{ratio:.4%}")
    record_property("formula_ppca_flops", rep.formulas["ppca_flops"])
    assert ratio < 0.01
    nhw = sum(s.blocks * s.height * s.width for s in spec.stages)
    assert rep.formulas["ppca_flops"] == cx.ppca_flops_formula(spec) == 8 * nhw
    items = {r["item"]: r["value"] for r in rep.rows()}
    assert items["formula ppca_flops"] == rep.formulas["ppca_flops"]
    assert items["attention flops"] == rep.attention_flops


# 5 -------------------------------------------------------------------------------

def test_criterion_05_low_resolution_comparison(capsys, tmp_path, record_property):
    def count(*extra):
        code, out, _ = run_cli(capsys, "count", *extra, "--out", tmp_path / "_".join(extra))
        assert code == 0
        return {m.group(1).strip(): float(m.group(2))
                for m in re.finditer(r"^\s*(.+?)\s{2,}(-?[0-9.e+]+)\s*$", out, re.M)}

    r18_28 = count("--spec", "resnet18", "--input", "28")
    r18_224 = count("--spec", "resnet18", "--input", "224", "--attention", "SE")
    ppca28 = r18_28["ppca extra params (formula)"]
    se224 = r18_224["se extra params (formula)"]
    record_property("ppca_28", int(ppca28))
    record_property("se_224", int(se224))
    assert ppca28 == 980 and se224 == 87040
    assert ppca28 < se224
    assert r18_224["se attention params (measured)"] == se224
    # the same relation at the mini widths, whichever way the audited counts fall
    mini_ppca = cx.count_params(bb.build(bb.mini_spec())).attention_params
    mini_se = cx.count_params(bb.build(bb.mini_spec("SE"))).attention_params
    record_property("mini_ppca", mini_ppca)
    record_property("mini_se", mini_se)
    assert (mini_ppca, mini_se) == (14406, 1344)
    assert mini_ppca > mini_se


# 6 -------------------------------------------------------------------------------

def test_criterion_06_scl_oracle(record_property):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        B, K, D = int(rng.integers(2, 9)), int(rng.integers(1, 5)), int(rng.integers(2, 6))
        z = rng.normal(size=(B, D))
        y = paired_labels(rng, B, K)
        tau = float(rng.uniform(0.05, 1.0))
        for include_self in (False, True):
            cfg = LossConfig(tau=tau, include_self_in_positives=include_self)
            got = scl(Tensor(z), y, tau, cfg).item()
            worst = max(worst, abs(got - scl_loop(z, y, tau, include_self)))
    record_property("max_abs_error", f"{worst:.1e}")
    assert worst < 1e-10
    # scaling both the similarities and tau by the same factor leaves the loss unchanged
    z = rng.normal(size=(6, 4))
    y = np.array([0, 0, 1, 1, 2, 2])
    ref = scl(Tensor(z), y, 0.5, LossConfig(tau=0.5, embedding_norm=False)).item()
    for c in (0.1, 3.0, 10.0):
        tau = 0.5 * c * c
        other = scl(Tensor(z * c), y, tau, LossConfig(tau=tau, embedding_norm=False)).item()
        assert abs(other - ref) < 1e-12


# 7 -------------------------------------------------------------------------------

def test_criterion_07_hybrid_endpoints(capsys, small_dir, tmp_path, record_property):
    ds = data.load_dataset_dir(small_dir, "train")
    net = bb.build(bb.mini_spec(), seed=0)
    for lo in range(0, 40, 8):
        x, y = ds.images[lo: lo + 8], ds.labels[lo: lo + 8]
        logits, feats, _ = net.forward(x, "train")
        ce = cross_entropy(logits, y).item()
        assert hybrid_loss(logits, feats, y, LossConfig(lam=1.0))[0].item() == ce
        if len(np.unique(y)) < len(y):
            pure = scl(feats, y, 0.07, LossConfig(), skip_missing=True).item()
            assert hybrid_loss(logits, feats, y, LossConfig(lam=0.0))[0].item() == pure
    code, out, _ = run_cli(capsys, "ablate", "--axes", "lambda", "--epochs", 1, "--batch-size", 16,
                           "--data", small_dir, "--out", tmp_path)
    assert code == 0
    rows = read_rows(tmp_path / "ablation_lambda.csv")
    labels = [r["config"] for r in rows]
    record_property("rows", len(rows))
    assert labels == ["CE (lambda=1)", "SCL (lambda=0)", "HL (lambda=0.9)", "HL (lambda=0.8)",
                      "HL (lambda=0.7)", "HL (lambda=0.6)", "HL (lambda=0.5)"]
    assert all(r["status"] == "ok" and 0 <= float(r["acc"]) <= 100 for r in rows)


# 8 -------------------------------------------------------------------------------

def test_criterion_08_zero_init_identity(tmp_path, monkeypatch, record_property):
    net = bb.build(bb.mini_spec(), seed=0)
    seen = []
    inner = pp.ppca_forward

    def spy(x, *a, **k):
        y, g = inner(x, *a, **k)
        seen.append(np.abs(y.data - 0.5 * T.as_tensor(x).data).max())
        return y, g

    monkeypatch.setattr(pp, "ppca_forward", spy)
    rng = np.random.default_rng(8)
    for x in (rng.uniform(size=(3, 1, 28, 28)), rng.normal(scale=40, size=(2, 1, 28, 28)),
              np.zeros((1, 1, 28, 28))):
        for mode in ("train", "eval"):
            net.forward(x, mode)
    record_property("sites_checked", len(seen))
    record_property("max_deviation", f"{max(seen):.1e}")
    assert len(seen) == 6 * 6 and max(seen) < 1e-12
    ds = data.synth_generate(data.SynthSpec(n=6, seed=8))
    export.export_attn(bb.build(bb.mini_spec(), seed=1), ds, range(6), tmp_path)
    maps = sorted(tmp_path.glob("sample*_g.pxt"))
    assert len(maps) == 36
    for f in maps:
        assert (T.load_tensor(f).data == 0.5).all()


# 9 -------------------------------------------------------------------------------

def test_criterion_09_learning_and_localization(record_property):
    ds = data.synth_generate(data.SynthSpec(n=2000, contrast=0.08, seed=0))
    tr, va = data.split(ds, 0.2, seed=0)
    net = bb.build(bb.mini_spec(), seed=0)
    t0 = time.perf_counter()
    trainer.train(net, tr, va, trainer.TrainConfig(epochs=30))
    elapsed = time.perf_counter() - t0
    acc = trainer.evaluate_net(net, va).acc
    pairs = [export.lesion_attention_contrast(net, va, stage=-1, block=b) for b in range(len(net.stages[-1]))]
    inside = float(np.mean([p[0] for p in pairs]))
    outside = float(np.mean([p[1] for p in pairs]))
    record_property("val_acc", f"{acc:.2f}")
    record_property("inside", f"{inside:.4f}")
    record_property("outside", f"{outside:.4f}")
    record_property("minutes", f"{elapsed / 60:.1f}")
    assert acc >= 90.0
    assert inside > outside
    assert elapsed < 15 * 60


# 10 ------------------------------------------------------------------------------

def test_criterion_10_ablation_grid(capsys, small_dir, tmp_path, record_property):
    code, out, _ = run_cli(capsys, "ablate", "--axes", "scales,norm,init,adaption", "--cells-per-axis", 1,
                           "--epochs", 1, "--batch-size", 16, "--data", small_dir, "--out", tmp_path)
    assert code == 0
    expected = {"scales": [str(k) for k in range(1, 8)], "norm": ["PN", "BN", "IN", "LN", "Original"],
                "init": ["W=0", "W=1"], "adaption": ["PFC", "Conv1x1", "Conv5x5", "Sum"]}
    for axis, labels in expected.items():
        rows = read_rows(tmp_path / f"ablation_{axis}.csv")
        assert [r["config"] for r in rows] == labels
        assert rows[0]["status"] == "ok" and 0 <= float(rows[0]["acc"]) <= 100
        assert all(r["status"] == "not run" for r in rows[1:])
        record_property(axis, f"{labels[0]} acc {float(rows[0]['acc']):.1f}")
    assert out.count("ordering by acc") == 4


# 11 ------------------------------------------------------------------------------

def test_criterion_11_determinism(capsys, small_dir, tmp_path, record_property):
    args = ["train", "--data", small_dir, "--epochs", 2, "--batch-size", 16, "--augment-pad", 2]
    assert run_cli(capsys, *args, "--out", tmp_path / "a")[0] == 0
    # the second run is replayed from the first run's recorded configuration
    assert run_cli(capsys, "train", "--config", tmp_path / "a" / "run-config.txt", "--out", tmp_path / "b")[0] == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    files = sorted(p.name for p in (a / "final").iterdir())
    assert files == sorted(p.name for p in (b / "final").iterdir())
    for name in files:
        assert (a / "final" / name).read_bytes() == (b / "final" / name).read_bytes()
    strip = lambda p: [l for l in p.read_text().splitlines() if not l.startswith("out_dir")]
    assert strip(a / "manifest.txt") == strip(b / "manifest.txt")
    record_property("final_files", len(files))


# 12 ------------------------------------------------------------------------------

def test_criterion_12_metric_oracles(record_property):
    scores = [0.1, 0.4, 0.4, 0.6, 0.2, 0.9, 0.4, 0.1]
    pos = [0, 1, 0, 1, 0, 1, 1, 0]
    assert M.binary_auc(scores, pos) == auc_pairs(scores, pos) == 15 / 16
    rng = np.random.default_rng(12)
    for _ in range(200):
        n = int(rng.integers(2, 15))
        s = rng.integers(0, 4, size=n).astype(float)
        p = rng.integers(0, 2, size=n)
        if 0 < p.sum() < n:
            assert M.binary_auc(s, p) == auc_pairs(s, p)
    assert M.accuracy(P20, Y20) == 60.0
    assert M.confusion(P20, Y20).tolist() == [[5, 1, 1], [2, 4, 1], [1, 2, 3]]
    f1s = [2 * 5 / 15, 2 * 4 / 14, 2 * 3 / 11]
    assert M.f1_macro(P20, Y20) == 100 * sum(f1s) / 3
    record_property("f1", f"{M.f1_macro(P20, Y20):.4f}")
