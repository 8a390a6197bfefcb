import csv

import numpy as np
import pytest

from pyrpix import backbone as bb
from pyrpix import data, export
from pyrpix import tensor as T


@pytest.fixture(scope="module")
def ds():
    return data.synth_generate(data.SynthSpec(n=8, seed=2))


def test_pgm_roundtrip(tmp_path):
    img = np.array([[0.0, 0.5], [1.0, 0.25]])
    lo, hi = export.write_pgm(tmp_path / "a.pgm", img)
    assert (lo, hi) == (0.0, 1.0)
    assert export.read_pgm(tmp_path / "a.pgm").tolist() == [[0, 128], [255, 64]]
    export.write_pgm(tmp_path / "c.pgm", np.full((3, 3), 0.5))
    assert not export.read_pgm(tmp_path / "c.pgm").any()
    assert "max = 0.5" in (tmp_path / "c.pgm.scale.txt").read_text()


def test_untrained_export_is_constant_half(ds, tmp_path):
    net = bb.build(bb.mini_spec(), seed=0)
    notes = export.export_attn(net, ds, [0, 5], tmp_path)
    assert notes == []
    g_files = sorted(tmp_path.glob("sample*_g.pxt"))
    assert len(g_files) == 2 * 6
    for f in g_files:
        np.testing.assert_array_equal(T.load_tensor(f).data, 0.5)
    with open(tmp_path / "sample5_stage2_block1_g.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 49 and {float(r["weight"]) for r in rows} == {0.5}


def test_exported_contexts(ds, tmp_path):
    net = bb.build(bb.mini_spec(), seed=0)
    export.export_attn(net, ds, [1], tmp_path)
    t = T.load_tensor(tmp_path / "sample1_stage1_block0_T.pxt").data
    t_hat = T.load_tensor(tmp_path / "sample1_stage1_block0_That.pxt").data
    assert t.shape == t_hat.shape == (7, 14, 14)
    with open(tmp_path / "sample1_stage1_block0_contexts.csv") as f:
        rows = list(csv.DictReader(f))
    assert max(abs(float(r["That_mean"])) for r in rows) < 1e-10
    with open(tmp_path / "stage0_block0_W.csv") as f:
        assert len(list(csv.DictReader(f))) == 7 * 28 * 28


def test_skip_notice_without_attention(ds, tmp_path):
    notes = export.export_attn(bb.build(bb.mini_spec("SE")), ds, [0], tmp_path)
    assert len(notes) == 3 and all("skipped" in n for n in notes)


def test_bad_index(ds, tmp_path):
    with pytest.raises(IndexError):
        export.export_attn(bb.build(bb.mini_spec()), ds, [99], tmp_path)


def test_lesion_contrast_untrained_is_flat(ds):
    inside, outside = export.lesion_attention_contrast(bb.build(bb.mini_spec()), ds)
    assert inside == outside == 0.5
