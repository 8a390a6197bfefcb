"""Attention-map and pixel-context export: PXT1 tensors, 8-bit PGM images, CSV tables."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import Network
from .data import Dataset, lesion_mask, upsample_nearest


def write_pgm(path, img: np.ndarray) -> tuple[float, float]:
    """Binary P5 image with linear min-max scaling to 0..255; returns (min, max).

    A constant map is written as all zeros.
    """
    img = np.asarray(img, dtype=float)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros(img.shape) if hi == lo else (img - lo) / (hi - lo) * 255.0
    px = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + px.tobytes())
    Path(str(path) + ".scale.txt").write_text(f"min = {lo!r}\nmax = {hi!r}\nmapping = linear\n")
    return lo, hi


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def _write_map_csv(path, m: np.ndarray):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["i", "j", "weight"])
        for (i, j), v in np.ndenumerate(m):
            wr.writerow([i, j, repr(float(v))])


def _write_context_csv(path, t: np.ndarray, t_hat: np.ndarray):
    d = t.shape[0]
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["i", "j"] + [f"T{k}" for k in range(d)] + [f"That{k}" for k in range(d)]
                    + ["T_mean", "T_std", "That_mean", "That_std"])
        for i in range(t.shape[1]):
            for j in range(t.shape[2]):
                a, b = t[:, i, j], t_hat[:, i, j]
                row = [i, j] + [repr(float(v)) for v in a] + [repr(float(v)) for v in b]
                row += [repr(float(a.mean())), repr(float(a.std())), repr(float(b.mean())), repr(float(b.std()))]
                wr.writerow(row)


def _write_weights_csv(path, w: np.ndarray):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["index", "weight"] if w.ndim != 3 else ["d", "i", "j", "weight"])
        for idx, v in np.ndenumerate(w):
            wr.writerow(list(idx) + [repr(float(v))] if w.ndim == 3 else ["/".join(map(str, idx)), repr(float(v))])


def export_attn(net: Network, ds: Dataset, indices, out) -> list[str]:
    """Write g maps, raw/normalized contexts and learned weights for the chosen samples.

    Returns human-readable notices (e.g. skipped stages without attention).
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    indices = [int(i) for i in indices]
    for i in indices:
        if not 0 <= i < len(ds):
            raise IndexError(f"sample index {i} outside dataset of {len(ds)}")
    notices = []
    sites = net.ppca_sites()
    for s, blocks in enumerate(net.stages):
        if not any((s, b) in sites for b in range(len(blocks))):
            notices.append(f"stage {s}: no PPCA attention, skipped")
    if not sites:
        return notices
    with T.no_grad():
        _, _, maps = net.forward(ds.images[indices], "eval", trace=True)
    for (s, b), site in sites.items():
        tag = f"stage{s}_block{b}"
        trace = site.last_trace
        w = site.state.weight
        if w is not None:
            _write_weights_csv(out / f"{tag}_W.csv", w.data)
            T.save_tensor(out / f"{tag}_W.pxt", w.data)
        for k, idx in enumerate(indices):
            stem = out / f"sample{idx}_{tag}"
            g = maps[(s, b)].data[k, 0]
            T.save_tensor(f"{stem}_g.pxt", g)
            write_pgm(f"{stem}_g.pgm", g)
            _write_map_csv(f"{stem}_g.csv", g)
            t, t_hat = trace["T"][k], trace["T_hat"][k]
            T.save_tensor(f"{stem}_T.pxt", t)
            T.save_tensor(f"{stem}_That.pxt", t_hat)
            _write_context_csv(f"{stem}_contexts.csv", t, t_hat)
    return notices


def lesion_attention_contrast(net: Network, ds: Dataset, stage: int = -1, block: int = -1,
                              batch_size: int = 64) -> tuple[float, float]:
    """Mean gate inside vs outside the true lesion box, over lesion-bearing samples.

    Gate maps are upsampled (nearest) to the input resolution first.
    """
    if ds.lesions is None:
        raise ValueError("dataset carries no lesion annotations")
    stage = stage % len(net.stages)
    block = block % len(net.stages[stage])
    idx = np.flatnonzero(ds.lesions[:, 2] > 0)
    size = ds.images.shape[-1]
    inside, outside = [], []
    with T.no_grad():
        for start in range(0, len(idx), batch_size):
            chunk = idx[start: start + batch_size]
            _, _, maps = net.forward(ds.images[chunk], "eval")
            g = maps[(stage, block)].data[:, 0]
            for k, i in enumerate(chunk):
                up = upsample_nearest(g[k], size)
                m = lesion_mask(ds.lesions[i], size)
                inside.append(up[m].mean())
                outside.append(up[~m].mean())
    return float(np.mean(inside)), float(np.mean(outside))
