"""Heatmaps (plain PPM + SVG) and bar charts for experiment reports."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ShapeError  # noqa: E402

_SVG_META = {"Date": None, "Creator": "knpl"}


def _deterministic_svg(fig, path: Path) -> None:
    with matplotlib.rc_context({"svg.hashsalt": "knpl", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def scale_intensities(matrix) -> tuple[np.ndarray, float, float]:
    """Min-max scale the whole matrix to integers 0..255, rounding half up.

    A constant matrix maps to 0 everywhere.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ShapeError("heatmap needs a non-empty 2-d matrix")
    lo, hi = float(m.min()), float(m.max())
    if hi == lo:
        return np.zeros(m.shape, dtype=np.int64), lo, hi
    px = np.floor((m - lo) / (hi - lo) * 255.0 + 0.5).astype(np.int64)
    return px, lo, hi


def ppm_text(pixels: np.ndarray) -> str:
    """Plain (P3) grayscale pixmap, one image row per text line."""
    h, w = pixels.shape
    lines = ["P3", f"{w} {h}", "255"]
    for row in pixels:
        lines.append(" ".join(f"{v} {v} {v}" for v in row.tolist()))
    return "\n".join(lines) + "\n"


def emit_heatmap(matrix, path, title: str = "") -> dict[str, Path]:
    """Write ``<path>.ppm``, ``<path>.svg`` and ``<path>.scale.txt``.

    Rows are layers and columns are FFN neurons.
    """
    base = Path(path)
    if base.suffix in (".ppm", ".svg"):
        base = base.with_suffix("")
    px, lo, hi = scale_intensities(matrix)
    out = {"ppm": base.with_suffix(".ppm"), "svg": base.with_suffix(".svg"), "sidecar": base.with_suffix(".scale.txt")}
    out["ppm"].write_text(ppm_text(px), encoding="ascii")
    out["sidecar"].write_text(
        f"min={lo!r}\nmax={hi!r}\nrows={px.shape[0]}\ncols={px.shape[1]}\n"
        "pixel=floor((v-min)/(max-min)*255+0.5)\n",
        encoding="ascii",
    )
    fig, ax = plt.subplots(figsize=(8, max(1.5, 0.4 * px.shape[0] + 1)))
    ax.imshow(px, cmap="gray", vmin=0, vmax=255, aspect="auto", interpolation="nearest")
    ax.set_xlabel("neuron")
    ax.set_ylabel("layer")
    if title:
        ax.set_title(title)
    _deterministic_svg(fig, out["svg"])
    return out


def read_ppm(path) -> np.ndarray:
    tokens = Path(path).read_text(encoding="ascii").split()
    if tokens[0] != "P3":
        raise ValueError("not a plain pixmap")
    w, h = int(tokens[1]), int(tokens[2])
    vals = np.array([int(t) for t in tokens[4:]], dtype=np.int64).reshape(h, w, 3)
    return vals[:, :, 0]


def bar_chart(
    groups: Mapping[str, Mapping[str, tuple[float, float]]],
    path,
    title: str = "",
    ylabel: str = "KN score",
) -> Path:
    """Grouped bars: ``groups[group][series] = (mean, half_width)``."""
    path = Path(path)
    names = list(groups)
    series = sorted({s for g in groups.values() for s in g})
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(1, len(series))
    x = np.arange(len(names))
    for k, s in enumerate(series):
        means = [groups[g].get(s, (np.nan, 0.0))[0] for g in names]
        errs = [groups[g].get(s, (np.nan, 0.0))[1] for g in names]
        ax.bar(x + k * width, means, width, yerr=errs, label=s, capsize=3)
    ax.set_xticks(x + width * (len(series) - 1) / 2, names)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if series:
        ax.legend(fontsize="small")
    _deterministic_svg(fig, path)
    return path


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def series_line_chart(xs: Sequence[float], ys: Mapping[str, Sequence[float]], path, xlabel: str, ylabel: str) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name in sorted(ys):
        ax.plot(xs, ys[name], marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize="small")
    _deterministic_svg(fig, path)
    return path
