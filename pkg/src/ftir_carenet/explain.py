"""Grad-CAM heatmaps, per-wavenumber importance and path contributions."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .carenet import DualPathNetwork
from .exceptions import GraphError
from .spectra import Patch, WavenumberAxis


@dataclass
class Heatmap:
    values: np.ndarray
    source_layer: str
    class_index: int


@dataclass
class ChannelImportance:
    scores: np.ndarray
    top_bands: list[tuple[float, float, float]]
    wavenumbers: np.ndarray


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres (edge samples clamp)."""
    img = np.asarray(img, dtype=np.float64)
    in_h, in_w = img.shape

    def weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = weights(in_h, out_h)
    c0, c1, fc = weights(in_w, out_w)
    rows = img[r0] * (1 - fr)[:, None] + img[r1] * fr[:, None]
    return rows[:, c0] * (1 - fc)[None, :] + rows[:, c1] * fc[None, :]


def last_spatial_conv(graph: DualPathNetwork) -> str:
    names = [n for n, l in graph.spatial.named_layers() if l.kind == "conv"]
    if not names:
        raise GraphError("spatial path has no convolution")
    return names[-1]


def grad_cam(graph: DualPathNetwork, patch, class_index: int = 0, layer: str | None = None) -> Heatmap:
    """Grad-CAM of the pre-activation class logit on a spatial-path feature map.

    The map is the rectified output of the named convolution (default: the
    last one in the spatial path); channel weights are the spatially averaged
    gradients of the logit with respect to that map.
    """
    layer = layer or last_spatial_conv(graph)
    seq, conv = graph.layer(layer)
    if seq is not graph.spatial or conv.kind != "conv":
        raise GraphError(f"{layer!r} is not a spatial-path convolution")
    if not 0 <= class_index < graph.schema.output_dim:
        raise GraphError(f"class_index {class_index} outside [0, {graph.schema.output_dim})")
    data = patch.data if isinstance(patch, Patch) else np.asarray(patch)
    names = [n for n, _ in seq.named_layers()]
    nxt = names[names.index(layer) + 1]
    act_name = nxt if seq.layer(nxt).kind == "activation" else layer

    graph.zero_grad()
    logits = graph.forward(data[None].astype(np.float64))
    seed = np.zeros_like(logits)
    seed[0, class_index] = 1.0
    graph.backward(seed)
    fmap = seq.outputs[act_name][0]
    grad = seq.output_grads[act_name][0]
    graph.zero_grad()

    alpha = grad.mean(axis=(0, 1))
    cam = np.maximum(fmap @ alpha, 0.0)
    cam = bilinear_resize(cam, data.shape[0], data.shape[1])
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return Heatmap(values=cam, source_layer=layer, class_index=class_index)


def channel_importance(
    graph: DualPathNetwork,
    axis: WavenumberAxis | None = None,
    top_n: int = 30,
    signed: bool = False,
) -> ChannelImportance:
    """Sum of first spectral-layer kernel weights per input channel.

    Absolute values by default (``signed=True`` sums raw weights). Bands are
    contiguous runs among the ``top_n`` highest-scoring channels with a
    positive score, ranked by summed score.
    """
    name = [n for n, l in graph.spectral.named_layers() if l.kind == "conv"][0]
    kernel = graph.spectral.layer(name).params["kernel"]
    if kernel.shape[:2] != (1, 1):
        raise GraphError(f"{name} is not a 1x1 convolution")
    k = kernel[0, 0]
    scores = k.sum(axis=1) if signed else np.abs(k).sum(axis=1)
    if axis is not None and axis.n_points != scores.shape[0]:
        raise GraphError(f"axis has {axis.n_points} points, network has {scores.shape[0]} input channels")
    return band_importance(scores, axis, top_n)


def band_importance(scores: np.ndarray, axis: WavenumberAxis | None = None, top_n: int = 30) -> ChannelImportance:
    """Group the ``top_n`` highest positive scores into contiguous bands."""
    scores = np.asarray(scores, dtype=np.float64)
    c = scores.shape[0]
    wn = axis.values if axis is not None else np.arange(c, dtype=np.float64)
    if wn.shape[0] != c:
        raise GraphError(f"axis has {wn.shape[0]} points for {c} scores")
    order = np.lexsort((np.arange(c), -scores))
    top = np.sort([i for i in order[:top_n] if scores[i] > 0]).astype(int)
    bands = []
    if top.size:
        runs = np.split(top, np.flatnonzero(np.diff(top) != 1) + 1)
        for run in runs:
            ends = wn[run[0]], wn[run[-1]]
            bands.append((float(max(ends)), float(min(ends)), float(scores[run].sum())))
        bands.sort(key=lambda b: -b[2])
    return ChannelImportance(scores=scores, top_bands=bands, wavenumbers=wn)


def path_contribution(graph: DualPathNetwork, patches, batch_size: int = 32) -> tuple[float, float]:
    """Mean spectral and spatial shares of ``sum |gap_i * W_ij|`` over the
    first fused dense layer. Patches whose pooled features are all zero are
    skipped."""
    data = np.stack([p.data if isinstance(p, Patch) else np.asarray(p) for p in patches])
    w = np.abs(graph.head.layer("fusion_dense").params["kernel"]).sum(axis=1)
    k = graph.n_spectral_gap
    fracs = []
    for i in range(0, data.shape[0], batch_size):
        graph.forward(data[i : i + batch_size].astype(np.float64))
        contrib = np.abs(graph.gap_features) * w
        spec = contrib[:, :k].sum(axis=1)
        total = contrib.sum(axis=1)
        ok = total > 0
        fracs.extend((spec[ok] / total[ok]).tolist())
    if not fracs:
        return float("nan"), float("nan")
    s = float(np.mean(fracs))
    return s, 1.0 - s


# ---------------------------------------------------------------------------
# artifact writers


def write_heatmap(heatmap: Heatmap, png_path: str | Path, csv_path: str | Path | None = None,
                  colormap: str | None = None, scale: int = 8) -> None:
    from PIL import Image

    v = np.clip(heatmap.values, 0.0, 1.0)
    if colormap:
        import matplotlib

        rgba = matplotlib.colormaps[colormap](v)
        img = Image.fromarray((rgba[..., :3] * 255).round().astype(np.uint8), mode="RGB")
    else:
        img = Image.fromarray((v * 255).round().astype(np.uint8), mode="L")
    if scale > 1:
        img = img.resize((v.shape[1] * scale, v.shape[0] * scale), Image.NEAREST)
    img.save(png_path, format="PNG")
    if csv_path is not None:
        np.savetxt(csv_path, heatmap.values, delimiter=",", fmt="%.10g")


def write_channel_importance(ci: ChannelImportance, csv_path: str | Path,
                             bands_path: str | Path | None = None, n_bands: int = 3) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["wavenumber", "score"])
        for wn, s in zip(ci.wavenumbers, ci.scores):
            w.writerow([f"{wn:.4f}", f"{s:.10g}"])
    if bands_path is not None:
        with open(bands_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "band_cm-1", "wavenumber_hi", "wavenumber_lo", "score"])
            for rank, (hi, lo, s) in enumerate(ci.top_bands[:n_bands], start=1):
                w.writerow([rank, f"{hi:.0f}-{lo:.0f}", f"{hi:.4f}", f"{lo:.4f}", f"{s:.10g}"])
