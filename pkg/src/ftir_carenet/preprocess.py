"""Automated micro-FTIR preprocessing.

Segmentation (two K-means passes), biofingerprint truncation, Hotelling
T^2 / Q outlier screening, Savitzky-Golay smoothing, EMSC with de-waxing and
water-vapour removal, min-max scaling and patch extraction.

Functions operate on plain arrays; the estimator classes at the bottom wrap
them in the scikit-learn ``fit``/``transform`` protocol.
"""

from __future__ import annotations

import functools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import (
    ConfigError,
    CorrectionError,
    EMSCModelError,
    NormalizationError,
    SegmentationError,
)
from .spectra import HyperMosaic, Patch, ReferenceLibrary, Spectrum, WavenumberAxis, truncate_axis

logger = logging.getLogger(__name__)

B_FLOOR = 1e-6


@dataclass
class PipelineConfig:
    amide_window: tuple[float, float] = (1700.0, 1500.0)
    paraffin_window: tuple[float, float] = (1480.0, 1450.0)
    biofingerprint: tuple[float, float] = (1800.0, 900.0)
    outlier_pcs: int = 10
    outlier_ci: float = 0.95
    savgol_window: int = 11
    savgol_order: int = 2
    emsc_poly_order: int = 4
    emsc_var_threshold: float = 0.99
    patch_size: int = 32
    patch_zero_fraction: float = 0.5
    kmeans_seed: int = 0
    kmeans_max_iter: int = 100
    kmeans_restarts: int = 5

    def __post_init__(self):
        self.amide_window = tuple(float(v) for v in self.amide_window)
        self.paraffin_window = tuple(float(v) for v in self.paraffin_window)
        self.biofingerprint = tuple(float(v) for v in self.biofingerprint)

    def validate(self) -> "PipelineConfig":
        if self.savgol_window % 2 != 1 or self.savgol_window <= self.savgol_order:
            raise ConfigError(
                f"savgol_window must be odd and > savgol_order, got {self.savgol_window}"
            )
        if self.savgol_order < 0:
            raise ConfigError("savgol_order must be >= 0")
        if not 0.0 < self.patch_zero_fraction <= 1.0:
            raise ConfigError(f"patch_zero_fraction must be in (0, 1], got {self.patch_zero_fraction}")
        if not 0.0 < self.outlier_ci < 1.0:
            raise ConfigError(f"outlier_ci must be in (0, 1), got {self.outlier_ci}")
        if not 0.0 < self.emsc_var_threshold <= 1.0:
            raise ConfigError("emsc_var_threshold must be in (0, 1]")
        for name in ("outlier_pcs", "patch_size", "kmeans_max_iter", "kmeans_restarts"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.emsc_poly_order < 0:
            raise ConfigError("emsc_poly_order must be >= 0")
        for name in ("amide_window", "paraffin_window", "biofingerprint"):
            hi, lo = getattr(self, name)
            if not hi > lo:
                raise ConfigError(f"{name} must be (hi, lo) with hi > lo")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


# ---------------------------------------------------------------------------
# K-means


def _kmeans_pp_init(rows: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = rows.shape[0]
    centres = [rows[rng.integers(n)]]
    d2 = np.sum((rows - centres[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centres.append(rows[idx])
        d2 = np.minimum(d2, np.sum((rows - rows[idx]) ** 2, axis=1))
    return np.array(centres)


def _sq_dists(rows: np.ndarray, centres: np.ndarray) -> np.ndarray:
    d = (
        np.sum(rows**2, axis=1)[:, None]
        - 2.0 * rows @ centres.T
        + np.sum(centres**2, axis=1)[None, :]
    )
    return np.maximum(d, 0.0)


def _lloyd(rows, centres, max_iter):
    k = centres.shape[0]
    labels = np.full(rows.shape[0], -1)
    history = []
    for _ in range(max_iter):
        new = np.argmin(_sq_dists(rows, centres), axis=1)
        for j in range(k):
            if not np.any(new == j):
                # documented fallback: re-seed the empty cluster at the point
                # farthest from its assigned centroid
                far = np.argmax(np.sum((rows - centres[new]) ** 2, axis=1))
                new[far] = j
        history.append(float(np.sum((rows - centres[new]) ** 2)))
        if np.array_equal(new, labels):
            break
        labels = new
        centres = np.array([rows[labels == j].mean(axis=0) for j in range(k)])
    inertia = float(np.sum((rows - centres[labels]) ** 2))
    return labels, centres, inertia, history


def kmeans_cluster(
    rows: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 100,
    restarts: int = 5,
    return_inertia: bool = False,
):
    """Lloyd's K-means with k-means++ seeding, best of ``restarts`` runs.

    Labels are renumbered by first appearance so the result does not depend
    on which seed happened to win.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[:, None]
    n = rows.shape[0]
    if k < 1 or n < k:
        raise ValueError(f"kmeans needs N >= k >= 1, got N={n}, k={k}")
    if not np.all(np.isfinite(rows)):
        raise ValueError("kmeans rows contain non-finite values")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        labels, centres, inertia, _ = _lloyd(rows, _kmeans_pp_init(rows, k, rng), max_iter)
        if best is None or inertia < best[2]:
            best = (labels, centres, inertia)
    labels, centres, inertia = best
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(k, dtype=int)
    remap[order] = np.arange(order.size)
    labels = remap[labels]
    centres = centres[order]
    if return_inertia:
        return labels, centres, inertia
    return labels, centres


# ---------------------------------------------------------------------------
# segmentation


@dataclass
class Segmentation:
    tissue: np.ndarray
    stage1_tissue: np.ndarray
    paraffin: np.ndarray


def _window_block(mosaic: HyperMosaic, window) -> np.ndarray:
    idx = mosaic.axis.window_indices(*window)
    return mosaic.cube[:, :, idx].reshape(-1, idx.size).astype(np.float64)


def _split_by_integral(rows, config, seed_offset):
    labels, _ = kmeans_cluster(
        rows,
        2,
        seed=config.kmeans_seed + seed_offset,
        max_iter=config.kmeans_max_iter,
        restarts=config.kmeans_restarts,
    )
    integral = rows.sum(axis=1)
    means = [integral[labels == j].mean() for j in range(2)]
    return labels == int(np.argmax(means))


def segment_tissue(
    mosaic: HyperMosaic, config: PipelineConfig | None = None, return_stages: bool = False
):
    """Two-stage K-means tissue mask.

    Stage 1 clusters the amide window; the cluster with the larger mean
    amide integral is tissue. Stage 2 clusters the paraffin window with
    tissue zeroed; the cluster with the larger paraffin integral is
    paraffin. The mask is stage-1 tissue minus stage-2 paraffin.
    """
    config = (config or PipelineConfig()).validate()
    h, w = mosaic.height, mosaic.width
    amide = _window_block(mosaic, config.amide_window)
    if np.unique(amide, axis=0).shape[0] < 2:
        raise SegmentationError(
            f"{mosaic.sample_id or 'mosaic'}: all amide-window spectra identical, "
            "cannot form two clusters"
        )
    stage1 = _split_by_integral(amide, config, 0)

    par = _window_block(mosaic, config.paraffin_window)
    par[stage1] = 0.0
    if np.unique(par, axis=0).shape[0] < 2:
        paraffin = np.zeros(h * w, dtype=bool)
    else:
        paraffin = _split_by_integral(par, config, 1)
    tissue = stage1 & ~paraffin
    if return_stages:
        return Segmentation(
            tissue=tissue.reshape(h, w),
            stage1_tissue=stage1.reshape(h, w),
            paraffin=paraffin.reshape(h, w),
        )
    return tissue.reshape(h, w)


# ---------------------------------------------------------------------------
# PCA and outliers


@dataclass
class PcaModel:
    loadings: np.ndarray
    eigenvalues: np.ndarray
    mean: np.ndarray
    explained_variance_ratio: np.ndarray

    @property
    def n_components(self) -> int:
        return self.loadings.shape[0]

    def transform(self, rows: np.ndarray) -> np.ndarray:
        return (np.asarray(rows, dtype=np.float64) - self.mean) @ self.loadings.T

    def inverse_transform(self, scores: np.ndarray) -> np.ndarray:
        return scores @ self.loadings + self.mean


def pca_decompose(rows: np.ndarray, n_components: int) -> tuple[PcaModel, np.ndarray]:
    """Mean-centred PCA via SVD.

    Eigenvalues are score variances (ddof=1). Each loading is signed so its
    largest-magnitude entry is positive, which makes the result reproducible.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise ValueError("pca_decompose needs a 2-D matrix with at least 2 rows")
    n, c = rows.shape
    if not 1 <= n_components <= min(n - 1, c):
        raise ValueError(
            f"n_components={n_components} must be in [1, min(N-1, C)] = [1, {min(n - 1, c)}]"
        )
    mean = rows.mean(axis=0)
    centred = rows - mean
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    eig_all = s**2 / (n - 1)
    total = eig_all.sum()
    vt = vt[:n_components]
    flip = np.sign(vt[np.arange(n_components), np.argmax(np.abs(vt), axis=1)])
    flip[flip == 0] = 1.0
    vt = vt * flip[:, None]
    eig = eig_all[:n_components]
    ratio = eig / total if total > 0 else np.zeros(n_components)
    model = PcaModel(loadings=vt, eigenvalues=eig, mean=mean, explained_variance_ratio=ratio)
    return model, centred @ vt.T


@dataclass
class OutlierStats:
    t2: np.ndarray
    q: np.ndarray
    t2_limit: float
    q_limit: float

    @property
    def keep(self) -> np.ndarray:
        return ~((self.t2 > self.t2_limit) | (self.q > self.q_limit))


def outlier_statistics(rows: np.ndarray, n_pcs: int = 10, ci: float = 0.95) -> OutlierStats:
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[0]
    if n_pcs >= n:
        raise ValueError(f"outlier screening needs N > n_pcs, got N={n}, n_pcs={n_pcs}")
    n_pcs = min(n_pcs, rows.shape[1])
    model, scores = pca_decompose(rows, n_pcs)
    lam = model.eigenvalues
    tol = max(lam.max(initial=0.0), 1.0) * 1e-12
    live = lam > tol
    t2 = np.sum(scores[:, live] ** 2 / lam[live], axis=1)
    resid = rows - model.inverse_transform(scores)
    q = np.sum(resid**2, axis=1)
    # round-off on identical rows would otherwise produce ~1e-30 "variance"
    if np.ptp(rows, axis=0).max() == 0.0:
        t2[:] = 0.0
        q[:] = 0.0
    return OutlierStats(
        t2=t2, q=q, t2_limit=float(np.quantile(t2, ci)), q_limit=float(np.quantile(q, ci))
    )


def outlier_mask(rows: np.ndarray, n_pcs: int = 10, ci: float = 0.95) -> np.ndarray:
    """Keep-mask from Hotelling T^2 and Q residuals.

    A row is dropped when either statistic is strictly above its empirical
    ``ci`` quantile, so at most ``ceil((1 - ci) * N)`` rows fall per statistic
    and data without variance loses nothing.
    """
    return outlier_statistics(rows, n_pcs, ci).keep


# ---------------------------------------------------------------------------
# Savitzky-Golay


@functools.lru_cache(maxsize=256)
def _savgol_coeffs_cached(window: int, order: int, pos: int | None, n: int | None):
    return savgol_coeffs(window, order, pos, n)


def savgol_coeffs(window: int, order: int, pos: int | None = None, n: int | None = None):
    """Least-squares weights giving the fitted value at ``pos``.

    ``n`` is the number of samples in the fit (defaults to ``window``); the
    fit uses sample offsets 0..n-1.
    """
    n = window if n is None else n
    pos = n // 2 if pos is None else pos
    if order >= n:
        raise ValueError(f"polynomial order {order} needs more than {n} samples")
    x = np.arange(n, dtype=np.float64) - pos
    vander = np.vander(x, order + 1, increasing=True)
    # value of the fit at offset 0 is the constant coefficient
    return np.linalg.pinv(vander)[0]


def savgol_filter_rows(rows: np.ndarray, window: int = 11, order: int = 2) -> np.ndarray:
    """Smooth each row; edges use the fit over the truncated window."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    n = rows.shape[1]
    if window % 2 != 1 or window <= order:
        raise ValueError(f"window must be odd and > order, got window={window}, order={order}")
    if n < window:
        raise ValueError(f"spectrum of {n} points is shorter than the window {window}")
    half = window // 2
    out = np.empty_like(rows)
    centre = _savgol_coeffs_cached(window, order, None, None)
    win = np.lib.stride_tricks.sliding_window_view(rows, window, axis=1)
    out[:, half : n - half] = win @ centre
    for i in range(half):
        m = i + half + 1
        c = _savgol_coeffs_cached(window, order, i, m)
        out[:, i] = rows[:, :m] @ c
        out[:, n - 1 - i] = rows[:, n - m :] @ c[::-1]
    return out


def savgol_smooth(spectrum: Spectrum, window: int = 11, order: int = 2) -> Spectrum:
    return Spectrum(spectrum.axis, savgol_filter_rows(spectrum.values, window, order)[0])


# ---------------------------------------------------------------------------
# EMSC


@dataclass
class EMSCModel:
    reference: Spectrum
    poly_basis: np.ndarray
    interferent_basis: np.ndarray
    interferent_names: list[str]
    order: int = 4
    design: np.ndarray = field(init=False, repr=False)
    _solver: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.design = np.vstack(
            [
                self.poly_basis[:1],
                self.reference.values[None, :],
                self.poly_basis[1:],
                self.interferent_basis.reshape(-1, self.reference.axis.n_points),
            ]
        )
        _check_full_rank(self.design, self.row_names)
        q, r = np.linalg.qr(self.design.T)
        self._solver = np.linalg.solve(r, q.T)

    @property
    def row_names(self) -> list[str]:
        names = ["constant", "reference"]
        names += [f"poly{j}" for j in range(1, self.poly_basis.shape[0])]
        return names + list(self.interferent_names)

    @property
    def axis(self) -> WavenumberAxis:
        return self.reference.axis

    def coefficients(self, rows: np.ndarray) -> np.ndarray:
        return np.atleast_2d(rows) @ self._solver.T


def _check_full_rank(design: np.ndarray, names: list[str]) -> None:
    scale = np.linalg.norm(design, axis=1)
    bad = [names[i] for i in np.flatnonzero(scale == 0)]
    if bad:
        raise EMSCModelError(f"EMSC design rows are zero: {', '.join(bad)}")
    unit = design / scale[:, None]
    collinear = []
    basis = np.empty((0, design.shape[1]))
    tol = 1e-10
    for i, row in enumerate(unit):
        if basis.shape[0]:
            resid = row - (row @ basis.T) @ basis
        else:
            resid = row
        norm = np.linalg.norm(resid)
        if norm < tol:
            collinear.append(names[i])
        else:
            basis = np.vstack([basis, resid / norm])
    if collinear:
        raise EMSCModelError(
            "EMSC design matrix is rank deficient; rows in the span of earlier rows: "
            + ", ".join(collinear)
        )


def polynomial_basis(n_points: int, order: int) -> np.ndarray:
    t = np.linspace(-1.0, 1.0, n_points)
    return np.vstack([t**j for j in range(order + 1)])


def _interferent_components(rows: np.ndarray, var_threshold: float) -> np.ndarray:
    n, c = rows.shape
    model, _ = pca_decompose(rows, min(n - 1, c))
    lam = model.eigenvalues
    total = lam.sum()
    # identical rows leave only round-off variance, ~eps^2 of the signal power
    if total <= 1e-20 * c * float(np.mean(rows**2)):
        return np.empty((0, c))
    live = lam > total * 1e-12
    cum = np.cumsum(model.explained_variance_ratio)
    n_keep = int(np.searchsorted(cum, var_threshold - 1e-12) + 1)
    n_keep = min(n_keep, int(live.sum()))
    return model.loadings[:n_keep]


def build_emsc_model(
    library: ReferenceLibrary,
    axis: WavenumberAxis | None = None,
    poly_order: int = 4,
    var_threshold: float = 0.99,
) -> EMSCModel:
    """EMSC model with paraffin and water-vapour interferents.

    Each interferent group contributes its mean spectrum plus the principal
    components needed to reach ``var_threshold`` cumulative explained
    variance. Zero-variance components are never included.
    """
    axis = axis or library.axis
    if library.axis.n_points != axis.n_points:
        raise ValueError("library spectra are not on the model axis")
    rows, names = [], []
    for label, data in (("paraffin", library.paraffin_spectra), ("vapor", library.vapor_spectra)):
        rows.append(data.mean(axis=0))
        names.append(f"{label}_mean")
        pcs = _interferent_components(data, var_threshold)
        rows.extend(pcs)
        names.extend(f"{label}_pc{i + 1}" for i in range(pcs.shape[0]))
    return EMSCModel(
        reference=Spectrum(axis, library.global_mean.values),
        poly_basis=polynomial_basis(axis.n_points, poly_order),
        interferent_basis=np.array(rows),
        interferent_names=names,
        order=poly_order,
    )


@dataclass
class EMSCCoefficients:
    a: float
    b: float
    poly: np.ndarray
    interferents: dict[str, float]


def emsc_correct_rows(model: EMSCModel, rows: np.ndarray):
    """Batch EMSC. Returns (corrected, coefficients, ok) where ``ok`` is False
    for rows whose multiplicative term falls below the floor; those rows are
    left as NaN."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    coef = model.coefficients(rows)
    b = coef[:, 1]
    ok = np.abs(b) >= B_FLOOR
    additive = coef[:, [0] + list(range(2, coef.shape[1]))] @ np.delete(model.design, 1, axis=0)
    corrected = np.full_like(rows, np.nan)
    corrected[ok] = (rows[ok] - additive[ok]) / b[ok, None]
    return corrected, coef, ok


def emsc_correct(model: EMSCModel, spectrum: Spectrum) -> tuple[Spectrum, EMSCCoefficients]:
    corrected, coef, ok = emsc_correct_rows(model, spectrum.values)
    c = coef[0]
    if not ok[0]:
        raise CorrectionError(
            f"EMSC multiplicative coefficient |b|={abs(c[1]):.3g} below {B_FLOOR}; "
            "spectrum does not resemble the reference"
        )
    n_poly = model.poly_basis.shape[0] - 1
    weights = dict(zip(model.interferent_names, c[2 + n_poly :].tolist()))
    coeffs = EMSCCoefficients(a=float(c[0]), b=float(c[1]), poly=c[2 : 2 + n_poly], interferents=weights)
    return Spectrum(spectrum.axis, corrected[0]), coeffs


# ---------------------------------------------------------------------------
# normalisation


def minmax_rows(rows: np.ndarray):
    """Row-wise min-max scaling; returns (scaled, ok) with constant rows NaN."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    lo = rows.min(axis=1, keepdims=True)
    span = rows.max(axis=1, keepdims=True) - lo
    ok = span[:, 0] > 0
    out = np.full_like(rows, np.nan)
    out[ok] = (rows[ok] - lo[ok]) / span[ok]
    return out, ok


def minmax_normalize(spectrum: Spectrum) -> Spectrum:
    out, ok = minmax_rows(spectrum.values)
    if not ok[0]:
        raise NormalizationError("constant spectrum cannot be min-max normalised")
    return Spectrum(spectrum.axis, out[0])


# ---------------------------------------------------------------------------
# pipeline


def _map_rows(fn, rows: np.ndarray, workers: int):
    """Apply a row-wise function in fixed chunks; results do not depend on
    the number of workers."""
    if workers <= 1 or rows.shape[0] < 2 * workers:
        return fn(rows)
    bounds = np.linspace(0, rows.shape[0], workers + 1).astype(int)
    chunks = [rows[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(fn, chunks))
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate(p, axis=0) for p in zip(*parts))
    return np.concatenate(parts, axis=0)


def preprocess_mosaic(
    mosaic: HyperMosaic,
    library: ReferenceLibrary,
    config: PipelineConfig | None = None,
    workers: int = 1,
    emsc_model: EMSCModel | None = None,
) -> tuple[HyperMosaic, dict]:
    """Full preprocessing of one raw mosaic; returns (mosaic, report)."""
    config = (config or PipelineConfig()).validate()
    seg = segment_tissue(mosaic, config, return_stages=True)
    truncated = truncate_axis(mosaic, *config.biofingerprint)
    axis = truncated.axis
    if emsc_model is None:
        emsc_model = build_emsc_model(
            library, axis, config.emsc_poly_order, config.emsc_var_threshold
        )
    if library.axis.n_points != axis.n_points:
        raise ValueError(
            f"library has {library.axis.n_points} points, truncated mosaic has {axis.n_points}"
        )

    h, w = mosaic.height, mosaic.width
    live = seg.tissue.ravel().copy()
    spectra = truncated.spectra()
    report = {
        "sample_id": mosaic.sample_id,
        "patient_id": mosaic.patient_id,
        "pixels_total": int(h * w),
        "stage1_tissue": int(seg.stage1_tissue.sum()),
        "paraffin_pixels": int(seg.paraffin.sum()),
        "tissue_segmented": int(live.sum()),
    }

    idx = np.flatnonzero(live)
    keep = outlier_mask(spectra[idx], config.outlier_pcs, config.outlier_ci)
    live[idx[~keep]] = False
    report["outliers_pass1"] = int((~keep).sum())

    idx = np.flatnonzero(live)
    smooth = _map_rows(
        lambda r: savgol_filter_rows(r, config.savgol_window, config.savgol_order),
        spectra[idx],
        workers,
    )
    corrected, _, ok = _map_rows(lambda r: emsc_correct_rows(emsc_model, r), smooth, workers)
    report["emsc_failures"] = int((~ok).sum())
    normed = np.full_like(corrected, np.nan)
    norm_ok = np.zeros(ok.shape, dtype=bool)
    if ok.any():
        normed[ok], norm_ok[ok] = minmax_rows(corrected[ok])
    report["normalization_failures"] = int((ok & ~norm_ok).sum())
    live[idx[~norm_ok]] = False
    values = np.zeros((h * w, axis.n_points))
    values[idx[norm_ok]] = normed[norm_ok]

    idx = np.flatnonzero(live)
    keep = outlier_mask(values[idx], config.outlier_pcs, config.outlier_ci)
    live[idx[~keep]] = False
    report["outliers_pass2"] = int((~keep).sum())
    values[~live] = 0.0
    report["live_pixels"] = int(live.sum())
    logger.info("preprocessed %s: %s", mosaic.sample_id, report)

    out = HyperMosaic(
        cube=values.reshape(h, w, axis.n_points),
        axis=axis,
        mask=live.reshape(h, w),
        sample_id=mosaic.sample_id,
        patient_id=mosaic.patient_id,
    )
    return out, report


def run_pipeline(
    mosaic: HyperMosaic,
    library: ReferenceLibrary,
    config: PipelineConfig | None = None,
    workers: int = 1,
) -> HyperMosaic:
    return preprocess_mosaic(mosaic, library, config, workers)[0]


def global_mean_spectrum(
    mosaics: list[HyperMosaic], config: PipelineConfig | None = None
) -> Spectrum:
    """Mean smoothed tissue spectrum over every mosaic (EMSC reference)."""
    config = (config or PipelineConfig()).validate()
    total, count, axis = None, 0, None
    for m in mosaics:
        tissue = segment_tissue(m, config).ravel()
        bio = m.axis.window_indices(*config.biofingerprint)
        axis = m.axis.subset(bio)
        rows = m.cube.reshape(-1, m.n_channels)[tissue][:, bio].astype(np.float64)
        if rows.shape[0] == 0:
            continue
        rows = savgol_filter_rows(rows, config.savgol_window, config.savgol_order)
        total = rows.sum(axis=0) if total is None else total + rows.sum(axis=0)
        count += rows.shape[0]
    if count == 0:
        raise SegmentationError("no tissue pixels found in any mosaic")
    return Spectrum(axis, total / count)


# ---------------------------------------------------------------------------
# patches


def candidate_patch_count(height: int, width: int, size: int = 32) -> int:
    return math.ceil(height / size) * math.ceil(width / size)


def extract_patches(
    mosaic: HyperMosaic, size: int = 32, zero_fraction: float = 0.5, label=None
) -> list[Patch]:
    """Non-overlapping ``size`` x ``size`` tiles.

    The mosaic is zero padded to a multiple of ``size`` (padding counts as
    zeroed). A tile is dropped when at least ``size**2 * zero_fraction`` of
    its pixels are zeroed.
    """
    if not 0.0 < zero_fraction <= 1.0:
        raise ValueError("zero_fraction must be in (0, 1]")
    h, w = mosaic.height, mosaic.width
    ph, pw = math.ceil(h / size) * size, math.ceil(w / size) * size
    cube = np.zeros((ph, pw, mosaic.n_channels), dtype=np.float32)
    cube[:h, :w] = mosaic.cube
    mask = np.zeros((ph, pw), dtype=bool)
    mask[:h, :w] = mosaic.mask
    limit = size * size * zero_fraction
    patches = []
    for r in range(0, ph, size):
        for c in range(0, pw, size):
            zeros = int(size * size - mask[r : r + size, c : c + size].sum())
            if zeros >= limit:
                continue
            patches.append(
                Patch(
                    data=cube[r : r + size, c : c + size].copy(),
                    origin=(r, c),
                    zero_count=zeros,
                    sample_id=mosaic.sample_id,
                    patient_id=mosaic.patient_id,
                    label=label,
                )
            )
    return patches


# ---------------------------------------------------------------------------
# estimators


class KMeansClusterer(BaseEstimator):
    """scikit-learn style wrapper around :func:`kmeans_cluster`."""

    def __init__(self, n_clusters=2, seed=0, max_iter=100, restarts=5):
        self.n_clusters = n_clusters
        self.seed = seed
        self.max_iter = max_iter
        self.restarts = restarts

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.labels_, self.cluster_centers_, self.inertia_ = kmeans_cluster(
            X, self.n_clusters, self.seed, self.max_iter, self.restarts, return_inertia=True
        )
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return np.argmin(_sq_dists(X, self.cluster_centers_), axis=1)

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_


class T2QOutlierDetector(BaseEstimator):
    """Hotelling T^2 / Q residual screen.

    ``fit_predict`` follows the scikit-learn outlier convention: +1 inlier,
    -1 outlier. Limits are the empirical ``ci`` quantiles of the training
    statistics.
    """

    def __init__(self, n_pcs=10, ci=0.95):
        self.n_pcs = n_pcs
        self.ci = ci

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        stats = outlier_statistics(X, self.n_pcs, self.ci)
        self.t2_limit_, self.q_limit_ = stats.t2_limit, stats.q_limit
        self.pca_, _ = pca_decompose(X, min(self.n_pcs, X.shape[1]))
        self.train_keep_ = stats.keep
        return self

    def score_samples(self, X):
        """(T^2, Q) per row under the fitted model."""
        check_is_fitted(self, "pca_")
        X = check_array(X, dtype=np.float64)
        scores = self.pca_.transform(X)
        lam = self.pca_.eigenvalues
        live = lam > max(lam.max(initial=0.0), 1.0) * 1e-12
        t2 = np.sum(scores[:, live] ** 2 / lam[live], axis=1)
        q = np.sum((X - self.pca_.inverse_transform(scores)) ** 2, axis=1)
        return t2, q

    def predict(self, X):
        t2, q = self.score_samples(X)
        return np.where((t2 > self.t2_limit_) | (q > self.q_limit_), -1, 1)

    def fit_predict(self, X, y=None):
        return np.where(self.fit(X).train_keep_, 1, -1)


class SavGolSmoother(TransformerMixin, BaseEstimator):
    def __init__(self, window=11, order=2):
        self.window = window
        self.order = order

    def fit(self, X, y=None):
        check_array(X)
        return self

    def transform(self, X):
        return savgol_filter_rows(check_array(X, dtype=np.float64), self.window, self.order)


class EMSC(TransformerMixin, BaseEstimator):
    """EMSC as a transformer.

    ``fit`` builds the model from the interferent spectra; when no
    ``reference`` is given the mean of ``X`` is used. ``transform`` raises
    :class:`CorrectionError` if any row fails the multiplicative-term floor.
    """

    def __init__(self, paraffin=None, vapor=None, reference=None, poly_order=4, var_threshold=0.99):
        self.paraffin = paraffin
        self.vapor = vapor
        self.reference = reference
        self.poly_order = poly_order
        self.var_threshold = var_threshold

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        c = X.shape[1]
        axis = WavenumberAxis(float(c - 1), 0.0, c)
        ref = X.mean(axis=0) if self.reference is None else np.asarray(self.reference, float)
        lib = ReferenceLibrary(self.paraffin, self.vapor, Spectrum(axis, ref))
        self.model_ = build_emsc_model(lib, axis, self.poly_order, self.var_threshold)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        corrected, self.coef_, ok = emsc_correct_rows(self.model_, X)
        if not ok.all():
            raise CorrectionError(f"{int((~ok).sum())} spectra failed the EMSC b floor")
        return corrected


class MinMaxNormalizer(TransformerMixin, BaseEstimator):
    """Per-spectrum (row-wise) min-max scaling."""

    def fit(self, X, y=None):
        check_array(X)
        return self

    def transform(self, X):
        out, ok = minmax_rows(check_array(X, dtype=np.float64))
        if not ok.all():
            raise NormalizationError(f"{int((~ok).sum())} constant spectra")
        return out


class FTIRPreprocessor(TransformerMixin, BaseEstimator):
    """Mosaic-level pipeline: ``transform`` maps raw mosaics to preprocessed ones.

    ``fit`` takes the raw mosaics, recomputes the EMSC reference as their
    global mean tissue spectrum (unless ``refit_reference`` is False) and
    builds the EMSC model once.
    """

    def __init__(self, library=None, config=None, workers=1, refit_reference=True):
        self.library = library
        self.config = config
        self.workers = workers
        self.refit_reference = refit_reference

    def fit(self, X, y=None):
        if self.library is None:
            raise ValueError("FTIRPreprocessor needs a ReferenceLibrary")
        config = (self.config or PipelineConfig()).validate()
        lib = self.library
        if self.refit_reference:
            lib = ReferenceLibrary(
                lib.paraffin_spectra, lib.vapor_spectra, global_mean_spectrum(list(X), config)
            )
        self.library_ = lib
        self.emsc_model_ = build_emsc_model(
            lib, lib.axis, config.emsc_poly_order, config.emsc_var_threshold
        )
        return self

    def transform(self, X):
        check_is_fitted(self, "emsc_model_")
        config = (self.config or PipelineConfig()).validate()
        self.reports_ = []
        out = []
        for m in X:
            pm, rep = preprocess_mosaic(m, self.library_, config, self.workers, self.emsc_model_)
            out.append(pm)
            self.reports_.append(rep)
        return out
