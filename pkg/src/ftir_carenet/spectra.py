"""Spectral data model, HSC1 cube IO and the synthetic mosaic generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .exceptions import AxisRangeError, ConfigError, CubeFormatError, ValidationError

HSC1_MAGIC = b"HSC1"
_HEADER = struct.Struct("<4sIIIdd")

# biofingerprint grid: 467 points over 1800-900 cm-1
BIO_HI = 1800.0
BIO_LO = 900.0
BIO_POINTS = 467


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class WavenumberAxis:
    """Evenly spaced, descending wavenumber grid (cm-1)."""

    start: float
    end: float
    n_points: int

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 2:
            raise ValidationError(f"n_points must be an integer >= 2, got {self.n_points}")
        if not self.start > self.end:
            raise ValidationError(f"axis must descend: start={self.start} end={self.end}")
        object.__setattr__(self, "start", float(self.start))
        object.__setattr__(self, "end", float(self.end))
        object.__setattr__(self, "n_points", int(self.n_points))

    @classmethod
    def from_spacing(cls, hi: float, lo: float, spacing: float) -> "WavenumberAxis":
        """Grid anchored at ``lo`` with the given spacing, extending up to ``hi``."""
        n_steps = int(np.floor((hi - lo) / spacing + 1e-9))
        return cls(lo + n_steps * spacing, lo, n_steps + 1)

    @classmethod
    def biofingerprint(cls, n_points: int = BIO_POINTS) -> "WavenumberAxis":
        return cls(BIO_HI, BIO_LO, n_points)

    @property
    def spacing(self) -> float:
        return (self.start - self.end) / (self.n_points - 1)

    @property
    def values(self) -> np.ndarray:
        return np.linspace(self.start, self.end, self.n_points)

    def window_indices(self, hi: float, lo: float) -> np.ndarray:
        """Indices of points p with lo <= p <= hi (tolerant to float round-off)."""
        if not hi > lo:
            raise AxisRangeError(f"window needs hi > lo, got ({hi}, {lo})")
        tol = 1e-6 * self.spacing
        v = self.values
        idx = np.flatnonzero((v >= lo - tol) & (v <= hi + tol))
        if idx.size == 0:
            raise AxisRangeError(
                f"window [{lo}, {hi}] does not intersect axis [{self.end}, {self.start}]"
            )
        return idx

    def subset(self, idx: np.ndarray) -> "WavenumberAxis":
        v = self.values
        if idx.size < 2:
            raise AxisRangeError("truncated axis would hold fewer than 2 points")
        if np.any(np.diff(idx) != 1):
            raise AxisRangeError("axis subset must be contiguous")
        return WavenumberAxis(v[idx[0]], v[idx[-1]], idx.size)


@dataclass(frozen=True)
class Spectrum:
    axis: WavenumberAxis
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] != self.axis.n_points:
            raise ValidationError(
                f"spectrum length {v.shape} does not match axis n_points {self.axis.n_points}"
            )
        if not np.all(np.isfinite(v)):
            raise ValidationError("spectrum contains non-finite values")
        object.__setattr__(self, "values", _readonly(v))

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class HyperMosaic:
    """H x W x C absorbance cube with a live-tissue mask.

    The cube is stored as float32 (the on-disk precision) so that a
    write/read cycle is bit exact.
    """

    cube: np.ndarray
    axis: WavenumberAxis
    mask: np.ndarray | None = None
    sample_id: str = ""
    patient_id: str = ""

    def __post_init__(self):
        cube = np.array(self.cube, dtype=np.float32)
        if cube.ndim != 3:
            raise ValidationError(f"cube must be 3-D, got shape {cube.shape}")
        if cube.shape[2] != self.axis.n_points:
            raise ValidationError(
                f"cube has {cube.shape[2]} channels but axis has {self.axis.n_points}"
            )
        if min(cube.shape[:2]) < 1:
            raise ValidationError("height and width must be positive")
        if not np.all(np.isfinite(cube)):
            raise ValidationError("cube contains non-finite values")
        if self.mask is None:
            mask = np.ones(cube.shape[:2], dtype=bool)
        else:
            mask = np.array(self.mask, dtype=bool)
            if mask.shape != cube.shape[:2]:
                raise ValidationError(f"mask shape {mask.shape} != cube plane {cube.shape[:2]}")
        object.__setattr__(self, "cube", _readonly(cube))
        object.__setattr__(self, "mask", _readonly(mask))

    @property
    def height(self) -> int:
        return self.cube.shape[0]

    @property
    def width(self) -> int:
        return self.cube.shape[1]

    @property
    def n_channels(self) -> int:
        return self.cube.shape[2]

    def spectra(self) -> np.ndarray:
        """All pixel spectra as an (H*W, C) float64 matrix."""
        return self.cube.reshape(-1, self.n_channels).astype(np.float64)

    def replace(self, **changes) -> "HyperMosaic":
        kw = dict(
            cube=self.cube,
            axis=self.axis,
            mask=self.mask,
            sample_id=self.sample_id,
            patient_id=self.patient_id,
        )
        kw.update(changes)
        return HyperMosaic(**kw)

    def equals(self, other: "HyperMosaic") -> bool:
        return (
            self.axis == other.axis
            and self.sample_id == other.sample_id
            and self.patient_id == other.patient_id
            and self.cube.tobytes() == other.cube.tobytes()
            and np.array_equal(self.mask, other.mask)
        )


@dataclass(eq=False)
class Patch:
    data: np.ndarray
    origin: tuple[int, int]
    zero_count: int
    sample_id: str = ""
    patient_id: str = ""
    label: Any = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValidationError(f"patch data must be 3-D, got {self.data.shape}")
        n = self.data.shape[0] * self.data.shape[1]
        if not 0 <= self.zero_count <= n:
            raise ValidationError(f"zero_count {self.zero_count} outside [0, {n}]")


@dataclass(frozen=True, eq=False)
class ReferenceLibrary:
    """Interferent spectra (paraffin, water vapour) and the EMSC reference."""

    paraffin_spectra: np.ndarray
    vapor_spectra: np.ndarray
    global_mean: Spectrum

    def __post_init__(self):
        c = self.global_mean.axis.n_points
        for name in ("paraffin_spectra", "vapor_spectra"):
            m = np.atleast_2d(np.array(getattr(self, name), dtype=np.float64))
            if m.shape[1] != c:
                raise ValidationError(f"{name} has {m.shape[1]} columns, axis has {c}")
            if m.shape[0] < 2:
                raise ValidationError(f"{name} needs at least 2 rows for PCA")
            if not np.all(np.isfinite(m)):
                raise ValidationError(f"{name} contains non-finite values")
            object.__setattr__(self, name, _readonly(m))

    @property
    def axis(self) -> WavenumberAxis:
        return self.global_mean.axis

    def save(self, path: str | Path) -> None:
        ax = self.axis
        with open(path, "wb") as fh:
            np.savez(
                fh,
                paraffin=self.paraffin_spectra,
                vapor=self.vapor_spectra,
                global_mean=self.global_mean.values,
                axis=np.array([ax.start, ax.end, ax.n_points], dtype=np.float64),
            )

    @classmethod
    def load(cls, path: str | Path) -> "ReferenceLibrary":
        with np.load(path) as z:
            start, end, n = z["axis"]
            axis = WavenumberAxis(start, end, int(n))
            return cls(z["paraffin"], z["vapor"], Spectrum(axis, z["global_mean"]))


# ---------------------------------------------------------------------------
# HSC1 IO


def write_cube(mosaic: HyperMosaic, path: str | Path) -> None:
    """Write ``mosaic`` in the HSC1 layout.

    Layout: magic ``HSC1``; u32 height, width, channels; f64 axis start, end;
    float32 cube (row-major, channel-last); H*W mask bytes; u16-prefixed
    UTF-8 sample_id and patient_id. All little-endian.
    """
    h, w, c = mosaic.cube.shape
    parts = [
        _HEADER.pack(HSC1_MAGIC, h, w, c, mosaic.axis.start, mosaic.axis.end),
        np.ascontiguousarray(mosaic.cube, dtype="<f4").tobytes(),
        np.ascontiguousarray(mosaic.mask, dtype=np.uint8).tobytes(),
    ]
    for text in (mosaic.sample_id, mosaic.patient_id):
        raw = text.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValidationError("identifier longer than 65535 bytes")
        parts.append(struct.pack("<H", len(raw)) + raw)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_cube(path: str | Path) -> HyperMosaic:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != HSC1_MAGIC:
        raise CubeFormatError(f"{path}: bad magic {buf[:4]!r}, expected {HSC1_MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise OSError(f"{path}: truncated header")
    _, h, w, c, start, end = _HEADER.unpack_from(buf, 0)
    if h < 1 or w < 1 or c < 2:
        raise CubeFormatError(f"{path}: invalid dimensions ({h}, {w}, {c})")
    off = _HEADER.size
    n_vals = h * w * c
    need = off + 4 * n_vals + h * w
    if len(buf) < need:
        raise OSError(f"{path}: truncated payload ({len(buf)} of at least {need} bytes)")
    cube = np.frombuffer(buf, dtype="<f4", count=n_vals, offset=off).reshape(h, w, c)
    off += 4 * n_vals
    mask_raw = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=off).reshape(h, w)
    if np.any(mask_raw > 1):
        raise CubeFormatError(f"{path}: mask bytes must be 0 or 1")
    off += h * w
    ids = []
    for _ in range(2):
        if len(buf) < off + 2:
            raise OSError(f"{path}: truncated identifier block")
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        if len(buf) < off + n:
            raise OSError(f"{path}: truncated identifier block")
        ids.append(buf[off : off + n].decode("utf-8"))
        off += n
    if not np.all(np.isfinite(cube)):
        raise ValidationError(f"{path}: cube contains non-finite values")
    return HyperMosaic(
        cube=cube.astype(np.float32),
        axis=WavenumberAxis(start, end, c),
        mask=mask_raw.astype(bool),
        sample_id=ids[0],
        patient_id=ids[1],
    )


def truncate_axis(mosaic: HyperMosaic, hi: float, lo: float) -> HyperMosaic:
    """Keep the axis points inside [lo, hi], preserving the descending order."""
    idx = mosaic.axis.window_indices(hi, lo)
    return mosaic.replace(cube=mosaic.cube[:, :, idx], axis=mosaic.axis.subset(idx))


# ---------------------------------------------------------------------------
# synthetic data

# Gaussian bands (centre cm-1, amplitude, sigma cm-1)
TISSUE_BANDS = (
    (1655.0, 1.00, 18.0),  # amide I
    (1545.0, 0.60, 18.0),  # amide II
    (1450.0, 0.12, 12.0),  # CH2 bend
    (1400.0, 0.15, 14.0),
    (1240.0, 0.25, 16.0),  # phosphate asym.
    (1080.0, 0.22, 16.0),  # phosphate sym.
    (1030.0, 0.15, 14.0),
    (2925.0, 0.30, 20.0),
    (3300.0, 0.50, 60.0),  # amide A
)
# bands whose strength varies between pixels and patients regardless of class
NUISANCE_BANDS = (
    (1740.0, 0.30, 12.0),  # lipid ester C=O
    (1400.0, 0.15, 14.0),
    (1160.0, 0.12, 14.0),
    (1080.0, 0.22, 16.0),
    (1030.0, 0.15, 14.0),
)
PARAFFIN_BANDS = (
    (1467.0, 1.00, 8.0),
    (1380.0, 0.35, 7.0),
    (1305.0, 0.10, 10.0),
    (1175.0, 0.06, 10.0),
    (2850.0, 1.20, 10.0),
    (2920.0, 1.60, 12.0),
)
# water vapour: comb of narrow lines across the bending band
_VAPOR_LINES = np.linspace(1880.0, 1360.0, 27)
LABEL_TABLE = {
    "type": ("AT", "CA", "CA", "CA"),
    "subtype": ("LA", "LB", "HER2", "TNBC"),
    "er": ("-", "+", "++", "+++"),
    "pr": ("-", "+", "++", "+++"),
    "her2": ("0", "3+", "0", "3+"),
    "ki67_percent": (5.0, 10.0, 20.0, 30.0),
}


def gaussian_bands(wn: np.ndarray, bands, min_sigma: float = 0.0) -> np.ndarray:
    out = np.zeros_like(wn, dtype=np.float64)
    for centre, amp, sigma in bands:
        s = max(sigma, min_sigma)
        out += amp * np.exp(-0.5 * ((wn - centre) / s) ** 2)
    return out


@dataclass
class SynthConfig:
    """Parameters of the synthetic microarray."""

    n_samples: int = 12
    n_classes: int = 3
    height: int = 64
    width: int = 64
    bio_points: int = BIO_POINTS
    raw_hi: float = 3950.0
    tissue_fraction: float = 0.5
    slide_radius: float = 1.3
    discriminative_peak: float = 1240.0
    discriminative_width: float = 22.0
    class_amplitudes: tuple[float, ...] | None = None
    amide_class_shift: float = 0.04
    heterogeneity: float = 0.5
    paraffin_amplitude: float = 1.0
    paraffin_residue: float = 0.05
    vapor_amplitude: float = 0.02
    baseline_amplitude: float = 0.05
    noise_std: float = 0.004
    n_library: int = 24

    def validate(self) -> None:
        for name in ("n_samples", "n_classes", "height", "width", "bio_points", "n_library"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.bio_points < 2 or self.n_library < 2:
            raise ConfigError("bio_points and n_library must be >= 2")
        if not 0.0 < self.tissue_fraction < 1.0:
            raise ConfigError(f"tissue_fraction must be in (0, 1), got {self.tissue_fraction}")
        if self.raw_hi <= BIO_HI:
            raise ConfigError(f"raw_hi must exceed {BIO_HI}")
        if self.n_classes > len(LABEL_TABLE["subtype"]):
            raise ConfigError("at most 4 synthetic classes are supported")
        if self.class_amplitudes is not None and len(self.class_amplitudes) != self.n_classes:
            raise ConfigError("class_amplitudes needs one entry per class")
        if min(self.noise_std, self.vapor_amplitude, self.baseline_amplitude, self.heterogeneity) < 0:
            raise ConfigError("noise amplitudes must be non-negative")

    @property
    def spacing(self) -> float:
        return (BIO_HI - BIO_LO) / (self.bio_points - 1)

    def raw_axis(self) -> WavenumberAxis:
        return WavenumberAxis.from_spacing(self.raw_hi, BIO_LO, self.spacing)

    def amplitudes(self) -> np.ndarray:
        if self.class_amplitudes is not None:
            return np.asarray(self.class_amplitudes, dtype=np.float64)
        return np.linspace(0.1, 1.0, self.n_classes) if self.n_classes > 1 else np.array([0.5])


@dataclass
class SynthDataset:
    mosaics: list[HyperMosaic]
    library: ReferenceLibrary
    tissue_masks: list[np.ndarray]
    paraffin_masks: list[np.ndarray]
    labels: list[dict]
    classes: list[int] = field(default_factory=list)


def disc_mask(height: int, width: int, fraction: float) -> np.ndarray:
    """Centred disc covering ``fraction`` of the plane."""
    r = np.sqrt(fraction * height * width / np.pi)
    yy, xx = np.mgrid[0:height, 0:width]
    d = np.hypot(yy - (height - 1) / 2.0, xx - (width - 1) / 2.0)
    return d <= r


def _vapor_patterns(wn: np.ndarray, spacing: float) -> np.ndarray:
    # two fixed line patterns; real vapour varies mainly in overall strength
    sig = max(3.0, 0.8 * spacing)
    amps_a = np.cos(np.arange(_VAPOR_LINES.size) * 1.7) * 0.5 + 0.6
    amps_b = np.sin(np.arange(_VAPOR_LINES.size) * 0.9) * 0.4
    a = gaussian_bands(wn, zip(_VAPOR_LINES, amps_a, [sig] * _VAPOR_LINES.size))
    b = gaussian_bands(wn, zip(_VAPOR_LINES + 4.0, amps_b, [sig] * _VAPOR_LINES.size))
    return np.stack([a, b])


def synth_dataset(config: SynthConfig, seed: int) -> SynthDataset:
    """Seeded stand-in for the biopsy microarray.

    Each mosaic holds a tissue disc surrounded by paraffin; pixels far outside
    the disc (beyond ``slide_radius`` half-widths) are bare slide. Tissue
    spectra carry a class-dependent band at ``discriminative_peak``.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    axis = config.raw_axis()
    wn = axis.values
    sp = config.spacing
    t = np.linspace(-1.0, 1.0, axis.n_points)
    baseline_basis = np.stack([np.ones_like(t), t, t**2])

    tissue_base = gaussian_bands(wn, TISSUE_BANDS, min_sigma=sp)
    amide_shape = gaussian_bands(wn, TISSUE_BANDS[:2], min_sigma=sp)
    disc_shape = gaussian_bands(
        wn, [(config.discriminative_peak, 1.0, config.discriminative_width)], min_sigma=sp
    )
    paraffin_base = gaussian_bands(wn, PARAFFIN_BANDS, min_sigma=sp)
    paraffin_alt = gaussian_bands(wn, PARAFFIN_BANDS[1:4], min_sigma=sp)
    vapor = _vapor_patterns(wn, sp)
    amps = config.amplitudes()
    nuisance = np.stack([gaussian_bands(wn, [b], min_sigma=sp) for b in NUISANCE_BANDS])

    classes = np.resize(np.arange(config.n_classes), config.n_samples)
    rng.shuffle(classes)
    h, w = config.height, config.width
    tissue = disc_mask(h, w, config.tissue_fraction)
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.hypot(yy - (h - 1) / 2.0, xx - (w - 1) / 2.0)
    slide = (~tissue) & (dist > config.slide_radius * min(h, w) / 2.0)
    paraffin = (~tissue) & (~slide)
    n_pix = h * w

    mosaics, labels, tissue_sum, tissue_n = [], [], np.zeros(axis.n_points), 0
    for i, c in enumerate(classes):
        c = int(c)
        sig = tissue_base + amps[c] * disc_shape + config.amide_class_shift * c * amide_shape
        thick = rng.uniform(0.8, 1.2, n_pix)
        par_scale = rng.uniform(0.8, 1.2, n_pix) * config.paraffin_amplitude
        spectra = np.zeros((n_pix, axis.n_points))
        tf, pf, sf = tissue.ravel(), paraffin.ravel(), slide.ravel()
        # per-patient offsets plus per-pixel scatter of class-independent bands
        mix = rng.uniform(0.0, 1.0, len(NUISANCE_BANDS)) + rng.uniform(0.0, 1.0, (tf.sum(), len(NUISANCE_BANDS)))
        spectra[tf] = thick[tf, None] * (sig[None, :] + config.heterogeneity * (mix @ nuisance))
        spectra[tf] += (
            config.paraffin_residue * rng.uniform(0.0, 1.0, tf.sum())[:, None] * paraffin_base
        )
        spectra[pf] = par_scale[pf, None] * paraffin_base[None, :]
        spectra[pf] += 0.1 * rng.standard_normal(pf.sum())[:, None] * paraffin_alt
        spectra += config.baseline_amplitude * (
            rng.uniform(-1.0, 1.0, (n_pix, 3)) @ baseline_basis
        )
        spectra += config.vapor_amplitude * (rng.standard_normal((n_pix, 2)) @ vapor)
        spectra += config.noise_std * rng.standard_normal(spectra.shape)
        spectra[sf] *= 0.5  # bare slide: baseline, vapour and noise only
        tissue_sum += spectra[tf].sum(axis=0)
        tissue_n += int(tf.sum())
        sid, pid = f"S{i:03d}", f"P{i:03d}"
        mosaics.append(
            HyperMosaic(
                cube=spectra.reshape(h, w, axis.n_points),
                axis=axis,
                mask=np.ones((h, w), dtype=bool),
                sample_id=sid,
                patient_id=pid,
            )
        )
        rec = {"sample_id": sid, "patient_id": pid}
        for key, table in LABEL_TABLE.items():
            rec[key] = table[c % len(table)]
        labels.append(rec)

    bio = axis.window_indices(BIO_HI, BIO_LO)
    bio_axis = axis.subset(bio)
    n_lib = config.n_library
    # library variation runs along shapes independent of the mean so the
    # mean and the principal components stay linearly independent
    paraffin_shift = gaussian_bands(
        wn, [(c + 0.5 * s, a, s) for c, a, s in PARAFFIN_BANDS[:2]], min_sigma=sp
    ) - gaussian_bands(wn, PARAFFIN_BANDS[:2], min_sigma=sp)
    par_lib = (
        paraffin_base[None, :]
        + 0.1 * rng.standard_normal((n_lib, 1)) * paraffin_alt
        + 0.2 * rng.standard_normal((n_lib, 1)) * paraffin_shift
    )[:, bio]
    vapor_extra = gaussian_bands(
        wn,
        [(c - 6.0, np.cos(0.37 * k), max(3.0, 0.8 * sp)) for k, c in enumerate(_VAPOR_LINES)],
    )
    vap_lib = (
        vapor[0][None, :]
        + rng.standard_normal((n_lib, 1)) * vapor[1]
        + 0.3 * rng.standard_normal((n_lib, 1)) * vapor_extra
    )[:, bio] * max(config.vapor_amplitude, 1e-3)
    library = ReferenceLibrary(
        paraffin_spectra=par_lib,
        vapor_spectra=vap_lib,
        global_mean=Spectrum(bio_axis, (tissue_sum / max(tissue_n, 1))[bio]),
    )
    return SynthDataset(
        mosaics=mosaics,
        library=library,
        tissue_masks=[tissue.copy() for _ in mosaics],
        paraffin_masks=[paraffin.copy() for _ in mosaics],
        labels=labels,
        classes=[int(c) for c in classes],
    )
