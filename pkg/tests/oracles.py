"""Independent reference computations shared by the test modules."""

from fractions import Fraction

import numpy as np

from ftir_carenet import autonn
from ftir_carenet.autonn import Activation, Conv2D, Dense, GlobalAvgPool, MaxPool2D, Sequential
from ftir_carenet.spectra import ReferenceLibrary, Spectrum, WavenumberAxis

OUTPUT_DIM = {"binary": 1, "onehot": 4, "ordinal": 4, "regression": 1}
FD_STEP = 1e-4
# denominators below this are treated as exact zeros on both sides
REL_FLOOR = 1e-8


def random_target(kind, n, rng):
    d = OUTPUT_DIM[kind]
    if kind == "binary":
        return rng.integers(0, 2, size=(n, 1)).astype(float)
    if kind == "onehot":
        return np.eye(d)[rng.integers(0, d, size=n)]
    if kind == "ordinal":
        level = rng.integers(0, d, size=n)
        return (np.arange(d)[None, :] <= level[:, None]).astype(float)
    return rng.uniform(0.0, 1.0, size=(n, 1))


def micro_network(kind, rng, h=4, w=4, c=3):
    """Random small stack using every layer kind; hidden activation drawn at random."""
    f1, f2, units = (int(v) for v in rng.integers(2, 4, size=3))
    hidden = str(rng.choice(["relu", "sigmoid", "linear"]))
    layers = [
        Conv2D(c, f1, 1, name="c1"),
        Activation(hidden, name="a1"),
        MaxPool2D(name="p1"),
        Conv2D(f1, f2, 3, name="c2"),
        Activation("relu", name="a2"),
        GlobalAvgPool(name="gap"),
        Dense(f2, units, name="d1"),
        Activation(hidden, name="a3"),
        Dense(units, OUTPUT_DIM[kind], name="out"),
    ]
    net = Sequential(layers, input_shape=(h, w, c), name="micro")
    net.initialize(rng)
    # small non-zero biases so no unit sits exactly on a kink
    for key, value in net.parameters().items():
        if key.endswith(".bias"):
            net.set_parameter(key, rng.normal(0.0, 0.1, size=value.shape))
    return net


def _set(model, key, value):
    if hasattr(model, "set_parameter"):
        model.set_parameter(key, value)
    else:
        model.set_parameters({**model.parameters(), key: value})


def finite_difference(model, x, target, kind, weight=1.0, step=FD_STEP):
    """Central differences of the batch loss for every parameter entry."""
    out = {}
    params = {k: v.copy() for k, v in model.parameters().items()}
    for key, value in params.items():
        grad = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            losses = []
            for sign in (1.0, -1.0):
                bumped = value.copy()
                bumped[idx] += sign * step
                _set(model, key, bumped)
                losses.append(autonn.compute_loss(kind, autonn.network_eval(model, x), target, weight))
            grad[idx] = (losses[0] - losses[1]) / (2.0 * step)
        _set(model, key, value)
        out[key] = grad
    return out


def max_relative_error(analytic, numeric):
    worst = 0.0
    for key in analytic:
        a, n = analytic[key], numeric[key]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def dual_path_network(kind, rng, h=4, w=4, c=3):
    from ftir_carenet.carenet import CaReNetConfig, DualPathNetwork
    from ftir_carenet.labels import SCHEMAS

    schema = next(s for s in SCHEMAS.values() if s.kind == kind)
    cfg = CaReNetConfig(input_shape=(h, w, c), spectral_filters=(2, 3), spatial_filters=(2, 2),
                        spectral_pool=(True, False), spatial_pool=(False, True), fusion_units=3)
    net = DualPathNetwork(cfg, schema, seed=int(rng.integers(2**31)))
    net.set_parameters({k: rng.normal(0.0, 0.1, size=v.shape) if k.endswith(".bias") else v
                        for k, v in net.parameters().items()})
    return net


def gradient_check(kind, seed, batch=2, dual=False):
    rng = np.random.default_rng(seed)
    net = dual_path_network(kind, rng) if dual else micro_network(kind, rng)
    x = rng.normal(size=(batch, 4, 4, 3))
    target = random_target(kind, batch, rng)
    weight = rng.uniform(0.5, 2.0, size=batch)
    _, analytic = autonn.network_grad(net, x, target, kind, weight)
    numeric = finite_difference(net, x, target, kind, weight)
    return max_relative_error(analytic, numeric)


def separable_patches(n_per_class=5, classes=("LA", "LB", "HER2", "TNBC"), size=32, channels=64, seed=0):
    """Min-max scaled patches whose class is set by the position of one absorption band."""
    rng = np.random.default_rng(seed)
    grid = np.arange(channels, dtype=float)
    centres = np.linspace(0.2, 0.8, len(classes)) * (channels - 1)
    X, y = [], []
    for centre, label in zip(centres, classes):
        band = np.exp(-0.5 * ((grid - centre) / 3.0) ** 2)
        for _ in range(n_per_class):
            base = 0.3 + 0.1 * np.sin(grid / 9.0 + rng.uniform(0, 6.28))
            cube = base + band + 0.05 * rng.normal(size=(size, size, channels))
            lo, hi = cube.min(axis=2, keepdims=True), cube.max(axis=2, keepdims=True)
            X.append((cube - lo) / (hi - lo))
            y.append(label)
    return np.stack(X), y


def exact_fit_weights(offsets, order, at=0):
    """Least-squares polynomial weights in exact rational arithmetic."""
    xs = [Fraction(x) for x in offsets]
    m = order + 1
    # normal equations A^T A c = A^T y; weights are row `at`-evaluation of (A^T A)^-1 A^T
    ata = [[sum(x ** (i + j) for x in xs) for j in range(m)] for i in range(m)]
    inv = [[Fraction(int(i == j)) for j in range(m)] for i in range(m)]
    a = [row[:] for row in ata]
    for col in range(m):
        piv = next(r for r in range(col, m) if a[r][col] != 0)
        a[col], a[piv] = a[piv], a[col]
        inv[col], inv[piv] = inv[piv], inv[col]
        p = a[col][col]
        a[col] = [v / p for v in a[col]]
        inv[col] = [v / p for v in inv[col]]
        for r in range(m):
            if r != col and a[r][col] != 0:
                f = a[r][col]
                a[r] = [u - f * v for u, v in zip(a[r], a[col])]
                inv[r] = [u - f * v for u, v in zip(inv[r], inv[col])]
    at = Fraction(at)
    basis_at = [at**j for j in range(m)]
    row = [sum(basis_at[i] * inv[i][j] for i in range(m)) for j in range(m)]
    return [sum(row[j] * x**j for j in range(m)) for x in xs]


def emsc_library(rng, c=40, n=6):
    """Small paraffin/vapour library with varied rows and a smooth reference."""
    ax = WavenumberAxis(1800, 900, c)
    t = np.linspace(0, 1, c)
    par = np.exp(-((t - 0.3) / 0.05) ** 2) + 0.1 * rng.normal(size=(n, 1)) * np.exp(-((t - 0.6) / 0.04) ** 2)
    vap = np.sin(40 * t) * 0.05 + 0.01 * rng.normal(size=(n, 1)) * np.cos(23 * t)
    ref = np.exp(-((t - 0.8) / 0.1) ** 2) + 0.5 * np.exp(-((t - 0.45) / 0.07) ** 2)
    return ReferenceLibrary(par, vap, Spectrum(ax, ref))


# criterion number -> (passed, title, detail); printed by the terminal summary hook
ACCEPTANCE = {}


class criterion:
    """Context manager recording whether an acceptance block raised."""

    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        detail = self.detail if exc_type is None else f"{self.detail}; {str(exc).splitlines()[0]}"
        ACCEPTANCE[self.number] = (exc_type is None, self.title, " ".join(detail.split()))
        return False
