import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ftir_carenet.exceptions import AxisRangeError, ConfigError, CubeFormatError, ValidationError
from ftir_carenet.spectra import (
    HyperMosaic,
    ReferenceLibrary,
    Spectrum,
    SynthConfig,
    WavenumberAxis,
    disc_mask,
    read_cube,
    synth_dataset,
    truncate_axis,
    write_cube,
)

HEADER_BYTES = 4 + 3 * 4 + 2 * 8


def _mosaic(h=3, w=2, c=4, seed=0, **kw):
    rng = np.random.default_rng(seed)
    cube = rng.normal(size=(h, w, c)).astype(np.float32)
    mask = rng.random((h, w)) > 0.3
    return HyperMosaic(cube, WavenumberAxis(1800.0, 900.0, c), mask, **kw)


class TestAxis:
    def test_values_descend_evenly(self):
        ax = WavenumberAxis(1800, 900, 467)
        v = ax.values
        assert v[0] == 1800 and v[-1] == 900
        assert np.allclose(np.diff(v), -900 / 466)

    def test_rejects_ascending(self):
        with pytest.raises(ValidationError):
            WavenumberAxis(900, 1800, 10)

    def test_window_enumeration(self):
        ax = WavenumberAxis(1700, 1500, 3)
        assert ax.values[ax.window_indices(1650, 1450)].tolist() == [1600, 1500]

    def test_window_outside_axis(self):
        with pytest.raises(AxisRangeError):
            WavenumberAxis(1700, 1500, 3).window_indices(1400, 1300)

    def test_full_range_keeps_467_points(self):
        raw = WavenumberAxis.from_spacing(3950.0, 900.0, 900.0 / 466)
        m = HyperMosaic(np.zeros((1, 1, raw.n_points)), raw)
        bio = truncate_axis(m, 1800.0, 900.0)
        assert bio.n_channels == 467
        assert bio.axis.start == pytest.approx(1800.0) and bio.axis.end == 900.0


class TestTruncate:
    def test_enumerated_points(self):
        m = HyperMosaic(np.arange(3.0).reshape(1, 1, 3), WavenumberAxis(1700, 1500, 3))
        out = truncate_axis(m, 1650, 1450)
        assert out.axis.values.tolist() == [1600.0, 1500.0]
        assert out.cube[0, 0].tolist() == [1.0, 2.0]

    def test_full_range_is_identity(self):
        m = _mosaic()
        assert truncate_axis(m, 1800, 900).equals(m)


class TestCubeIO:
    def test_round_trip_bitwise(self, tmp_path):
        m = _mosaic(sample_id="S-ä1", patient_id="P7")
        write_cube(m, tmp_path / "a.hsc")
        back = read_cube(tmp_path / "a.hsc")
        assert back.equals(m)
        assert back.cube.tobytes() == m.cube.tobytes()
        assert (back.sample_id, back.patient_id) == ("S-ä1", "P7")

    def test_ones_cube_sum(self, tmp_path):
        m = HyperMosaic(np.ones((2, 2, 3)), WavenumberAxis(1800, 900, 3))
        write_cube(m, tmp_path / "o.hsc")
        assert read_cube(tmp_path / "o.hsc").cube.sum() == 12.0

    def test_bad_magic(self, tmp_path):
        write_cube(_mosaic(), tmp_path / "a.hsc")
        raw = bytearray((tmp_path / "a.hsc").read_bytes())
        raw[:4] = b"XXXX"
        (tmp_path / "b.hsc").write_bytes(bytes(raw))
        with pytest.raises(CubeFormatError):
            read_cube(tmp_path / "b.hsc")

    def test_truncated_file(self, tmp_path):
        write_cube(_mosaic(), tmp_path / "a.hsc")
        raw = (tmp_path / "a.hsc").read_bytes()
        (tmp_path / "b.hsc").write_bytes(raw[:-7])
        with pytest.raises(OSError):
            read_cube(tmp_path / "b.hsc")

    def test_non_finite_payload(self, tmp_path):
        write_cube(_mosaic(c=2, h=1, w=1), tmp_path / "a.hsc")
        raw = bytearray((tmp_path / "a.hsc").read_bytes())
        raw[HEADER_BYTES : HEADER_BYTES + 4] = struct.pack("<f", float("nan"))
        (tmp_path / "b.hsc").write_bytes(bytes(raw))
        with pytest.raises(ValidationError):
            read_cube(tmp_path / "b.hsc")

    def test_deterministic_bytes(self, tmp_path):
        m = _mosaic()
        write_cube(m, tmp_path / "a.hsc")
        write_cube(m, tmp_path / "b.hsc")
        assert (tmp_path / "a.hsc").read_bytes() == (tmp_path / "b.hsc").read_bytes()

    @pytest.mark.parametrize("h,w,c", [(320, 320, 3), (5, 7, 11)])
    def test_file_size_arithmetic(self, tmp_path, h, w, c):
        m = HyperMosaic(np.zeros((h, w, c)), WavenumberAxis(1800, 900, c), sample_id="ab", patient_id="c")
        write_cube(m, tmp_path / "s.hsc")
        expected = HEADER_BYTES + h * w * c * 4 + h * w + (2 + 2) + (2 + 1)
        assert (tmp_path / "s.hsc").stat().st_size == expected

    def test_full_scale_payload(self):
        # 320x320x467 float32 payload without allocating it
        assert 320 * 320 * 467 * 4 == 191283200

    def test_tiny_header_fields(self, tmp_path):
        m = HyperMosaic(np.zeros((1, 1, 2)), WavenumberAxis(1800, 900, 2))
        write_cube(m, tmp_path / "t.hsc")
        back = read_cube(tmp_path / "t.hsc")
        assert (back.height, back.width, back.n_channels) == (1, 1, 2)

    @given(
        arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(2, 5)),
               elements=st.floats(-1e6, 1e6, width=32)),
        st.text(max_size=8),
    )
    def test_round_trip_property(self, tmp_path_factory, cube, sid):
        path = tmp_path_factory.mktemp("rt") / "x.hsc"
        m = HyperMosaic(cube, WavenumberAxis(1800, 900, cube.shape[2]), sample_id=sid)
        write_cube(m, path)
        assert read_cube(path).equals(m)


class TestContainers:
    def test_mosaic_is_read_only(self):
        m = _mosaic()
        with pytest.raises(ValueError):
            m.cube[0, 0, 0] = 1.0

    def test_channel_mismatch(self):
        with pytest.raises(ValidationError):
            HyperMosaic(np.zeros((2, 2, 3)), WavenumberAxis(1800, 900, 4))

    def test_spectrum_rejects_nan(self):
        with pytest.raises(ValidationError):
            Spectrum(WavenumberAxis(1800, 900, 2), [0.0, np.nan])

    def test_library_needs_two_rows(self):
        ax = WavenumberAxis(1800, 900, 3)
        with pytest.raises(ValidationError):
            ReferenceLibrary(np.ones((1, 3)), np.ones((2, 3)), Spectrum(ax, np.ones(3)))

    def test_library_round_trip(self, tmp_path, desk_dataset):
        lib = desk_dataset.library
        lib.save(tmp_path / "lib.npz")
        back = ReferenceLibrary.load(tmp_path / "lib.npz")
        assert np.array_equal(back.paraffin_spectra, lib.paraffin_spectra)
        assert back.axis == lib.axis


class TestSynth:
    def test_disc_fraction(self):
        cfg = SynthConfig(n_samples=1, bio_points=64, raw_hi=2000.0, tissue_fraction=0.5)
        ds = synth_dataset(cfg, 0)
        assert abs(ds.tissue_masks[0].sum() - 2048) / 4096 <= 0.05
        assert abs(disc_mask(64, 64, 0.5).sum() - 2048) / 4096 <= 0.05

    def test_paraffin_brighter_in_paraffin_window(self, desk_dataset):
        m = desk_dataset.mosaics[0]
        idx = m.axis.window_indices(1480, 1450)
        band = m.cube[:, :, idx].mean(axis=2)
        assert band[desk_dataset.paraffin_masks[0]].mean() > band[desk_dataset.tissue_masks[0]].mean()

    def test_deterministic(self, tmp_path):
        cfg = SynthConfig(n_samples=2, bio_points=32, raw_hi=1900.0, height=16, width=16)
        a, b = synth_dataset(cfg, 5), synth_dataset(cfg, 5)
        for i, (x, y) in enumerate(zip(a.mosaics, b.mosaics)):
            write_cube(x, tmp_path / f"a{i}.hsc")
            write_cube(y, tmp_path / f"b{i}.hsc")
            assert (tmp_path / f"a{i}.hsc").read_bytes() == (tmp_path / f"b{i}.hsc").read_bytes()
        assert a.labels == b.labels

    def test_balanced_classes(self):
        ds = synth_dataset(SynthConfig(n_samples=12, n_classes=3, bio_points=32, raw_hi=1900.0,
                                       height=8, width=8), 0)
        subtypes = [r["subtype"] for r in ds.labels]
        assert sorted(set(subtypes)) == ["HER2", "LA", "LB"]
        assert all(subtypes.count(c) == 4 for c in set(subtypes))

    def test_library_on_biofingerprint(self, desk_dataset):
        ax = desk_dataset.library.axis
        assert (ax.start, ax.end, ax.n_points) == (1800.0, 900.0, 64)

    def test_rejects_bad_config(self):
        with pytest.raises(ConfigError):
            SynthConfig(tissue_fraction=1.5).validate()
        with pytest.raises(ConfigError):
            SynthConfig(n_classes=5).validate()
