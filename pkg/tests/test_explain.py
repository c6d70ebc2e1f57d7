import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from ftir_carenet.carenet import CaReNetConfig, build_carenet
from ftir_carenet.exceptions import GraphError
from ftir_carenet.explain import (
    band_importance,
    bilinear_resize,
    channel_importance,
    grad_cam,
    path_contribution,
    write_channel_importance,
    write_heatmap,
)
from ftir_carenet.labels import get_schema
from ftir_carenet.spectra import WavenumberAxis

X_HAND = np.array([[1.0, -2.0], [3.0, -4.0]])


def hand_network(b=(1.0, 0.5), c=2.0, spectral_w=0.0):
    """2x2x1 input; spatial filters pick +x and -x at the kernel centre.

    fusion = relu(spectral_w * gs + b0 * gp0 + b1 * gp1), logit = c * fusion.
    """
    cfg = CaReNetConfig(input_shape=(2, 2, 1), spectral_filters=(1,), spatial_filters=(2,),
                        spectral_pool=(False,), spatial_pool=(False,), fusion_units=1)
    net = build_carenet(cfg, get_schema("type"))
    params = {k: np.zeros_like(v) for k, v in net.parameters().items()}
    params["spectral_conv1.kernel"][0, 0, 0, 0] = 1.0
    params["spatial_conv1.kernel"][1, 1, 0] = [1.0, -1.0]
    params["fusion_dense.kernel"][:, 0] = [spectral_w, *b]
    params["output.kernel"][0, 0] = c
    net.set_parameters(params)
    return net


class TestGradCam:
    def test_hand_computed_case(self):
        # alpha_k = c * b_k / 4, maps relu(x) and relu(-x):
        # cam = 0.5 * ([1, 0, 3, 0] + 0.5 * [0, 2, 0, 4]) = [0.5, 0.5, 1.5, 1.0], then / 1.5
        hm = grad_cam(hand_network(), X_HAND[:, :, None])
        assert np.max(np.abs(hm.values - np.array([[1 / 3, 1 / 3], [1.0, 2 / 3]]))) <= 1e-9
        assert hm.source_layer == "spatial_conv1" and hm.class_index == 0

    def test_single_map_proportional_to_relu(self):
        net = hand_network(b=(1.0, 0.0))
        x = np.array([[0.5, 2.0], [-1.0, 1.0]])
        hm = grad_cam(net, x[:, :, None])
        assert np.allclose(hm.values, np.maximum(x, 0) / 2.0, atol=1e-12)

    def test_negative_weights_kill_the_map(self):
        assert not grad_cam(hand_network(c=-1.0), X_HAND[:, :, None]).values.any()

    def test_range_and_size(self, rng):
        cfg = CaReNetConfig(input_shape=(8, 8, 3), spectral_filters=(2,), spatial_filters=(3, 4), fusion_units=4)
        net = build_carenet(cfg, get_schema("subtype"), seed=3)
        hm = grad_cam(net, rng.random((8, 8, 3)), class_index=2)
        assert hm.values.shape == (8, 8) and hm.source_layer == "spatial_conv2"
        assert hm.values.min() >= 0 and (hm.values.max() == 1.0 or not hm.values.any())

    def test_errors(self):
        net = hand_network()
        with pytest.raises(GraphError):
            grad_cam(net, X_HAND[:, :, None], layer="spectral_conv1")
        with pytest.raises(GraphError):
            grad_cam(net, X_HAND[:, :, None], layer="nope")
        with pytest.raises(GraphError):
            grad_cam(net, X_HAND[:, :, None], class_index=1)

    def test_bilinear_identity_and_constant(self):
        img = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(bilinear_resize(img, 2, 3), img)
        assert np.allclose(bilinear_resize(np.full((4, 4), 0.3), 32, 32), 0.3)

    def test_bilinear_half_pixel_centres(self):
        # 1x2 -> 1x4: output centres sit at -0.25, 0.25, 0.75, 1.25 in input pixels
        assert bilinear_resize(np.array([[0.0, 1.0]]), 1, 4).tolist() == [[0.0, 0.25, 0.75, 1.0]]


def _spectral_net(c=6, filters=4):
    cfg = CaReNetConfig(input_shape=(4, 4, c), spectral_filters=(filters,), spatial_filters=(2,), fusion_units=2)
    return build_carenet(cfg, get_schema("type"), seed=0)


def _set_first_kernel(net, kernel):
    params = net.parameters()
    params["spectral_conv1.kernel"] = kernel
    net.set_parameters(params)


class TestChannelImportance:
    def test_uniform_for_ones(self):
        net = _spectral_net()
        _set_first_kernel(net, np.ones((1, 1, 6, 4)))
        assert channel_importance(net).scores.tolist() == [4.0] * 6

    def test_single_channel_band(self):
        net = _spectral_net()
        k = np.zeros((1, 1, 6, 4))
        k[0, 0, 5] = [1.0, -2.0, 0.5, 0.0]
        _set_first_kernel(net, k)
        ci = channel_importance(net, top_n=3)
        assert ci.scores[5] == 3.5 and ci.top_bands == [(5.0, 5.0, 3.5)]

    def test_signed_alternative(self):
        net = _spectral_net()
        k = np.zeros((1, 1, 6, 4))
        k[0, 0, 2] = [1.0, -2.0, 0.5, 0.0]
        _set_first_kernel(net, k)
        assert channel_importance(net, signed=True).scores[2] == -0.5

    @settings(max_examples=25)
    @given(st.permutations(range(4)))
    def test_filter_permutation_invariance(self, perm):
        net = _spectral_net()
        base = channel_importance(net).scores
        _set_first_kernel(net, net.parameters()["spectral_conv1.kernel"][..., list(perm)])
        # equal up to the order of floating-point additions
        assert np.allclose(channel_importance(net).scores, base, rtol=1e-13, atol=0)

    def test_bands_are_contiguous_runs_sorted_by_score(self):
        axis = WavenumberAxis(1800.0, 1000.0, 5)
        ci = band_importance(np.array([0.0, 3.0, 2.0, 0.5, 6.0]), axis, top_n=3)
        assert ci.top_bands == [(1000.0, 1000.0, 6.0), (1600.0, 1400.0, 5.0)]

    def test_axis_length_mismatch(self):
        with pytest.raises(GraphError):
            channel_importance(_spectral_net(), axis=WavenumberAxis(1800.0, 900.0, 5))

    @given(st.lists(st.floats(0.0, 10.0), min_size=2, max_size=40), st.integers(1, 40))
    def test_bands_disjoint(self, scores, top_n):
        ci = band_importance(np.array(scores), top_n=top_n)
        spans = sorted((lo, hi) for hi, lo, _ in ci.top_bands)
        assert all(a[1] + 1 < b[0] for a, b in zip(spans, spans[1:]))
        assert sum(int(hi - lo) + 1 for hi, lo, _ in ci.top_bands) <= top_n


class TestPathContribution:
    def test_dead_spatial_path(self):
        net = hand_network(b=(0.0, 0.0), spectral_w=1.0)
        params = net.parameters()
        params["spatial_conv1.kernel"] = np.zeros_like(params["spatial_conv1.kernel"])
        net.set_parameters(params)
        assert path_contribution(net, [X_HAND[:, :, None] + 5.0]) == (1.0, 0.0)

    def test_symmetric_paths(self):
        cfg = CaReNetConfig(input_shape=(2, 2, 1), spectral_filters=(1,), spatial_filters=(1,),
                            spectral_pool=(False,), spatial_pool=(False,), fusion_units=2)
        net = build_carenet(cfg, get_schema("type"))
        params = {k: np.zeros_like(v) for k, v in net.parameters().items()}
        params["spectral_conv1.kernel"][0, 0, 0, 0] = 1.0
        params["spatial_conv1.kernel"][1, 1, 0, 0] = 1.0
        params["fusion_dense.kernel"][:] = [[0.7, -0.2], [0.7, -0.2]]
        net.set_parameters(params)
        s, p = path_contribution(net, [np.full((2, 2, 1), 2.0)])
        assert (s, p) == (0.5, 0.5)

    def test_sum_and_scale_invariance(self, rng):
        cfg = CaReNetConfig(input_shape=(6, 6, 4), spectral_filters=(3,), spatial_filters=(2, 3), fusion_units=4)
        net = build_carenet(cfg, get_schema("er"), seed=8)
        patches = list(rng.random((5, 6, 6, 4)))
        s, p = path_contribution(net, patches)
        assert 0 < s < 1 and abs(s + p - 1.0) <= 1e-12
        params = net.parameters()
        params["fusion_dense.kernel"] = 3.7 * params["fusion_dense.kernel"]
        net.set_parameters(params)
        assert path_contribution(net, patches)[0] == pytest.approx(s, abs=1e-12)


class TestWriters:
    def test_heatmap_png_and_csv(self, tmp_path):
        hm = grad_cam(hand_network(), X_HAND[:, :, None])
        write_heatmap(hm, tmp_path / "h.png", tmp_path / "h.csv", scale=4)
        img = Image.open(tmp_path / "h.png")
        assert img.size == (8, 8) and img.mode == "L" and img.getpixel((0, 4)) == 255
        assert np.allclose(np.loadtxt(tmp_path / "h.csv", delimiter=","), hm.values, atol=1e-9)

    def test_top_bands_table(self, tmp_path):
        ci = band_importance(np.array([0.0, 3.0, 2.0, 0.5, 6.0]), WavenumberAxis(1800.0, 1000.0, 5), top_n=3)
        write_channel_importance(ci, tmp_path / "ci.csv", tmp_path / "bands.csv")
        rows = list(csv.DictReader(open(tmp_path / "bands.csv")))
        assert [r["band_cm-1"] for r in rows] == ["1000-1000", "1600-1400"]
        assert len(list(csv.DictReader(open(tmp_path / "ci.csv")))) == 5
