import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semflow.binio import FormatError
from semflow.denseflow import FlowField
from semflow.featuremaps import (
    BUILTIN_CHANNELS, DEFAULT_SCALES, EXTERNAL_CHANNELS, FeatureMap, builtin_layer_maps,
    builtin_spatial_maps, builtin_temporal_maps, load_external_maps, map_size, orientation_channels,
    validate_scales, write_external_maps, write_map_file,
)

from conftest import texture


def test_external_channel_counts():
    assert EXTERNAL_CHANNELS == {"spa4": 512, "spa5": 512, "tem3": 256, "tem4": 512}


def test_map_sizes():
    assert [map_size(64, r) for r in DEFAULT_SCALES] == [64, 46, 32]
    assert map_size(64, 0.5, 1 / 16) == 2
    assert map_size(30, 1 / math.sqrt(2)) == math.ceil(30 / math.sqrt(2))


@pytest.mark.parametrize("bad", [(), (0.5,), (1.0, 1.0), (1.0, 0.7, 0.8), (1.0, 0.0)])
def test_scale_validation(bad):
    with pytest.raises(ValueError):
        validate_scales(bad)


def test_builtin_shapes():
    frames = [texture(i) for i in range(5)]
    flows = [FlowField.constant((64, 64), 1, 0)] * 4
    for layer, ch in BUILTIN_CHANNELS.items():
        maps = builtin_layer_maps(layer, frames, flows)
        assert [m.scale for m in maps] == list(DEFAULT_SCALES)
        for m in maps:
            n = 5 if m.stream == "spatial" else 4
            s = map_size(64, m.scale)
            assert m.data.shape == (n, ch, s, s)


def test_vertical_step_edge_energy():
    img = np.zeros((32, 32))
    img[:, 16:] = 1.0
    for bins, layer in ((8, "spa4"), (16, "spa5")):
        m = builtin_spatial_maps([img], (1.0,), bins, layer)[0].data[0]
        assert m[0].sum() == pytest.approx(32.0)  # 0.5 at two columns, every row
        assert m[1:].sum() == pytest.approx(0.0)
        flipped = builtin_spatial_maps([img.T], (1.0,), bins, layer)[0].data[0]
        assert flipped[bins // 4].sum() == pytest.approx(32.0)
        assert flipped.sum() == pytest.approx(32.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 2 * np.pi, exclude_max=True), st.floats(0.01, 5), st.sampled_from([8, 16]))
def test_soft_binning_conserves_magnitude(theta, mag, bins):
    gx = np.array([[mag * np.cos(theta)]])
    gy = np.array([[mag * np.sin(theta)]])
    h = orientation_channels(gx, gy, bins)[:, 0, 0]
    assert h.sum() == pytest.approx(mag)
    assert np.count_nonzero(h > 1e-12) <= 2
    # Centre of mass on the circle points along the gradient.
    nz = np.flatnonzero(h > 1e-12)
    if len(nz) == 2 and (nz[1] - nz[0]) == 1:
        pos = (nz[0] + h[nz[1]] / mag) * 2 * np.pi / bins
        assert math.isclose(pos % (2 * np.pi), theta % (2 * np.pi), abs_tol=1e-6)


@pytest.mark.parametrize("d", [1, 2, 4])
def test_spatial_maps_translation_covariant(d):
    img = texture(11, size=80)
    a = builtin_spatial_maps([img[:64, :64]], (1.0, 0.5), 8)
    b = builtin_spatial_maps([img[:64, d:64 + d]], (1.0, 0.5), 8)
    # Shifting content left by d shifts the scale-1 map left by d.
    assert np.allclose(a[0].data[0, :, 2:-2, d + 2:-2], b[0].data[0, :, 2:-2, 2:-2 - d])
    if d % 2 == 0:
        k = d // 2
        assert np.allclose(a[1].data[0, :, 2:-2, k + 2:-2], b[1].data[0, :, 2:-2, 2:-2 - k])


def test_temporal_sign_split_and_stride():
    flows = [FlowField.constant((16, 16), 2.0, -1.0), FlowField.constant((16, 16), -0.5, 0.25)]
    t3 = builtin_temporal_maps(flows, (1.0,), "tem3", 1)[0].data
    assert np.allclose(t3[0, :, 0, 0], [2, 0, 0, 1])
    assert np.allclose(t3[1, :, 0, 0], [0, 0.5, 0.25, 0])
    t4 = builtin_temporal_maps(flows, (1.0,), "tem4", 2)[0].data
    assert np.allclose(t4[0, :, 0, 0], [1.5, 0, 0, 0.75])
    assert np.allclose(t4[1, :, 0, 0], [0, 1.0, 0.5, 0])  # last field replicated
    half = builtin_temporal_maps(flows, (1.0, 0.5), "tem3", 1)[1].data
    assert np.allclose(half[0, :, 0, 0], [2, 0, 0, 1])  # values stay in full-res px


def _ext(layer, n, size=4, sf=1.0, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureMap(layer, 1.0, rng.normal(size=(n, EXTERNAL_CHANNELS[layer], size, size)).astype(np.float32), sf)


def test_external_roundtrip(tmp_path):
    m = _ext("spa5", 16, size=4, sf=1 / 16)
    write_external_maps(m, tmp_path / "spa5")
    got = load_external_maps(tmp_path / "spa5", "spa5", 1.0, n_frames=16, frame_shape=(64, 64))
    assert np.array_equal(got.data, m.data)
    assert got.stride_factor == pytest.approx(1 / 16)


def test_external_temporal_frame_rule(tmp_path):
    write_external_maps(_ext("tem3", 15), tmp_path / "t")
    assert load_external_maps(tmp_path / "t", "tem3", 1.0, n_frames=16).frames == 15
    write_external_maps(_ext("spa4", 15), tmp_path / "s")
    with pytest.raises(FormatError, match="15 map frames"):
        load_external_maps(tmp_path / "s", "spa4", 1.0, n_frames=16)


def test_external_errors(tmp_path):
    d = tmp_path / "m"
    d.mkdir()
    write_map_file(d / "map_000000.sfm", "spa4", np.zeros((1, 500, 2, 2)))
    with pytest.raises(FormatError, match="512 channels"):
        load_external_maps(d, "spa4", 1.0)
    write_map_file(d / "map_000000.sfm", "spa4", np.zeros((1, 512, 2, 2)))
    write_map_file(d / "map_000002.sfm", "spa4", np.zeros((1, 512, 2, 2)))
    with pytest.raises(FormatError, match="missing map frames"):
        load_external_maps(d, "spa4", 1.0)
    (d / "map_000002.sfm").unlink()
    with pytest.raises(FormatError, match="header layer"):
        load_external_maps(d, "spa5", 1.0)
    with pytest.raises(FormatError, match="map size"):
        load_external_maps(d, "spa4", 1.0, frame_shape=(64, 64))
    with pytest.raises(FormatError, match="missing map directory"):
        load_external_maps(tmp_path / "nope", "spa4", 1.0)
    with pytest.raises(ValueError):
        load_external_maps(d, "conv9", 1.0)
    (d / "map_000000.sfm").write_bytes(b"SFM1|spa4|2|2|512|1|1.0\n" + b"\0" * 10)
    with pytest.raises(FormatError, match="truncated"):
        load_external_maps(d, "spa4", 1.0)
