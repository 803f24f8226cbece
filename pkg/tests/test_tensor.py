import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radekit.tensor import (
    FormatError,
    RadeTensor,
    RaProjection,
    SensorGeometry,
    TargetSpec,
    TruncatedFileError,
    decode_tensor,
    encode_tensor,
    load_tensor,
    memory_stats,
    project,
    save_tensor,
    synthesize,
)

from oracles import brute_force_projection


def random_tensor(rng, g):
    return RadeTensor(g, rng.random(g.shape, dtype=np.float32))


TINY = SensorGeometry(n_r=16, n_a=12, n_d=8, n_e=6)


class TestGeometry:
    def test_defaults(self):
        g = SensorGeometry()
        assert g.shape == (256, 107, 64, 37)
        assert g.n_de == 101
        assert g.n_a_pad == 112

    def test_bin_centers(self):
        g = SensorGeometry()
        assert g.range_of(0) == pytest.approx(0.5 * 118 / 256)
        assert g.azimuth_of(53) == pytest.approx(0.0)
        assert g.range_bin(g.range_of(17)) == pytest.approx(17)
        assert g.elevation_bin(g.elevation_of(5)) == pytest.approx(5)
        assert g.doppler_bin(g.doppler_of(40)) == pytest.approx(40)

    def test_monotone_centers(self):
        g = SensorGeometry()
        for f, n in ((g.range_of, g.n_r), (g.azimuth_of, g.n_a), (g.doppler_of, g.n_d), (g.elevation_of, g.n_e)):
            assert np.all(np.diff(f(np.arange(n))) > 0)

    @pytest.mark.parametrize("kw", [{"n_r": 0}, {"range_max": 0.0}, {"range_max": math.inf}, {"n_a": 2.5}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SensorGeometry(**kw)


class TestSynthesize:
    def test_peak_at_target_bins(self):
        g = SensorGeometry()
        r, a, d, e = 100, 40, 20, 10
        t = TargetSpec(float(g.range_of(r)), float(g.azimuth_of(a)), float(g.doppler_of(d)), float(g.elevation_of(e)))
        data = synthesize(g, [t]).data
        assert np.unravel_index(np.argmax(data), data.shape) == (r, a, d, e)
        assert data[r, a, d, e] == pytest.approx(1.0)

    def test_three_targets_argmax(self):
        g = TINY
        cells = [(2, 3, 1, 1), (8, 9, 5, 3), (13, 1, 2, 4)]
        targets = [
            TargetSpec(float(g.range_of(r)), float(g.azimuth_of(a)), float(g.doppler_of(d)), float(g.elevation_of(e)), amp)
            for (r, a, d, e), amp in zip(cells, (1.0, 0.8, 0.6))
        ]
        data = synthesize(g, targets, noise_floor=0.01, seed=3).data
        for r, a, d, e in cells:
            lo = [max(0, v - 1) for v in (r, a, d, e)]
            win = data[lo[0] : r + 2, lo[1] : a + 2, lo[2] : d + 2, lo[3] : e + 2]
            assert data[r, a, d, e] == win.max()

    def test_noise_bounds_and_seed(self):
        g = TINY
        a = synthesize(g, [], noise_floor=0.2, seed=7).data
        b = synthesize(g, [], noise_floor=0.2, seed=7).data
        c = synthesize(g, [], noise_floor=0.2, seed=8).data
        assert a.dtype == np.float32
        assert 0 <= a.min() and a.max() <= 0.2
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != c.tobytes()

    def test_zero_targets_zero_floor(self):
        assert not synthesize(TINY, []).data.any()

    def test_outside_fov(self):
        with pytest.raises(ValueError):
            synthesize(TINY, [TargetSpec(500.0, 0.0, 0.0, 0.0)])

    def test_bad_target(self):
        with pytest.raises(ValueError):
            TargetSpec(1.0, 0.0, 0.0, 0.0, amplitude=0.0)
        with pytest.raises(ValueError):
            TargetSpec(math.nan, 0.0, 0.0, 0.0)

    def test_rejects_negative_data(self):
        data = np.zeros(TINY.shape, np.float32)
        data[0, 0, 0, 0] = -1
        with pytest.raises(ValueError):
            RadeTensor(TINY, data)
        with pytest.raises(ValueError):
            RadeTensor(TINY, np.zeros(TINY.shape, np.float64))


class TestProject:
    def test_matches_brute_force(self, rng):
        for _ in range(5):
            t = random_tensor(rng, TINY)
            p = project(t)
            ref = brute_force_projection(t.data, TINY.n_d, TINY.n_e, TINY.n_a_pad)
            assert p.data.tobytes() == ref.tobytes()

    def test_layout(self, rng):
        p = project(random_tensor(rng, TINY))
        assert p.data.shape == (14, 16, 16)
        assert p.pad == 4 and p.n_a == 12
        assert not p.data[:, :, 12:].any()
        assert p.rad.shape[0] == 8 and p.rae.shape[0] == 6
        assert p.unpadded().shape == (14, 16, 12)

    def test_single_spike(self):
        data = np.zeros(TINY.shape, np.float32)
        data[3, 4, 5, 2] = 2.5
        p = project(RadeTensor(TINY, data))
        assert p.data[5, 3, 4] == 2.5 and p.data[8 + 2, 3, 4] == 2.5
        assert np.count_nonzero(p.data) == 2

    def test_padding_must_be_zero(self):
        bad = np.zeros((14, 16, 16), np.float32)
        bad[0, 0, 13] = 1
        with pytest.raises(ValueError):
            RaProjection(TINY, bad, 12, 4)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.1, 10.0))
    def test_monotone(self, seed, scale):
        rng = np.random.default_rng(seed)
        t = random_tensor(rng, TINY)
        bump = rng.random(TINY.shape, dtype=np.float32) * np.float32(scale)
        bigger = RadeTensor(TINY, t.data + bump)
        assert np.all(project(bigger).data >= project(t).data)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_permutation_invariance(self, seed):
        # permuting the reduced axis leaves the matching block untouched
        rng = np.random.default_rng(seed)
        t = random_tensor(rng, TINY)
        p = project(t)
        pe = project(RadeTensor(TINY, np.ascontiguousarray(t.data[:, :, :, rng.permutation(TINY.n_e)])))
        pd = project(RadeTensor(TINY, np.ascontiguousarray(t.data[:, :, rng.permutation(TINY.n_d), :])))
        assert np.array_equal(pe.rad, p.rad)
        assert np.array_equal(pd.rae, p.rae)

    def test_deterministic(self, rng):
        t = random_tensor(rng, TINY)
        assert project(t).data.tobytes() == project(t).data.tobytes()


class TestMemoryStats:
    def test_default_geometry(self):
        m = memory_stats(SensorGeometry(), 4)
        expected = 100 * (1 - 101 * 112 / (107 * 64 * 37))
        assert m.reduction_percent == pytest.approx(expected, abs=1e-9)
        assert m.reduction_percent >= 91.9
        assert m.full_bytes == 256 * 107 * 64 * 37 * 4
        assert m.projection_bytes == 101 * 256 * 112 * 4

    def test_width_independent(self):
        g = SensorGeometry()
        assert memory_stats(g, 4).reduction_percent == pytest.approx(memory_stats(g, 8).reduction_percent)
        assert memory_stats(g, 8).full_bytes == 2 * memory_stats(g, 4).full_bytes

    def test_negative_reduction_is_allowed(self):
        # 1x8x1x1 projects to 2x1x8: the projection is larger than the cube
        m = memory_stats(SensorGeometry(n_r=1, n_a=8, n_d=1, n_e=1), 4)
        assert m.reduction_percent == pytest.approx(-100.0)

    def test_bad_width(self):
        with pytest.raises(ValueError):
            memory_stats(SensorGeometry(), 2)


class TestContainer:
    def test_round_trip_tensor(self, rng, tmp_path):
        t = random_tensor(rng, TINY)
        save_tensor(tmp_path / "a.rdt", t)
        back = load_tensor(tmp_path / "a.rdt")
        assert isinstance(back, RadeTensor)
        assert back.geometry == TINY
        assert back.data.tobytes() == t.data.tobytes()

    def test_round_trip_projection(self, rng):
        p = project(random_tensor(rng, TINY))
        back = decode_tensor(encode_tensor(p))
        assert isinstance(back, RaProjection)
        assert (back.n_a, back.pad) == (12, 4)
        assert back.data.tobytes() == p.data.tobytes()

    def test_float64_projection(self, rng):
        p = project(random_tensor(rng, TINY))
        p64 = RaProjection(TINY, p.data.astype(np.float64), 12, 4)
        back = decode_tensor(encode_tensor(p64))
        assert back.data.dtype == np.float64
        assert np.array_equal(back.data, p64.data)

    def test_bad_magic(self, rng):
        buf = bytearray(encode_tensor(random_tensor(rng, TINY)))
        buf[0:8] = b"NOTRADE!"
        with pytest.raises(FormatError):
            decode_tensor(bytes(buf))

    @pytest.mark.parametrize("cut", [0, 5, 20, 60, 100, -1])
    def test_truncated(self, rng, cut):
        buf = encode_tensor(random_tensor(rng, TINY))
        with pytest.raises(TruncatedFileError):
            decode_tensor(buf[:cut])

    def test_trailing_bytes(self, rng):
        buf = encode_tensor(random_tensor(rng, TINY))
        with pytest.raises(FormatError):
            decode_tensor(buf + b"\0")

    def test_dimension_mismatch(self, rng):
        buf = bytearray(encode_tensor(random_tensor(rng, TINY)))
        buf[12:16] = (17).to_bytes(4, "little")
        with pytest.raises(FormatError):
            decode_tensor(bytes(buf))

    def test_little_endian_layout(self):
        data = np.zeros(TINY.shape, np.float32)
        data[0, 0, 0, 0] = 1.0
        buf = encode_tensor(RadeTensor(TINY, data))
        assert buf[:8] == b"RADETNSR"
        header = 8 + 4 + 16 + 1 + 72
        assert buf[header : header + 4] == np.float32(1.0).astype("<f4").tobytes()
