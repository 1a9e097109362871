import numpy as np
import pytest

from conftest import random_rect
from croprank.geometry import (CropCandidate, CropRect, GeometryError,
                               PANO_STRIDE_FRAC, PROTOCOL_GRID,
                               PROTOCOL_SCALES, SamplerConfig,
                               default_pano_sizes, pano_candidates, perturb,
                               protocol_windows, round_half_away,
                               sample_crops, sliding_windows)


class TestRounding:
    def test_half_away_from_zero(self):
        cases = {0.5: 1, 1.5: 2, 2.5: 3, -0.5: -1, -1.5: -2, -2.5: -3,
                 0.49: 0, -0.49: 0, 3.0: 3, -3.0: -3}
        for v, expected in cases.items():
            assert round_half_away(v) == expected, v

    def test_integers_fixed(self):
        for v in range(-5, 6):
            assert round_half_away(float(v)) == v


class TestCropRect:
    def test_derived_coordinates(self):
        r = CropRect(3, 4, 10, 20)
        assert (r.x2, r.y2, r.area) == (13, 24, 200)
        assert r.as_tuple() == (3, 4, 10, 20)

    @pytest.mark.parametrize("w,h", [(0, 5), (5, 0), (-1, 5), (5, -2)])
    def test_nonpositive_sides_rejected(self, w, h):
        with pytest.raises(GeometryError):
            CropRect(0, 0, w, h)

    def test_inside(self):
        assert CropRect(0, 0, 10, 10).inside((10, 10))
        assert not CropRect(1, 0, 10, 10).inside((10, 10))
        assert not CropRect(-1, 0, 5, 5).inside((10, 10))

    def test_candidate_kind_validation(self):
        r = CropRect(0, 0, 4, 4)
        with pytest.raises(GeometryError):
            CropCandidate(r, "weird", 0.5)
        with pytest.raises(GeometryError):
            CropCandidate(r, "border", 0.5, 4)


class TestPerturb:
    DIMS = (400, 300)

    def test_zero_frac_is_identity(self, rng):
        r = CropRect(40, 30, 120, 90)
        assert perturb(r, self.DIMS, 0.0, rng) == r

    def test_stays_inside_and_big_enough(self, rng):
        for _ in range(300):
            base = CropRect(*random_rect(rng, self.DIMS, min_side=20))
            out = perturb(base, self.DIMS, 0.05, rng)
            assert out.inside(self.DIMS)
            assert out.w >= 16 and out.h >= 16

    def test_shift_and_scale_bounded(self, rng):
        frac = 0.05
        for _ in range(300):
            base = CropRect(100, 80, 200, 150)
            out = perturb(base, self.DIMS, frac, rng)
            # rounding adds at most 0.5 px on top of the drawn jitter
            assert abs(out.x - base.x) <= frac * base.w + 0.5
            assert abs(out.y - base.y) <= frac * base.h + 0.5
            assert abs(out.w - base.w) <= frac * base.w + 0.5
            assert abs(out.h - base.h) <= frac * base.h + 0.5

    def test_shared_scale_factor(self, rng):
        """Width and height are rescaled by one factor, not two."""
        frac = 0.2
        for _ in range(200):
            base = CropRect(50, 50, 200, 100)
            out = perturb(base, self.DIMS, frac, rng)
            # out.w = round(200 f), out.h = round(100 f) for a single f
            assert abs(out.w / base.w - out.h / base.h) <= \
                0.5 / base.w + 0.5 / base.h + 1e-12

    def test_outside_rect_rejected(self, rng):
        with pytest.raises(GeometryError):
            perturb(CropRect(390, 0, 20, 20), self.DIMS, 0.05, rng)

    def test_deterministic_for_seed(self):
        base = CropRect(30, 40, 100, 80)
        a = perturb(base, self.DIMS, 0.05, np.random.default_rng(7))
        b = perturb(base, self.DIMS, 0.05, np.random.default_rng(7))
        assert a == b


class TestSampleCrops:
    def test_record_count_matches_formula(self):
        cfg = SamplerConfig(seed=0)
        crops = sample_crops((640, 480), cfg)
        assert len(crops) == cfg.crops_per_image == 14
        assert len(crops) == len(cfg.scales) * (4 + cfg.num_square)

    def test_corpus_scale_pair_count(self):
        # 14 pairs per image scales to 294,630 over a 21,045-image corpus
        assert 21045 * SamplerConfig(seed=0).crops_per_image == 294630

    def test_all_inside_and_min_side(self, rng):
        for _ in range(20):
            W = int(rng.integers(100, 900))
            H = int(rng.integers(100, 900))
            for cand in sample_crops((W, H), SamplerConfig(seed=int(rng.integers(1 << 30)))):
                assert cand.rect.inside((W, H))
                assert cand.rect.w >= 16 and cand.rect.h >= 16

    def test_unperturbed_border_crops_sit_at_corners(self):
        cfg = SamplerConfig(scales=(0.5,), num_square=1, perturb_frac=0.0, seed=0)
        crops = [c for c in sample_crops((401, 299), cfg) if c.kind == "border"]
        w, h = round_half_away(0.5 * 401), round_half_away(0.5 * 299)
        expected = [(0, 0), (401 - w, 0), (0, 299 - h), (401 - w, 299 - h)]
        assert [c.rect.as_tuple() for c in crops] == \
            [(x, y, w, h) for x, y in expected]

    def test_unperturbed_square_crops_walk_long_axis(self):
        cfg = SamplerConfig(scales=(0.6,), num_square=3, perturb_frac=0.0, seed=0)
        crops = [c for c in sample_crops((800, 400), cfg) if c.kind == "square"]
        side = round_half_away(0.6 * 400)
        assert all(c.rect.w == side and c.rect.h == side for c in crops)
        centers = [c.rect.x + side / 2 for c in crops]
        targets = [800 * (k + 1) / 4 for k in range(3)]
        for got, want in zip(centers, targets):
            assert abs(got - want) <= 0.5
        # vertical placement is centered on the short axis
        assert all(abs(c.rect.y + side / 2 - 200) <= 0.5 for c in crops)

    def test_emission_order_and_kinds(self):
        cfg = SamplerConfig(seed=4)
        kinds = [(c.kind, c.scale, c.corner_or_slot)
                 for c in sample_crops((500, 350), cfg)]
        expected = []
        for s in cfg.scales:
            expected.extend(("border", s, i) for i in range(4))
            expected.extend(("square", s, k) for k in range(3))
        assert kinds == expected

    def test_deterministic_by_seed(self):
        a = sample_crops((640, 480), SamplerConfig(seed=12))
        b = sample_crops((640, 480), SamplerConfig(seed=12))
        c = sample_crops((640, 480), SamplerConfig(seed=13))
        assert a == b
        assert a != c

    def test_small_image_rejected(self):
        with pytest.raises(GeometryError):
            sample_crops((31, 500), SamplerConfig(seed=0))

    def test_scale_window_below_minimum_rejected(self):
        # 0.2 * 40 = 8 px square side < 16
        with pytest.raises(GeometryError):
            sample_crops((40, 600), SamplerConfig(scales=(0.2,), seed=0))

    def test_config_validation(self):
        with pytest.raises(GeometryError):
            SamplerConfig(scales=(1.2,))
        with pytest.raises(GeometryError):
            SamplerConfig(scales=())
        with pytest.raises(GeometryError):
            SamplerConfig(num_square=0)
        with pytest.raises(GeometryError):
            SamplerConfig(perturb_frac=0.5)


class TestSlidingWindows:
    def test_protocol_count(self):
        assert len(protocol_windows((640, 480))) == 125

    def test_origin_lattice_matches_formula(self):
        W, H = 641, 353
        for s in PROTOCOL_SCALES:
            wins = sliding_windows((W, H), [s], PROTOCOL_GRID)
            w = round_half_away(s * W)
            h = round_half_away(s * H)
            xs = [round_half_away(i * (W - w) / 4) for i in range(5)]
            ys = [round_half_away(j * (H - h) / 4) for j in range(5)]
            expected = [(x, y, w, h) for y in ys for x in xs]
            assert [r.as_tuple() for r in wins] == expected

    def test_corners_included(self):
        W, H = 500, 400
        wins = sliding_windows((W, H), [0.7], (5, 5))
        w, h = wins[0].w, wins[0].h
        tuples = {r.as_tuple() for r in wins}
        assert (0, 0, w, h) in tuples
        assert (W - w, H - h, w, h) in tuples

    def test_all_windows_inside(self, rng):
        for _ in range(25):
            W = int(rng.integers(64, 1200))
            H = int(rng.integers(64, 1200))
            for r in protocol_windows((W, H)):
                assert r.inside((W, H))

    def test_scale_one_single_window_per_cell(self):
        wins = sliding_windows((300, 200), [1.0], (5, 5))
        assert all(r.as_tuple() == (0, 0, 300, 200) for r in wins)

    def test_bad_inputs(self):
        with pytest.raises(GeometryError):
            sliding_windows((300, 200), [], (5, 5))
        with pytest.raises(GeometryError):
            sliding_windows((300, 200), [1.5], (5, 5))
        with pytest.raises(GeometryError):
            sliding_windows((300, 200), [0.5], (0, 5))


class TestPanoCandidates:
    def test_reference_panorama_lattice_count(self):
        dims = (6000, 1200)
        cands = pano_candidates(dims, default_pano_sizes(dims),
                                PANO_STRIDE_FRAC)
        assert len(cands) == 2112
        assert all(r.inside(dims) for r in cands)

    def test_no_duplicates(self):
        dims = (2000, 800)
        cands = pano_candidates(dims, default_pano_sizes(dims),
                                PANO_STRIDE_FRAC)
        assert len({r.as_tuple() for r in cands}) == len(cands)

    def test_count_matches_independent_enumeration(self):
        dims = (3000, 900)
        sizes = default_pano_sizes(dims)
        total = {}
        for (w, h) in sizes:
            sx = max(1, round_half_away(PANO_STRIDE_FRAC * w))
            sy = max(1, round_half_away(PANO_STRIDE_FRAC * h))
            for y in range(0, dims[1] - h + 1, sy):
                for x in range(0, dims[0] - w + 1, sx):
                    total[(x, y, w, h)] = None
        assert len(pano_candidates(dims, sizes, PANO_STRIDE_FRAC)) == len(total)

    def test_single_candidate_when_window_fills_image(self):
        assert pano_candidates((640, 480), [(640, 480)], 0.125) == \
            [CropRect(0, 0, 640, 480)]

    def test_oversized_window_rejected(self):
        with pytest.raises(GeometryError):
            pano_candidates((640, 480), [(641, 480)], 0.125)
