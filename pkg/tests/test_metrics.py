import math

import numpy as np
import pytest

from retouchlab import metrics as M
from retouchlab.errors import InvalidInputError, ShapeError


def lab_reference_scalar(r, g, b):
    """Independent per-pixel conversion following the published constants."""
    def lin(s):
        return s / 12.92 if s <= 0.04045 else ((s + 0.055) / 1.055) ** 2.4

    rl, gl, bl = lin(r), lin(g), lin(b)
    x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl
    y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl
    z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl

    def f(t):
        return t ** (1 / 3) if t > (6 / 29) ** 3 else t / (3 * (6 / 29) ** 2) + 4 / 29

    fx, fy, fz = f(x / 0.95047), f(y / 1.0), f(z / 1.08883)
    return 116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)


class TestPsnr:
    def test_identical_capped(self, rng):
        a = rng.uniform(0, 1, size=(3, 8, 8))
        assert M.psnr(a, a) == 99.0

    def test_mse_001_gives_20db(self):
        a = np.zeros((3, 10, 10))
        b = np.full((3, 10, 10), 0.1)
        assert M.psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_mse_quarter(self):
        a = np.zeros((1, 4, 4))
        b = np.full((1, 4, 4), 0.5)
        assert M.psnr(a, b) == pytest.approx(6.020599913279624, abs=1e-9)

    def test_symmetry(self, rng):
        a = rng.uniform(0, 1, size=(3, 6, 6))
        b = rng.uniform(0, 1, size=(3, 6, 6))
        assert M.psnr(a, b) == M.psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            M.psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


class TestPsnrHc:
    def test_identical_capped(self, rng):
        a = rng.uniform(0, 1, size=(3, 8, 8))
        assert M.psnr_hc(a, a, np.ones((8, 8))) == 99.0

    def test_background_error_downweighted(self, rng):
        a = rng.uniform(0.2, 0.8, size=(3, 8, 8))
        b = a.copy()
        mask = np.zeros((8, 8))
        mask[:4] = 1.0
        b[:, 4:] = np.clip(b[:, 4:] + 0.2, 0, 1)   # error only off-mask
        assert M.psnr_hc(a, b, mask) > M.psnr(a, b)

    def test_single_pixel_hand_case(self):
        a = np.zeros((1, 1, 2))
        b = np.array([[[0.1, 0.2]]])
        mask = np.array([[1.0, 0.0]])
        # weighted MSE = (1*0.1^2 + 0.25*0.2^2) / (1 + 0.25)
        expect = -10 * math.log10((0.01 + 0.25 * 0.04) / 1.25)
        assert M.psnr_hc(a, b, mask) == pytest.approx(expect, abs=1e-12)

    def test_unit_weights_equal_plain(self, rng):
        a = rng.uniform(0, 1, size=(3, 8, 8))
        b = rng.uniform(0, 1, size=(3, 8, 8))
        assert M.psnr_hc(a, b, np.ones((8, 8)), w_background=1.0) == \
            pytest.approx(M.psnr(a, b), abs=1e-12)


class TestLab:
    def test_white(self):
        lab = M.srgb_to_lab(np.ones((3, 1, 1)))[:, 0, 0]
        assert lab[0] == pytest.approx(100.0, abs=0.01)
        assert abs(lab[1]) <= 0.01 and abs(lab[2]) <= 0.01

    def test_black(self):
        lab = M.srgb_to_lab(np.zeros((3, 1, 1)))[:, 0, 0]
        np.testing.assert_allclose(lab, 0.0, atol=1e-9)

    def test_mid_gray_neutral(self):
        lab = M.srgb_to_lab(np.full((3, 1, 1), 0.5))[:, 0, 0]
        ref = lab_reference_scalar(0.5, 0.5, 0.5)
        assert lab[0] == pytest.approx(ref[0], abs=0.01)
        assert abs(lab[1]) <= 0.01 and abs(lab[2]) <= 0.01

    @pytest.mark.parametrize("rgb", [(0.2, 0.5, 0.9), (0.04, 0.5, 0.01),
                                     (1.0, 0.0, 0.0)])
    def test_matches_scalar_reference(self, rgb):
        lab = M.srgb_to_lab(np.array(rgb).reshape(3, 1, 1))[:, 0, 0]
        ref = lab_reference_scalar(*rgb)
        np.testing.assert_allclose(lab, ref, atol=1e-9)


class TestDeltaE:
    def test_identical_zero(self, rng):
        a = rng.uniform(0, 1, size=(3, 5, 5))
        assert M.delta_e_ab(a, a) == 0.0

    def test_white_black_100(self):
        white = np.ones((3, 4, 4))
        black = np.zeros((3, 4, 4))
        assert M.delta_e_ab(white, black) == pytest.approx(100.0, abs=0.05)

    def test_unit_weights_equal_unweighted(self, rng):
        a = rng.uniform(0, 1, size=(3, 6, 6))
        b = rng.uniform(0, 1, size=(3, 6, 6))
        assert M.delta_e_ab(a, b, mask=np.ones((6, 6)), w_background=1.0) == \
            M.delta_e_ab(a, b)

    def test_background_error_scaled_by_half(self, rng):
        a = rng.uniform(0.2, 0.8, size=(3, 6, 6))
        b = a.copy()
        b[:, 3:] = np.clip(b[:, 3:] + 0.15, 0, 1)   # error only in background
        mask = np.zeros((6, 6))
        mask[:3] = 1.0
        assert M.delta_e_ab(a, b, mask=mask) == \
            pytest.approx(0.5 * M.delta_e_ab(a, b), abs=1e-9)

    def test_symmetry(self, rng):
        a = rng.uniform(0, 1, size=(3, 6, 6))
        b = rng.uniform(0, 1, size=(3, 6, 6))
        assert M.delta_e_ab(a, b) == M.delta_e_ab(b, a)


class TestSsim:
    def test_self_similarity_one(self, rng):
        a = rng.uniform(0, 1, size=(3, 32, 32))
        assert M.ssim(a, a) == pytest.approx(1.0, abs=1e-6)
        assert M.ms_ssim(a, a) == pytest.approx(1.0, abs=1e-6)

    def test_constant_pair_closed_form(self):
        a = np.full((3, 24, 24), 0.2)
        b = np.full((3, 24, 24), 0.7)
        expect = (2 * 0.2 * 0.7 + 0.01 ** 2) / (0.2 ** 2 + 0.7 ** 2 + 0.01 ** 2)
        assert M.ssim(a, b) == pytest.approx(expect, abs=1e-9)

    def test_bounded(self, rng):
        for _ in range(5):
            a = rng.uniform(0, 1, size=(3, 16, 16))
            b = rng.uniform(0, 1, size=(3, 16, 16))
            assert -1.0 <= M.ssim(a, b) <= 1.0

    def test_symmetry(self, rng):
        a = rng.uniform(0, 1, size=(3, 16, 16))
        b = rng.uniform(0, 1, size=(3, 16, 16))
        assert abs(M.ssim(a, b) - M.ssim(b, a)) <= 1e-9

    def test_ms_ssim_small_image_window_fallback(self, rng):
        a = rng.uniform(0, 1, size=(3, 64, 64))
        b = np.clip(a + rng.normal(0, 0.05, size=a.shape), 0, 1)
        v = M.ms_ssim(a, b)
        assert 0.0 <= v <= 1.0


class TestResiduals:
    def test_identity_zero_map(self, rng):
        a = rng.uniform(0, 1, size=(3, 8, 8))
        assert M.residual_map(a, a).sum() == 0.0

    def test_energy_of_ones_is_one(self):
        res = np.ones((1, 8, 8))
        mask = np.zeros((8, 8))
        mask[2:5, 2:5] = 1
        assert M.residual_energy(res, mask) == 1.0

    def test_hand_2x2(self):
        inp = np.zeros((3, 2, 2))
        out = np.zeros((3, 2, 2))
        out[:, 0, 0] = [0.3, 0.0, 0.0]
        out[:, 1, 1] = [0.3, 0.3, 0.3]
        rmap = M.residual_map(inp, out)
        np.testing.assert_allclose(rmap[0], [[0.1, 0.0], [0.0, 0.3]], atol=1e-12)
        assert M.residual_energy(rmap, np.eye(2)) == pytest.approx(0.2)

    def test_empty_mask_rejected(self):
        with pytest.raises(InvalidInputError):
            M.residual_energy(np.ones((1, 4, 4)), np.zeros((4, 4)))


class TestPreferenceRate:
    def test_definition(self):
        rates = M.preference_rate([M.PairwiseRecord("A", "B", 36, 64)])
        assert rates["A"] == pytest.approx(0.36)

    def test_even_split(self):
        rates = M.preference_rate([M.PairwiseRecord("A", "B", 50, 50)])
        assert rates == {"A": 0.5, "B": 0.5}

    def test_conservation_over_five_methods(self, rng):
        methods = ["m1", "m2", "m3", "m4", "m5"]
        records = []
        for i in range(5):
            for j in range(i + 1, 5):
                wins_a = int(rng.integers(0, 20))
                wins_b = int(rng.integers(1, 20))
                records.append(M.PairwiseRecord(methods[i], methods[j],
                                                wins_a, wins_b))
        rates = M.preference_rate(records)
        assert sum(rates.values()) == pytest.approx(1.0, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            M.preference_rate([])


class TestBtScores:
    def test_three_vs_one_ratio(self):
        s = M.bt_scores([M.PairwiseRecord("A", "B", 3, 1)], smoothing=0.0)
        assert s["A"] / s["B"] == pytest.approx(3.0, abs=1e-6)
        assert min(s.values()) == pytest.approx(1.0)

    def test_all_ties_equal_scores(self):
        recs = [M.PairwiseRecord("A", "B", 4, 4),
                M.PairwiseRecord("B", "C", 4, 4),
                M.PairwiseRecord("A", "C", 4, 4)]
        s = M.bt_scores(recs)
        assert max(s.values()) == pytest.approx(min(s.values()), abs=1e-9)

    def test_two_method_fixed_point(self):
        s = M.bt_scores([M.PairwiseRecord("A", "B", 7, 3)], smoothing=0.0)
        assert s["A"] / (s["A"] + s["B"]) == pytest.approx(0.7, abs=1e-6)

    def test_relabeling_invariance(self):
        recs = [M.PairwiseRecord("x", "y", 5, 2),
                M.PairwiseRecord("y", "z", 3, 4),
                M.PairwiseRecord("x", "z", 1, 6)]
        s1 = M.bt_scores(recs)
        renamed = [M.PairwiseRecord("p" + r.method_a, "p" + r.method_b,
                                    r.wins_a, r.wins_b) for r in recs]
        s2 = M.bt_scores(renamed)
        for m in s1:
            assert s1[m] == pytest.approx(s2["p" + m], rel=1e-9)

    def test_ranking_matches_win_rate_two_methods(self):
        s = M.bt_scores([M.PairwiseRecord("strong", "weak", 9, 1)])
        assert s["strong"] > s["weak"]

    def test_shutout_finite_with_smoothing(self):
        s = M.bt_scores([M.PairwiseRecord("A", "B", 10, 0)], smoothing=0.1)
        assert np.isfinite(s["A"]) and s["A"] > s["B"]

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            M.bt_scores([])


class TestCsvIo:
    def test_pairwise_csv_round_trip(self, tmp_path):
        path = tmp_path / "pairs.csv"
        path.write_text("method_a,method_b,wins_a,wins_b\nours,base,3,1\n",
                        encoding="utf-8")
        recs = M.read_pairwise_csv(path)
        assert len(recs) == 1 and recs[0].wins_a == 3

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n", encoding="utf-8")
        with pytest.raises(InvalidInputError):
            M.read_pairwise_csv(path)

    def test_report_writing(self, tmp_path, rng):
        rep = M.MetricsReport()
        rep.add("img1", {"psnr": 30.0, "ssim": 0.9})
        rep.add("img2", {"psnr": 32.0, "ssim": 0.95})
        rep.write(tmp_path / "r.json", tmp_path / "r.csv")
        import json
        data = json.loads((tmp_path / "r.json").read_text())
        assert data["mean"]["psnr"] == pytest.approx(31.0)
        lines = (tmp_path / "r.csv").read_text().strip().splitlines()
        assert lines[0] == "id,psnr,ssim"
        assert lines[-1].startswith("mean,")
