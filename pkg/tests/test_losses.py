import math

import numpy as np
import pytest
import torch
from skimage.metrics import structural_similarity

from silicon import losses
from silicon.gradcheck import check_full
from silicon.losses import DiscLabels, LossReport, LossWeights
from silicon.priors import DiagGaussian, TruncatedNormal, TruncNormMixture

AB = DiscLabels(a=1.0, b=0.0, c=1.0)


class TestLabelTypes:
    def test_equal_labels_rejected(self):
        with pytest.raises(ValueError):
            DiscLabels(a=0.5, b=0.5)

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            LossWeights(0.3, 0.3)
        with pytest.raises(ValueError):
            LossWeights(1.5, -0.5)


class TestDiscLoss:
    def test_perfect_discriminator(self):
        assert float(losses.disc_loss([1.0, 1.0], [0.0], AB)) == 0.0

    def test_maximally_fooled(self):
        assert float(losses.disc_loss([0.0], [1.0], AB)) == 2.0

    def test_midpoint(self):
        assert float(losses.disc_loss([0.5], [0.5], AB)) == pytest.approx(0.5)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            losses.disc_loss([], [0.0], AB)

    def test_nonnegative_and_zero_iff_on_target(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            real = rng.normal(size=4)
            fake = rng.normal(size=3)
            v = float(losses.disc_loss(real, fake, AB))
            assert v >= 0.0
            on_target = np.allclose(real, AB.a) and np.allclose(fake, AB.b)
            assert (v == 0.0) == on_target


class TestGenLoss:
    def test_on_target(self):
        assert float(losses.gen_loss([1.0, 1.0], AB)) == 0.0

    def test_single(self):
        assert float(losses.gen_loss([0.0], AB)) == 1.0

    def test_pair(self):
        assert float(losses.gen_loss([0.25, 0.75], AB)) == pytest.approx(0.3125)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            losses.gen_loss([], AB)


class TestReconstructionNll:
    def test_identical(self):
        x = np.random.default_rng(1).uniform(size=(8, 8, 3))
        assert float(losses.reconstruction_nll(x, x)) == 0.0

    def test_unit_gap(self):
        x = np.zeros((4, 4, 3))
        assert float(losses.reconstruction_nll(x, np.ones_like(x))) == 1.0

    def test_constant_offset(self):
        x = np.random.default_rng(2).uniform(0, 0.4, size=(5, 5, 3))
        assert float(losses.reconstruction_nll(x, x + 0.5)) == pytest.approx(0.5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            losses.reconstruction_nll(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))

    def test_l2_variant(self):
        x = np.zeros((4, 4, 3))
        assert float(losses.reconstruction_nll(x, x + 0.5, kind="l2")) == pytest.approx(0.25)


def skimage_ssim(x, y):
    return structural_similarity(
        x, y, win_size=7, data_range=1.0, gaussian_weights=False,
        channel_axis=-1 if x.ndim == 3 else None,
    )


class TestSsim:
    def test_identity_is_one(self):
        x = np.random.default_rng(3).uniform(size=(12, 12, 3))
        assert float(losses.ssim(x, x)) == 1.0

    def test_constant_images(self):
        x = np.zeros((9, 9, 3))
        y = np.ones((9, 9, 3))
        c1 = (0.01) ** 2
        assert float(losses.ssim(x, y)) == pytest.approx(c1 / (1 + c1), rel=1e-9)
        assert float(losses.ssim(x, y)) == pytest.approx(9.999e-5, abs=1e-8)

    def test_matches_reference_on_random_pairs(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            h = int(rng.integers(8, 24))
            w = int(rng.integers(8, 24))
            x = rng.uniform(size=(h, w, 3))
            y = np.clip(x + rng.normal(scale=rng.uniform(0.01, 0.5), size=x.shape), 0, 1)
            assert float(losses.ssim(x, y)) == pytest.approx(skimage_ssim(x, y), abs=1e-6)

    def test_grayscale_matches_reference(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(size=(16, 16))
        y = rng.uniform(size=(16, 16))
        assert float(losses.ssim(x, y)) == pytest.approx(skimage_ssim(x, y), abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(size=(10, 10, 3))
        y = rng.uniform(size=(10, 10, 3))
        assert abs(float(losses.ssim(x, y)) - float(losses.ssim(y, x))) < 1e-12

    def test_window_larger_than_image(self):
        with pytest.raises(ValueError, match="window"):
            losses.ssim(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)))

    def test_even_window_rejected(self):
        with pytest.raises(ValueError):
            losses.ssim(np.zeros((10, 10, 3)), np.zeros((10, 10, 3)), window=6)


class TestSsimLoss:
    def test_zero_at_identity(self):
        x = np.random.default_rng(7).uniform(size=(10, 10, 3))
        assert float(losses.ssim_loss(x, x)) == 0.0

    def test_constant_gap(self):
        x = np.zeros((9, 9, 3))
        c1 = 0.01**2
        assert float(losses.ssim_loss(x, np.ones_like(x))) == pytest.approx(1 - c1 / (1 + c1), abs=1e-8)

    def test_monotone_in_noise(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(0.2, 0.8, size=(16, 16, 3))
        noise = rng.normal(size=x.shape)
        vals = [float(losses.ssim_loss(x, np.clip(x + a * noise, 0, 1))) for a in (0.05, 0.15, 0.45)]
        assert vals[0] < vals[1] < vals[2]


def near_std_prior():
    return TruncNormMixture((TruncatedNormal(0.0, 1.0, -50.0, 50.0),), (1.0,))


class TestRecObjective:
    def test_identity_configuration(self):
        x = np.random.default_rng(9).uniform(size=(8, 8, 3))
        q_zc = DiagGaussian(torch.zeros(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64))
        q_yzw = DiagGaussian(torch.zeros(6, dtype=torch.float64), torch.zeros(6, dtype=torch.float64))
        gen = torch.Generator().manual_seed(0)
        terms = losses.rec_objective(x, x, q_zc, q_yzw, near_std_prior(), 4096, gen)
        assert float(terms["l_r"]) == 0.0
        assert float(terms["l_ssim"]) == 0.0
        assert float(terms["r2"]) == 0.0
        assert abs(float(terms["r1"])) < 0.05
        expect_entropy = 10 * 0.5 * (1 + math.log(2 * math.pi))
        assert float(terms["entropy"]) == pytest.approx(expect_entropy, abs=1e-9)
        assert float(terms["j_rec"]) == pytest.approx(
            -expect_entropy + float(terms["r1"]), abs=1e-9
        )

    def test_mean_shift_quadruples_r1(self):
        x = np.random.default_rng(10).uniform(size=(8, 8, 3))
        gen = torch.Generator().manual_seed(1)
        noise = torch.randn((20_000, 1), generator=gen, dtype=torch.float64)
        q_yzw = DiagGaussian(torch.zeros(2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64))
        r1 = []
        for mu in (0.5, 1.0):
            q_zc = DiagGaussian(torch.tensor([mu], dtype=torch.float64),
                                torch.tensor([0.0], dtype=torch.float64))
            terms = losses.rec_objective(x, x, q_zc, q_yzw, near_std_prior(), noise=noise)
            r1.append(float(terms["r1"]))
        assert r1[1] / r1[0] == pytest.approx(4.0, abs=0.1)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(0.2, 0.8, size=(8, 8, 3))
        # Keep |x - x_hat| bounded away from zero so the L1 term is smooth
        # at the evaluation point.
        x_hat_np = np.clip(x + rng.choice([-1, 1], size=x.shape) * rng.uniform(0.05, 0.2, size=x.shape), 0, 1)
        x_t = torch.from_numpy(x.transpose(2, 0, 1))[None]
        prior = TruncNormMixture.default_zc_prior()
        gen = torch.Generator().manual_seed(2)
        noise = torch.randn((64, 3), generator=gen, dtype=torch.float64)

        zc_mean = torch.tensor([0.3, -0.5, 0.8], dtype=torch.float64)
        zc_lv = torch.tensor([-0.7, 0.1, -0.2], dtype=torch.float64)
        yz_mean = torch.randn(5, generator=gen, dtype=torch.float64)
        yz_lv = 0.3 * torch.randn(5, generator=gen, dtype=torch.float64)
        xh = torch.from_numpy(x_hat_np.transpose(2, 0, 1))[None]

        def objective(zm, zlv, ym, ylv, xhat):
            terms = losses.rec_objective(
                x_t, xhat, DiagGaussian(zm, zlv), DiagGaussian(ym, ylv), prior, noise=noise
            )
            return terms["j_rec"]

        err = check_full(objective, [zc_mean, zc_lv, yz_mean, yz_lv, xh], eps=1e-6)
        assert err <= 1e-4


class TestTotalObjective:
    def test_adv_only(self):
        assert losses.total_objective(3.0, 9.0, LossWeights(1.0, 0.0)) == 3.0

    def test_rec_only(self):
        assert losses.total_objective(3.0, 9.0, LossWeights(0.0, 1.0)) == 9.0

    def test_midpoint(self):
        assert losses.total_objective(2.0, 4.0, LossWeights(0.5, 0.5)) == 3.0


class TestLossReport:
    def test_decomposition_identity(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            vals = rng.normal(size=7)
            rep = LossReport.from_parts(*vals, LossWeights(0.5, 0.5))
            assert rep.decomposition_gap() <= 1e-9
            expect_total = 0.5 * (rep.j_disc + rep.j_gen) + 0.5 * rep.j_rec
            assert rep.j_total == pytest.approx(expect_total, abs=1e-9)

    def test_csv_round_trip(self):
        rep = LossReport.from_parts(1, 2, 3, 4, 5, 6, 7, LossWeights(0.5, 0.5))
        header = LossReport.csv_header().split(",")
        row = rep.csv_row(42).split(",")
        assert header[0] == "step" and row[0] == "42"
        assert len(header) == len(row) == 10
        assert float(row[header.index("j_rec")]) == rep.j_rec

    def test_non_finite_detection(self):
        rep = LossReport.from_parts(1, float("nan"), 3, 4, 5, 6, 7, LossWeights(0.5, 0.5))
        assert rep.first_non_finite() == "j_gen"

    def test_adversarial_assembly(self):
        # The adversarial half of the total is disc_loss + gen_loss.
        rep = LossReport.from_parts(0.25, 0.5, 0, 0, 0, 0, 0, LossWeights(1.0, 0.0))
        assert rep.j_total == pytest.approx(0.75)
