import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csvae import diffmath as dm
from csvae import losses
from fdcheck import assert_gradients_close, finite_difference

PER_DIM_LOWER_BOUND = (math.log(2.0) - 1.0) / 2.0


@pytest.fixture(autouse=True)
def float64_mode():
    with dm.use_dtype(np.float64):
        yield


def make_latents(mu, log_sigma, labels, centers=None, positive_class=None):
    c = dm.Parameter(centers) if centers is not None else None
    return losses.make_batch_latents(
        dm.Tensor(mu), dm.Tensor(log_sigma), np.asarray(labels), c, positive_class
    )


def random_batch(rng, b=8, d=5, k=3, positive_class=None):
    mu = rng.standard_normal((b, d))
    log_sigma = rng.standard_normal((b, d)) * 0.5
    labels = rng.integers(0, k, b)
    centers = rng.standard_normal((k, d))
    return make_latents(mu, log_sigma, labels, centers, positive_class)


# ---------------------------------------------------------------------------
# scalar-loop oracles (independent of the tensor implementations)
# ---------------------------------------------------------------------------


def oracle_mse(recon, target):
    total, count = 0.0, 0
    for a, b in zip(recon.ravel(), target.ravel()):
        total += (a - b) ** 2
        count += 1
    return total / count


def oracle_divergence(mu, sigma, centers_row):
    total = 0.0
    for d in range(mu.shape[0]):
        diff = mu[d] - centers_row[d]
        total += diff * diff + sigma[d] ** 2 - math.log(sigma[d]) - 1.0
    return total


def oracle_kld_unsup(lat):
    mu, sigma = lat.mu.data, lat.sigma.data
    vals = [oracle_divergence(mu[i], sigma[i], np.zeros(mu.shape[1])) for i in range(len(mu))]
    return float(np.mean(vals))


def oracle_kld_sup(lat):
    mu, sigma, c = lat.mu.data, lat.sigma.data, lat.centers.data
    vals = [oracle_divergence(mu[i], sigma[i], c[lat.labels[i]]) for i in range(len(mu))]
    return float(np.mean(vals))


def oracle_rep(centers, labels, rho):
    present = sorted(set(int(l) for l in labels))
    total = 0.0
    for i, a in enumerate(present):
        for b in present[i + 1 :]:
            d2 = float(np.sum((centers[a] - centers[b]) ** 2))
            total += max(0.0, rho - d2) ** 2
    return total / rho


def oracle_kld_sup_cs(lat):
    mu, sigma, c = lat.mu.data, lat.sigma.data, lat.centers.data
    p = lat.positive_class
    vals = [
        oracle_divergence(mu[i], sigma[i], c[p])
        for i in range(len(mu))
        if lat.labels[i] == p
    ]
    return float(np.mean(vals)) if vals else 0.0


def oracle_rep_cs(lat, rho):
    mu, c = lat.mu.data, lat.centers.data
    p = lat.positive_class
    vals = [
        max(0.0, rho - float(np.sum((mu[i] - c[p]) ** 2))) ** 2
        for i in range(len(mu))
        if lat.labels[i] != p
    ]
    return float(np.mean(vals)) / rho if vals else 0.0


# ---------------------------------------------------------------------------
# pinned values
# ---------------------------------------------------------------------------


class TestPinnedValues:
    def test_mse_identical_is_zero(self):
        x = dm.Tensor(np.random.default_rng(0).random((3, 2, 4, 4)))
        assert losses.mse_loss(x, x).item() == 0.0

    def test_mse_constant_half(self):
        a = dm.Tensor(np.full((2, 1, 3, 3), 0.5))
        b = dm.Tensor(np.zeros((2, 1, 3, 3)))
        assert losses.mse_loss(a, b).item() == pytest.approx(0.25, abs=1e-12)

    def test_mse_shape_mismatch(self):
        with pytest.raises(dm.ShapeError):
            losses.mse_loss(dm.Tensor(np.zeros((2, 3))), dm.Tensor(np.zeros((3, 2))))

    def test_kld_unsup_standard_normal_is_zero(self):
        lat = make_latents(np.zeros((4, 6)), np.zeros((4, 6)), [0] * 4)
        assert losses.kld_unsup(lat).item() == pytest.approx(0.0, abs=1e-12)

    def test_kld_unsup_unit_mean_one_dim(self):
        lat = make_latents(np.ones((1, 1)), np.zeros((1, 1)), [0])
        assert losses.kld_unsup(lat).item() == pytest.approx(1.0, abs=1e-12)

    def test_kld_per_dim_lower_bound_attained(self):
        log_sigma = np.full((1, 1), math.log(1.0 / math.sqrt(2.0)))
        lat = make_latents(np.zeros((1, 1)), log_sigma, [0])
        assert losses.kld_unsup(lat).item() == pytest.approx(PER_DIM_LOWER_BOUND, abs=1e-6)

    def test_rep_loss_identical_centers_rho_one(self):
        c = dm.Parameter(np.zeros((2, 4)))
        assert losses.rep_loss(c, [0, 1], 1.0).item() == pytest.approx(1.0, abs=1e-12)

    def test_rep_loss_separated_centers_is_zero(self):
        c = dm.Parameter(np.array([[0.0, 0.0], [3.0, 0.0]]))
        assert losses.rep_loss(c, [0, 1], 4.0).item() == 0.0

    def test_rep_cs_negative_at_center(self):
        lat = make_latents(np.zeros((1, 3)), np.zeros((1, 3)), [0], np.zeros((2, 3)), 1)
        assert losses.rep_loss_cs(lat, 4.0).item() == pytest.approx(4.0, abs=1e-12)

    def test_rep_cs_all_negatives_far(self):
        mu = np.full((3, 2), 10.0)
        lat = make_latents(mu, np.zeros((3, 2)), [0, 0, 0], np.zeros((2, 2)), 1)
        assert losses.rep_loss_cs(lat, 4.0).item() == 0.0

    def test_kld_sup_cs_positives_at_center(self):
        c = np.random.default_rng(1).standard_normal((2, 4))
        mu = np.tile(c[1], (3, 1))
        lat = make_latents(mu, np.zeros((3, 4)), [1, 1, 1], c, 1)
        assert losses.kld_sup_cs(lat).item() == pytest.approx(0.0, abs=1e-12)

    def test_kld_sup_cs_no_positives_is_zero(self):
        lat = random_batch(np.random.default_rng(2), k=2, positive_class=1)
        lat.labels[:] = 0
        assert losses.kld_sup_cs(lat).item() == 0.0

    def test_kld_sup_equals_unsup_with_zero_centers(self):
        rng = np.random.default_rng(3)
        mu = rng.standard_normal((6, 4))
        ls = rng.standard_normal((6, 4)) * 0.3
        labels = rng.integers(0, 3, 6)
        with_centers = make_latents(mu, ls, labels, np.zeros((3, 4)))
        without = make_latents(mu, ls, labels)
        assert losses.kld_sup(with_centers).item() == pytest.approx(
            losses.kld_unsup(without).item(), abs=1e-12
        )

    def test_csvae_total_reduces_to_mse_when_separated(self):
        rng = np.random.default_rng(4)
        c = np.zeros((2, 3))
        mu = np.where(rng.integers(0, 2, (6, 1)) > 10, 0.0, 9.0) * np.ones((6, 3))
        labels = np.zeros(6, dtype=int)  # all negatives, all far away
        lat = make_latents(mu, np.zeros((6, 3)), labels, c, 1)
        recon = dm.Tensor(rng.random((6, 1, 2, 2)))
        target = dm.Tensor(rng.random((6, 1, 2, 2)))
        cfg = losses.LossConfig("csvae", alpha_kl=2.0, rho=1.0)
        total, parts = losses.total_loss(cfg, recon, target, lat)
        assert total.item() == pytest.approx(parts["mse"], abs=1e-12)


class TestConfig:
    def test_method_validation(self):
        with pytest.raises(losses.LossError):
            losses.LossConfig("unknown", 1.0, 1.0)

    @pytest.mark.parametrize("alpha,rho", [(-1.0, 1.0), (1.0, 0.0)])
    def test_positivity(self, alpha, rho):
        with pytest.raises(losses.LossError):
            losses.LossConfig("vae", alpha, rho)

    def test_missing_center_row(self):
        with pytest.raises(losses.LossError):
            make_latents(np.zeros((2, 3)), np.zeros((2, 3)), [0, 5], np.zeros((2, 3)))

    def test_kld_sup_needs_centers(self):
        lat = make_latents(np.zeros((2, 3)), np.zeros((2, 3)), [0, 1])
        with pytest.raises(losses.LossError):
            losses.kld_sup(lat)

    def test_cs_losses_need_positive_class(self):
        lat = make_latents(np.zeros((2, 3)), np.zeros((2, 3)), [0, 1], np.zeros((2, 3)))
        with pytest.raises(losses.LossError):
            losses.kld_sup_cs(lat)
        with pytest.raises(losses.LossError):
            losses.rep_loss_cs(lat, 1.0)


# ---------------------------------------------------------------------------
# oracle agreement on random batches
# ---------------------------------------------------------------------------


NUM_RANDOM_BATCHES = 100


class TestOracleAgreement:
    def test_mse_against_naive_loop(self):
        rng = np.random.default_rng(10)
        for _ in range(NUM_RANDOM_BATCHES):
            a = rng.random((3, 2, 3, 3))
            b = rng.random((3, 2, 3, 3))
            got = losses.mse_loss(dm.Tensor(a), dm.Tensor(b)).item()
            assert abs(got - oracle_mse(a, b)) <= 1e-12

    def test_all_latent_losses_against_scalar_loops(self):
        rng = np.random.default_rng(11)
        for _ in range(NUM_RANDOM_BATCHES):
            b = int(rng.integers(2, 10))
            d = int(rng.integers(1, 6))
            k = int(rng.integers(2, 5))
            p = int(rng.integers(0, k))
            lat = random_batch(rng, b=b, d=d, k=k, positive_class=p)
            rho = float(rng.uniform(0.5, 5.0))
            assert abs(losses.kld_unsup(lat).item() - oracle_kld_unsup(lat)) <= 1e-10
            assert abs(losses.kld_sup(lat).item() - oracle_kld_sup(lat)) <= 1e-10
            assert abs(
                losses.rep_loss(lat.centers, lat.labels, rho).item()
                - oracle_rep(lat.centers.data, lat.labels, rho)
            ) <= 1e-10
            assert abs(losses.kld_sup_cs(lat).item() - oracle_kld_sup_cs(lat)) <= 1e-10
            assert abs(losses.rep_loss_cs(lat, rho).item() - oracle_rep_cs(lat, rho)) <= 1e-10


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------


class TestInvariants:
    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_repulsion_nonnegative_and_zero_iff_separated(self, seed):
        rng = np.random.default_rng(seed)
        lat = random_batch(rng, positive_class=0)
        rho = float(rng.uniform(0.5, 4.0))
        rep = losses.rep_loss(lat.centers, lat.labels, rho).item()
        assert rep >= 0.0
        present = np.unique(lat.labels)
        d2 = [
            np.sum((lat.centers.data[a] - lat.centers.data[b]) ** 2)
            for i, a in enumerate(present)
            for b in present[i + 1 :]
        ]
        if d2 and min(d2) >= rho:
            assert rep == 0.0
        if d2 and rep == 0.0:
            assert min(d2) >= rho

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_per_sample_kld_lower_bound(self, seed):
        rng = np.random.default_rng(seed)
        b, d = int(rng.integers(1, 8)), int(rng.integers(1, 8))
        lat = make_latents(
            rng.standard_normal((b, d)), rng.standard_normal((b, d)), [0] * b
        )
        assert losses.kld_unsup(lat).item() >= d * PER_DIM_LOWER_BOUND - 1e-9

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_rep_per_pair_bounded_by_rho(self, seed):
        rng = np.random.default_rng(seed)
        rho = float(rng.uniform(0.5, 4.0))
        centers = dm.Parameter(rng.standard_normal((2, 4)))
        val = losses.rep_loss(centers, [0, 1], rho).item()
        assert 0.0 <= val <= rho + 1e-12

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_rep_cs_per_term_bounded_by_rho(self, seed):
        rng = np.random.default_rng(seed)
        rho = float(rng.uniform(0.5, 4.0))
        mu = rng.standard_normal((1, 3))
        lat = make_latents(mu, np.zeros((1, 3)), [0], rng.standard_normal((2, 3)), 1)
        val = losses.rep_loss_cs(lat, rho).item()
        assert 0.0 <= val <= rho + 1e-12

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_batch_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        lat = random_batch(rng, b=7, positive_class=1)
        perm = rng.permutation(7)
        lat_p = make_latents(
            lat.mu.data[perm],
            np.log(lat.sigma.data[perm]),
            lat.labels[perm],
            lat.centers.data,
            1,
        )
        cfg = losses.LossConfig("csvae", 1.3, 2.0)
        recon = rng.random((7, 1, 2, 2))
        target = rng.random((7, 1, 2, 2))
        t1, _ = losses.total_loss(cfg, dm.Tensor(recon), dm.Tensor(target), lat)
        t2, _ = losses.total_loss(cfg, dm.Tensor(recon[perm]), dm.Tensor(target[perm]), lat_p)
        assert t1.item() == pytest.approx(t2.item(), rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------------------
# gradients of each loss term
# ---------------------------------------------------------------------------


def _loss_gradcheck(rng, loss_of, arrays, tol=1e-3):
    params = [dm.Parameter(a) for a in arrays]
    dm.backward(loss_of(params))

    def scalar():
        return loss_of([dm.Tensor(p.data) for p in params]).item()

    numeric = finite_difference(scalar, [p.data for p in params])
    assert_gradients_close([p.grad for p in params], numeric, tol)


class TestLossGradients:
    @pytest.mark.parametrize("term", ["mse", "kld_unsup", "kld_sup", "rep", "kld_sup_cs", "rep_cs"])
    @pytest.mark.parametrize("instance", range(20))
    def test_terms(self, term, instance):
        rng = np.random.default_rng(hash(term) % 100_000 + instance)
        b, d, k = 5, 3, 3
        labels = rng.integers(0, k, b)
        labels[0] = 1  # at least one positive and one negative
        labels[1] = 0
        rho = float(rng.uniform(0.5, 3.0))

        def build(term_name):
            def loss_of(ps):
                mu, log_sigma, centers = ps[0], ps[1], ps[2]
                lat = losses.make_batch_latents(mu, log_sigma, labels, centers, 1)
                if term_name == "mse":
                    return losses.mse_loss(dm.sigmoid(mu), dm.sigmoid(log_sigma))
                if term_name == "kld_unsup":
                    return losses.kld_unsup(lat)
                if term_name == "kld_sup":
                    return losses.kld_sup(lat)
                if term_name == "rep":
                    return losses.rep_loss(centers, labels, rho)
                if term_name == "kld_sup_cs":
                    return losses.kld_sup_cs(lat)
                return losses.rep_loss_cs(lat, rho)

            return loss_of

        _loss_gradcheck(
            rng,
            build(term),
            [rng.standard_normal((b, d)), rng.standard_normal((b, d)) * 0.5,
             rng.standard_normal((k, d))],
        )
