import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.special import logsumexp

from conbed import posterior as post
from conbed.errors import CheckpointError, InvalidInputError, TrainingError
from conbed.mixture import GaussianMixture
from conbed.reference import DegeneratePosteriorWarning, is_posterior, mmd
from conbed.tasks import ConjugateGaussian, LocationFinding

ARTIFACTS = Path(__file__).resolve().parents[1] / "artifacts"


@pytest.fixture(scope="module")
def small_net():
    cfg = post.TrainConfig(epochs=150, batch_size=64, checkpoint_every=50, seed=3,
                           network=post.NetworkConfig(embed_dim=8, hidden_dim=16, n_components=3))
    return post.train(ConjugateGaussian(), cfg)


def two_bumps():
    return GaussianMixture(np.log([0.5, 0.5]), np.array([[-1.0], [1.0]]), np.array([[0.5], [0.5]]))


# --------------------------------------------------------------------------- mixture sampling


def test_single_component_zero_noise():
    g = GaussianMixture(np.zeros(1), np.array([[2.0]]), np.array([[3.0]]))
    assert g.sample_reparam(np.zeros(1), np.zeros((1, 1)), 0.5)[0] == 2.0


def test_low_temperature_is_hard_selection():
    rng = np.random.default_rng(0)
    g = GaussianMixture(rng.normal(size=4), rng.normal(size=(4, 2)), rng.uniform(0.1, 1, (4, 2)))
    for _ in range(20):
        eg, en = rng.gumbel(size=4), rng.normal(size=(4, 2))
        soft, hard = g.sample_reparam(eg, en, 1e-3), g.sample_hard(eg, en)
        logits = np.sort(g.log_weights + eg)
        tol = 1e-8 if logits[-1] - logits[-2] > 0.05 else 1e-3
        np.testing.assert_allclose(soft, hard, atol=tol)


def test_relaxed_sample_mean_matches_mixture_mean():
    g = two_bumps()
    rng = np.random.default_rng(1)
    n = 100_000
    s = g.sample_reparam(rng.gumbel(size=(n, 2)), rng.normal(size=(n, 2, 1)), 1.0)[:, 0]
    se = s.std(ddof=1) / math.sqrt(n)
    assert abs(s.mean() - float(g.mean()[0])) < 3 * se


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 2.0))
def test_relaxed_sample_continuous_in_parameters(seed, tau):
    rng = np.random.default_rng(seed)
    lw, mu, sd = rng.normal(size=3), rng.normal(size=(3, 2)), rng.uniform(0.1, 1, (3, 2))
    eg, en = rng.gumbel(size=3), rng.normal(size=(3, 2))
    base = GaussianMixture(lw, mu, sd).sample_reparam(eg, en, tau)
    h = 1e-7
    moved = GaussianMixture(lw + h, mu + h, sd + h).sample_reparam(eg, en, tau)
    assert np.all(np.abs(moved - base) < 1e-4)
    np.testing.assert_array_equal(base, GaussianMixture(lw, mu, sd).sample_reparam(eg, en, tau))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=10))
def test_mixture_weights_normalised(logits):
    k = len(logits)
    g = GaussianMixture(np.array(logits), np.zeros((k, 1)), np.ones((k, 1)))
    assert g.weights.sum() == pytest.approx(1.0, abs=1e-9)


# --------------------------------------------------------------------------- log density


def test_log_prob_examples():
    g = GaussianMixture(np.zeros(1), np.zeros((1, 1)), np.ones((1, 1)))
    assert g.log_prob(np.zeros(1)) == pytest.approx(-0.5 * math.log(2 * math.pi))
    assert g.log_prob(np.zeros(1)) == pytest.approx(-0.9189, abs=1e-4)
    dup = GaussianMixture(np.log([0.5, 0.5]), np.full((2, 1), 0.3), np.full((2, 1), 0.7))
    one = GaussianMixture(np.zeros(1), np.full((1, 1), 0.3), np.full((1, 1), 0.7))
    for t in (-1.0, 0.3, 2.0):
        assert dup.log_prob([t]) == pytest.approx(one.log_prob([t]), abs=1e-12)


def test_log_prob_quadrature():
    rng = np.random.default_rng(2)
    for _ in range(5):
        g = GaussianMixture(rng.normal(size=4), rng.normal(0, 2, (4, 1)), rng.uniform(0.2, 1.5, (4, 1)))
        grid = np.linspace(-15, 15, 60001)
        assert np.trapezoid(np.exp(g.log_prob(grid[:, None])), grid) == pytest.approx(1.0, abs=1e-3)


def test_log_prob_stable_far_in_tail():
    g = two_bumps()
    assert np.isfinite(g.log_prob([200.0]))


# --------------------------------------------------------------------------- network serving


def test_posterior_is_valid_mixture(small_net):
    b = post.NetworkBelief(small_net)
    q = b.posterior(b.empty())
    assert q.weights.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(q.stds > 0)


def test_permutation_invariance(small_net):
    b = post.NetworkBelief(small_net)
    rng = np.random.default_rng(4)
    xs, ys = rng.uniform(-1, 1, (7, 1)), rng.normal(size=7)
    perm = rng.permutation(7)
    qa = b.posterior(b.summarize(xs, ys))
    qb = b.posterior(b.summarize(xs[perm], ys[perm]))
    np.testing.assert_allclose(qa.means, qb.means, atol=1e-9)
    np.testing.assert_allclose(qa.stds, qb.stds, atol=1e-9)
    np.testing.assert_allclose(qa.log_weights, qb.log_weights, atol=1e-9)


def test_numpy_serving_matches_torch(small_net):
    model = post.build_model(small_net.task, post.NetworkConfig(**{k: small_net.arch[k] for k in
                                                                ("embed_dim", "hidden_dim", "n_components")}))
    model.load_state_dict({k: torch.as_tensor(v) for k, v in small_net.w.items()})
    model.double()
    rng = np.random.default_rng(5)
    batch = post.simulate_batch(small_net.task, rng, 6, 5)
    t = {k: torch.as_tensor(v, dtype=torch.float64) for k, v in batch.items()}
    logw, mu, std = model(t["xf"], t["yf"], t["mask"])
    b = post.NetworkBelief(small_net)
    for i in range(6):
        n = int(batch["mask"][i].sum())
        xs = batch["xf"][i, :n]  # features equal designs on [-1, 1]
        ys = batch["yf"][i, :n] * 1.5
        q = b.posterior(b.summarize(xs, ys))
        np.testing.assert_allclose(q.means, mu[i].detach().numpy(), atol=1e-9)
        np.testing.assert_allclose(q.stds, std[i].detach().numpy(), atol=1e-9)


def test_dimension_mismatch(small_net):
    b = post.NetworkBelief(small_net)
    with pytest.raises(InvalidInputError):
        b.extend(b.empty(), np.zeros(2), 0.0)


def test_training_reduces_loss(small_net):
    trace = small_net.meta["loss_trace"]
    assert np.mean(trace[-30:]) < np.mean(trace[:10])


def test_training_gradient_matches_central_differences():
    task = ConjugateGaussian()
    torch.manual_seed(0)
    model = post.build_model(task, post.NetworkConfig(8, 16, 3)).double()
    batch = post.simulate_batch(task, np.random.default_rng(0), 32, 6)
    loss = post.batch_loss(model, batch, torch.float64)
    params = list(model.parameters())
    grads = torch.autograd.grad(loss, params)
    flat = torch.cat([p.reshape(-1) for p in params])
    gflat = torch.cat([g.reshape(-1) for g in grads])
    rng = np.random.default_rng(1)
    h = 1e-6
    with torch.no_grad():
        for i in rng.choice(len(flat), 10, replace=False):
            off = 0
            for p in params:
                if i < off + p.numel():
                    v = p.view(-1)
                    old = v[i - off].item()
                    v[i - off] = old + h
                    up = post.batch_loss(model, batch, torch.float64).item()
                    v[i - off] = old - h
                    dn = post.batch_loss(model, batch, torch.float64).item()
                    v[i - off] = old
                    break
                off += p.numel()
            fd = (up - dn) / (2 * h)
            g = gflat[i].item()
            assert abs(fd - g) <= 1e-4 * max(abs(g), abs(fd), 1e-6)


class _NanTask(ConjugateGaussian):
    def simulate(self, theta, x, noise):
        return np.full(np.broadcast_shapes(np.shape(x)[:-1], np.shape(noise)), np.nan)


def test_divergent_training_raises():
    cfg = post.TrainConfig(epochs=3, batch_size=8, network=post.NetworkConfig(4, 8, 2))
    with pytest.raises(TrainingError):
        post.train(_NanTask(), cfg)


# --------------------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(small_net, tmp_path):
    path = tmp_path / "net.json"
    post.save_checkpoint(small_net, path)
    back = post.load_checkpoint(path)
    data = json.loads(path.read_text())
    for key in ("schema_version", "task", "architecture", "weights", "training", "seed"):
        assert key in data
    a, b = post.NetworkBelief(small_net), post.NetworkBelief(back)
    rng = np.random.default_rng(6)
    for _ in range(100):
        n = rng.integers(0, 10)
        xs, ys = rng.uniform(-1, 1, (n, 1)), rng.normal(size=n)
        qa, qb = a.posterior(a.summarize(xs, ys)), b.posterior(b.summarize(xs, ys))
        np.testing.assert_allclose(qa.means, qb.means, rtol=0, atol=1e-12)
        np.testing.assert_allclose(qa.stds, qb.stds, rtol=0, atol=1e-12)
        np.testing.assert_allclose(qa.log_weights, qb.log_weights, rtol=0, atol=1e-12)


def test_truncated_checkpoint(small_net, tmp_path):
    path = tmp_path / "net.json"
    post.save_checkpoint(small_net, path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError):
        post.load_checkpoint(path)


def test_checkpoint_version_mismatch(small_net, tmp_path):
    data = small_net.to_dict()
    data["schema_version"] = 99
    path = tmp_path / "net.json"
    path.write_text(json.dumps(data))
    with pytest.raises(CheckpointError):
        post.load_checkpoint(path)
    with pytest.raises(CheckpointError):
        post.load_checkpoint(tmp_path / "missing.json")


def test_trained_location_finding_prior_is_uniform():
    path = ARTIFACTS / "posterior_location_finding.json"
    if not path.exists():
        pytest.skip("location-finding checkpoint not trained yet")
    b = post.NetworkBelief(post.load_checkpoint(path))
    z = b.posterior(b.empty()).sample(np.random.default_rng(0), 4000)
    theta = b.to_param(z)
    for j in range(2):
        assert stats.kstest(theta[:, j], "uniform").statistic <= 0.05


# --------------------------------------------------------------------------- importance sampling


def test_is_empty_history_uniform_weights():
    p = is_posterior(ConjugateGaussian(), [], [], 500, np.random.default_rng(0))
    np.testing.assert_allclose(p.weights, 1 / 500)
    assert p.ess == pytest.approx(500)


def test_is_conjugate_mean():
    task = ConjugateGaussian()
    xs, ys = np.array([[0.8], [-0.4], [0.6]]), np.array([0.5, -0.1, 0.2])
    p = is_posterior(task, xs, ys, 50_000, np.random.default_rng(1))
    m, s = task.analytic_posterior(xs, ys)
    assert abs(p.mean()[0] - m) < 3 * s / math.sqrt(p.ess)


def test_is_location_finding_vs_grid_quadrature():
    task = LocationFinding()
    rng = np.random.default_rng(2)
    th = np.array([0.3, 0.6])
    xs = rng.uniform(0, 1, (5, 2))
    ys = task.simulate(th, xs, task.sample_noise(rng, (5,)))
    g = (np.arange(200) + 0.5) / 200
    grid = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    logp = sum(task.loglik(y, x, grid) for x, y in zip(xs, ys))
    w = np.exp(logp - logsumexp(logp))
    p = is_posterior(task, xs, ys, 200_000, np.random.default_rng(3))
    np.testing.assert_allclose(p.mean(), w @ grid, atol=0.02)


def test_is_degenerate_warning():
    task = ConjugateGaussian(noise_std=0.01)
    xs = np.ones((20, 1))
    ys = np.full(20, 0.7)
    with pytest.warns(DegeneratePosteriorWarning):
        is_posterior(task, xs, ys, 200, np.random.default_rng(0))


def test_is_std_shrinks_with_data():
    task = ConjugateGaussian()
    rng = np.random.default_rng(4)
    th = task.prior_sample(rng)
    xs = rng.uniform(-1, 1, (40, 1))
    ys = task.simulate(th, xs, task.sample_noise(rng, (40,)))
    stds = [is_posterior(task, xs[:n], ys[:n], 20_000, np.random.default_rng(n)).std()[0] for n in (0, 5, 20, 40)]
    assert all(a > b for a, b in zip(stds, stds[1:]))


# --------------------------------------------------------------------------- MMD


def test_mmd_identity():
    a = np.random.default_rng(0).normal(size=(300, 2))
    assert mmd(a, a, biased=True) == pytest.approx(0.0, abs=1e-12)
    assert mmd(a, a) == 0.0


def test_mmd_separated_gaussians():
    rng = np.random.default_rng(1)
    assert mmd(rng.normal(0, 1, 1000), rng.normal(5, 1, 1000)) > 0.5


def test_mmd_rejects_empty():
    with pytest.raises(ValueError):
        mmd(np.zeros((0, 2)), np.zeros((3, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mmd_nonnegative_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(40, 2)), rng.normal(0.3, 1, (50, 2))
    assert mmd(a, b) >= 0
    assert mmd(a, b) == pytest.approx(mmd(b, a), abs=1e-12)
