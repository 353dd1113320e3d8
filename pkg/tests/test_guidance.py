import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fairdiff import guidance, nn, sde
from fairdiff.errors import NumericError, UsageError
from fairdiff.tabular import EncodedDataset
from oracles import central_diff, linear_softmax_grad, rel_err

SCHED = sde.NoiseSchedule(n_steps=40)
W = sde.TIME_FEATURES


def classifier(p, k, rng, hidden=(8,), dtype=np.float32, activation="tanh"):
    spec = nn.MlpSpec((p + W, *hidden, k), activation, "log_softmax")
    net = nn.init_params(spec, rng, dtype=dtype)
    biases = [b + 0.2 * rng.standard_normal(b.shape).astype(dtype) for b in net.biases]
    return nn.MlpParams(spec, net.weights, biases)


def linear_classifier(Wx, b):
    p, k = Wx.shape
    w = np.zeros((p + W, k))
    w[:p] = Wx
    return nn.MlpParams(nn.MlpSpec((p + W, k), output_head="log_softmax"), [w], [np.asarray(b, float)])


def score_net(p, rng):
    return nn.init_params(nn.MlpSpec((p + W, 16, p), "tanh"), rng)


def test_weights_validated():
    for bad in (-1.0, float("inf"), float("nan")):
        with pytest.raises(UsageError):
            guidance.GuidanceWeights(bad, 0.0)


def test_classifier_loss_perfect_stub(rng):
    X = np.eye(2)[rng.integers(0, 2, 20)]
    net = linear_classifier(1e4 * np.eye(2), [0.0, 0.0])
    t = np.full(20, SCHED.t_eps)
    loss, grads = guidance.classifier_loss(SCHED, net, X, X.argmax(1), rng, t=t, eps=np.zeros_like(X))
    assert loss == 0.0


def test_classifier_loss_uniform_stub(rng):
    k = 5
    net = linear_classifier(np.zeros((3, k)), np.zeros(k))
    ds = EncodedDataset(rng.standard_normal((50, 3)), rng.integers(0, k, 50), rng.integers(0, 2, 50))
    loss, _ = guidance.train_guidance_classifier(SCHED, net, ds, "y", rng)
    assert loss == pytest.approx(math.log(k), rel=1e-12)


def test_train_guidance_classifier_validates(rng):
    net = linear_classifier(np.zeros((2, 2)), np.zeros(2))
    ds = EncodedDataset(np.zeros((3, 2)), np.zeros(3, int), np.zeros(3, int))
    with pytest.raises(UsageError):
        guidance.train_guidance_classifier(SCHED, net, ds, "d", rng)
    with pytest.raises(UsageError):
        guidance.train_guidance_classifier(SCHED, net, ds.subset([]), "y", rng)


def test_classifier_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    net = classifier(2, 2, rng, dtype=np.float32)
    X = rng.standard_normal((24, 2))
    y = rng.integers(0, 2, 24)
    t = rng.uniform(SCHED.t_eps, 1, 24)
    eps = rng.standard_normal((24, 2))
    _, grads = guidance.classifier_loss(SCHED, net, X, y, None, t=t, eps=eps)
    ref = net.astype(np.float64)
    arrays = ref.arrays()
    for k, a in enumerate(arrays):
        def f(v, k=k):
            trial = list(arrays)
            trial[k] = v
            return guidance.classifier_loss(
                SCHED, nn.MlpParams.from_arrays(net.spec, trial), X, y, None, t=t, eps=eps)[0]

        assert rel_err(grads[k], central_diff(f, a)) <= 1e-3


def test_label_grad_linear_closed_form(rng):
    Wx = rng.standard_normal((3, 4))
    b = rng.standard_normal(4)
    net = linear_classifier(Wx, b)
    x = rng.standard_normal(3)
    t = 0.3
    tf = sde.time_features(t)[0]
    # the time features only shift the logits, so fold them into the bias
    shift = tf @ net.weights[0][3:]
    for y in range(4):
        want = linear_softmax_grad(Wx, b + shift, x, y)
        np.testing.assert_allclose(guidance.label_grad(net, x, t, y), want, rtol=1e-12, atol=1e-12)


def test_label_grad_saturated_is_zero():
    net = linear_classifier(np.array([[50.0, -50.0]]), [0.0, 0.0])
    g = guidance.label_grad(net, np.array([3.0]), 0.5, 0)
    assert np.linalg.norm(g) <= 1e-4


def test_label_grad_batch_matches_rows(rng):
    net = classifier(3, 3, rng)
    x = rng.standard_normal((5, 3))
    y = rng.integers(0, 3, 5)
    g = guidance.label_grad(net, x, 0.2, y)
    for i in range(5):
        np.testing.assert_allclose(g[i], guidance.label_grad(net, x[i], 0.2, y[i]), rtol=1e-6)


def test_classifier_input_checked(rng):
    net = classifier(3, 2, rng)
    with pytest.raises(UsageError):
        guidance.label_grad(net, np.zeros(2), 0.5, 0)


def test_entropy_at_uniform_posterior():
    net = linear_classifier(np.array([[1.0, 1.0]]), [0.0, 0.0])
    H, g = guidance.entropy_grad(net, np.array([0.7]), 0.4)
    assert H == pytest.approx(math.log(2), abs=1e-15)
    np.testing.assert_array_equal(g, [0.0])


def test_entropy_saturated():
    net = linear_classifier(np.array([[100.0, -100.0]]), [0.0, 0.0])
    H, _ = guidance.entropy_grad(net, np.array([2.0]), 0.4)
    assert 0 <= H <= 1e-6


@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
def test_entropy_bounded(seed, k):
    rng = np.random.default_rng(seed)
    net = classifier(3, k, rng, hidden=(6,), activation="relu")
    x = 5 * rng.standard_normal((20, 3))
    H, _ = guidance.entropy_grad(net, x, float(rng.uniform(0, 1)))
    assert np.all(H >= 0) and np.all(H <= math.log(k) + 1e-6)


def test_entropy_invariant_to_logit_shift(rng):
    # adding a constant to every logit rescales the unnormalised density only
    net = classifier(3, 3, rng)
    shifted = nn.MlpParams(net.spec, net.weights, net.biases[:-1] + [net.biases[-1] + 7.0])
    x = rng.standard_normal((4, 3))
    H1, g1 = guidance.entropy_grad(net, x, 0.5)
    H2, g2 = guidance.entropy_grad(shifted, x, 0.5)
    np.testing.assert_allclose(H1, H2, atol=1e-5)
    np.testing.assert_allclose(g1, g2, atol=1e-4)


def _fd_log_prob(net64, x, t, y):
    def f(v):
        return float(nn.forward(net64, sde.with_time(v[None, :], t))[0, y])
    return central_diff(f, x)


def _fd_entropy(net64, x, t):
    def f(v):
        lp = nn.forward(net64, sde.with_time(v[None, :], t))[0]
        return float(-np.sum(np.exp(lp) * lp))
    return central_diff(f, x)


@pytest.mark.parametrize("seed", range(10))
def test_guidance_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    net = classifier(4, 3, rng, hidden=(12, 12))
    x = rng.standard_normal(4)
    t = float(rng.uniform(0.05, 1))
    y = int(rng.integers(0, 3))
    ref = net.astype(np.float64)
    assert rel_err(guidance.label_grad(net, x, t, y), _fd_log_prob(ref, x, t, y)) <= 1e-3
    assert rel_err(guidance.entropy_grad(net, x, t)[1], _fd_entropy(ref, x, t)) <= 1e-3


def _nets(rng, p=2):
    return score_net(p, rng), classifier(p, 2, rng), classifier(p, 2, rng)


def test_guided_score_reduces_to_score(rng):
    s, fy, fz = _nets(rng)
    x = rng.standard_normal((6, 2))
    base = guidance.score_estimate(s, SCHED, x, 0.5)
    out = guidance.guided_score(s, fy, fz, x, 0.5, np.zeros(6, int), guidance.GuidanceWeights(), SCHED)
    assert np.array_equal(out, base)
    terms = guidance.guidance_terms(s, None, None, x, 0.5, 0, guidance.GuidanceWeights(), SCHED)
    assert terms["label"] is None and terms["fair"] is None


def test_guided_score_is_sum_of_terms(rng):
    s, fy, fz = _nets(rng)
    x = rng.standard_normal((6, 2))
    y = rng.integers(0, 2, 6)
    w = guidance.GuidanceWeights(1.5, 0.7)
    out = guidance.guided_score(s, fy, fz, x, 0.5, y, w, SCHED, clip=False)
    terms = guidance.guidance_terms(s, fy, fz, x, 0.5, y, w, SCHED, clip=False)
    assert np.array_equal(out, terms["score"] + terms["label"] + terms["fair"])
    np.testing.assert_array_equal(terms["label"], 1.5 * guidance.label_grad(fy, x, 0.5, y))
    np.testing.assert_array_equal(terms["fair"], 0.7 * guidance.entropy_grad(fz, x, 0.5)[1])


@pytest.mark.parametrize("clip", [False, True])
def test_guided_score_linear_in_lambda(rng, clip):
    s, fy, fz = _nets(rng)
    x = 3 * rng.standard_normal((6, 2))
    y = rng.integers(0, 2, 6)
    t = 0.02

    def g(ly):
        return guidance.guided_score(s, fy, fz, x, t, y, guidance.GuidanceWeights(ly, 0), SCHED, clip)

    np.testing.assert_allclose(g(2.0) - g(0.0), 2 * (g(1.0) - g(0.0)), atol=1e-6)


def test_guidance_clip_bound(rng):
    fy = linear_classifier(np.array([[1e6, -1e6]]), [0.0, 0.0])
    s = score_net(1, rng)
    x = np.array([[1e-9]])
    t = 0.5
    _, _, sigma = sde.schedule_coefficients(SCHED, t)
    terms = guidance.guidance_terms(s, fy, None, x, t, 0, guidance.GuidanceWeights(1.0, 0), SCHED)
    assert abs(terms["label"][0, 0]) <= 10 / sigma + 1e-12


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_guided_score_non_finite_term(rng):
    s, fy, fz = _nets(rng, p=1)
    bad = nn.MlpParams(fy.spec, [w.copy() for w in fy.weights], [b.copy() for b in fy.biases])
    bad.weights[0][0, 0] = np.float32(3e38)
    with pytest.raises(NumericError):
        guidance.guided_score(s, bad, fz, np.array([[1e3]]), 0.5, 0,
                              guidance.GuidanceWeights(1.0, 0.0), SCHED, clip=False)


def test_label_request_policies(rng):
    prior = [0.25, 0.75]
    r = guidance.LabelRequest.from_policy(20000, "prior", prior, rng)
    assert r.labels.mean() == pytest.approx(0.75, abs=0.02)
    assert set(guidance.LabelRequest.from_policy(50, "uniform", prior, rng).labels) == {0, 1}
    assert np.all(guidance.LabelRequest.from_policy(7, "fixed:1", prior, rng).labels == 1)
    for bad in ("fixed:2", "fixed:x", "sometimes"):
        with pytest.raises(UsageError):
            guidance.LabelRequest.from_policy(3, bad, prior, rng)
    with pytest.raises(UsageError):
        guidance.LabelRequest([])


def test_generate_shape_and_determinism(rng):
    s, fy, fz = _nets(rng, p=3)
    w = guidance.GuidanceWeights(1.0, 1.0)
    a = guidance.generate(s, fy, fz, SCHED, guidance.LabelRequest([0, 1, 1, 0, 1]), w, seed=9)
    b = guidance.generate(s, fy, fz, SCHED, [0, 1, 1, 0, 1], w, seed=9)
    assert a.shape == (5, 3) and np.array_equal(a, b)


@given(st.integers(1, 7))
def test_generate_independent_of_thread_split(n_jobs):
    rng = np.random.default_rng(5)
    s, fy, fz = _nets(rng)
    w = guidance.GuidanceWeights(0.5, 0.5)
    labels = np.arange(11) % 2
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(guidance, "CHAIN_BLOCK", 3)
        one = guidance.generate(s, fy, fz, SCHED, labels, w, seed=3, n_steps=10)
        many = guidance.generate(s, fy, fz, SCHED, labels, w, seed=3, n_steps=10, n_jobs=n_jobs)
    assert np.array_equal(one, many)


def test_generate_chain_depends_only_on_its_index(rng):
    s, fy, fz = _nets(rng)
    w = guidance.GuidanceWeights(0.0, 0.0)
    full = guidance.generate(s, fy, fz, SCHED, [0, 0, 0, 0], w, seed=1, n_steps=10)
    part = guidance.generate(s, fy, fz, SCHED, [0, 0], w, seed=1, n_steps=10)
    assert np.array_equal(full[:2], part)


def test_unguided_generate_ignores_classifiers(rng):
    s, fy, fz = _nets(rng)
    w = guidance.GuidanceWeights(0.0, 0.0)
    a = guidance.generate(s, fy, fz, SCHED, [0, 1, 0], w, seed=2, n_steps=15)
    b = guidance.generate(s, None, None, SCHED, [1, 0, 1], w, seed=2, n_steps=15)
    assert np.array_equal(a, b)
    with pytest.raises(UsageError):
        guidance.generate(s, None, fz, SCHED, [0], guidance.GuidanceWeights(1.0, 0.0), seed=0)


def test_generate_divergence_reports_chain(rng):
    p = 1
    spec = nn.MlpSpec((p + W, p))
    w = np.zeros((p + W, p))
    b = np.array([1e7])
    s = nn.MlpParams(spec, [w.astype(np.float32)], [b.astype(np.float32)])
    with pytest.raises(NumericError, match=r"chain 0 diverged at step 0"):
        guidance.generate(s, None, None, SCHED, [0, 0], guidance.GuidanceWeights(), seed=0)
