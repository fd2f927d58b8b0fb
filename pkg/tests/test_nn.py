import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from branchrl import nn, sac
from branchrl.nn import (Adam, GaussianHead, Mlp, NonFiniteError, backward, dump_mlp, gaussian_nll,
                         gaussian_nll_grad, load_mlp, optimizer_step, soft_clamp)
from oracles import finite_difference, rel_error


def reference_forward(net, x):
    """Loop-based evaluation of a single (non-member) network."""
    act = {"tanh": np.tanh, "relu": lambda z: max(z, 0.0), "swish": lambda z: z / (1 + np.exp(-z)),
           "identity": lambda z: z}[net.activation]
    out = []
    for row in x:
        h = list(row)
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            z = [sum(h[p] * w[p, q] for p in range(w.shape[0])) + b[q] for q in range(w.shape[1])]
            h = z if i == net.n_layers - 1 else [act(v) for v in z]
        out.append(h)
    return np.array(out)


def test_zero_network_outputs_zero():
    net = Mlp((3, 5, 2))
    assert np.array_equal(net.forward(np.ones((4, 3))), np.zeros((4, 2)))


def test_identity_layer():
    net = Mlp((3, 3))
    net.weights[0][...] = np.eye(3)
    x = np.random.default_rng(0).normal(size=(6, 3))
    assert np.array_equal(net.forward(x), x)


@pytest.mark.parametrize("activation", ["tanh", "relu", "swish"])
def test_forward_matches_loop_reference(activation):
    rng = np.random.default_rng(1)
    net = Mlp((4, 7, 3), activation, rng=rng)
    net.params[:] = rng.normal(size=net.size)
    x = rng.normal(size=(5, 4))
    np.testing.assert_allclose(net.forward(x), reference_forward(net, x), atol=1e-12)


def test_member_stack_matches_individual_networks():
    rng = np.random.default_rng(2)
    net = Mlp((3, 6, 2), "swish", n_members=4, rng=rng)
    x = rng.normal(size=(5, 3))
    out = net.forward(x)
    for m in range(4):
        single = Mlp((3, 6, 2), "swish")
        for i in range(single.n_layers):
            single.weights[i][...] = net.weights[i][m]
            single.biases[i][...] = net.biases[i][m, 0]
        np.testing.assert_allclose(out[m], single.forward(x), atol=1e-13)


def test_gaussian_nll_examples():
    assert gaussian_nll([0.0], [0.0], [0.0]) == pytest.approx(0.918939, abs=1e-6)
    base = gaussian_nll([0.0], [0.0], [0.7])
    assert gaussian_nll([0.0], [1.0], [0.7 * np.exp(0.5)]) == pytest.approx(base + 0.5, abs=1e-12)
    y = np.random.default_rng(3).normal(size=(200_000, 1))
    assert gaussian_nll(np.zeros_like(y), np.zeros_like(y), y) == pytest.approx(
        0.5 * np.log(2 * np.pi * np.e), abs=0.01)


def test_gaussian_nll_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        gaussian_nll([np.nan], [0.0], [0.0])


def test_nll_mean_gradient_zero_at_target():
    d_mean, _ = gaussian_nll_grad(np.array([[0.3, -1.0]]), np.array([[0.2, -0.5]]), np.array([[0.3, -1.0]]))
    assert np.all(d_mean == 0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-3, 3), st.floats(-5, 5))
def test_nll_convex_in_mean(m1, m2, lv, y):
    mid = gaussian_nll([(m1 + m2) / 2], [lv], [y])
    assert mid <= 0.5 * (gaussian_nll([m1], [lv], [y]) + gaussian_nll([m2], [lv], [y])) + 1e-9


@settings(max_examples=200, deadline=None)
@given(st.one_of(st.floats(-1e6, 1e6), st.sampled_from([-1e6, 1e6, 0.0])), st.floats(-12, 0), st.floats(0.01, 5))
def test_soft_clamp_stays_in_bounds(raw, lo, width):
    hi = lo + width
    v, dv = soft_clamp(np.array([raw]), lo, hi)
    assert lo <= v[0] <= hi
    assert 0 <= dv[0] <= 1


def test_soft_clamp_near_identity_in_interior():
    v, _ = soft_clamp(np.array([-3.0]), -10.0, 0.5)
    assert abs(v[0] + 3.0) < 0.05


def test_constant_loss_zero_gradient():
    rng = np.random.default_rng(4)
    net = Mlp((3, 4, 2), "tanh", rng=rng)
    net.weights[-1][...] = 0.0
    net.biases[-1][...] = [0.5, -0.1]
    _, g = backward(net, "squared_error", {"x": rng.normal(size=(5, 3)), "y": np.tile([0.5, -0.1], (5, 1))})
    assert np.all(g == 0)


def _fd_check(net, tag, batch):
    _, g = backward(net, tag, batch)
    fd = finite_difference(lambda: backward(net, tag, batch)[0], net.params)
    return rel_error(g, fd)


@pytest.mark.parametrize("trial", range(20))
def test_gradient_check_regression_losses(trial):
    rng = np.random.default_rng(100 + trial)
    act = ["tanh", "swish", "relu"][trial % 3]
    d_in, d_out = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    hidden = tuple(int(h) for h in rng.integers(2, 6, size=rng.integers(1, 3)))
    members = None if trial % 2 else int(rng.integers(1, 4))
    x = rng.normal(size=(6, d_in))

    # jitter so no relu pre-activation sits exactly on its kink (zero biases would put it there)
    net = Mlp((d_in, *hidden, d_out), act, n_members=members, rng=rng)
    net.params[:] += 0.3 * rng.normal(size=net.size)
    y = rng.normal(size=((members,) if members else ()) + (6, d_out))
    assert _fd_check(net, "squared_error", {"x": x, "y": y}) < 1e-4

    net = Mlp((d_in, *hidden, 2 * d_out), act, n_members=members, rng=rng)
    net.params[:] += 0.3 * rng.normal(size=net.size)
    batch = {"x": x, "y": y, "head": GaussianHead(d_out, (-3.0, 0.5))}
    assert _fd_check(net, "gaussian_nll", batch) < 1e-4


@pytest.mark.parametrize("trial", range(20))
def test_gradient_check_sac_losses(trial):
    rng = np.random.default_rng(200 + trial)
    act = ["tanh", "swish", "relu"][trial % 3]
    obs_dim, act_dim = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    cfg = sac.SacConfig(hidden=(5, 5), activation=act)
    low = -rng.uniform(0.5, 2, act_dim)
    agent = sac.SacAgent(obs_dim, act_dim, low, -low, cfg, rng)
    agent.actor.params[:] += 0.3 * rng.normal(size=agent.actor.size)
    agent.critics.params[:] += 0.3 * rng.normal(size=agent.critics.size)
    obs = rng.normal(size=(6, obs_dim))
    batch = {"agent": agent, "obs": obs, "noise": rng.normal(size=(6, act_dim)), "alpha": rng.uniform(0.05, 1)}
    assert _fd_check(agent.actor, "sac_actor", batch) < 1e-4
    cb = {"obs": obs, "act": rng.normal(size=(6, act_dim)), "y": rng.normal(size=6)}
    assert _fd_check(agent.critics, "sac_critic", cb) < 1e-4


def test_unknown_loss_tag():
    with pytest.raises(KeyError):
        backward(Mlp((1, 1)), "hinge", {})


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_reports_layer():
    net = Mlp((2, 3, 1), "tanh", rng=np.random.default_rng(5))
    with pytest.raises(NonFiniteError):
        backward(net, "squared_error", {"x": np.array([[np.inf, 0.0]]), "y": np.zeros((1, 1))})


def test_adam_zero_gradient_no_move():
    p = np.array([1.0, -2.0])
    opt = Adam(2, 0.1)
    optimizer_step(opt, p, np.zeros(2))
    assert np.array_equal(p, [1.0, -2.0]) and opt.step_count == 1


def test_adam_constant_gradient_step_size():
    # m_t = (1 - b1^t) g and v_t = (1 - b2^t) g^2, so step t moves lr * g * c / (c |g| + eps), c = sqrt(1 - b2^t)
    p = np.zeros(3)
    g = np.array([0.5, -2.0, 1e-3])
    opt = Adam(3, 0.01)
    for _ in range(500):
        before = p.copy()
        opt.step(p, g)
    c = np.sqrt(1 - 0.999 ** 500)
    np.testing.assert_allclose(before - p, 0.01 * g * c / (c * np.abs(g) + 1e-8), rtol=1e-9)
    assert np.all(np.abs(np.abs(before - p)[:2] - 0.01) < 1e-7)


def test_adam_deterministic_and_shape_checked():
    def run():
        rng = np.random.default_rng(6)
        p, opt = rng.normal(size=5), Adam(5)
        for _ in range(50):
            opt.step(p, rng.normal(size=5))
        return p
    assert np.array_equal(run(), run())
    with pytest.raises(ValueError):
        Adam(3).step(np.zeros(3), np.zeros(4))


def test_checkpoint_round_trip():
    net = Mlp((3, 4, 2), "swish", n_members=2, rng=np.random.default_rng(7))
    blob = dump_mlp(net) + b"tail"
    other, end = load_mlp(blob)
    assert blob[end:] == b"tail"
    assert other.widths == net.widths and other.n_members == 2 and other.activation == "swish"
    assert np.array_equal(other.params, net.params)
    with pytest.raises(ValueError):
        load_mlp(b"XXXX" + blob[4:])


def test_training_reduces_loss():
    rng = np.random.default_rng(8)
    net = Mlp((1, 16, 1), "tanh", rng=rng)
    x = rng.uniform(-2, 2, size=(64, 1))
    batch = {"x": x, "y": np.sin(x)}
    opt = Adam(net.size, 1e-2)
    first, _ = nn.backward(net, "squared_error", batch)
    for _ in range(500):
        _, g = nn.backward(net, "squared_error", batch)
        opt.step(net.params, g)
    assert nn.backward(net, "squared_error", batch)[0] < 0.05 * first
