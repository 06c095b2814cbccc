import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dhvo.envsim import ActionError, HybridAction
from dhvo.nncore import grad_check
from dhvo.pnaf import (
    OuNoise,
    PnafHead,
    advantage,
    linear_epsilon,
    max_valid_v,
    q_value,
    select_action,
)


def test_advantage_examples():
    assert advantage(0.3, 0.3, 5.0) == 0.0
    assert advantage(1.0, 0.0, 1.0) == -0.5
    assert advantage(0.5, 0.25, 2.0) == pytest.approx(-0.125, abs=1e-15)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(1e-6, 100))
def test_advantage_nonpositive_and_zero_only_at_mu(a, mu, L):
    adv = advantage(a, mu, L)
    assert adv <= 0
    if a == mu:
        assert adv == 0
    elif abs(a - mu) * L > 1e-100:
        assert adv < 0


def test_head_output_ranges():
    head = PnafHead(20, n_max=4, hidden=16, rng=np.random.default_rng(0))
    (V, mu, L), _ = head.forward(np.random.default_rng(1).normal(size=(5, 20)) * 50)
    assert V.shape == mu.shape == L.shape == (5, 8)
    assert ((mu >= 0) & (mu <= 1)).all() and (L > 0).all()


def test_q_supremum_is_v_at_mu():
    head = PnafHead(10, n_max=3, hidden=8, rng=np.random.default_rng(2))
    enc = np.random.default_rng(3).normal(size=10)
    (V, mu, _), _ = head.forward(enc[None])
    for idx in range(6):
        y, k = divmod(idx, 2)
        q_at_mu = q_value(enc, HybridAction(y, k, float(mu[0, idx])), head)
        assert q_at_mu == pytest.approx(V[0, idx], abs=1e-12)
        for a in np.linspace(0, 1, 11):
            assert q_value(enc, HybridAction(y, k, float(a)), head) <= V[0, idx] + 1e-12


def test_q_ignores_other_action_heads():
    head = PnafHead(10, n_max=3, hidden=8, rng=np.random.default_rng(4))
    enc = np.random.default_rng(5).normal(size=10)
    act = HybridAction(1, 0, 0.4)
    before = q_value(enc, act, head)
    others = [i for i in range(6) if i != act.index]
    for W, b in ((head.Wv, head.bv), (head.Wm, head.bm), (head.Wl, head.bl)):
        W.value[:, others] += 3.0
        b.value[:, others] -= 1.0
    assert q_value(enc, act, head) == before


def test_q_value_rejects_masked():
    head = PnafHead(4, n_max=2, hidden=4)
    with pytest.raises(ActionError):
        q_value(np.zeros(4), HybridAction(1, 1, 0.5), head, mask=np.array([1, 1, 1, 0], bool))


def test_max_valid_v():
    head = PnafHead(6, n_max=2, hidden=5, rng=np.random.default_rng(6))
    enc = np.random.default_rng(7).normal(size=6)
    (V, _, _), _ = head.forward(enc[None])
    mask = np.array([False, True, True, False])
    assert max_valid_v(enc, mask, head) == V[0, mask].max()
    assert max_valid_v(enc, mask, head, terminal=True) == 0.0
    assert max_valid_v(enc, np.zeros(4, bool), head) == 0.0


def test_head_gradcheck():
    rng = np.random.default_rng(8)
    head = PnafHead(7, n_max=2, hidden=6, rng=rng)
    enc = rng.normal(size=(3, 7))
    idx = np.array([0, 3, 2])
    param = np.array([0.1, 0.9, 0.5])
    w = rng.normal(size=3)

    def closure():
        out, cache = head.forward(enc)
        q = head.q_taken(out, idx, param)
        head.backward(head.q_taken_backward(w, out, idx, param), cache)
        return float(q @ w)

    rep = grad_check(closure, head.params(), tol=1e-6)
    assert rep.passed, rep.per_block


@settings(max_examples=20, deadline=None)
@given(arrays(bool, 8).filter(lambda m: m.any()), st.floats(0, 1), st.integers(0, 2**31))
def test_masked_actions_never_selected(mask, eps, seed):
    head = PnafHead(5, n_max=4, hidden=4, rng=np.random.default_rng(seed))
    rng = np.random.default_rng(seed)
    noise = OuNoise(8, rng=np.random.default_rng(seed + 1))
    out = tuple(o[0] for o in head.forward(rng.normal(size=(1, 5)))[0])
    for _ in range(500):
        a = select_action(out, mask, head, eps, noise, rng)
        assert mask[a.index] and 0 <= a.param <= 1


def test_mask_respected_over_ten_thousand_draws():
    head = PnafHead(5, n_max=6, hidden=4, rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    noise = OuNoise(12, rng=rng)
    bad = 0
    for i in range(10_000):
        mask = rng.random(12) < 0.3
        mask[rng.integers(12)] = True
        out = tuple(o[0] for o in head.forward(rng.normal(size=(1, 5)))[0])
        a = select_action(out, mask, head, (i % 11) / 10, noise, rng)
        bad += not mask[a.index]
    assert bad == 0


def test_uniform_exploration_chi_square():
    head = PnafHead(3, n_max=3, hidden=4)
    out = tuple(o[0] for o in head.forward(np.zeros((1, 3)))[0])
    mask = np.array([True, False, True, True, False, True])
    rng = np.random.default_rng(9)
    counts = np.zeros(6)
    n = 8000
    for _ in range(n):
        counts[select_action(out, mask, head, 1.0, None, rng).index] += 1
    assert counts[~mask].sum() == 0
    exp = n / mask.sum()
    chi2 = float((((counts[mask] - exp) ** 2) / exp).sum())
    assert chi2 < 16.27  # 3 dof, p = 0.001


def test_no_valid_action_raises():
    head = PnafHead(3, n_max=1, hidden=2)
    out = tuple(o[0] for o in head.forward(np.zeros((1, 3)))[0])
    with pytest.raises(ActionError):
        select_action(out, np.zeros(2, bool), head, 0.0, None, np.random.default_rng())


def test_greedy_tie_takes_lowest_index():
    head = PnafHead(3, n_max=2, hidden=2)
    out = (np.zeros(4), np.full(4, 0.5), np.ones(4))
    a = select_action(out, np.array([False, True, True, True]), head, 0.0, None,
                      np.random.default_rng())
    assert a.index == 1 and a.param == 0.5


def test_linear_epsilon():
    assert linear_epsilon(0, 100) == 1.0
    assert linear_epsilon(50, 100) == pytest.approx(0.05)
    assert linear_epsilon(99, 100) == pytest.approx(0.05)
    assert linear_epsilon(25, 100) == pytest.approx(0.525)


def test_ou_noise_reverts():
    n = OuNoise(3, sigma=0.0)
    n.x[:] = 1.0
    for _ in range(50):
        n.sample()
    assert (np.abs(n.x) < 1e-3).all()
    n.reset()
    assert not n.x.any()
