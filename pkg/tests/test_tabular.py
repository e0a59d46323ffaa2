import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvtsg import mms, tabular, verify
from mvtsg.tabular import TabularJointPolicy

from conftest import demand, storage, wind


def cycle_tables(f=(1.0, 0.0)):
    P = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
    return tabular.make_tables(P, np.array([[f[0]], [f[1]]]), [np.ones((2, 1), bool)])


def single_state(reward=0.7, counts=(1,)):
    A = int(np.prod(counts))
    return tabular.make_tables(np.ones((1, A, 1)), np.full((1, A), reward), [np.ones((1, k), bool) for k in counts])


def rand_instance(seed, S=None, counts=(2, 2), beta=None, mask_prob=0.0, density=1.0):
    rng = np.random.default_rng(seed)
    S = S or int(rng.integers(2, 8))
    beta = float(rng.uniform(0, 2)) if beta is None else beta
    t = tabular.random_tables(rng, S, counts, beta=beta, mask_prob=mask_prob, density=density)
    return t, TabularJointPolicy.dirichlet(t, rng), rng


# -- construction ----------------------------------------------------------

def test_build_tables_2mg(tables2):
    assert tables2.n_states == 1296
    assert tables2.action_counts == (30, 5)
    rows = np.asarray(tables2.transition.sum(axis=1)).ravel().reshape(1296, -1)
    jm = tables2.joint_mask()
    assert np.abs(rows[jm] - 1).max() < 1e-12
    assert np.all(rows[~jm] == 0)
    assert tables2.r_lo < 0 < tables2.r_hi


def test_build_tables_storage_only():
    sc = mms.MmsScenario((mms.MicrogridSpec(storage()),))
    t = tabular.build_tables(sc)
    assert t.n_states == 6 and t.action_counts == (5,)


def test_reward_entry(mms2, tables2):
    mg1, mg2 = mms2.microgrids
    k1 = mms.action_index(mms.AgentAction(2, 0), mg1)
    k2 = mms.action_index(mms.AgentAction(2, 0), mg2)
    a = k1 * tables2.action_counts[1] + k2
    for b1, b2 in [(0, 0), (3, 5), (5, 2)]:
        s = mms2.encode([mms.LocalState(5, 0, b1), mms.LocalState(None, None, b2)])
        assert tables2.reward[s, a] == pytest.approx(2.4, abs=1e-12)


def test_tables_match_scalar_model(mms2, tables2):
    rng = np.random.default_rng(0)
    P1 = mms2.microgrids[0].wind.transition
    P2 = mms2.microgrids[0].demand.transition
    for s in rng.integers(0, 1296, 25):
        state = mms2.decode(int(s))
        for i, (loc, mg) in enumerate(zip(state, mms2.microgrids)):
            assert set(np.flatnonzero(tables2.masks[i][s])) == {
                mms.action_index(a, mg) for a in mms.feasible_actions(loc, mg)}
        feas = np.flatnonzero(tables2.joint_mask()[s])
        a = int(rng.choice(feas))
        k1, k2 = divmod(a, tables2.action_counts[1])
        acts = [mms.action_from_index(k1, mms2.microgrids[0]), mms.action_from_index(k2, mms2.microgrids[1])]
        assert tables2.reward[s, a] == pytest.approx(mms.exchange_power(state, acts, mms2), abs=1e-12)
        row = tables2.transition[s * tables2.n_joint + a].toarray().ravel()
        b1 = mms.next_storage_index(mms2.microgrids[0], state[0], acts[0])
        b2 = mms.next_storage_index(mms2.microgrids[1], state[1], acts[1])
        expect = np.zeros(1296)
        for w, d in itertools.product(range(6), range(6)):
            expect[mms2.encode([mms.LocalState(w, d, b1), mms.LocalState(None, None, b2)])] = \
                P1[state[0].wind_idx, w] * P2[state[0].demand_idx, d]
        assert np.abs(row - expect).max() < 1e-15


def test_state_cap(mms3):
    with pytest.raises(tabular.StateCapExceeded, match="train-ippo"):
        tabular.build_tables(mms3)


def test_make_tables_validation():
    with pytest.raises(ValueError):
        tabular.make_tables(np.full((2, 1, 2), 0.4), np.zeros((2, 1)), [np.ones((2, 1), bool)])
    with pytest.raises(ValueError):
        tabular.make_tables(np.full((2, 1, 2), 0.5), np.zeros((2, 1)), [np.zeros((2, 1), bool)])


def test_policy_validation(tables2):
    p = TabularJointPolicy.uniform(tables2)
    p.validate(tables2)
    bad = TabularJointPolicy((np.ones_like(p.probs[0]) / 30, p.probs[1]))
    with pytest.raises(ValueError):
        bad.validate(tables2)


def test_normalized_rewards():
    t, _, _ = rand_instance(1)
    t = tabular.make_tables(t.transition.toarray().reshape(t.n_states, t.n_joint, -1), 5 * t.reward - 2, t.masks)
    n = t.normalized()
    jm = n.joint_mask()
    assert n.reward[jm].min() == pytest.approx(0) and n.reward[jm].max() == pytest.approx(1)
    assert (n.r_lo, n.r_hi) == (0.0, 1.0)


# -- stationary distribution -----------------------------------------------

def test_two_cycle_stationary():
    t = cycle_tables()
    pi = tabular.stationary_distribution(t, TabularJointPolicy.uniform(t))
    assert np.allclose(pi, [0.5, 0.5])


def test_identity_chain_is_multichain():
    t = tabular.make_tables(np.eye(3)[:, None, :], np.zeros((3, 1)), [np.ones((3, 1), bool)])
    with pytest.raises(tabular.MultichainError):
        tabular.stationary_distribution(t, TabularJointPolicy.uniform(t))
    with pytest.raises(tabular.MultichainError):
        tabular.stationary_distribution(t, TabularJointPolicy.uniform(t), start=np.full(3, 1 / 3))
    pi = tabular.stationary_distribution(t, TabularJointPolicy.uniform(t), start=1)
    assert np.array_equal(pi, [0, 1, 0])


def _chain_pi(P):
    w, v = np.linalg.eig(P.T)
    x = np.real(v[:, np.argmin(np.abs(w - 1))])
    return x / x.sum()


def test_idle_baseline_product_form(mms2, tables2):
    idle = TabularJointPolicy.idle(tables2, mms2)
    with pytest.raises(tabular.MultichainError):
        tabular.analyze(tables2, idle)
    start = mms2.encode([mms.LocalState(0, 0, 2), mms.LocalState(None, None, 4)])
    ev = tabular.evaluate(tables2, idle, start=start)
    mg = mms2.microgrids[0]
    expect = np.outer(_chain_pi(mg.wind.transition), _chain_pi(mg.demand.transition))
    got = np.zeros((6, 6))
    for s in np.flatnonzero(ev.pi):
        loc = mms2.decode(int(s))
        assert (loc[0].storage_idx, loc[1].storage_idx) == (2, 4)
        got[loc[0].wind_idx, loc[0].demand_idx] = ev.pi[s]
    assert np.abs(got - expect).max() < 1e-12


def test_idle_baseline_values(mms2, tables2):
    idle = TabularJointPolicy.idle(tables2, mms2)
    for start in (0, 500, 1295):
        ev = tabular.evaluate(tables2, idle, start=start)
        assert ev.eta == pytest.approx(-1.52, abs=0.01)
        assert ev.zeta == pytest.approx(0.57, abs=0.01)
        assert ev.j_value == ev.eta


def test_three_mg_baseline_is_three_singles(mms3):
    single = mms.MmsScenario((mms3.microgrids[0],))
    t = tabular.build_tables(single)
    ev = tabular.evaluate(t, TabularJointPolicy.idle(t, single), start=0)
    assert 3 * ev.eta == pytest.approx(-4.55, abs=0.02)
    # independent identical microgrids: variances add too
    assert 3 * ev.zeta == pytest.approx(1.70, abs=0.02)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_stationarity_residual(seed):
    t, p, _ = rand_instance(seed, density=0.5, mask_prob=0.2)
    P, _ = tabular.induced_chain(t, p)
    try:
        pi = tabular.stationary_distribution(t, p)
    except tabular.MultichainError:
        return
    assert np.abs(P.T @ pi - pi).max() < 1e-10
    assert pi.sum() == pytest.approx(1) and pi.min() >= 0


def test_sparse_paths_match_dense(monkeypatch):
    t, p, _ = rand_instance(4, S=40, density=0.3)
    dense = tabular.analyze(t, p)
    monkeypatch.setattr(tabular, "DENSE_SOLVE_LIMIT", 5)
    sparse = tabular.analyze(t, p)
    assert np.abs(dense.pi - sparse.pi).max() < 1e-10
    assert np.abs(dense.v_f - sparse.v_f).max() < 1e-8
    assert sparse.j_value == pytest.approx(dense.j_value, abs=1e-10)


# -- rewards, variance, objective ------------------------------------------

def test_zero_reward_game():
    t, p, _ = rand_instance(2)
    t0 = tabular.make_tables(t.transition.toarray().reshape(t.n_states, t.n_joint, -1), 0 * t.reward, t.masks)
    an = tabular.analyze(t0, p)
    assert an.eta == 0 and an.zeta == 0


def test_constant_reward_zero_variance():
    t, p, _ = rand_instance(3)
    tc = tabular.make_tables(t.transition.toarray().reshape(t.n_states, t.n_joint, -1),
                             np.full_like(t.reward, 1.3), t.masks, beta=0.5)
    an = tabular.analyze(tc, p)
    assert an.eta == pytest.approx(1.3) and an.zeta == pytest.approx(0, abs=1e-15)


def test_bernoulli_variance():
    t = cycle_tables((0.0, 1.0))
    ev = tabular.evaluate(t, TabularJointPolicy.uniform(t))
    assert ev.eta == pytest.approx(0.5) and ev.zeta == pytest.approx(0.25)


def test_mean_variance_arithmetic():
    assert tabular.mean_variance(-1.52, 0.57, 0) == -1.52
    assert tabular.mean_variance(-1.52, 0.57, 1.0) == pytest.approx(-2.09)
    assert tabular.mean_variance(0, 0, 0.7) == 0
    with pytest.raises(ValueError):
        tabular.mean_variance(0, 0, -1)


def test_surrogate_reward():
    r = np.array([0.3, -2.0, 4.0])
    assert np.array_equal(tabular.surrogate_reward(r, 1.0, 0.0), r)
    assert tabular.surrogate_reward(0.8, 0.8, 0.5) == 0.8
    assert tabular.surrogate_reward(2.4, -1.52, 0.3) == pytest.approx(-2.20992, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_average_surrogate_equals_objective(seed):
    # sum_s pi(s) fbar(s) = eta - beta zeta = J
    t, p, _ = rand_instance(seed)
    an = tabular.analyze(t, p)
    assert float(an.pi @ (p.joint() * an.f).sum(axis=1)) == pytest.approx(an.j_value, abs=1e-12)


# -- Poisson, Q, A ---------------------------------------------------------

def test_single_state_poisson():
    t = single_state(counts=(1,))
    an = tabular.analyze(t, TabularJointPolicy.uniform(t))
    assert np.array_equal(an.v_f, [0.0])
    assert np.allclose(an.q_f, 0) and np.allclose(an.a_f, 0)


def test_two_cycle_poisson_and_q():
    t = cycle_tables((1.0, 0.0))
    p = TabularJointPolicy.uniform(t)
    v = tabular.poisson_solve(t, p, t.reward, 0.5)
    assert np.allclose(v, [0.25, -0.25], atol=1e-14)
    q, a = tabular.q_and_advantage(t, p, t.reward, 0.5, v)
    # Q(0) = 1 - 0.5 + V(1), Q(1) = 0 - 0.5 + V(0)
    assert np.allclose(q[:, 0], [0.25, -0.25], atol=1e-14)
    assert np.allclose(a, 0, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_poisson_matches_dense_reference(seed):
    t, p, _ = rand_instance(seed, mask_prob=0.2)
    an = tabular.analyze(t, p)
    ref = verify.reference_eval(t, p.probs)
    assert an.j_value == pytest.approx(ref["J"], abs=1e-12)
    assert np.abs(an.v_f - ref["V"]).max() < 1e-9
    assert np.abs(np.where(t.joint_mask(), an.a_f - ref["A"], 0)).max() < 1e-9
    P, mu = tabular.induced_chain(t, p)
    c = (mu * an.f).sum(axis=1) - an.j_value
    assert np.abs(an.v_f - c - P @ an.v_f).max() < 1e-9
    assert abs(an.pi @ an.v_f) < 1e-12


def test_poisson_series_oracle():
    t, p, _ = rand_instance(7, S=5)
    an = tabular.analyze(t, p)
    res = verify.poisson_series_solve(t, p, an.f, an.j_value, 10_000)
    assert res.converged
    assert np.abs(res.v - an.v_f).max() < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_advantage_centering(seed):
    t, p, _ = rand_instance(seed, S=5, mask_prob=0.3)
    an = tabular.analyze(t, p)
    assert np.abs((p.joint() * an.a_f).sum(axis=1)).max() < 1e-10


# -- marginal Q ------------------------------------------------------------

def test_marginal_q_single_agent():
    t, p, _ = rand_instance(0, counts=(3,))
    an = tabular.analyze(t, p)
    assert np.allclose(tabular.marginal_q(an.q_f, p, 0), an.q_f, atol=0)


def test_marginal_q_deterministic_partner():
    t, p, _ = rand_instance(1, counts=(3, 2))
    pd = TabularJointPolicy((p.probs[0], np.tile([0.0, 1.0], (t.n_states, 1))))
    an = tabular.analyze(t, pd)
    Q = an.q_f.reshape(t.n_states, 3, 2)
    assert np.allclose(tabular.marginal_q(an.q_f, pd, 0), Q[:, :, 1], atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([(2, 3), (3, 2, 2), (2, 2, 2, 2)]))
def test_marginal_q_brute_force(seed, counts):
    rng = np.random.default_rng(seed)
    S = 3
    probs = [rng.dirichlet(np.ones(k), size=S) for k in counts]
    Q = rng.normal(size=(S, int(np.prod(counts))))
    p = TabularJointPolicy(tuple(probs))
    for i in range(len(counts)):
        got = tabular.marginal_q(Q, p, i)
        want = np.zeros((S, counts[i]))
        for s in range(S):
            for a, joint in enumerate(itertools.product(*[range(k) for k in counts])):
                w = np.prod([probs[j][s, joint[j]] for j in range(len(counts)) if j != i])
                want[s, joint[i]] += w * Q[s, a]
        assert np.abs(got - want).max() < 1e-12


# -- gradient --------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.booleans())
def test_gradient_matches_finite_differences(seed, pair):
    t, p, rng = rand_instance(seed, S=int(np.random.default_rng(seed).integers(2, 12)), counts=(2, 3),
                              mask_prob=0.2)
    d = verify.random_tangent(t, rng, p, pair=pair)
    g = tabular.exact_gradient(t, p)
    fd = verify.fd_directional_derivative(t, p, d)
    assert verify.directional(g, d) == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_gradient_beta_zero_specialisation():
    # with beta = 0 the gradient is pi(s) times the average-reward marginal Q
    t, p, _ = rand_instance(8, beta=0.0, counts=(2, 2))
    g = tabular.exact_gradient(t, p)
    ref = verify.reference_eval(t, p.probs, beta=0.0)
    Q = ref["Q"].reshape(t.n_states, 2, 2)
    want0 = ref["pi"][:, None] * np.einsum("sab,sb->sa", Q, p.probs[1])
    assert np.abs(g[0] - want0).max() < 1e-10


def test_uniform_reward_zero_gradient():
    t, p, _ = rand_instance(9, beta=0.8)
    tc = tabular.make_tables(t.transition.toarray().reshape(t.n_states, t.n_joint, -1),
                             np.full_like(t.reward, -0.4), t.masks, beta=0.8)
    g = tabular.exact_gradient(tc, p)
    # along feasible simplex directions the derivative vanishes: each row of g is constant
    for gi, m in zip(g, tc.masks):
        for s in range(tc.n_states):
            vals = gi[s, m[s]]
            assert np.ptp(vals) < 1e-12


# -- performance difference ------------------------------------------------

def test_performance_difference_identical():
    t, p, _ = rand_instance(10)
    lhs, rhs = tabular.performance_difference(t, p, p)
    assert lhs == 0 and abs(rhs) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_performance_difference_random(seed):
    t, pa, rng = rand_instance(seed, S=4)
    pb = TabularJointPolicy.dirichlet(t, rng)
    lhs, rhs = tabular.performance_difference(t, pa, pb)
    assert abs(lhs - rhs) < 1e-9


def test_performance_difference_beta_zero():
    t, pa, rng = rand_instance(11, S=4, beta=0.0)
    pb = TabularJointPolicy.dirichlet(t, rng)
    lhs, rhs = tabular.performance_difference(t, pa, pb)
    # classical: eta_b - eta_a = E_{pi_b, mu_b}[A^a] with plain rewards
    ra = verify.reference_eval(t, pa.probs, beta=0.0)
    rb = verify.reference_eval(t, pb.probs, beta=0.0)
    classical = float(np.einsum("s,sa,sa->", rb["pi"], rb["mu"], ra["A"]))
    assert rhs == pytest.approx(classical, abs=1e-12)
    assert lhs == pytest.approx(rb["eta"] - ra["eta"], abs=1e-12)


# -- Monte Carlo consistency -----------------------------------------------

def test_monte_carlo_matches_exact():
    mg = mms.MicrogridSpec(storage(), wind(np.array([[.5, .5, 0, 0, 0, 0], [.3, .4, .3, 0, 0, 0],
                                                     [0, .3, .4, .3, 0, 0], [0, 0, .3, .4, .3, 0],
                                                     [0, 0, 0, .3, .4, .3], [0, 0, 0, 0, .5, .5]])),
                           demand(np.full((6, 6), 1 / 6)), curtailment_levels=tuple(np.linspace(0, 3, 6)))
    sc = mms.MmsScenario((mg,))
    t = tabular.build_tables(sc)
    p = TabularJointPolicy.uniform(t)
    ev = tabular.evaluate(t, p)
    mc = verify.mc_long_run_stats(sc, p, steps=1_000_000, seed=3, n_chains=64, burn_in=200)
    assert abs(mc.eta - ev.eta) < 3 * mc.eta_se
    assert abs(mc.zeta - ev.zeta) < 3 * mc.zeta_se
