import numpy as np

from branchrl import bounds
from branchrl.exact_mdp import exact_returns, verify_lemma_joint_tvd, model_epsilon_m, policy_divergences
from branchrl.verification import (_trial_rng, run_all, sample_instance, verify_branched,
                                   verify_lemma_branched_returns, verify_lemma_returns, verify_monotonic)


def test_instance_family_ranges():
    for i in range(200):
        inst = sample_instance(_trial_rng(0, "family", i))
        S, A = inst.true.num_states, inst.true.num_actions
        assert 2 <= S <= 10 and 1 <= A <= 4 and 0.5 <= inst.true.gamma <= 0.99
        assert 0 <= inst.lam <= 0.3 and 0 <= inst.nu <= 0.3
        np.testing.assert_array_equal(inst.model.reward, inst.true.reward)


def test_sweeps_have_no_violations():
    res = run_all(30, 5, lemma_trials=300)
    assert set(res) == {"thm_monotonic", "thm_branched_data_error", "thm_branched_current_error",
                        "lemma_joint_tvd", "lemma_marginal_tvd", "lemma_returns", "lemma_branched_returns"}
    for name, (rep, _) in res.items():
        assert rep.violations == 0, name
        assert rep.trials > 0


def test_trials_are_order_independent():
    small, large = verify_monotonic(5, 9), verify_monotonic(12, 9)
    assert small.rows == large.rows[:5]


def test_monotonic_rows_match_direct_computation():
    rep = verify_monotonic(3, 4)
    for i, (tid, lhs, rhs, slack, bad) in enumerate(rep.rows):
        inst = sample_instance(_trial_rng(4, "thm_monotonic", i))
        gap = exact_returns(inst.model, inst.pi) - exact_returns(inst.true, inst.pi)
        eps_pi, _ = policy_divergences(inst.pi, inst.pi_d)
        eps_m = model_epsilon_m(inst.true, inst.model, inst.pi_d, 5000)
        c = bounds.penalty_monotonic(bounds.BoundParams(inst.true.gamma, inst.true.r_max, eps_m, 0, eps_pi))
        assert lhs == gap and rhs == c and slack == rhs - lhs and bad == 0


def test_sweeps_are_not_vacuous():
    # the joint lemma is nearly tight on some draws, so a halved right side would be caught
    joint = verify_lemma_joint_tvd(500, 1)
    assert max(lhs / rhs for _, lhs, rhs, _, _ in joint.rows if rhs > 0) > 0.9
    # the return bounds are worst-case and loose, but the gaps they bound are real
    data, _ = verify_branched(50, 1)
    assert max(lhs / rhs for _, lhs, rhs, _, _ in data.rows if rhs > 0) > 0.01


def test_lemma_sweeps_exercise_every_k():
    rep = verify_lemma_branched_returns(5, 2)
    assert sorted({tid.split(".")[1] for tid, *_ in rep.rows}) == ["0", "1", "2", "5"]
    assert verify_lemma_returns(5, 2).violations == 0
