"""Randomized sweeps checking the closed-form bounds against exact tabular quantities.

Every trial draws its own instance from a seed derived from ``(seed, trial)``,
so reports do not depend on evaluation order.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import bounds
from .exact_mdp import (VerificationReport, branched_post_epsilon_m, branched_returns, exact_returns,
                        model_epsilon_m, perturb_mdp, perturb_policy, policy_divergences, random_mdp,
                        random_policy, verify_lemma_joint_tvd, verify_lemma_marginal_tvd)
from .seeding import derive_seed

EPS_HORIZON = 5000
BRANCH_KS = (0, 1, 2, 5)


@dataclass
class Instance:
    true: object
    model: object
    pi_d: object
    pi: object
    lam: float
    nu: float


def sample_instance(rng: np.random.Generator, max_states=10, max_actions=4,
                    gamma_range=(0.5, 0.99), max_mix=0.3) -> Instance:
    S = int(rng.integers(2, max_states + 1))
    A = int(rng.integers(1, max_actions + 1))
    gamma = float(rng.uniform(*gamma_range))
    true = random_mdp(rng, S, A, gamma)
    lam = float(rng.uniform(0.0, max_mix))
    nu = float(rng.uniform(0.0, max_mix))
    model = perturb_mdp(true, lam, rng)
    pi_d = random_policy(rng, S, A)
    pi = perturb_policy(pi_d, nu, rng)
    return Instance(true, model, pi_d, pi, lam, nu)


def _trial_rng(seed, name, i):
    return np.random.default_rng(derive_seed(seed, f"{name}.{i}"))


def verify_monotonic(trials: int, seed: int) -> VerificationReport:
    """eta[pi] >= eta_hat[pi] - C(eps_m, eps_pi); rows hold (eta_hat - eta, C)."""
    rep = VerificationReport("thm_monotonic")
    for i in range(trials):
        inst = sample_instance(_trial_rng(seed, rep.name, i))
        eta = exact_returns(inst.true, inst.pi)
        eta_hat = exact_returns(inst.model, inst.pi)
        eps_m = model_epsilon_m(inst.true, inst.model, inst.pi_d, EPS_HORIZON)
        eps_pi, _ = policy_divergences(inst.pi, inst.pi_d)
        c = bounds.penalty_monotonic(bounds.BoundParams(inst.true.gamma, inst.true.r_max, eps_m, 0.0, eps_pi))
        rep.add(i, eta_hat - eta, c)
    return rep


def verify_branched(trials: int, seed: int, ks=BRANCH_KS) -> tuple[VerificationReport, VerificationReport]:
    """Branched-return bounds with data-policy and current-policy model error.

    The branched process runs ``(pi_D, true)`` before the branch and
    ``(pi, model)`` after it. Rows are keyed ``trial.k``.
    """
    data_rep = VerificationReport("thm_branched_data_error")
    cur_rep = VerificationReport("thm_branched_current_error")
    for i in range(trials):
        inst = sample_instance(_trial_rng(seed, "thm_branched", i))
        g, r = inst.true.gamma, inst.true.r_max
        eta = exact_returns(inst.true, inst.pi)
        eps_m = model_epsilon_m(inst.true, inst.model, inst.pi_d, EPS_HORIZON)
        eps_mp = model_epsilon_m(inst.true, inst.model, inst.pi, EPS_HORIZON)
        eps_pi, _ = policy_divergences(inst.pi, inst.pi_d)
        for k in ks:
            eta_b = branched_returns(inst.true, inst.pi_d, inst.model, inst.pi, k)
            p = bounds.BoundParams(g, r, eps_m, eps_mp, eps_pi, k)
            data_rep.add(f"{i}.{k}", eta_b - eta, bounds.penalty_branched(p))
            cur_rep.add(f"{i}.{k}", eta_b - eta, bounds.penalty_branched_current(p))
    return data_rep, cur_rep


def lemma_branched_returns_rhs(g, r_max, k, em_pre, ep_pre, em_post, ep_post) -> float:
    return 2 * r_max * (g ** (k + 1) / (1 - g) ** 2 * (em_pre + ep_pre) + k / (1 - g) * (em_post + ep_post)
                        + g ** k / (1 - g) * ep_pre + ep_post / (1 - g))


def lemma_returns_rhs(g, r_max, eps_m, eps_pi) -> float:
    return 2 * r_max * (g * (eps_pi + eps_m) / (1 - g) ** 2 + eps_pi / (1 - g))


def verify_lemma_returns(trials: int, seed: int) -> VerificationReport:
    """|eta1 - eta2| <= 2r[g(eps_pi + eps_m)/(1-g)^2 + eps_pi/(1-g)], eps_m under (mdp1, pi1)."""
    rep = VerificationReport("lemma_returns")
    for i in range(trials):
        inst = sample_instance(_trial_rng(seed, rep.name, i))
        eta1 = exact_returns(inst.true, inst.pi_d)
        eta2 = exact_returns(inst.model, inst.pi)
        eps_m = model_epsilon_m(inst.true, inst.model, inst.pi_d, EPS_HORIZON)
        eps_pi, _ = policy_divergences(inst.pi_d, inst.pi)
        rep.add(i, abs(eta1 - eta2), lemma_returns_rhs(inst.true.gamma, inst.true.r_max, eps_m, eps_pi))
    return rep


def verify_lemma_branched_returns(trials: int, seed: int, ks=BRANCH_KS) -> VerificationReport:
    """Four-epsilon bound between two branched processes with independent pre/post perturbations."""
    rep = VerificationReport("lemma_branched_returns")
    for i in range(trials):
        rng = _trial_rng(seed, rep.name, i)
        inst = sample_instance(rng)
        pre1, pre2 = inst.true, perturb_mdp(inst.true, float(rng.uniform(0, 0.3)), rng)
        post1 = perturb_mdp(inst.true, float(rng.uniform(0, 0.3)), rng)
        post2 = perturb_mdp(post1, float(rng.uniform(0, 0.3)), rng)
        pi1_pre, pi2_pre = inst.pi_d, inst.pi
        pi1_post = perturb_policy(inst.pi_d, float(rng.uniform(0, 0.3)), rng)
        pi2_post = perturb_policy(pi1_post, float(rng.uniform(0, 0.3)), rng)
        g, r = inst.true.gamma, inst.true.r_max
        em_pre = model_epsilon_m(pre1, pre2, pi1_pre, EPS_HORIZON)
        ep_pre, _ = policy_divergences(pi1_pre, pi2_pre)
        ep_post, _ = policy_divergences(pi1_post, pi2_post)
        for k in ks:
            eta1 = branched_returns(pre1, pi1_pre, post1, pi1_post, k)
            eta2 = branched_returns(pre2, pi2_pre, post2, pi2_post, k)
            em_post = branched_post_epsilon_m(pre1, pi1_pre, pi1_post, post1, post2, k, EPS_HORIZON)
            # with k = 0 there is no post-branch segment and the process is the plain pre return
            e_post = ep_post if k > 0 else 0.0
            rep.add(f"{i}.{k}", abs(eta1 - eta2),
                    lemma_branched_returns_rhs(g, r, k, em_pre, ep_pre, em_post, e_post))
    return rep


def k_tradeoff_rows(k_max: int = 200):
    """Argmin of both branched penalties over the acceptance grid.

    Returns rows ``(form, gamma, eps_pi, eps_m, argmin)``.
    """
    rows = []
    for g in (0.5, 0.9, 0.99, 0.999):
        for ep in (0.01, 0.1):
            for em in (0.0, 0.05, 0.5):
                p = bounds.BoundParams(g, 1.0, em, 0.0, ep)
                rows.append(("data_error", g, ep, em, bounds.argmin_branched(p, k_max)))
    for emp in (0.0, 0.001):
        p = bounds.BoundParams(0.99, 1.0, 0.0, emp, 0.1)
        rows.append(("current_error", 0.99, 0.1, emp, bounds.optimal_branch_length(p, k_max)))
    return rows


def run_all(trials: int, seed: int, lemma_trials: int | None = None) -> dict:
    """Every sweep; returns ``{name: (report, seconds)}``."""
    lemma_trials = lemma_trials or 10 * trials
    out = {}

    def timed(name, fn):
        t0 = time.perf_counter()
        res = fn()
        dt = time.perf_counter() - t0
        if isinstance(res, tuple):
            for rep in res:
                out[rep.name] = (rep, dt)
        else:
            out[name] = (res, dt)

    timed("thm_monotonic", lambda: verify_monotonic(trials, seed))
    timed("thm_branched", lambda: verify_branched(trials, seed))
    timed("lemma_joint_tvd", lambda: verify_lemma_joint_tvd(lemma_trials, derive_seed(seed, "joint")))
    timed("lemma_marginal_tvd", lambda: verify_lemma_marginal_tvd(lemma_trials, derive_seed(seed, "chain")))
    timed("lemma_returns", lambda: verify_lemma_returns(trials, seed))
    timed("lemma_branched_returns", lambda: verify_lemma_branched_returns(trials, seed))
    return out
