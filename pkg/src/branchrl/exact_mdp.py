"""Exact finite-MDP evaluation: returns, marginals, divergences, branched returns.

Everything here is dense linear algebra on small instances and serves as
the ground truth the closed-form bounds are checked against.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

TOL_SUM = 1e-12
VIOLATION_TOL = 1e-9
TAIL_TOL = 1e-9


@dataclass(frozen=True)
class TabularMDP:
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    gamma: float
    rho0: np.ndarray  # (S,)
    r_max: float | None = None

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        rho = np.asarray(self.rho0, dtype=float)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "rho0", rho)
        if p.ndim != 3 or p.shape[0] != p.shape[2] or r.shape != p.shape[:2] or rho.shape != (p.shape[0],):
            raise ValueError("inconsistent MDP shapes")
        if np.any(p < 0) or np.any(np.abs(p.sum(-1) - 1.0) > TOL_SUM):
            raise ValueError("transition rows must be distributions")
        if np.any(rho < 0) or abs(rho.sum() - 1.0) > TOL_SUM:
            raise ValueError("rho0 must be a distribution")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.r_max is None:
            object.__setattr__(self, "r_max", float(np.max(np.abs(r))) if r.size else 0.0)
        elif np.any(np.abs(r) > self.r_max + 1e-12):
            raise ValueError("reward exceeds r_max")

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def with_transition(self, transition) -> "TabularMDP":
        return TabularMDP(transition, self.reward, self.gamma, self.rho0, self.r_max)


@dataclass(frozen=True)
class TabularPolicy:
    probs: np.ndarray  # (S, A)

    def __post_init__(self):
        pr = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", pr)
        if pr.ndim != 2 or np.any(pr < 0) or np.any(np.abs(pr.sum(-1) - 1.0) > TOL_SUM):
            raise ValueError("policy rows must be distributions")


@dataclass
class MarginalSequence:
    marginals: list

    @property
    def horizon(self) -> int:
        return len(self.marginals) - 1

    def __getitem__(self, t):
        return self.marginals[t]


# -- random instances ---------------------------------------------------------

def _normalize(x):
    return x / x.sum(axis=-1, keepdims=True)


def random_mdp(rng: np.random.Generator, num_states: int, num_actions: int, gamma: float,
               concentration: float = 1.0) -> TabularMDP:
    """Flat-Dirichlet kernel and initial state, rewards uniform in [-1, 1], r_max = 1."""
    p = _normalize(rng.dirichlet(np.full(num_states, concentration), size=(num_states, num_actions)))
    rho = _normalize(rng.dirichlet(np.ones(num_states)))
    r = rng.uniform(-1.0, 1.0, size=(num_states, num_actions))
    return TabularMDP(p, r, gamma, rho, 1.0)


def perturb_mdp(mdp: TabularMDP, lam: float, rng: np.random.Generator) -> TabularMDP:
    """Model ``(1 - lam) p + lam q`` with ``q`` an independent Dirichlet kernel; rewards shared."""
    q = rng.dirichlet(np.ones(mdp.num_states), size=(mdp.num_states, mdp.num_actions))
    return mdp.with_transition(_normalize((1.0 - lam) * mdp.transition + lam * q))


def random_policy(rng: np.random.Generator, num_states: int, num_actions: int) -> TabularPolicy:
    return TabularPolicy(_normalize(rng.dirichlet(np.ones(num_actions), size=num_states)))


def perturb_policy(policy: TabularPolicy, nu: float, rng: np.random.Generator) -> TabularPolicy:
    q = rng.dirichlet(np.ones(policy.probs.shape[1]), size=policy.probs.shape[0])
    return TabularPolicy(_normalize((1.0 - nu) * policy.probs + nu * q))


# -- evaluation -----------------------------------------------------------------

def policy_kernel(mdp: TabularMDP, policy: TabularPolicy):
    """State-to-state kernel and expected one-step reward under ``policy``."""
    pi = policy.probs
    if pi.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError("policy shape does not match the MDP")
    P = np.einsum("sa,sat->st", pi, mdp.transition)
    r = np.einsum("sa,sa->s", pi, mdp.reward)
    return P, r


def state_values(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    P, r = policy_kernel(mdp, policy)
    A = np.eye(mdp.num_states) - mdp.gamma * P
    try:
        return np.linalg.solve(A, r)
    except np.linalg.LinAlgError as exc:  # not reachable for gamma < 1
        raise RuntimeError("singular policy-evaluation system") from exc


def exact_returns(mdp: TabularMDP, policy: TabularPolicy) -> float:
    """eta = rho0 . (I - gamma P_pi)^-1 r_pi."""
    return float(mdp.rho0 @ state_values(mdp, policy))


def discounted_visitation(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    """Unnormalized sum_t gamma^t Pr(s_t = s)."""
    P, _ = policy_kernel(mdp, policy)
    return np.linalg.solve((np.eye(mdp.num_states) - mdp.gamma * P).T, mdp.rho0)


def state_marginals(mdp: TabularMDP, policy: TabularPolicy, horizon: int) -> MarginalSequence:
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    P, _ = policy_kernel(mdp, policy)
    mu = mdp.rho0.copy()
    out = [mu]
    for _ in range(horizon):
        mu = mu @ P
        out.append(mu)
    return MarginalSequence(out)


def _iter_marginals(mu, P, horizon):
    """Yields ``mu P^t`` for t = 0..horizon, stopping once the sequence has converged."""
    for _ in range(horizon + 1):
        yield mu
        nxt = mu @ P
        if np.max(np.abs(nxt - mu)) < 1e-15:
            return
        mu = nxt


# -- divergences --------------------------------------------------------------

def tv_distance(p, q) -> float:
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("distributions differ in length")
    return float(0.5 * np.abs(p - q).sum())


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; +inf when p has mass where q has none."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("distributions differ in length")
    m = p > 0
    if np.any(q[m] <= 0):
        return float("inf")
    return float(np.sum(p[m] * np.log(p[m] / q[m])))


def policy_divergences(pi: TabularPolicy, pi_d: TabularPolicy) -> tuple[float, float]:
    """Max-over-states TV and KL between two tabular policies."""
    if pi.probs.shape != pi_d.probs.shape:
        raise ValueError("policy shapes differ")
    tv = max(tv_distance(a, b) for a, b in zip(pi.probs, pi_d.probs))
    kl = max(kl_divergence(a, b) for a, b in zip(pi.probs, pi_d.probs))
    return tv, kl


def pinsker_holds(tv: float, kl: float, tol: float = VIOLATION_TOL) -> bool:
    return tv <= np.sqrt(kl / 2.0) + tol


def kernel_tv(mdp_a: TabularMDP, mdp_b: TabularMDP) -> np.ndarray:
    """Per-(s, a) TV between next-state distributions, shape ``(S, A)``."""
    return 0.5 * np.abs(mdp_a.transition - mdp_b.transition).sum(-1)


def model_epsilon_m(mdp_true: TabularMDP, mdp_model: TabularMDP, data_policy: TabularPolicy,
                    horizon: int) -> float:
    """max_{t <= horizon} E_{s ~ marginal_t, a ~ pi_D} TV(p(.|s,a), p_hat(.|s,a)).

    Marginals are those of the true MDP under ``data_policy``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    per_state = (data_policy.probs * kernel_tv(mdp_true, mdp_model)).sum(-1)
    P, _ = policy_kernel(mdp_true, data_policy)
    return max(float(mu @ per_state) for mu in _iter_marginals(mdp_true.rho0, P, horizon))


# -- branched returns -----------------------------------------------------------

def branched_returns(mdp_pre: TabularMDP, policy_pre: TabularPolicy, mdp_post: TabularMDP,
                     policy_post: TabularPolicy, k: int, horizon: int | None = None) -> float:
    """Discounted return of the length-``k`` branched process.

    The state at time ``t`` is reached by running ``(policy_pre, mdp_pre)``
    for ``max(t - k, 0)`` steps from ``rho0`` and then ``(policy_post,
    mdp_post)`` for ``min(t, k)`` steps; for ``k >= 1`` the reward at ``t``
    is collected with ``policy_post`` on ``mdp_post``'s reward table. This
    is the process whose time-``t`` marginal appears in the step-wise
    argument: ``t - k`` steps of pre-branch drift, then ``k`` post-branch
    steps. With ``k = 0`` it is the plain return of the pre process.

    Without ``horizon`` the infinite sum is evaluated in closed form;
    with it, a truncated sum is used and its tail must fall below 1e-9.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return exact_returns(mdp_pre, policy_pre)
    g = mdp_pre.gamma
    P_pre, _ = policy_kernel(mdp_pre, policy_pre)
    P_post, r_post = policy_kernel(mdp_post, policy_post)
    rho = mdp_pre.rho0
    if horizon is None:
        head = 0.0
        mu = rho.copy()
        for t in range(k):
            head += g ** t * float(mu @ r_post)
            mu = mu @ P_post
        d = np.linalg.solve((np.eye(mdp_pre.num_states) - g * P_pre).T, rho)
        for _ in range(k):
            d = d @ P_post
        return head + g ** k * float(d @ r_post)
    r_max = max(mdp_pre.r_max, mdp_post.r_max)
    if g ** horizon * r_max / (1.0 - g) >= TAIL_TOL:
        raise ValueError(f"horizon {horizon} too short for a 1e-9 tail at gamma={g}")
    total = 0.0
    pre = rho.copy()  # rho0 P_pre^(t-k) once t >= k
    for t in range(horizon):
        if t < k:
            mu = rho
            steps = t
        else:
            mu = pre
            steps = k
            pre = pre @ P_pre
        for _ in range(steps):
            mu = mu @ P_post
        total += g ** t * float(mu @ r_post)
    return total


def branched_post_epsilon_m(mdp_1: TabularMDP, pre_policy_1: TabularPolicy, post_policy_1: TabularPolicy,
                            post_mdp_1: TabularMDP, post_mdp_2: TabularMDP, k: int,
                            horizon: int = 2000) -> float:
    """Post-branch model error under process 1's marginals.

    Max over branch points ``tau`` and in-branch steps ``j < k`` of
    ``E_{s ~ mu_tau P1_post^j, a ~ pi1_post} TV(p1_post, p2_post)``, with
    ``mu_tau`` the pre-branch marginal of process 1.
    """
    if k <= 0:
        return 0.0
    per_state = (post_policy_1.probs * kernel_tv(post_mdp_1, post_mdp_2)).sum(-1)
    P_pre, _ = policy_kernel(mdp_1, pre_policy_1)
    P_post, _ = policy_kernel(post_mdp_1, post_policy_1)
    best = 0.0
    for mu in _iter_marginals(mdp_1.rho0, P_pre, horizon):
        for _ in range(k):
            best = max(best, float(mu @ per_state))
            mu = mu @ P_post
    return best


def marginal_epsilon_m(mdp_1: TabularMDP, policy_1: TabularPolicy, mdp_2: TabularMDP,
                       horizon: int = 2000) -> float:
    """ε_m under process 1's own marginals (long horizon, stops at convergence)."""
    return model_epsilon_m(mdp_1, mdp_2, policy_1, horizon)


# -- lemma checks ---------------------------------------------------------------

@dataclass
class VerificationReport:
    name: str
    rows: list = field(default_factory=list)  # (trial_id, lhs, rhs, slack, violated)
    header_note: str = ""

    def add(self, trial_id, lhs, rhs, tol=VIOLATION_TOL):
        slack = float(rhs - lhs)
        self.rows.append((trial_id, float(lhs), float(rhs), slack, int(slack < -tol)))

    @property
    def trials(self) -> int:
        return len(self.rows)

    @property
    def violations(self) -> int:
        return sum(r[4] for r in self.rows)

    @property
    def min_slack(self) -> float:
        return min((r[3] for r in self.rows), default=float("nan"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("trial_id", "quantity_lhs", "quantity_rhs", "slack", "violated"))
        for tid, lhs, rhs, slack, bad in self.rows:
            w.writerow((tid, repr(lhs), repr(rhs), repr(slack), bad))
        return buf.getvalue()


def _random_dist(rng, n, sparse_prob=0.2):
    """Dirichlet draw, occasionally with small concentration so near-degenerate cases show up."""
    alpha = 0.1 if rng.random() < sparse_prob else 1.0
    return _normalize(rng.dirichlet(np.full(n, alpha)) + 0.0)


def verify_lemma_joint_tvd(trials: int, seed: int, nx: int = 4, ny: int = 4) -> VerificationReport:
    """TV(p1(x,y), p2(x,y)) <= TV(p1(x), p2(x)) + max_x TV(p1(y|x), p2(y|x)).

    Two rows per trial: the max-over-x form (``trial_id`` ``i.max``) and the
    tighter expectation-under-p1 form (``i.exp``).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    rep = VerificationReport("lemma_joint_tvd")
    for i in range(trials):
        m1, m2 = _random_dist(rng, nx), _random_dist(rng, nx)
        c1 = np.stack([_random_dist(rng, ny) for _ in range(nx)])
        c2 = np.stack([_random_dist(rng, ny) for _ in range(nx)])
        joint = tv_distance(m1[:, None] * c1, m2[:, None] * c2)
        marg = tv_distance(m1, m2)
        cond = 0.5 * np.abs(c1 - c2).sum(-1)
        rep.add(f"{i}.max", joint, marg + cond.max())
        rep.add(f"{i}.exp", joint, marg + float(m1 @ cond))
    return rep


def verify_lemma_marginal_tvd(trials: int, seed: int, num_states: int = 5,
                              horizon: int = 30) -> VerificationReport:
    """TV(p1^t, p2^t) <= t * delta for t <= horizon, delta = max_t E_{p1^t} TV(p1(.|s), p2(.|s)).

    One row per trial at the tightest t.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    rep = VerificationReport("lemma_marginal_tvd")
    for i in range(trials):
        P1 = np.stack([_random_dist(rng, num_states) for _ in range(num_states)])
        P2 = np.stack([_random_dist(rng, num_states) for _ in range(num_states)])
        mu1 = mu2 = _random_dist(rng, num_states)
        row_tv = 0.5 * np.abs(P1 - P2).sum(-1)
        tvs, exp = [], []
        for _ in range(horizon + 1):
            tvs.append(tv_distance(mu1, mu2))
            exp.append(float(mu1 @ row_tv))
            mu1, mu2 = mu1 @ P1, mu2 @ P2
        delta = max(exp[:horizon]) if horizon > 0 else 0.0
        t = np.arange(horizon + 1)
        slack = t * delta - np.array(tvs)
        j = int(np.argmin(slack))
        rep.add(i, tvs[j], j * delta)
    return rep
