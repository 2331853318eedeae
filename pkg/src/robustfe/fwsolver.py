"""Frank-Wolfe method for the constrained DC ratio problem.

Minimizes ``phi = g - h`` from :mod:`robustfe.ambiguity` over

    C = { r : E_qbar[r] = 1,  E_qbar[r ln r] <= eta,  delta0 <= r <= delta1 }

by iterating a linear-minimization oracle and a curvature-backtracked step:

    1. p_n  = argmin_{p in C} < grad_g(r_n) - grad_h(r_n), p - r_n >
    2. w_n  = < grad_g(r_n) - grad_h(r_n), p_n - r_n >   (<= 0 by minimality)
    3. stop if |w_n| <= omega_tol
    4. j    = smallest l with 2^l L_n >= 2 L_0, then doubled further until
              the quadratic majorization below holds
    5. lam  = min{1, |w_n| / (2^j L_n ||p_n - r_n||_1^2)}
    6. r_{n+1} = r_n + lam (p_n - r_n),   L_{n+1} = 2^(j-1) L_n

Step 4 accepts lam once

    phi(r + lam d) <= phi(r) - |w| lam + (2^j L_n / 2) ||d||_1^2 lam^2,

so every accepted step decreases phi by at least |w_n| lam_n / 2; iterates
stay feasible because C is convex and lam is in (0, 1]. Inner products and
norms are qbar-weighted throughout.

The linear oracle is realized exactly: the KKT profile of
``min <c, p>`` over C is ``p_i = clip(exp(-c_i/mu - 1 - nu/mu), d0, d1)``
with a dual pair (mu, nu). For fixed mu, normalization is solved in closed
form on the segment between clipping breakpoints (no inner tolerance);
mu itself is bracketed geometrically and log-bisected on the entropy
residual, returning the feasible side. When the entropy constraint is
slack at mu = 0 the solution is the box LP vertex, filled greedily in
order of increasing cost.

A brute-force scan over the feasible polytope slice (supports of size
<= 3) ships alongside as an independent reference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ambiguity import (
    DcProblem,
    RatioVector,
    eval_phi,
    feasibility_residuals,
    grad_g,
    grad_h,
    lipschitz_estimates,
)
from .errors import (
    InfeasibleSet,
    NonDescentAnomaly,
    OracleNoConvergence,
    UnsupportedSize,
)

_MAX_DOUBLINGS = 60


@dataclass(frozen=True)
class SolverConfig:
    """Numerical knobs for :func:`solve`.

    ``omega_tol`` of None resolves to ``1e-8 * max(1, |phi(r0)|)`` at solve
    time. ``l_floor``/``l_cap`` clamp the curvature estimate: the floor
    prevents step-size blowup when the doubling index hits 0 repeatedly, the
    cap keeps a priori Lipschitz estimates with huge ``max rho`` from
    shrinking steps below float resolution (backtracking restores any
    curvature the cap hides). ``seed`` feeds randomized initialization when
    a caller wants one; the default start is the deterministic r = 1.
    """

    omega_tol: float | None = None
    max_iters: int = 500
    l_floor: float = 1e-8
    l_cap: float = 1.0
    oracle_tol: float = 1e-10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.omega_tol is not None and not self.omega_tol > 0.0:
            raise ValueError("omega_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.l_floor > 0.0:
            raise ValueError("l_floor must be positive")
        if self.l_cap < self.l_floor:
            raise ValueError("l_cap must be >= l_floor")
        if not self.oracle_tol > 0.0:
            raise ValueError("oracle_tol must be positive")


@dataclass(frozen=True)
class SolveTrace:
    """Per-iteration solver record plus the termination reason.

    The final row is a terminal marker (lam = 0, j = 0) evaluated at the
    returned iterate. ``phi`` is nonincreasing across rows.
    """

    n: np.ndarray
    phi: np.ndarray
    omega: np.ndarray
    lam: np.ndarray
    j: np.ndarray
    L: np.ndarray
    kl_residual: np.ndarray
    norm_residual: np.ndarray
    termination: str

    @classmethod
    def from_rows(cls, rows: Sequence[tuple], termination: str) -> "SolveTrace":
        cols = list(zip(*rows)) if rows else [[]] * 8
        return cls(
            n=np.asarray(cols[0], dtype=int),
            phi=np.asarray(cols[1], dtype=float),
            omega=np.asarray(cols[2], dtype=float),
            lam=np.asarray(cols[3], dtype=float),
            j=np.asarray(cols[4], dtype=int),
            L=np.asarray(cols[5], dtype=float),
            kl_residual=np.asarray(cols[6], dtype=float),
            norm_residual=np.asarray(cols[7], dtype=float),
            termination=termination,
        )

    def __len__(self) -> int:
        return self.n.size

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write("n,phi,omega,lambda,j,L,kl_residual,norm_residual\n")
            for k in range(len(self)):
                handle.write(
                    f"{int(self.n[k])},{float(self.phi[k])!r},{float(self.omega[k])!r},"
                    f"{float(self.lam[k])!r},{int(self.j[k])},{float(self.L[k])!r},"
                    f"{float(self.kl_residual[k])!r},{float(self.norm_residual[k])!r}\n"
                )


@dataclass(frozen=True)
class SolveResult:
    """Output of :func:`solve`.

    ``inner_max_value`` is the worst-case KL reconstructed from the constant
    term of the ratio change of variables: ``KL(p || qbar) - phi_star``.
    Since r = 1 is always feasible and phi(1) = 0, it dominates the nominal
    divergence.
    """

    r_star: RatioVector
    phi_star: float
    inner_max_value: float
    trace: SolveTrace

    def to_json_dict(self) -> dict:
        return {
            "r_star": [float(x) for x in self.r_star.value],
            "delta0": self.r_star.delta0,
            "delta1": self.r_star.delta1,
            "phi_star": float(self.phi_star),
            "inner_max_value": float(self.inner_max_value),
            "termination": self.trace.termination,
            "iterations": int(len(self.trace)) - 1,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json_dict())


@dataclass
class _OracleInfo:
    mu: float
    lp_vertex: bool
    evals: int
    slackness: float


def _entropy_sum(q: np.ndarray, p: np.ndarray) -> float:
    return float(np.sum(q * p * np.log(p)))


def _lp_fill(q: np.ndarray, c: np.ndarray, d0: float, d1: float) -> np.ndarray:
    """Greedy vertex of min <c, p> s.t. E_q[p] = 1, d0 <= p <= d1.

    Cells are raised from d0 to d1 in order of increasing cost until the
    normalization budget is spent; one cell lands fractional. Stable sort
    makes ties deterministic.
    """
    order = np.argsort(c, kind="stable")
    budget = 1.0 - d0 * float(q.sum())
    caps = q[order] * (d1 - d0)
    csum = np.cumsum(caps)
    k = int(np.searchsorted(csum, budget))
    p = np.full(q.shape, d0)
    p[order[:k]] = d1
    if k < q.size:
        spent = csum[k - 1] if k > 0 else 0.0
        if q[order[k]] > 0.0:
            p[order[k]] = d0 + (budget - spent) / q[order[k]]
    return p


def _profile_mass(q, s, tau, ln_d1, d0, d1):
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        p = np.exp(np.minimum(tau + s, ln_d1))
    return np.maximum(p, d0)


def _entropic_profile(q, c, d0, d1, mu):
    """Exactly normalized KKT profile clip(exp(-c/mu - 1 - nu/mu), d0, d1).

    Parametrized by tau = -nu/mu - ... folded into s = -c/mu - 1, so
    p = clip(exp(tau + s)). The normalization root in tau is located by
    binary search over the clipping breakpoints and then solved in closed
    form on the crossing segment, which pins E_q[p] = 1 to rounding error.
    """
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        s = -c / mu - 1.0
    s = np.where(np.isnan(s), 0.0, s)
    ln_d0, ln_d1 = np.log(d0), np.log(d1)

    finite = np.isfinite(s)
    events = np.sort(np.concatenate([ln_d0 - s[finite], ln_d1 - s[finite]]))
    if events.size == 0:
        # every cell pinned by overflow; fall back to the LP vertex
        return _lp_fill(q, c, d0, d1)

    def mass(tau: float) -> float:
        return float(q @ _profile_mass(q, s, tau, ln_d1, d0, d1))

    # First event index whose profile mass reaches 1.
    lo_k, hi_k = 0, events.size - 1
    if mass(events[lo_k]) >= 1.0:
        hi_k = lo_k
    elif mass(events[hi_k]) < 1.0:
        lo_k = hi_k
    else:
        while hi_k - lo_k > 1:
            mid = (lo_k + hi_k) // 2
            if mass(events[mid]) >= 1.0:
                hi_k = mid
            else:
                lo_k = mid

    # Membership is constant on the open segment below events[hi_k].
    if hi_k == 0:
        tau_probe = events[0] - 1.0
    else:
        tau_probe = 0.5 * (events[hi_k - 1] + events[hi_k])
    z = tau_probe + s
    at_hi = z >= ln_d1
    at_lo = z <= ln_d0
    mid_set = ~(at_hi | at_lo)

    p = np.empty_like(q)
    p[at_hi] = d1
    p[at_lo] = d0
    target = 1.0 - d1 * float(q[at_hi].sum()) - d0 * float(q[at_lo].sum())
    if np.any(mid_set):
        sm = s[mid_set]
        m = float(sm.max())
        w = np.exp(sm - m)
        denom = float(q[mid_set] @ w)
        p[mid_set] = np.clip((target / denom) * w, d0, d1)
    elif abs(target) > 1e-9:
        raise OracleNoConvergence("normalization crossing lost between breakpoints")
    return p


def _linear_oracle_impl(prob: DcProblem, c, mu_seed=None):
    q = prob.qbar
    d0, d1, eta = prob.delta0, prob.delta1, prob.budget.eta
    c = np.asarray(c, dtype=float)
    if c.shape != q.shape:
        raise ValueError("cost length must match the problem support")
    if not np.all(np.isfinite(c)):
        raise ValueError("oracle cost must be finite")

    total = float(q.sum())
    if eta < 0.0 or d0 * total > 1.0 + 1e-12 or d1 * total < 1.0 - 1e-12:
        raise InfeasibleSet(
            f"no normalized point in the box: delta0={d0:g}, delta1={d1:g}, eta={eta:g}"
        )

    ones = np.ones_like(q)
    if eta == 0.0:
        # KL(r qbar || qbar) = 0 forces r = 1; the feasible set is a singleton.
        return ones, _OracleInfo(mu=0.0, lp_vertex=False, evals=0, slackness=0.0)
    if float(c.max() - c.min()) <= 1e-15 * max(1.0, float(np.abs(c).max())):
        # Constant cost: every feasible point has the same objective.
        return ones, _OracleInfo(mu=0.0, lp_vertex=False, evals=0, slackness=0.0)

    p_lp = _lp_fill(q, c, d0, d1)
    if _entropy_sum(q, p_lp) <= eta:
        return p_lp, _OracleInfo(mu=0.0, lp_vertex=True, evals=1, slackness=0.0)

    evals = 1

    def residual(mu: float):
        p = _entropic_profile(q, c, d0, d1, mu)
        return _entropy_sum(q, p) - eta, p

    # Bracket mu: residual is nonincreasing in mu, positive at mu -> 0
    # (the LP vertex violates the ball) and -eta at mu -> inf (p -> 1).
    spread = float(c.max() - c.min())
    mu_hi = mu_seed if mu_seed else max(spread / (np.log(d1) - np.log(d0)), 1e-12)
    k_hi, p_hi = residual(mu_hi)
    evals += 1
    grow = 0
    while k_hi > 0.0:
        mu_hi *= 8.0
        k_hi, p_hi = residual(mu_hi)
        evals += 1
        grow += 1
        if grow > 400:
            raise OracleNoConvergence("entropy residual stayed positive while mu grew")
    mu_lo = mu_hi / 8.0
    while True:
        k_lo, p_lo = residual(mu_lo)
        evals += 1
        if k_lo > 0.0:
            break
        mu_hi, k_hi, p_hi = mu_lo, k_lo, p_lo
        mu_lo /= 8.0
        if mu_lo < 1e-250:
            # Degenerate optimal face: the entropic center is already
            # feasible arbitrarily close to mu = 0; it is an LP optimum.
            return p_hi, _OracleInfo(mu=mu_hi, lp_vertex=False, evals=evals, slackness=0.0)

    eta_scale = max(1.0, eta)
    for _ in range(200):
        if mu_hi / mu_lo <= 1.0 + 1e-12 or -k_hi <= 1e-14 * eta_scale:
            break
        mu_mid = float(np.sqrt(mu_lo * mu_hi))
        k_mid, p_mid = residual(mu_mid)
        evals += 1
        if k_mid <= 0.0:
            mu_hi, k_hi, p_hi = mu_mid, k_mid, p_mid
        else:
            mu_lo, k_lo = mu_mid, k_mid

    return p_hi, _OracleInfo(
        mu=mu_hi, lp_vertex=False, evals=evals, slackness=abs(mu_hi * k_hi)
    )


def linear_oracle(prob: DcProblem, c) -> RatioVector:
    """Feasible minimizer of the qbar-weighted linear form sum qbar_i c_i p_i.

    Raises InfeasibleSet when (delta0, delta1, eta) admit no normalized
    point, and OracleNoConvergence if the dual bisection cannot bracket.
    """
    values, _ = _linear_oracle_impl(prob, c)
    return RatioVector(values, prob.delta0, prob.delta1)


def omega(prob: DcProblem, r, p) -> float:
    """Directional linearization gap <grad_g(r) - grad_h(r), p - r>.

    Nonpositive (up to rounding) when p is the oracle output, since the
    oracle minimizes the linear form over a set containing r.
    """
    rv = r.value if isinstance(r, RatioVector) else np.asarray(r, dtype=float)
    pv = p.value if isinstance(p, RatioVector) else np.asarray(p, dtype=float)
    direction = grad_g(prob, rv) - grad_h(prob, rv)
    return float(np.sum(prob.qbar * direction * (pv - rv)))


def candidate_step(omega_abs: float, curvature: float, dist_sq: float) -> float:
    """Step size min{1, |omega| / (curvature * ||p - r||_1^2)}; 1 on a
    degenerate direction (dist_sq = 0)."""
    if dist_sq <= 0.0:
        return 1.0
    return min(1.0, omega_abs / (curvature * dist_sq))


def _weighted_l1(q: np.ndarray, values: np.ndarray) -> float:
    return float(q @ np.abs(values))


def _majorization_holds(prob, r_arr, p_arr, lam, curvature, phi_r, omega_abs, dist_sq):
    phi_trial = eval_phi(prob, (1.0 - lam) * r_arr + lam * p_arr)
    bound = phi_r - omega_abs * lam + 0.5 * curvature * dist_sq * lam * lam
    return phi_trial <= bound


def descent_check(prob: DcProblem, r, p, lam: float, curvature: float) -> bool:
    """Quadratic majorization test for a candidate step.

    Checks ``phi(r + lam (p - r)) <= phi(r) - |omega| lam
    + (curvature / 2) ||p - r||_1^2 lam^2`` with phi evaluated exactly.
    """
    if not 0.0 < lam <= 1.0:
        raise ValueError("lam must be in (0, 1]")
    rv = r.value if isinstance(r, RatioVector) else np.asarray(r, dtype=float)
    pv = p.value if isinstance(p, RatioVector) else np.asarray(p, dtype=float)
    w = omega(prob, rv, pv)
    dist = _weighted_l1(prob.qbar, pv - rv)
    return _majorization_holds(
        prob, rv, pv, lam, curvature, eval_phi(prob, rv), abs(w), dist * dist
    )


def nominal_kl(prob: DcProblem) -> float:
    """KL(p || qbar) = sum qbar rho ln rho, the constant term of the split."""
    pm = prob.plant_mass
    pos = prob.rho > 0.0
    return float(np.sum(pm[pos] * np.log(prob.rho[pos])))


def solve(prob: DcProblem, config: SolverConfig | None = None, r0=None) -> SolveResult:
    """Run the Frank-Wolfe iteration from r0 (default: the nominal r = 1).

    Iterates stay feasible; the trace phi column is nonincreasing, each
    accepted step decreasing phi by at least |omega_n| lam_n / 2. Terminates
    with reason "stationary" once |omega| <= omega_tol, else "max_iters".
    """
    cfg = config or SolverConfig()
    q = prob.qbar

    if r0 is None:
        r = np.ones(prob.n)
    else:
        r = np.array(r0.value if isinstance(r0, RatioVector) else r0, dtype=float)
    norm_res, kl_res = feasibility_residuals(prob, r)
    if norm_res > 1e-9 or kl_res > 1e-9:
        raise ValueError(
            f"r0 infeasible: normalization residual {norm_res:.3g}, KL residual {kl_res:.3g}"
        )

    phi_r = eval_phi(prob, r)
    omega_tol = cfg.omega_tol
    if omega_tol is None:
        omega_tol = 1e-8 * max(1.0, abs(phi_r))

    _, _, l_phi = lipschitz_estimates(prob)
    l0 = min(max(l_phi, cfg.l_floor), cfg.l_cap)
    l_n = l0

    rows = []
    termination = "max_iters"
    mu_seed = None

    for n in range(cfg.max_iters + 1):
        direction_cost = grad_g(prob, r) - grad_h(prob, r)
        p, info = _linear_oracle_impl(prob, direction_cost, mu_seed=mu_seed)
        mu_seed = info.mu if info.mu > 0.0 else None
        w = float(np.sum(q * direction_cost * (p - r)))
        norm_res, kl_res = feasibility_residuals(prob, r)

        if abs(w) <= omega_tol:
            rows.append((n, phi_r, w, 0.0, 0, l_n, kl_res, norm_res))
            termination = "stationary"
            break
        if n == cfg.max_iters:
            rows.append((n, phi_r, w, 0.0, 0, l_n, kl_res, norm_res))
            termination = "max_iters"
            break

        j = 0
        while (2.0 ** j) * l_n < 2.0 * l0:
            j += 1

        dist = _weighted_l1(q, p - r)
        dist_sq = dist * dist
        omega_abs = abs(w)
        lam = candidate_step(omega_abs, (2.0 ** j) * l_n, dist_sq)
        doublings = 0
        while not _majorization_holds(
            prob, r, p, lam, (2.0 ** j) * l_n, phi_r, omega_abs, dist_sq
        ):
            j += 1
            doublings += 1
            if doublings > _MAX_DOUBLINGS:
                raise NonDescentAnomaly("curvature backtracking exceeded its cap")
            lam = candidate_step(omega_abs, (2.0 ** j) * l_n, dist_sq)

        r_next = (1.0 - lam) * r + lam * p
        phi_next = eval_phi(prob, r_next)
        if phi_next > phi_r + 1e-9:
            raise NonDescentAnomaly(
                f"accepted step increased phi by {phi_next - phi_r:.3g}"
            )

        rows.append((n, phi_r, w, lam, j, l_n, kl_res, norm_res))
        l_n = max((2.0 ** (j - 1)) * l_n, cfg.l_floor)
        r, phi_r = r_next, phi_next

    trace = SolveTrace.from_rows(rows, termination)
    return SolveResult(
        r_star=RatioVector(r, prob.delta0, prob.delta1),
        phi_star=phi_r,
        inner_max_value=nominal_kl(prob) - phi_r,
        trace=trace,
    )


def _xlogx_upper_inverse(v: float) -> float:
    """Largest t >= 1 with t ln t <= v (v >= 0)."""
    if v <= 0.0:
        return 1.0
    lo, hi = 1.0, 2.0
    while hi * np.log(hi) < v:
        hi *= 2.0
        if hi > 1e12:
            return hi
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if mid * np.log(mid) <= v:
            lo = mid
        else:
            hi = mid
    return hi


def brute_force_reference(prob: DcProblem, resolution: float) -> tuple[RatioVector, float]:
    """Exhaustive scan of the feasible slice for supports of size <= 3.

    Grids the free coordinates at the given absolute resolution (the last
    coordinate is eliminated by normalization), masks infeasible points, and
    returns the best feasible ratio with its phi value. The exact nominal
    point r = 1 is always included as a candidate, so eta = 0 returns it.
    """
    if resolution <= 0.0:
        raise ValueError("resolution must be positive")
    n = prob.n
    if n > 3:
        raise UnsupportedSize("brute force supports at most 3 cells")

    q = prob.qbar
    d0, d1, eta = prob.delta0, prob.delta1, prob.budget.eta
    pm = prob.plant_mass
    kl_slack = 1e-15 * max(1.0, eta)

    best_r = np.ones(n)
    best_phi = 0.0  # phi at r = 1, always feasible

    if n == 1:
        return RatioVector(best_r, d0, d1), best_phi

    def axis_grid(qi: float, q_rest: float) -> np.ndarray:
        upper = min(d1, (1.0 - q_rest * d0) / qi)
        kl_cap = _xlogx_upper_inverse((eta + q_rest / np.e) / qi)
        upper = min(upper, kl_cap * (1.0 + 1e-12))
        count = int(np.floor((upper - d0) / resolution)) + 1
        return d0 + resolution * np.arange(max(count, 1))

    if n == 2:
        t = axis_grid(q[0], q[1])
        r2 = (1.0 - q[0] * t) / q[1]
        ok = (r2 >= d0) & (r2 <= d1)
        t, r2 = t[ok], r2[ok]
        if t.size:
            kl = q[0] * t * np.log(t) + q[1] * r2 * np.log(r2)
            feas = kl <= eta + kl_slack
            if np.any(feas):
                phi = pm[0] * np.log(t[feas]) + pm[1] * np.log(r2[feas])
                k = int(np.argmin(phi))
                if phi[k] < best_phi:
                    best_phi = float(phi[k])
                    best_r = np.array([t[feas][k], r2[feas][k]])
        return RatioVector(best_r, d0, d1), best_phi

    t1 = axis_grid(q[0], q[1] + q[2])
    t2 = axis_grid(q[1], q[0] + q[2])
    x2 = t2[None, :]
    kl2 = q[1] * t2 * np.log(t2)
    log2 = np.log(t2)
    for start in range(0, t1.size, 256):
        x1 = t1[start : start + 256][:, None]
        r3 = (1.0 - q[0] * x1 - q[1] * x2) / q[2]
        ok = (r3 >= d0) & (r3 <= d1)
        if not np.any(ok):
            continue
        r3 = np.where(ok, r3, 1.0)
        kl = q[0] * x1 * np.log(x1) + kl2[None, :] + q[2] * r3 * np.log(r3)
        feas = ok & (kl <= eta + kl_slack)
        if not np.any(feas):
            continue
        phi = pm[0] * np.log(x1) + pm[1] * log2[None, :] + pm[2] * np.log(r3)
        phi = np.where(feas, phi, np.inf)
        i, jdx = np.unravel_index(int(np.argmin(phi)), phi.shape)
        if phi[i, jdx] < best_phi:
            best_phi = float(phi[i, jdx])
            best_r = np.array([float(x1[i, 0]), float(t2[jdx]), float(r3[i, jdx])])
    return RatioVector(best_r, d0, d1), best_phi
