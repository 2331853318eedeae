"""Likelihood-ratio ambiguity sets and the DC objective they induce.

A generative model q inside a KL ball of radius eta around a nominal model
q_bar is parametrized by its likelihood ratio r = q / q_bar, constrained to

    E_qbar[r] = 1,      E_qbar[r ln r] <= eta,      delta0 <= r <= delta1.

Maximizing KL(p || r * q_bar) over that set reduces, with rho = p / q_bar,
to minimizing the concave functional E_qbar[rho ln r]. Splitting
ln r = r ln r - (r ln r - ln r) expresses it as a difference of two convex
functions

    phi(r) = g(r) - h(r),
    g(r)   = E_qbar[rho * r ln r],
    h(r)   = E_qbar[rho * kappa(r)],   kappa(r) = r ln r - ln r = (r-1) ln r,

which is the form consumed by the Frank-Wolfe solver. This module houses
the problem container plus evaluations, gradients, feasibility residuals
and Lipschitz estimates.

Conventions: all inner products and norms are weighted by the base pmf,
``<a, b> = sum_i qbar_i a_i b_i`` and ``||a||_1 = sum_i qbar_i |a_i|``, so
the discrete formulas match their expectation counterparts literally.
Gradients are reported per cell in that convention, e.g.
``grad_g(r)_i = rho_i (ln r_i + 1)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import BoundsViolation
from .gridprob import GridPmf

#: Default ratio box; keeps ln r and 1/r well conditioned in doubles while
#: leaving the KL constraint (rather than the box) active in benchmark runs.
DEFAULT_DELTA0 = 1e-4
DEFAULT_DELTA1 = 1e4

#: Tolerance on the normalization constraint E_qbar[r] = 1.
RATIO_NORM_ATOL = 1e-9

#: Relative slack allowed on the box before BoundsViolation; convex
#: combinations of in-box points can leave it by a few ulps.
_BOX_RTOL = 1e-9


@dataclass(frozen=True)
class AmbiguityBudget:
    """KL radius (nats) of the ambiguity ball for one conditioning cell."""

    eta: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.eta) or self.eta < 0.0:
            raise ValueError("eta must be finite and >= 0")


@dataclass(frozen=True)
class RatioVector:
    """A likelihood ratio r over a base pmf, with box bounds [delta0, delta1].

    Normalization E_qbar[r] = 1 involves the base pmf and is validated by
    the operations that know it (see feasibility_residuals).
    """

    value: np.ndarray
    delta0: float
    delta1: float

    def __init__(self, value, delta0: float = DEFAULT_DELTA0, delta1: float = DEFAULT_DELTA1):
        arr = np.array(value, dtype=float)
        if arr.ndim != 1:
            raise ValueError("ratio values must be 1-d")
        if not np.all(np.isfinite(arr)):
            raise ValueError("ratio values must be finite")
        _check_box(arr, delta0, delta1)
        arr.setflags(write=False)
        object.__setattr__(self, "value", arr)
        object.__setattr__(self, "delta0", float(delta0))
        object.__setattr__(self, "delta1", float(delta1))

    def __len__(self) -> int:
        return self.value.size


def _check_box(arr: np.ndarray, delta0: float, delta1: float) -> None:
    lo = delta0 * (1.0 - _BOX_RTOL)
    hi = delta1 * (1.0 + _BOX_RTOL)
    if np.any(arr < lo) or np.any(arr > hi):
        raise BoundsViolation(
            f"ratio outside [{delta0:g}, {delta1:g}]: "
            f"range [{arr.min():g}, {arr.max():g}]"
        )


@dataclass(frozen=True)
class DcProblem:
    """One instance of the inner maximization in DC form.

    Fields: ``base`` is the nominal row q_bar, ``rho = p / q_bar`` the plant
    likelihood ratio (so ``base.mass * rho`` recovers the plant masses),
    ``budget`` the KL radius, and (delta0, delta1) the ratio box. ``rho_sup``
    caches M = max rho, the constant entering the Lipschitz estimates.
    """

    base: GridPmf
    rho: np.ndarray
    budget: AmbiguityBudget
    delta0: float
    delta1: float
    rho_sup: float

    def __init__(
        self,
        base: GridPmf,
        rho,
        budget: AmbiguityBudget,
        delta0: float = DEFAULT_DELTA0,
        delta1: float = DEFAULT_DELTA1,
    ):
        rho_arr = np.array(rho, dtype=float)
        if rho_arr.shape != base.mass.shape:
            raise ValueError("rho must have one entry per base cell")
        if not np.all(np.isfinite(rho_arr)):
            raise ValueError("rho must be finite (is the base strictly positive?)")
        if np.any(rho_arr < 0.0):
            raise ValueError("rho must be nonnegative")
        if abs(float(base.mass @ rho_arr) - 1.0) > RATIO_NORM_ATOL:
            raise ValueError("rho must satisfy E_qbar[rho] = 1; it is itself a ratio")
        if not (0.0 < delta0 <= 1.0 <= delta1) or not np.isfinite(delta1):
            raise ValueError("need 0 < delta0 <= 1 <= delta1 < inf so r = 1 is feasible")
        rho_arr.setflags(write=False)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "rho", rho_arr)
        object.__setattr__(self, "budget", budget)
        object.__setattr__(self, "delta0", float(delta0))
        object.__setattr__(self, "delta1", float(delta1))
        object.__setattr__(self, "rho_sup", float(rho_arr.max()))

    @property
    def n(self) -> int:
        return len(self.base)

    @property
    def qbar(self) -> np.ndarray:
        return self.base.mass

    @property
    def plant_mass(self) -> np.ndarray:
        """qbar * rho, the plant masses; weights of the phi sum."""
        return self.qbar * self.rho

    def ones(self) -> RatioVector:
        """The nominal ratio r = 1, feasible for every budget."""
        return RatioVector(np.ones(self.n), self.delta0, self.delta1)

    def to_json_dict(self) -> dict:
        return {
            "base": self.base.to_json_dict(),
            "rho": [float(x) for x in self.rho],
            "eta": float(self.budget.eta),
            "delta0": self.delta0,
            "delta1": self.delta1,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DcProblem":
        return cls(
            GridPmf.from_json_dict(doc["base"]),
            doc["rho"],
            AmbiguityBudget(doc["eta"]),
            doc["delta0"],
            doc["delta1"],
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def loads(cls, text: str) -> "DcProblem":
        return cls.from_json_dict(json.loads(text))


def _ratio_values(prob: DcProblem, r) -> np.ndarray:
    arr = r.value if isinstance(r, RatioVector) else np.asarray(r, dtype=float)
    if arr.shape != prob.qbar.shape:
        raise ValueError("ratio length must match the problem support")
    _check_box(arr, prob.delta0, prob.delta1)
    return arr


def eval_g(prob: DcProblem, r) -> float:
    """Convex part g(r) = sum qbar_i rho_i r_i ln r_i."""
    rv = _ratio_values(prob, r)
    return float(np.sum(prob.plant_mass * rv * np.log(rv)))


def eval_h(prob: DcProblem, r) -> float:
    """Convex part h(r) = sum qbar_i rho_i (r_i - 1) ln r_i; nonnegative."""
    rv = _ratio_values(prob, r)
    return float(np.sum(prob.plant_mass * (rv - 1.0) * np.log(rv)))


def eval_phi(prob: DcProblem, r) -> float:
    """DC objective phi(r) = g(r) - h(r) = sum qbar_i rho_i ln r_i.

    Computed as the single sum, which agrees with eval_g - eval_h to
    rounding; phi(1) = 0 and minimizing phi maximizes the ball's KL.
    """
    rv = _ratio_values(prob, r)
    return float(prob.plant_mass @ np.log(rv))


def grad_g(prob: DcProblem, r) -> np.ndarray:
    """Per-cell gradient of g in the qbar-weighted pairing: rho (ln r + 1)."""
    rv = _ratio_values(prob, r)
    return prob.rho * (np.log(rv) + 1.0)


def grad_h(prob: DcProblem, r) -> np.ndarray:
    """Per-cell gradient of h: rho (ln r + 1 - 1/r).

    This is the derivative of kappa(r) = r ln r - ln r; it vanishes at
    r = 1, where h attains its minimum h(1) = 0, and it passes central
    finite-difference validation of eval_h.
    """
    rv = _ratio_values(prob, r)
    return prob.rho * (np.log(rv) + 1.0 - 1.0 / rv)


def grad_phi(prob: DcProblem, r) -> np.ndarray:
    """Per-cell gradient of phi: grad_g - grad_h = rho / r."""
    rv = _ratio_values(prob, r)
    return prob.rho / rv


def kl_constraint_residual(prob: DcProblem, r) -> float:
    """sum qbar_i r_i ln r_i - eta; feasible iff <= 0 (within tolerance).

    The sum equals KL(r * qbar || qbar), the statistical complexity of the
    model the ratio generates.
    """
    arr = r.value if isinstance(r, RatioVector) else np.asarray(r, dtype=float)
    return float(np.sum(prob.qbar * arr * np.log(arr))) - prob.budget.eta


def normalization_residual(prob: DcProblem, r) -> float:
    """|E_qbar[r] - 1|."""
    arr = r.value if isinstance(r, RatioVector) else np.asarray(r, dtype=float)
    return abs(float(prob.qbar @ arr) - 1.0)


def feasibility_residuals(prob: DcProblem, r) -> tuple[float, float]:
    """(normalization residual, KL residual) of a candidate ratio."""
    return normalization_residual(prob, r), kl_constraint_residual(prob, r)


def lipschitz_estimates(prob: DcProblem) -> tuple[float, float, float]:
    """(L_g, L_h, L_phi) from the box bounds and M = max rho.

    ``L_g = M (|ln delta0| + 1)``, ``L_h = M max(|ln delta0|, |ln delta1|)``
    and ``L_phi = L_g + L_h``. These are a priori estimates used to seed the
    solver's curvature backtracking, not certified moduli: for delta0 well
    below 1/e the 1/r term of kappa' exceeds L_h / M.
    """
    m = prob.rho_sup
    abs_ln0 = abs(np.log(prob.delta0))
    abs_ln1 = abs(np.log(prob.delta1))
    l_g = m * (abs_ln0 + 1.0)
    l_h = m * max(abs_ln0, abs_ln1)
    return l_g, l_h, l_g + l_h


def random_feasible_ratio(
    prob: DcProblem,
    rng: np.random.Generator,
    kl_fraction: float | None = None,
) -> RatioVector:
    """Draw a random ratio satisfying all three constraints.

    Draws a Dirichlet pmf, converts it to a ratio against the base, clips to
    the box, restores E_qbar[r] = 1 by mixing toward r = 1, then bisects the
    mixing weight so the KL constraint lands at ``kl_fraction * eta``
    (default: uniform in [0.1, 0.9]). With eta = 0 returns r = 1.
    """
    if kl_fraction is None:
        kl_fraction = float(rng.uniform(0.1, 0.9))
    eta = prob.budget.eta
    if eta == 0.0:
        return prob.ones()

    target = kl_fraction * eta
    q = prob.qbar
    # Clip with a margin so the exact-normalization division below cannot
    # push values back out of the box.
    lo, hi = 1.02 * prob.delta0, 0.98 * prob.delta1
    u = np.clip(rng.dirichlet(np.ones(prob.n)) / q, lo, hi)
    for _ in range(60):
        s = float(q @ u)
        if abs(s - 1.0) <= 1e-12:
            break
        u = np.clip(u / s, lo, hi)
    s = float(q @ u)
    if abs(s - 1.0) > 0.01:
        return prob.ones()

    def ratio_at(t: float) -> np.ndarray:
        # Normalized exactly by construction: E_qbar[1 + t(u-1)] = 1 + t(s-1).
        return (1.0 + t * (u - 1.0)) / (1.0 + t * (s - 1.0))

    def kl_at(t: float) -> float:
        rt = ratio_at(t)
        return float(np.sum(q * rt * np.log(rt)))

    t_hi = 1.0
    if kl_at(t_hi) <= target:
        t = t_hi
    else:
        t_lo = 0.0
        for _ in range(80):
            mid = 0.5 * (t_lo + t_hi)
            if kl_at(mid) <= target:
                t_lo = mid
            else:
                t_hi = mid
        t = t_lo
    return RatioVector(ratio_at(t), prob.delta0, prob.delta1)
