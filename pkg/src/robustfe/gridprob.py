"""Probability mass functions on finite grids.

Primitives shared by the whole package: normalized pmfs with explicit cell
identifiers, conditional kernels (one pmf per conditioning cell), KL
divergence and its chain rule, the free-energy functional
``F(p, q) = KL(p||q) + E_p[loss]`` together with its closed-form minimizer,
Gaussian discretization onto cell centers, and exponential tilting.

Masses live in float64 numpy arrays. Constructors normalize, so downstream
code can rely on sums being 1 to machine precision. Every divergence sum
uses the limit convention ``0 * ln(0/q) = 0``.

All types are immutable after construction and all operations are pure, so
they are safe to evaluate concurrently without coordination.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AbsoluteContinuityViolation, DegenerateNormalizer

#: Values below this are lifted before normalization in discretize_gaussian,
#: so discretized Gaussians are strictly positive on every cell.
POSITIVITY_FLOOR = 1e-300

#: Absolute tolerance on mass sums after construction/normalization.
NORMALIZATION_ATOL = 1e-12


def _as_readonly(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GridPmf:
    """A normalized probability mass function on a finite grid.

    ``support`` is an ordered tuple of cell identifiers (ints, strings, or
    tuples of ints for product grids); ``mass`` holds one nonnegative weight
    per cell and sums to 1 after construction.
    """

    support: tuple
    mass: np.ndarray

    def __init__(self, support: Sequence, mass) -> None:
        support = tuple(support)
        arr = np.asarray(mass, dtype=float)
        if arr.ndim != 1 or arr.size != len(support):
            raise ValueError("mass must be 1-d with one entry per support cell")
        if not np.all(np.isfinite(arr)):
            raise ValueError("mass entries must be finite")
        if np.any(arr < 0.0):
            raise ValueError("mass entries must be nonnegative")
        total = float(arr.sum())
        if total <= 0.0:
            raise ValueError("total mass must be positive")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "mass", _as_readonly(arr / total))

    def __len__(self) -> int:
        return len(self.support)

    def to_json_dict(self) -> dict:
        return {
            "support": [list(s) if isinstance(s, tuple) else s for s in self.support],
            "mass": [float(x) for x in self.mass],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "GridPmf":
        support = [tuple(s) if isinstance(s, list) else s for s in doc["support"]]
        return cls(support, doc["mass"])

    def dumps(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def loads(cls, text: str) -> "GridPmf":
        return cls.from_json_dict(json.loads(text))


@dataclass(frozen=True)
class ConditionalKernel:
    """A family of GridPmfs over one shared target support.

    ``conditioning`` indexes the rows (e.g. ``(state, action)`` pairs);
    ``mass[i]`` is the pmf of row i. Rows are normalized on construction.
    """

    conditioning: tuple
    support: tuple
    mass: np.ndarray

    def __init__(self, conditioning: Sequence, support: Sequence, mass) -> None:
        conditioning = tuple(conditioning)
        support = tuple(support)
        arr = np.asarray(mass, dtype=float)
        if arr.ndim != 2 or arr.shape != (len(conditioning), len(support)):
            raise ValueError("mass must be (n_conditioning, n_support)")
        if not np.all(np.isfinite(arr)):
            raise ValueError("mass entries must be finite")
        if np.any(arr < 0.0):
            raise ValueError("mass entries must be nonnegative")
        sums = arr.sum(axis=1)
        if np.any(sums <= 0.0):
            raise ValueError("every row must have positive total mass")
        if np.max(np.abs(sums - 1.0)) > NORMALIZATION_ATOL:
            arr = arr / sums[:, None]
        if arr.flags.writeable:
            arr = arr.copy()
            arr.setflags(write=False)
        object.__setattr__(self, "conditioning", conditioning)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "mass", arr)

    @property
    def n_rows(self) -> int:
        return len(self.conditioning)

    def row(self, index: int) -> GridPmf:
        return GridPmf(self.support, self.mass[index])

    def row_index(self, key) -> int:
        return self.conditioning.index(key)

    def to_json_dict(self) -> dict:
        return {
            "conditioning": [
                list(c) if isinstance(c, tuple) else c for c in self.conditioning
            ],
            "support": [list(s) if isinstance(s, tuple) else s for s in self.support],
            "mass": [[float(x) for x in row] for row in self.mass],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ConditionalKernel":
        conditioning = [tuple(c) if isinstance(c, list) else c for c in doc["conditioning"]]
        support = [tuple(s) if isinstance(s, list) else s for s in doc["support"]]
        return cls(conditioning, support, doc["mass"])

    def dumps(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def loads(cls, text: str) -> "ConditionalKernel":
        return cls.from_json_dict(json.loads(text))


@dataclass(frozen=True)
class LossTable:
    """Per-cell loss values aligned with a pmf support. Finite everywhere."""

    support: tuple
    values: np.ndarray

    def __init__(self, support: Sequence, values) -> None:
        support = tuple(support)
        arr = np.asarray(values, dtype=float)
        if arr.ndim != 1 or arr.size != len(support):
            raise ValueError("values must be 1-d with one entry per support cell")
        if not np.all(np.isfinite(arr)):
            raise ValueError("loss values must be finite")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "values", _as_readonly(arr))


def _require_same_support(a, b) -> None:
    if a.support != b.support:
        raise ValueError("operands must share one support, in the same order")


def kl_mass(p: np.ndarray, q: np.ndarray) -> float:
    """KL divergence of raw mass arrays, with 0*ln(0/q) = 0.

    Array-level core used by the GridPmf wrapper and by joint-distribution
    checks that assemble masses on the fly.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pos = p > 0.0
    if np.any(q[pos] == 0.0):
        raise AbsoluteContinuityViolation("p has mass where q has none")
    pp = p[pos]
    return float(np.sum(pp * np.log(pp / q[pos])))


def kl_divergence(p: GridPmf, q: GridPmf) -> float:
    """KL(p || q) = sum p ln(p/q). Nonnegative, zero iff p == q."""
    _require_same_support(p, q)
    return kl_mass(p.mass, q.mass)


def entropy(p: GridPmf) -> float:
    """Shannon entropy -sum p ln p in nats."""
    pos = p.mass[p.mass > 0.0]
    return float(-np.sum(pos * np.log(pos)))


def _split_joint(pmf: GridPmf):
    """Group a pmf over pair identifiers (w1, w2) into a dense matrix."""
    firsts, seconds = [], []
    f_index, s_index = {}, {}
    for cell in pmf.support:
        if not (isinstance(cell, tuple) and len(cell) == 2):
            raise ValueError("joint pmf support cells must be (w1, w2) pairs")
        w1, w2 = cell
        if w1 not in f_index:
            f_index[w1] = len(firsts)
            firsts.append(w1)
        if w2 not in s_index:
            s_index[w2] = len(seconds)
            seconds.append(w2)
    matrix = np.zeros((len(firsts), len(seconds)))
    for cell, m in zip(pmf.support, pmf.mass):
        matrix[f_index[cell[0]], s_index[cell[1]]] = m
    return firsts, seconds, matrix


def joint_pmf(matrix, w1_labels=None, w2_labels=None) -> GridPmf:
    """Wrap a 2-d mass matrix as a GridPmf over (w1, w2) pair identifiers."""
    matrix = np.asarray(matrix, dtype=float)
    n1, n2 = matrix.shape
    w1_labels = list(range(n1)) if w1_labels is None else list(w1_labels)
    w2_labels = list(range(n2)) if w2_labels is None else list(w2_labels)
    support = [(a, b) for a in w1_labels for b in w2_labels]
    return GridPmf(support, matrix.reshape(-1))


def kl_chain_rule_residual(joint_f: GridPmf, joint_g: GridPmf) -> float:
    """Gap between KL of a joint and its marginal/conditional decomposition.

    Returns ``|KL(f(w1,w2)||g(w1,w2)) - KL(f(w1)||g(w1))
    - E_{f(w1)}[KL(f(w2|w1)||g(w2|w1))]|``, which is zero in exact
    arithmetic for any pair of joints with f absolutely continuous w.r.t. g.
    """
    _require_same_support(joint_f, joint_g)
    _, _, fm = _split_joint(joint_f)
    _, _, gm = _split_joint(joint_g)

    total = kl_mass(fm.reshape(-1), gm.reshape(-1))

    f1 = fm.sum(axis=1)
    g1 = gm.sum(axis=1)
    marginal = kl_mass(f1, g1)

    conditional = 0.0
    for i in range(fm.shape[0]):
        if f1[i] == 0.0:
            continue
        conditional += f1[i] * kl_mass(fm[i] / f1[i], gm[i] / g1[i])

    return abs(total - marginal - conditional)


def free_energy(p: GridPmf, q: GridPmf, loss: LossTable) -> float:
    """KL(p || q) + E_p[loss]."""
    _require_same_support(p, q)
    _require_same_support(p, loss)
    return kl_mass(p.mass, q.mass) + float(p.mass @ loss.values)


def free_energy_argmin(q: GridPmf, loss: LossTable) -> tuple[GridPmf, float]:
    """Closed-form minimizer of p -> KL(p||q) + E_p[loss] over pmfs.

    Returns ``(p_star, value)`` with ``p_star = q exp(-loss) / Z`` and
    ``value = -ln Z`` where ``Z = sum q exp(-loss)``. Raises
    DegenerateNormalizer when Z underflows to zero, which signals that the
    loss scale is too large and the caller must rescale.
    """
    _require_same_support(q, loss)
    if np.any(q.mass <= 0.0):
        raise ValueError("q must be strictly positive on its support")
    weights = q.mass * np.exp(-loss.values)
    z = float(weights.sum())
    if z <= 0.0 or not np.isfinite(z):
        raise DegenerateNormalizer("sum q*exp(-loss) underflowed; rescale the loss")
    return GridPmf(q.support, weights), -float(np.log(z))


def softmax_tilt(base: GridPmf, score) -> GridPmf:
    """Exponential reweighting ``base * exp(-score) / Z`` on the same support.

    Invariant to adding a constant to ``score``.
    """
    score = np.asarray(score, dtype=float)
    if score.shape != base.mass.shape:
        raise ValueError("score must have one entry per support cell")
    if not np.all(np.isfinite(score)):
        raise ValueError("scores must be finite")
    weights = base.mass * np.exp(-score)
    z = float(weights.sum())
    if z <= 0.0 or not np.isfinite(z):
        raise DegenerateNormalizer("tilt normalizer degenerate; rescale the score")
    return GridPmf(base.support, weights)


def discretize_gaussian(
    mean,
    variances,
    centers,
    wrap=None,
    support: Sequence | None = None,
) -> GridPmf:
    """Evaluate a diagonal-covariance Gaussian at cell centers and normalize.

    ``centers`` is (n_cells, d) or (n_cells,) for d = 1; ``variances`` holds
    the diagonal of the covariance. ``wrap`` optionally gives a period per
    dimension (e.g. 2*pi for angles), in which case displacements are taken
    on the circle. Densities are lifted to POSITIVITY_FLOOR before
    normalization, so the result is strictly positive on every cell.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    var = np.atleast_1d(np.asarray(variances, dtype=float))
    pts = np.asarray(centers, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[0] == 0:
        raise ValueError("grid must be nonempty")
    if mean.size != pts.shape[1] or var.size != pts.shape[1]:
        raise ValueError("mean/variances must match the center dimension")
    if np.any(var <= 0.0):
        raise ValueError("variances must be positive")

    delta = pts - mean[None, :]
    if wrap is not None:
        for k, period in enumerate(wrap):
            if period is not None:
                delta[:, k] -= period * np.round(delta[:, k] / period)

    log_density = -0.5 * np.sum(delta * delta / var[None, :], axis=1)
    log_density -= 0.5 * float(np.sum(np.log(2.0 * np.pi * var)))
    density = np.maximum(np.exp(log_density), POSITIVITY_FLOOR)
    if support is None:
        support = range(pts.shape[0])
    return GridPmf(support, density)
