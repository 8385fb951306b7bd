"""Planar matrix Lie algebras and groups for parameterizing image warps.

Three nested families over 3x3 matrices: rigid motions (SE2, 3 DoF),
affine maps (AFF2, 6 DoF), and unit-determinant homographies (SL3, 8 DoF).
An 8-vector of coefficients embeds linearly into the algebra; the matrix
exponential maps it to an invertible group element.  Inverses are always
taken by negating coefficients and re-exponentiating, never by numeric
matrix inversion, so a transform and its inverse compose to the identity
up to exponential-series accuracy rather than solver accuracy.

All math here runs in float64; callers may hold features in float32.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .autodiff import Tensor, _make

__all__ = [
    "GroupFamily",
    "AlgebraParams",
    "AlgebraMatrix",
    "GroupTransform",
    "GroupInvariantError",
    "curriculum_mask",
    "embed",
    "embed_matrix",
    "unembed_matrix",
    "expm",
    "expm_matrix",
    "expm_vjp",
    "invert",
    "compose",
    "identity",
    "group_exp",
]

ORTHO_TOL = 1e-6
DET_TOL = 1e-6
TAYLOR_ORDER = 13
NORM_SOFT_LIMIT = 3.0


class GroupInvariantError(ValueError):
    """A matrix violates the structural invariants of its claimed family."""


class GroupFamily(Enum):
    SE2 = "se2"
    AFF2 = "aff2"
    SL3 = "sl3"

    @property
    def level(self) -> int:
        return _LEVEL[self]

    @property
    def dof(self) -> int:
        return int(curriculum_mask(self).sum())


_LEVEL = {GroupFamily.SE2: 0, GroupFamily.AFF2: 1, GroupFamily.SL3: 2}

_MASKS = {
    GroupFamily.SE2: np.array([0, 1, 1, 0, 0, 1, 0, 0], dtype=np.float64),
    GroupFamily.AFF2: np.array([1, 1, 1, 1, 1, 1, 0, 0], dtype=np.float64),
    GroupFamily.SL3: np.ones(8, dtype=np.float64),
}


def curriculum_mask(family: GroupFamily) -> np.ndarray:
    """Binary mask over the 8 coefficients selecting the family's active set."""
    return _MASKS[family].copy()


def _build_bases() -> dict[GroupFamily, np.ndarray]:
    # basis[k] = d(matrix)/d(coefficient k); embedding is theta . basis.
    aff = np.zeros((8, 3, 3))
    aff[0, 0, 0] = 1.0
    aff[1, 0, 1] = 1.0
    aff[2, 0, 2] = 1.0
    aff[3, 1, 0] = 1.0
    aff[4, 1, 1] = 1.0
    aff[5, 1, 2] = 1.0

    # rigid: coefficient 2 drives an antisymmetric rotation generator
    se2 = np.zeros((8, 3, 3))
    se2[1, 0, 1] = 1.0
    se2[1, 1, 0] = -1.0
    se2[2, 0, 2] = 1.0
    se2[5, 1, 2] = 1.0

    # traceless: the (2,2) entry balances the two diagonal coefficients
    sl3 = aff.copy()
    sl3[0, 2, 2] = -1.0
    sl3[4, 2, 2] = -1.0
    sl3[6, 2, 0] = 1.0
    sl3[7, 2, 1] = 1.0

    return {GroupFamily.SE2: se2, GroupFamily.AFF2: aff, GroupFamily.SL3: sl3}


_BASES = _build_bases()


@dataclass(frozen=True, eq=False)
class AlgebraParams:
    """8 coefficients plus the family that says which of them may be nonzero."""

    theta: np.ndarray
    family: GroupFamily

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape != (8,):
            raise ValueError(f"theta must have shape (8,), got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta contains non-finite entries")
        inactive = curriculum_mask(self.family) == 0
        if np.any(theta[inactive] != 0.0):
            raise ValueError(f"coefficients outside the {self.family.value} active set must be zero")
        object.__setattr__(self, "theta", theta)

    def negated(self) -> "AlgebraParams":
        return AlgebraParams(-self.theta, self.family)


@dataclass(frozen=True, eq=False)
class AlgebraMatrix:
    """A 3x3 algebra element (the pre-exponential tangent matrix)."""

    m: np.ndarray
    family: GroupFamily

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"algebra matrix must be 3x3, got {m.shape}")
        object.__setattr__(self, "m", m)


@dataclass(frozen=True, eq=False)
class GroupTransform:
    """An invertible 3x3 group element, validated against its family."""

    t: np.ndarray
    family: GroupFamily

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        if t.shape != (3, 3):
            raise ValueError(f"transform must be 3x3, got {t.shape}")
        object.__setattr__(self, "t", t)
        self.check()

    def check(self) -> None:
        t = self.t
        if not np.all(np.isfinite(t)):
            raise GroupInvariantError("transform has non-finite entries")
        det = float(np.linalg.det(t))
        if abs(det) <= 0.0:
            raise GroupInvariantError("transform is singular")
        if self.family in (GroupFamily.SE2, GroupFamily.AFF2):
            if np.max(np.abs(t[2] - np.array([0.0, 0.0, 1.0]))) > ORTHO_TOL:
                raise GroupInvariantError(f"{self.family.value} transform must have bottom row (0,0,1)")
        if self.family is GroupFamily.SE2:
            r = t[:2, :2]
            if np.max(np.abs(r.T @ r - np.eye(2))) > ORTHO_TOL:
                raise GroupInvariantError("SE2 rotation block is not orthogonal")
            if np.linalg.det(r) <= 0:
                raise GroupInvariantError("SE2 rotation block must have det +1")
        elif self.family is GroupFamily.AFF2:
            if np.linalg.det(t[:2, :2]) <= 0:
                raise GroupInvariantError("AFF2 linear block must have positive determinant")
        elif self.family is GroupFamily.SL3:
            if abs(det - 1.0) > DET_TOL:
                raise GroupInvariantError(f"SL3 transform determinant {det} is not 1")


def embed_matrix(theta: np.ndarray, family: GroupFamily) -> np.ndarray:
    """Linear embedding of coefficient vectors (..., 8) into matrices (..., 3, 3)."""
    theta = np.asarray(theta, dtype=np.float64)
    return np.einsum("...k,kij->...ij", theta, _BASES[family])


def unembed_matrix(dm: np.ndarray, family: GroupFamily) -> np.ndarray:
    """Adjoint of embed_matrix: pull matrix gradients (..., 3, 3) back to (..., 8)."""
    return np.einsum("...ij,kij->...k", np.asarray(dm, dtype=np.float64), _BASES[family])


def embed(params: AlgebraParams) -> AlgebraMatrix:
    return AlgebraMatrix(embed_matrix(params.theta, params.family), params.family)


_FACT = [float(math.factorial(k)) for k in range(TAYLOR_ORDER + 1)]


def _expm_cached(a: np.ndarray):
    """Scaling-and-squaring exponential of (..., 3, 3) matrices, keeping the
    intermediates needed to differentiate the exact computation graph."""
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("expm: non-finite entries in algebra matrix")
    norm = np.abs(a).sum(axis=-1).max(axis=-1)
    if np.any(norm > NORM_SOFT_LIMIT):
        warnings.warn(
            f"algebra matrix infinity norm {float(norm.max()):.3g} exceeds {NORM_SOFT_LIMIT}; "
            "the truncated exponential stays accurate but predicted steps this large "
            "suggest a diverging fit",
            RuntimeWarning,
            stacklevel=3,
        )
    with np.errstate(divide="ignore"):
        s = np.ceil(np.log2(np.where(norm > 0, norm, 1.0)))
    s = np.maximum(s, 0.0).astype(np.int64)
    scale = np.ldexp(1.0, -s)[..., None, None]
    b = a * scale

    powers = [np.broadcast_to(np.eye(3), b.shape).copy()]
    for _ in range(TAYLOR_ORDER):
        powers.append(powers[-1] @ b)
    e = np.zeros_like(b)
    for k in range(TAYLOR_ORDER + 1):
        e += powers[k] / _FACT[k]

    squares = []
    smax = int(s.max()) if s.size else 0
    for j in range(smax):
        mask = s > j
        squares.append((mask, e.copy()))
        e = np.where(mask[..., None, None], e @ e, e)

    cache = {"powers": powers, "scale": scale, "squares": squares}
    return e, cache


def _expm_vjp_cached(cache: dict, g: np.ndarray) -> np.ndarray:
    """Gradient of the exponential w.r.t. its input, given the upstream gradient."""
    g = np.asarray(g, dtype=np.float64)
    for mask, e_pre in reversed(cache["squares"]):
        et = np.swapaxes(e_pre, -1, -2)
        g = np.where(mask[..., None, None], g @ et + et @ g, g)

    powers = cache["powers"]
    db = np.zeros_like(g)
    # d(sum_k B^k/k!) consumed term by term: pair B^i . dB . B^j at weight 1/(i+j+1)!
    for i in range(TAYLOR_ORDER):
        right = np.zeros_like(g)
        for j in range(TAYLOR_ORDER - i):
            right += powers[j] / _FACT[i + j + 1]
        db += np.swapaxes(powers[i], -1, -2) @ g @ np.swapaxes(right, -1, -2)
    return db * cache["scale"]


def expm_matrix(a: np.ndarray) -> np.ndarray:
    """Matrix exponential of (..., 3, 3) algebra elements (values only)."""
    return _expm_cached(a)[0]


def expm(a: AlgebraMatrix) -> GroupTransform:
    return GroupTransform(expm_matrix(a.m), a.family)


def expm_vjp(a: AlgebraMatrix | np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of expm at `a` contracted with `upstream` (same shape as output)."""
    m = a.m if isinstance(a, AlgebraMatrix) else np.asarray(a, dtype=np.float64)
    _, cache = _expm_cached(m)
    return _expm_vjp_cached(cache, upstream)


def invert(params: AlgebraParams) -> GroupTransform:
    """Group inverse by coefficient negation: exp(-A) = exp(A)^-1 exactly."""
    return expm(embed(params.negated()))


def compose(t1: GroupTransform, t2: GroupTransform) -> GroupTransform:
    """Matrix product t1 . t2, promoted to the larger of the two families.

    An affine factor can carry det != 1, so a mixed affine/projective product
    is returned as its unit-determinant representative: the homogeneous
    matrix only matters up to scale (the perspective divide cancels it), and
    rescaling keeps the promoted family's invariant intact.
    """
    family = t1.family if t1.family.level >= t2.family.level else t2.family
    prod = t1.t @ t2.t
    if family is GroupFamily.SL3:
        det = np.linalg.det(prod)
        if abs(det - 1.0) > DET_TOL / 2:
            prod = prod / np.cbrt(det)
    return GroupTransform(prod, family)


def identity(family: GroupFamily) -> GroupTransform:
    return GroupTransform(np.eye(3), family)


def group_exp(theta: Tensor, family: GroupFamily) -> Tensor:
    """Differentiable map from coefficient tensors (..., 8) to group matrices (..., 3, 3).

    Embedding and exponential run in float64 regardless of the input dtype;
    the backward pass re-uses the stored series terms and squaring
    intermediates, then projects the matrix gradient back to coefficients.
    """
    a = embed_matrix(theta.data, family)
    e, cache = _expm_cached(a)

    def backward(g):
        da = _expm_vjp_cached(cache, g)
        theta._accumulate(unembed_matrix(da, family).astype(theta.data.dtype, copy=False))

    return _make(e, (theta,), backward)
