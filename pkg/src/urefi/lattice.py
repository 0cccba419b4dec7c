"""Integer-lattice model of the matrix-multiplication recurrence.

The array computes ``C = A x B`` as the uniform recurrence

    c(i, j, k) = c(i, j, k-1) + a(i, j-1, k) * b(i-1, j, k)
    a(i, j, k) = a(i, j-1, k)
    b(i, j, k) = b(i-1, j, k)

with boundary values ``a(i, 0, k) = A[i, k]``, ``b(0, j, k) = B[k, j]`` and
``c(i, j, 0) = 0``.  Interior points are 1-based, boundaries sit at index 0.
A ``Projection`` maps lattice points to a processing element (``P @ p``) and
a clock cycle (``pi @ p``).
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np


class LatticeError(ValueError):
    pass


class Line(str, enum.Enum):
    A = "A"
    B = "B"
    C = "C"

    @classmethod
    def parse(cls, tag: "str | Line") -> "Line":
        try:
            return cls(str(tag.value if isinstance(tag, Line) else tag).upper())
        except ValueError:
            raise LatticeError(f"unknown line tag {tag!r}; expected one of A, B, C") from None


class LatticePoint(NamedTuple):
    i: int
    j: int
    k: int

    def __add__(self, other):  # type: ignore[override]
        return LatticePoint(self.i + other[0], self.j + other[1], self.k + other[2])

    def __sub__(self, other):
        return LatticePoint(self.i - other[0], self.j - other[1], self.k - other[2])


# Uniform dependence vectors of the matmul recurrence.
DEPENDENCES: dict[Line, tuple[int, int, int]] = {
    Line.A: (0, 1, 0),
    Line.B: (1, 0, 0),
    Line.C: (0, 0, 1),
}


@dataclass(frozen=True)
class DependenceVector:
    line: Line
    w: tuple[int, int, int]


def matmul_dependences() -> list[DependenceVector]:
    return [DependenceVector(line, w) for line, w in DEPENDENCES.items()]


@dataclass(frozen=True)
class LatticeDomain:
    """Interior iteration space ``1 <= i <= n1, 1 <= j <= n2, 1 <= k <= n3``."""

    n1: int
    n2: int
    n3: int

    def __post_init__(self):
        for name in ("n1", "n2", "n3"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise LatticeError(f"invalid domain: {name}={value!r} must be an integer >= 1")

    @property
    def extents(self) -> tuple[int, int, int]:
        return (self.n1, self.n2, self.n3)

    @property
    def size(self) -> int:
        return self.n1 * self.n2 * self.n3

    def __contains__(self, p) -> bool:
        i, j, k = p
        return 1 <= i <= self.n1 and 1 <= j <= self.n2 and 1 <= k <= self.n3

    def points(self) -> Iterator[LatticePoint]:
        for i, j, k in itertools.product(
            range(1, self.n1 + 1), range(1, self.n2 + 1), range(1, self.n3 + 1)
        ):
            yield LatticePoint(i, j, k)

    def grid(self) -> np.ndarray:
        """All interior points as an ``(n1, n2, n3, 3)`` integer array."""
        i, j, k = np.meshgrid(
            np.arange(1, self.n1 + 1),
            np.arange(1, self.n2 + 1),
            np.arange(1, self.n3 + 1),
            indexing="ij",
        )
        return np.stack([i, j, k], axis=-1)


def matmul_domain(n1: int, n2: int, n3: int) -> LatticeDomain:
    """Domain of ``C = A x B`` with ``A`` of shape n1 x n3 and ``B`` of shape n3 x n2."""
    return LatticeDomain(n1, n2, n3)


def _as_int_tuple(values: Iterable, what: str) -> tuple[int, ...]:
    out = []
    for v in values:
        if isinstance(v, bool):
            raise LatticeError(f"{what} entries must be integers, got {v!r}")
        if isinstance(v, (int, np.integer)):
            out.append(int(v))
        elif isinstance(v, float) and v.is_integer():
            out.append(int(v))
        else:
            raise LatticeError(f"{what} entries must be integers, got {v!r}")
    return tuple(out)


@dataclass(frozen=True)
class Projection:
    """Space projection ``P`` (2x3) and timing vector ``pi`` (3,), integer-valued."""

    p_matrix: tuple[tuple[int, int, int], tuple[int, int, int]]
    pi: tuple[int, int, int]

    def __init__(self, p_matrix: Sequence[Sequence[int]], pi: Sequence[int] = (1, 1, 1)):
        rows = [_as_int_tuple(row, "P") for row in p_matrix]
        if len(rows) != 2 or any(len(r) != 3 for r in rows):
            raise LatticeError("P must be a 2x3 integer matrix")
        pi_t = _as_int_tuple(pi, "pi")
        if len(pi_t) != 3:
            raise LatticeError("pi must have three entries")
        object.__setattr__(self, "p_matrix", (rows[0], rows[1]))
        object.__setattr__(self, "pi", pi_t)

    @property
    def P(self) -> np.ndarray:
        return np.array(self.p_matrix, dtype=np.int64)

    @property
    def pi_vec(self) -> np.ndarray:
        return np.array(self.pi, dtype=np.int64)

    def as_dict(self) -> dict:
        return {"P": [list(r) for r in self.p_matrix], "pi": list(self.pi)}


OUTPUT_STATIONARY = Projection([[1, 0, 0], [0, 1, 0]], (1, 1, 1))
# B (the weights under the default operand assignment) stays in place.
WEIGHT_STATIONARY = Projection([[0, 1, 0], [0, 0, 1]], (1, 1, 1))

PRESETS = {
    "output-stationary": OUTPUT_STATIONARY,
    "weight-stationary": WEIGHT_STATIONARY,
}


def project_space(proj: Projection, p: Sequence[int]) -> tuple[int, int]:
    (r0, r1) = proj.p_matrix
    return (
        r0[0] * p[0] + r0[1] * p[1] + r0[2] * p[2],
        r1[0] * p[0] + r1[1] * p[1] + r1[2] * p[2],
    )


def project_time(proj: Projection, p: Sequence[int]) -> int:
    return proj.pi[0] * p[0] + proj.pi[1] * p[1] + proj.pi[2] * p[2]


@dataclass(frozen=True)
class Displacement:
    dx: tuple[int, int]
    dt: int


def displacement(proj: Projection, line: Line | str) -> Displacement:
    """Per-hop PE step and cycle step of a value travelling along ``line``."""
    d = DEPENDENCES[Line.parse(line)]
    return Displacement(project_space(proj, d), project_time(proj, d))


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    reason: str = ""
    causality_witness: DependenceVector | None = None
    collision: tuple[LatticePoint, LatticePoint] | None = None

    def __bool__(self) -> bool:
        return self.ok


def validate_projection(
    proj: Projection,
    deps: Sequence[DependenceVector] | None = None,
    domain: LatticeDomain | None = None,
) -> ValidationResult:
    """Check causality (``pi . w >= 1``) and injectivity of ``p -> (P p, pi p)``.

    Injectivity is checked exhaustively over ``domain``; without a domain only
    causality and rank of the combined 3x3 map are checked (full rank implies
    injectivity on any domain).
    """
    deps = matmul_dependences() if deps is None else deps
    for dep in deps:
        if project_time(proj, dep.w) < 1:
            return ValidationResult(
                False, f"causality violated: pi . w_{dep.line.value} < 1", causality_witness=dep
            )
    if domain is None:
        full = np.vstack([proj.P, proj.pi_vec])
        if round(abs(np.linalg.det(full))) == 0:
            return ValidationResult(False, "space-time map is singular")
        return ValidationResult(True)
    seen: dict[tuple[int, int, int], LatticePoint] = {}
    for p in domain.points():
        key = (*project_space(proj, p), project_time(proj, p))
        other = seen.get(key)
        if other is not None:
            return ValidationResult(
                False,
                f"points {tuple(other)} and {tuple(p)} share PE {key[:2]} at cycle {key[2]}",
                collision=(other, p),
            )
        seen[key] = p
    return ValidationResult(True)


def stationary_lines(proj: Projection) -> set[Line]:
    return {line for line in Line if displacement(proj, line).dx == (0, 0)}
