"""Systolic-array configuration and geometry derived from the projection."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .lattice import (
    LatticeDomain,
    LatticeError,
    Line,
    OUTPUT_STATIONARY,
    PRESETS,
    Projection,
    matmul_domain,
    validate_projection,
)
from .numerics import INT32, INT8, NumberFormat, default_acc_format


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SystolicConfig:
    """Tile extents, projection and word formats of one modeled array.

    ``n1 x n3`` by ``n3 x n2`` is the largest matmul a single pass computes.
    PE coordinates are 0-based: ``pe = P @ p - min(P @ p over the domain)``.
    """

    n1: int
    n2: int
    n3: int
    projection: Projection = OUTPUT_STATIONARY
    op_format: NumberFormat = INT8
    acc_format: NumberFormat = INT32

    def __post_init__(self):
        try:
            dom = matmul_domain(self.n1, self.n2, self.n3)
        except LatticeError as exc:
            raise ConfigError(str(exc)) from exc
        res = validate_projection(self.projection, domain=dom)
        if not res:
            raise ConfigError(f"invalid projection for domain {dom.extents}: {res.reason}")
        if self.op_format.is_float != self.acc_format.is_float:
            raise ConfigError("operand and accumulator formats must both be float or both integer")

    @classmethod
    def build(
        cls,
        n1: int,
        n2: int,
        n3: int,
        projection: "Projection | str" = "output-stationary",
        op_format: NumberFormat = INT8,
        acc_width: int = 32,
        acc_format: NumberFormat | None = None,
    ) -> "SystolicConfig":
        if isinstance(projection, str):
            try:
                projection = PRESETS[projection]
            except KeyError:
                raise ConfigError(f"unknown projection preset {projection!r}") from None
        if acc_format is None:
            acc_format = default_acc_format(op_format, acc_width)
        return cls(int(n1), int(n2), int(n3), projection, op_format, acc_format)

    @property
    def domain(self) -> LatticeDomain:
        return matmul_domain(self.n1, self.n2, self.n3)

    def line_format(self, line: Line | str) -> NumberFormat:
        return self.acc_format if Line.parse(line) is Line.C else self.op_format

    @cached_property
    def _geometry(self):
        g = self.domain.grid()  # (n1, n2, n3, 3)
        space = g @ self.projection.P.T  # (n1, n2, n3, 2)
        time = g @ self.projection.pi_vec
        origin = space.reshape(-1, 2).min(axis=0)
        pe = space - origin
        return pe[..., 0], pe[..., 1], time, tuple(int(v) for v in origin)

    @property
    def pe_x(self) -> np.ndarray:
        """PE row of every interior point, shape ``(n1, n2, n3)``."""
        return self._geometry[0]

    @property
    def pe_y(self) -> np.ndarray:
        return self._geometry[1]

    @property
    def cycles(self) -> np.ndarray:
        """Local cycle ``pi . p`` of every interior point."""
        return self._geometry[2]

    @property
    def pe_origin(self) -> tuple[int, int]:
        return self._geometry[3]

    def pe_of(self, p) -> tuple[int, int]:
        x0, y0 = self.pe_origin
        P = self.projection.p_matrix
        return (
            P[0][0] * p[0] + P[0][1] * p[1] + P[0][2] * p[2] - x0,
            P[1][0] * p[0] + P[1][1] * p[1] + P[1][2] * p[2] - y0,
        )

    def cycle_of(self, p) -> int:
        pi = self.projection.pi
        return pi[0] * p[0] + pi[1] * p[1] + pi[2] * p[2]

    @property
    def pass_span(self) -> int:
        """Global cycles reserved for one tile pass (local cycles 0..max)."""
        return int(self.cycles.max()) + 1

    def as_dict(self) -> dict:
        return {
            "n1": self.n1,
            "n2": self.n2,
            "n3": self.n3,
            "projection": self.projection.as_dict(),
            "op_format": self.op_format.as_dict(),
            "acc_format": self.acc_format.as_dict(),
        }


def pe_grid(config: SystolicConfig) -> tuple[int, int]:
    """Bounding extents of the PE image of the domain."""
    return (int(config.pe_x.max()) + 1, int(config.pe_y.max()) + 1)


def cycle_count(config: SystolicConfig) -> int:
    c = config.cycles
    return int(c.max() - c.min()) + 1
