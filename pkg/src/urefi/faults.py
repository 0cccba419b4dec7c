"""Hardware fault descriptions, statistical fault lists and propagation sets."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Iterable, Sequence

import numpy as np

from .array import SystolicConfig, pe_grid
from .lattice import DEPENDENCES, LatticeDomain, LatticeError, LatticePoint, Line
from .numerics import FAULT_KINDS, FLIP, STUCK0, STUCK1


class FaultError(ValueError):
    pass


@dataclass(frozen=True)
class Fault:
    """One datapath fault on ``line`` at PE ``pe``.

    The window is inclusive on both ends; ``t_end=None`` means unbounded.
    Cycles are global: tile pass ``n`` of a layer occupies
    ``[n * pass_span, (n + 1) * pass_span)``.
    """

    line: Line
    pe: tuple[int, int]
    t_start: int = 0
    t_end: int | None = None
    kind: str = STUCK1
    bit: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "line", Line.parse(self.line))
        except LatticeError as exc:
            raise FaultError(str(exc)) from exc
        object.__setattr__(self, "pe", (int(self.pe[0]), int(self.pe[1])))
        if self.kind not in FAULT_KINDS:
            raise FaultError(f"unknown fault kind {self.kind!r}")
        if self.t_start < 0:
            raise FaultError("t_start must be >= 0")
        if self.t_end is not None and self.t_end < self.t_start:
            raise FaultError(f"empty window [{self.t_start}, {self.t_end}]")
        if self.bit < 0:
            raise FaultError("bit index must be >= 0")

    @classmethod
    def permanent(cls, line, pe, kind=STUCK1, bit=0) -> "Fault":
        return cls(line, pe, 0, None, kind, bit)

    @classmethod
    def transient(cls, line, pe, cycle, kind=FLIP, bit=0, length: int = 1) -> "Fault":
        return cls(line, pe, cycle, cycle + length - 1, kind, bit)

    @property
    def is_permanent(self) -> bool:
        return self.t_start == 0 and self.t_end is None

    def active(self, cycle: int) -> bool:
        return self.t_start <= cycle and (self.t_end is None or cycle <= self.t_end)

    def as_record(self) -> list[str]:
        return [
            self.line.value,
            str(self.pe[0]),
            str(self.pe[1]),
            str(self.t_start),
            "inf" if self.t_end is None else str(self.t_end),
            self.kind,
            str(self.bit),
        ]

    def __str__(self) -> str:
        return ",".join(self.as_record())


def validate_fault(fault: Fault, config: SystolicConfig) -> None:
    rows, cols = pe_grid(config)
    x, y = fault.pe
    if not (0 <= x < rows and 0 <= y < cols):
        raise FaultError(f"PE {fault.pe} outside the {rows}x{cols} array")
    width = config.line_format(fault.line).width
    if fault.bit >= width:
        raise FaultError(f"bit {fault.bit} out of range for {width}-bit line {fault.line.value}")


# --- fault-list files --------------------------------------------------------

FIELDS = ("line", "x", "y", "t_start", "t_end", "kind", "bit")


def parse_fault(record: "str | Sequence[str] | dict") -> Fault:
    """Parse ``"A,1,2,0,inf,stuck1,7"``, a 7-item sequence, or a mapping."""
    if isinstance(record, dict):
        vals = [record.get(k) for k in FIELDS]
        if vals[4] is None:
            vals[4] = "inf"
    elif isinstance(record, str):
        vals = [v.strip() for v in record.split(",")]
    else:
        vals = list(record)
    if len(vals) != 7 or any(v is None for v in vals):
        raise FaultError(f"fault record needs {len(FIELDS)} fields {FIELDS}: {record!r}")
    line, x, y, t0, t1, kind, bit = vals
    try:
        t_end = None if str(t1).strip().lower() in ("inf", "none", "") else int(t1)
        return Fault(str(line), (int(x), int(y)), int(t0), t_end, str(kind).strip().lower(), int(bit))
    except (TypeError, ValueError) as exc:
        raise FaultError(f"bad fault record {record!r}: {exc}") from exc


def dumps_fault_list(faults: Iterable[Fault]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDS)
    for f in faults:
        w.writerow(f.as_record())
    return buf.getvalue()


def loads_fault_list(text: str) -> list[Fault]:
    rows = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if rows and rows[0].replace(" ", "").lower().startswith("line,"):
        rows = rows[1:]
    return [parse_fault(r) for r in csv.reader(rows)]


def write_fault_list(path, faults: Iterable[Fault]) -> None:
    Path(path).write_text(dumps_fault_list(faults))


def read_fault_list(path) -> list[Fault]:
    return loads_fault_list(Path(path).read_text())


# --- statistical sizing ------------------------------------------------------

_Z_TABLE = {0.90: 1.645, 0.95: 1.96, 0.98: 2.326, 0.99: 2.576}


def z_for_confidence(confidence: float) -> float:
    if not 0 < confidence < 1:
        raise FaultError(f"confidence must be in (0, 1), got {confidence}")
    for c, z in _Z_TABLE.items():
        if math.isclose(confidence, c):
            return z
    return NormalDist().inv_cdf((1 + confidence) / 2)


def sample_size(population: int, margin: float, confidence_z: float = 1.96, p: float = 0.5) -> int:
    """Number of injections for a finite population at the given margin and z."""
    if population < 1:
        raise FaultError("population must be >= 1")
    if not 0 < margin < 1:
        raise FaultError(f"margin must be in (0, 1), got {margin}")
    if confidence_z <= 0:
        raise FaultError("z must be positive")
    if not 0 < p < 1:
        raise FaultError(f"p must be in (0, 1), got {p}")
    n = population / (1 + margin**2 * (population - 1) / (confidence_z**2 * p * (1 - p)))
    # guard against 4900.000000001-style float noise
    return min(population, math.ceil(round(n, 9)))


PERMANENT = "permanent"
TRANSIENT = "transient"


@dataclass(frozen=True)
class FaultScope:
    """Eligible fault sites.  ``None`` means every value valid under the config."""

    lines: tuple[str, ...] = ("A", "B", "C")
    mode: str = PERMANENT
    kinds: tuple[str, ...] | None = None
    bits: tuple[int, ...] | None = None
    pes: tuple[tuple[int, int], ...] | None = None
    cycles: tuple[int, int] | None = None  # [lo, hi) start cycles for transients
    window: int = 1

    def resolved_kinds(self) -> tuple[str, ...]:
        if self.kinds is not None:
            return tuple(self.kinds)
        return (STUCK0, STUCK1) if self.mode == PERMANENT else (FLIP,)


@dataclass(frozen=True)
class FaultListSpec:
    count: "int | str" = "statistical"
    confidence: float = 0.95
    margin: float = 0.01
    p: float = 0.5
    seed: int = 0
    scope: FaultScope = field(default_factory=FaultScope)

    def __post_init__(self):
        if not 0 < self.confidence < 1:
            raise FaultError("confidence must be in (0, 1)")
        if not 0 < self.margin < 1:
            raise FaultError("margin must be in (0, 1)")
        if not 0 < self.p < 1:
            raise FaultError("p must be in (0, 1)")
        if self.count != "statistical" and (not isinstance(self.count, int) or self.count < 0):
            raise FaultError(f"count must be a non-negative integer or 'statistical', got {self.count!r}")
        if self.scope.mode not in (PERMANENT, TRANSIENT):
            raise FaultError(f"unknown fault mode {self.scope.mode!r}")


class _SiteSpace:
    """Mixed-radix enumeration of (line, pe, bit, kind, window) tuples."""

    def __init__(self, scope: FaultScope, config: SystolicConfig):
        rows, cols = pe_grid(config)
        self.pes = (
            [tuple(p) for p in scope.pes]
            if scope.pes is not None
            else [(x, y) for x in range(rows) for y in range(cols)]
        )
        self.kinds = scope.resolved_kinds()
        if scope.mode == PERMANENT:
            self.windows = [(0, None)]
        else:
            lo, hi = scope.cycles if scope.cycles is not None else (0, config.pass_span)
            self.windows = [(t, t + scope.window - 1) for t in range(lo, hi)]
        self.lines = [Line.parse(l) for l in scope.lines]
        self.bits = {}
        for line in self.lines:
            width = config.line_format(line).width
            self.bits[line] = list(scope.bits) if scope.bits is not None else list(range(width))
        self.blocks = [len(self.pes) * len(self.bits[l]) * len(self.kinds) * len(self.windows) for l in self.lines]
        self.size = sum(self.blocks)

    def decode(self, index: int) -> Fault:
        for line, block in zip(self.lines, self.blocks):
            if index < block:
                break
            index -= block
        index, w = divmod(index, len(self.windows))
        index, kd = divmod(index, len(self.kinds))
        pe_i, b = divmod(index, len(self.bits[line]))
        t0, t1 = self.windows[w]
        return Fault(line, self.pes[pe_i], t0, t1, self.kinds[kd], self.bits[line][b])


def fault_population(scope: FaultScope, config: SystolicConfig) -> int:
    return _SiteSpace(scope, config).size


def generate_fault_list(spec: FaultListSpec, config: SystolicConfig) -> list[Fault]:
    """Draw faults uniformly over the eligible sites, deterministically per seed."""
    space = _SiteSpace(spec.scope, config)
    if space.size == 0:
        raise FaultError("fault scope is empty under this configuration")
    for f in (space.decode(0), space.decode(space.size - 1)):
        validate_fault(f, config)
    if spec.count == "statistical":
        count = sample_size(space.size, spec.margin, z_for_confidence(spec.confidence), spec.p)
    else:
        count = spec.count
    rng = np.random.default_rng(spec.seed)
    if count <= space.size:
        picks = rng.choice(space.size, size=count, replace=False)
    else:
        picks = rng.integers(0, space.size, size=count)
    return [space.decode(int(i)) for i in picks]


# --- propagation sets --------------------------------------------------------

def fault_seeds(fault: Fault, config: SystolicConfig, domain: LatticeDomain | None = None, cycle_offset: int = 0):
    """Points whose read of ``fault.line`` happens at the faulty PE inside the window."""
    domain = config.domain if domain is None else domain
    seeds = []
    for p in domain.points():
        if config.pe_of(p) == fault.pe and fault.active(cycle_offset + config.cycle_of(p)):
            seeds.append(p)
    return seeds


def expand_fault(
    fault: Fault,
    config: SystolicConfig,
    domain: LatticeDomain | None = None,
    cycle_offset: int = 0,
) -> set[tuple[LatticePoint, int]]:
    """Every (point, global cycle) whose value of ``fault.line`` is corrupted.

    Seeds are reads at the faulty PE during the window; each corrupted value
    is then carried downstream along the line's dependence vector, one hop of
    ``P d`` in space and ``pi d`` in time per step.
    """
    validate_fault(fault, config)
    domain = config.domain if domain is None else domain
    d = DEPENDENCES[fault.line]
    out: set[tuple[LatticePoint, int]] = set()
    for seed in fault_seeds(fault, config, domain, cycle_offset):
        q = seed
        while q in domain:
            item = (q, cycle_offset + config.cycle_of(q))
            if item in out:
                break
            out.add(item)
            q = q + d
    return out


def physical_trace(points: Iterable[tuple[LatticePoint, int]], config: SystolicConfig) -> list[tuple[int, int, int]]:
    """Sorted distinct ``(cycle, x, y)`` triples of an expanded point set."""
    return sorted({(t, *config.pe_of(p)) for p, t in points})
