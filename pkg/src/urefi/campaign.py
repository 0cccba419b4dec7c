"""Golden/faulty run orchestration and reliability metrics."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .array import SystolicConfig, pe_grid
from .faults import Fault
from .lattice import Line
from .numerics import QuantTensor
from .runtime import ExecutionPlan, NetworkModel, check_plan, forward, output_vector


class MetricError(ValueError):
    pass


def _pair(G, F) -> tuple[np.ndarray, np.ndarray]:
    G = np.asarray(G, dtype=np.float64).reshape(-1)
    F = np.asarray(F, dtype=np.float64).reshape(-1)
    if G.shape != F.shape:
        raise MetricError(f"vector lengths differ: {G.size} vs {F.size}")
    return G, F


def top1(v) -> int:
    # np.argmax already breaks ties towards the lowest index
    return int(np.argmax(v))


def sdc1(G, F) -> bool:
    G, F = _pair(G, F)
    return top1(F) != top1(G)


def sdc_topk(G, F, k: int) -> bool:
    G, F = _pair(G, F)
    if not 1 <= k <= G.size:
        raise MetricError(f"k={k} out of range for {G.size} classes")
    order = np.lexsort((np.arange(F.size), -F))
    return top1(G) not in order[:k]


def sdc_confidence_drop(G, F, threshold: float) -> bool:
    """Golden top-1 class lost more than ``threshold`` of its probability (relative)."""
    G, F = _pair(G, F)
    if not 0 < threshold < 1:
        raise MetricError("threshold must be in (0, 1)")
    g = top1(G)
    return bool(F[g] < G[g] * (1 - threshold))


def faulty_distance(G, F) -> float:
    """Cosine distance of the two vectors, signed and scaled by the argmax shift."""
    G, F = _pair(G, F)
    ng, nf = np.linalg.norm(G), np.linalg.norm(F)
    if ng == 0 or nf == 0:
        raise MetricError("faulty distance is undefined for zero vectors")
    shift = top1(F) - top1(G)
    if shift == 0:
        return 0.0
    cos = float(np.dot(G, F) / (ng * nf))
    return (1.0 - cos) * shift


def fit_accelerator(components: Sequence[tuple[float, float, float]]) -> float:
    """Sum of ``fit_raw * size_bits * sdc`` over components (failures per 1e9 h)."""
    total = 0.0
    for fit_raw, size, sdc in components:
        if fit_raw < 0 or size < 0 or sdc < 0:
            raise MetricError("FIT components must be non-negative")
        total += fit_raw * size * sdc
    return total


@dataclass
class Histogram:
    edges: list[float]
    counts: list[int]

    def zero_bin_count(self) -> int:
        """Height of the bin that contains 0 (0 when 0 is outside the range)."""
        if not self.counts:
            return 0
        e = self.edges
        if not e[0] <= 0.0 <= e[-1]:
            return 0
        idx = min(int(np.searchsorted(e, 0.0, side="right")) - 1, len(self.counts) - 1)
        return self.counts[idx]

    def as_dict(self) -> dict:
        return {"edges": self.edges, "counts": self.counts}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            w.writerow([repr(lo), repr(hi), c])
        return buf.getvalue()


def histogram_afd(distances: Sequence[float], bins: int = 50) -> Histogram:
    """Equal-width histogram covering [min, max] of the distances, with a bin centred on 0.

    Centring isolates the zero peak (correct classifications) from every
    nonzero distance smaller than half a bin width on either side; an edge at
    or next to 0 would lump small positive or negative distances into it.
    """
    if bins < 1:
        raise MetricError("bins must be >= 1")
    d = np.asarray([float(x) for x in distances], dtype=np.float64)
    lo = min(float(d.min()), 0.0) if d.size else 0.0
    hi = max(float(d.max()), 0.0) if d.size else 0.0
    if bins == 1:
        edges = np.array([lo, hi]) if hi > lo else np.array([-0.5, 0.5])
    else:
        w = (hi - lo) / (bins - 1) if hi > lo else 1.0 / bins
        first = math.floor(lo / w + 0.5)
        edges = (first + np.arange(bins + 1) - 0.5) * w
        # rounding can leave an extreme a few ulps outside
        edges[0] = min(edges[0], lo)
        edges[-1] = max(edges[-1], hi)
    counts, edges = np.histogram(d, bins=edges)
    return Histogram([float(x) for x in edges], [int(c) for c in counts])


@dataclass(frozen=True)
class CampaignOptions:
    topk: int = 5
    thresholds: tuple[float, ...] = (0.10, 0.20)
    mismatch_tol: float = 1e-9
    bins: tuple[int, ...] = (50, 100)
    workers: int = 1
    fit_raw: float | None = None
    shuffle_seed: int | None = None  # execute in a permuted order; results are merged back


@dataclass
class InjectionRecord:
    fault_index: int
    input_index: int
    input_id: str
    fault: Fault
    golden: np.ndarray
    faulty: np.ndarray
    flags: dict[str, bool]
    faulty_distance: float


def threshold_key(t: float) -> str:
    return f"sdc{round(t * 100):d}pct"


def classify(G, F, options: CampaignOptions) -> tuple[dict[str, bool], float]:
    G, F = _pair(G, F)
    flags = {
        "sdc1": sdc1(G, F),
        f"sdc{options.topk}": sdc_topk(G, F, min(options.topk, G.size)),
    }
    for t in options.thresholds:
        flags[threshold_key(t)] = sdc_confidence_drop(G, F, t)
    flags["output_mismatch"] = bool(np.max(np.abs(G - F)) > options.mismatch_tol)
    return flags, faulty_distance(G, F)


@dataclass
class CampaignReport:
    records: list[InjectionRecord]
    flag_names: list[str]
    rates: dict[str, float]
    afd: float
    avf: float
    histograms: dict[int, Histogram]
    fit: dict | None
    per_line: dict[str, dict]
    n_faults: int
    n_inputs: int
    complete: bool = True
    elapsed_s: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def sims_per_sec(self) -> float:
        return len(self.records) / self.elapsed_s if self.elapsed_s > 0 else float("inf")

    def summary(self) -> dict:
        """Deterministic report body (no wall-clock values)."""
        return {
            "format": "urefi-campaign-report",
            "version": 1,
            "complete": self.complete,
            **self.meta,
            "counts": {"faults": self.n_faults, "inputs": self.n_inputs, "records": len(self.records)},
            "rates": self.rates,
            "avf": self.avf,
            "afd": self.afd,
            "zero_distance_records": sum(1 for r in self.records if r.faulty_distance == 0.0),
            "per_line": self.per_line,
            "fit": self.fit,
            "histograms": {str(b): h.as_dict() for b, h in sorted(self.histograms.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def records_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["fault_index", "input_index", "input_id", "line", "x", "y", "t_start", "t_end", "kind", "bit",
             "golden_top", "faulty_top", *self.flag_names, "faulty_distance"]
        )
        for r in self.records:
            w.writerow(
                [r.fault_index, r.input_index, r.input_id, *r.fault.as_record(), top1(r.golden), top1(r.faulty),
                 *(int(r.flags[n]) for n in self.flag_names), repr(float(r.faulty_distance))]
            )
        return buf.getvalue()


# --- execution ---------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(model, prefixes, plan):
    _WORKER.update(model=model, prefixes=prefixes, plan=plan)


def _faulty_vectors(model: NetworkModel, prefixes: list[QuantTensor], plan: ExecutionPlan, fault: Fault):
    p = plan.with_faults([fault])
    return [output_vector(model, forward(model, x, p, start=plan.target_layer)) for x in prefixes]


def _work(job):
    fi, fault = job
    w = _WORKER
    return fi, _faulty_vectors(w["model"], w["prefixes"], w["plan"], fault)


def _aggregate(records, flag_names, faults, config: SystolicConfig, options: CampaignOptions):
    n = len(records)
    rates = {name: (sum(r.flags[name] for r in records) / n if n else 0.0) for name in flag_names}
    afd = float(np.mean([r.faulty_distance for r in records])) if n else 0.0
    per_line = {}
    rows, cols = pe_grid(config)
    for line in Line:
        recs = [r for r in records if r.fault.line is line]
        per_line[line.value] = {
            "records": len(recs),
            "sdc1": (sum(r.flags["sdc1"] for r in recs) / len(recs)) if recs else 0.0,
            "size_bits": rows * cols * config.line_format(line).width,
        }
    fit = None
    if options.fit_raw is not None:
        comps = [(options.fit_raw, v["size_bits"], v["sdc1"]) for v in per_line.values()]
        fit = {
            "fit_raw": options.fit_raw,
            "components": {k: fit_accelerator([c]) for k, c in zip(per_line, comps)},
            "total": fit_accelerator(comps),
        }
    hists = {b: histogram_afd([r.faulty_distance for r in records], b) for b in options.bins}
    return rates, afd, rates.get("output_mismatch", 0.0), hists, fit, per_line


def run_campaign(
    model: NetworkModel,
    inputs: Sequence[tuple[str, QuantTensor]],
    plan: ExecutionPlan,
    faults: Sequence[Fault],
    options: CampaignOptions = CampaignOptions(),
    meta: dict | None = None,
) -> CampaignReport:
    """Inject every fault (one at a time) on every input and score against golden runs.

    Records are ordered by (fault index, input index) regardless of execution
    order or worker count.  Interrupting (Ctrl-C) returns the records gathered
    so far with ``complete=False``.
    """
    check_plan(model, plan)
    target = plan.target_layer
    t0 = time.perf_counter()
    golden, prefixes = [], []
    for _, x in inputs:
        prefix = forward(model, x, stop=target)
        prefixes.append(prefix)
        golden.append(output_vector(model, forward(model, prefix, start=target)))

    jobs = list(enumerate(faults))
    if options.shuffle_seed is not None:
        perm = np.random.default_rng(options.shuffle_seed).permutation(len(jobs))
        jobs = [jobs[i] for i in perm]
    results: dict[int, list[np.ndarray]] = {}
    complete = True
    workers = max(1, options.workers)
    try:
        if workers == 1 or len(jobs) < 2:
            for fi, fault in jobs:
                results[fi] = _faulty_vectors(model, prefixes, plan, fault)
        else:
            with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(model, prefixes, plan)) as ex:
                chunk = max(1, len(jobs) // (4 * workers))
                for fi, vecs in ex.map(_work, jobs, chunksize=chunk):
                    results[fi] = vecs
    except KeyboardInterrupt:
        complete = False

    flag_names = None
    records = []
    for fi in sorted(results):
        for ii, F in enumerate(results[fi]):
            G = golden[ii]
            flags, dist = classify(G, F, options)
            flag_names = flag_names or list(flags)
            records.append(InjectionRecord(fi, ii, inputs[ii][0], faults[fi], G, F, flags, dist))
    if flag_names is None:
        dummy = np.array([1.0, 0.0])
        flag_names = list(classify(dummy, dummy, options)[0])
    rates, afd, avf, hists, fit, per_line = _aggregate(records, flag_names, faults, plan.config, options)
    return CampaignReport(
        records=records,
        flag_names=flag_names,
        rates=rates,
        afd=afd,
        avf=avf,
        histograms=hists,
        fit=fit,
        per_line=per_line,
        n_faults=len(faults),
        n_inputs=len(inputs),
        complete=complete,
        elapsed_s=time.perf_counter() - t0,
        meta=dict(meta or {}),
    )


def default_workers() -> int:
    return os.cpu_count() or 1
