"""Benchmark harness: database creation, NF registration and UE registration.

Timings are client-observed spans measured with ``time.perf_counter``. In
attested mode the overhead measured here is that of the emulation (report
verification plus channel cryptography), not of memory-encryption hardware.
"""

from __future__ import annotations

import csv
import gc
import math
import random
import statistics
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

from .corenfs import NfProfile
from .ranuesim import register_ue, spawn_ues
from .sbi import ATTESTED, PLAIN, Method
from .topology import Testbed, Topology, demo_topology
from .vnfm import DeploymentError

HEADER_NOTE = ("attested-mode overhead measures the emulation (report verification and channel "
               "cryptography), not memory-encryption hardware")
DEFAULT_WARMUP = 10


class Kind(str, Enum):
    DB_CREATE = "DbCreate"
    NF_REGISTRATION = "NfRegistration"
    UE_REGISTRATION = "UeRegistration"


class BenchError(Exception):
    pass


class DeploymentFailure(BenchError):
    pass


class ScenarioMismatch(BenchError):
    pass


@dataclass(frozen=True)
class Scenario:
    kind: Kind
    sizes: tuple[int, ...]
    trials: int
    mode: str = PLAIN
    seed: int = 0
    warmup: int = DEFAULT_WARMUP
    parallel: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.sizes:
            raise ValueError("sizes must be non-empty")
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError("sizes must be strictly increasing")
        if self.sizes[0] < 0:
            raise ValueError("sizes must be >= 0")
        if self.mode not in (PLAIN, ATTESTED):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if self.parallel and self.kind != Kind.NF_REGISTRATION:
            raise ValueError("parallel trials are only supported for NfRegistration")

    def with_mode(self, mode: str) -> "Scenario":
        return Scenario(self.kind, self.sizes, self.trials, mode, self.seed, self.warmup, self.parallel)


# -- statistics ---------------------------------------------------------------------

def nearest_rank(samples: Sequence[float], pct: float) -> float:
    if not samples:
        raise ValueError("no samples")
    ordered = sorted(samples)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


@dataclass(frozen=True)
class SummaryRow:
    size: int
    mode: str
    mean_ms: float
    median_ms: float
    p95_ms: float
    stddev_ms: float
    trials: int


def summarize(size: int, mode: str, samples: Sequence[float]) -> SummaryRow:
    return SummaryRow(size, mode, statistics.fmean(samples), statistics.median(samples),
                      nearest_rank(samples, 95), statistics.pstdev(samples), len(samples))


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r_squared: float


def linear_fit(xs: Sequence[float], ys: Sequence[float]) -> LinearFit:
    """Ordinary least squares of ys on xs with the coefficient of determination."""
    if len(xs) != len(ys) or len(xs) < 2:
        raise ValueError("need at least two points")
    slope, intercept = statistics.linear_regression(xs, ys)
    mean_y = statistics.fmean(ys)
    ss_tot = sum((y - mean_y) ** 2 for y in ys)
    ss_res = sum((y - (slope * x + intercept)) ** 2 for x, y in zip(xs, ys))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return LinearFit(slope, intercept, r2)


@dataclass
class BenchReport:
    scenario: Scenario
    rows: list[SummaryRow]
    samples: dict[int, list[float]]
    linear_fit: LinearFit | None
    header: str = HEADER_NOTE

    @classmethod
    def from_samples(cls, scenario: Scenario, samples: dict[int, list[float]]) -> "BenchReport":
        rows = [summarize(s, scenario.mode, samples[s]) for s in scenario.sizes]
        fit = linear_fit([r.size for r in rows], [r.mean_ms for r in rows]) if len(rows) >= 2 else None
        return cls(scenario, rows, {s: list(v) for s, v in samples.items()}, fit)


@dataclass(frozen=True)
class DeltaRow:
    size: int
    a_mean_ms: float
    b_mean_ms: float
    abs_delta_ms: float
    rel_delta: float


def compare(a: BenchReport, b: BenchReport) -> list[DeltaRow]:
    """Per-size deltas of b relative to a; no thresholds applied."""
    sa, sb = a.scenario, b.scenario
    if (sa.kind, sa.sizes, sa.trials, sa.seed) != (sb.kind, sb.sizes, sb.trials, sb.seed):
        raise ScenarioMismatch("reports come from different scenarios")
    out = []
    for ra, rb in zip(a.rows, b.rows):
        d = rb.mean_ms - ra.mean_ms
        out.append(DeltaRow(ra.size, ra.mean_ms, rb.mean_ms, d, d / ra.mean_ms if ra.mean_ms else math.nan))
    return out


# -- workloads -----------------------------------------------------------------------

@contextmanager
def _quiet_gc():
    gc.collect()
    was = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was:
            gc.enable()


def _timed(fn) -> float:
    with _quiet_gc():
        t0 = time.perf_counter()
        fn()
        return (time.perf_counter() - t0) * 1000.0


class _Workload:
    def __init__(self, tb: Testbed, scenario: Scenario):
        self.tb = tb
        self.sc = scenario
        self.op = tb.vnfm.operator()

    def prepare(self, max_size: int) -> None:
        pass

    def trial(self, size: int, trial: int) -> float:
        raise NotImplementedError


class _DbCreate(_Workload):
    def trial(self, size, trial):
        self.op.call("nudm-admin", Method.DELETE, "/subscribers")
        body = {"n": size, "seed": self.sc.seed + trial}
        return _timed(lambda: self.op.call("nudm-admin", Method.POST, "/subscribers", body))


class _NfRegistration(_Workload):
    def trial(self, size, trial):
        nrf_ep = self.tb.vnfm.nrf_endpoint
        profiles = [NfProfile(f"bench-amf-{trial}-{i}", "AMF", ("namf-comm",), f"bench-amf-{trial}-{i}.sbi")
                    for i in range(size)]

        def register():
            for p in profiles:
                self.op.call("nnrf-nfm", Method.PUT, f"/nf-instances/{p.instance_id}", p.to_dict(),
                             endpoint=nrf_ep)

        elapsed = _timed(register)
        for p in profiles:
            self.op.call("nnrf-nfm", Method.DELETE, f"/nf-instances/{p.instance_id}", endpoint=nrf_ep)
        return elapsed


class _UeRegistration(_Workload):
    def prepare(self, max_size):
        udm = self.tb.udm
        udm.reset()
        udm.create_subscribers(max_size, seed=self.sc.seed)
        self.ues = spawn_ues(max_size, self.sc.seed, self.tb.home_pub, udm_rows=udm.export_rows())

    def trial(self, size, trial):
        amf = self.tb.amf
        failures = []

        def run():
            for ue in self.ues[:size]:
                ok, _, _, stage, cause = register_ue(amf, ue)
                if not ok:
                    failures.append((ue.supi, stage, cause))

        elapsed = _timed(run)
        if failures:
            raise BenchError(f"{len(failures)} UE registrations failed, first {failures[0]}")
        return elapsed


_WORKLOADS = {Kind.DB_CREATE: _DbCreate, Kind.NF_REGISTRATION: _NfRegistration,
              Kind.UE_REGISTRATION: _UeRegistration}


def run(scenario: Scenario, topology: Topology | None = None, *, store_dir: str | Path | None = None,
        progress=None) -> BenchReport:
    """One scenario on a fresh deployment of ``topology`` in ``scenario.mode``."""
    topology = topology or demo_topology()
    with tempfile.TemporaryDirectory(prefix="confcore-bench-") as tmp:
        try:
            tb = Testbed(topology, scenario.mode, store_dir=store_dir or tmp).deploy_all()
        except DeploymentError as exc:
            raise DeploymentFailure(str(exc)) from exc
        try:
            wl = _WORKLOADS[scenario.kind](tb, scenario)
            wl.prepare(max(scenario.sizes))
            for w in range(scenario.warmup):
                wl.trial(scenario.sizes[0], -1 - w)
            samples: dict[int, list[float]] = {s: [] for s in scenario.sizes}
            if scenario.parallel:
                for size in scenario.sizes:
                    with ThreadPoolExecutor() as pool:
                        samples[size] = list(pool.map(lambda t: wl.trial(size, t), range(scenario.trials)))
            else:
                # sizes are interleaved in a shuffled order each round so slow drift of the host
                # spreads over every size instead of bending the curve at the large end
                rng = random.Random(scenario.seed)
                order = list(scenario.sizes)
                for t in range(scenario.trials):
                    rng.shuffle(order)
                    for size in order:
                        samples[size].append(wl.trial(size, t))
            if progress is not None:
                for size in scenario.sizes:
                    progress(scenario, size, samples[size])
        finally:
            tb.shutdown()
    return BenchReport.from_samples(scenario, samples)


def run_both(scenario: Scenario, topology: Topology | None = None, **kw) -> tuple[BenchReport, BenchReport]:
    return run(scenario.with_mode(PLAIN), topology, **kw), run(scenario.with_mode(ATTESTED), topology, **kw)


# -- CSV -----------------------------------------------------------------------------

RAW_HEADER = ["scenario", "mode", "size", "trial", "elapsed_ms"]
SUMMARY_HEADER = ["scenario", "mode", "size", "mean_ms", "median_ms", "p95_ms", "stddev_ms"]


def _f(x: float) -> str:
    return f"{x:.6f}"


def write_raw(reports: Sequence[BenchReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RAW_HEADER)
        for rep in reports:
            for size in rep.scenario.sizes:
                for t, v in enumerate(rep.samples[size]):
                    w.writerow([rep.scenario.kind.value, rep.scenario.mode, size, t, _f(v)])


def write_summary(reports: Sequence[BenchReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for rep in reports:
            for r in rep.rows:
                w.writerow([rep.scenario.kind.value, r.mode, r.size, _f(r.mean_ms), _f(r.median_ms),
                            _f(r.p95_ms), _f(r.stddev_ms)])
            if rep.linear_fit is not None:
                fit = rep.linear_fit
                w.writerow(["#fit", _f(fit.slope), _f(fit.intercept), _f(fit.r_squared)])


def write_deltas(deltas: Sequence[DeltaRow], kind: str, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "size", "plain_mean_ms", "attested_mean_ms", "abs_delta_ms", "rel_delta"])
        for d in deltas:
            w.writerow([kind, d.size, _f(d.a_mean_ms), _f(d.b_mean_ms), _f(d.abs_delta_ms), _f(d.rel_delta)])
