"""Performance measurement harnesses.

Three benchmarks, each emitting plot-ready CSV:

  * sweep_conv: times forward+backward of single conv layers over a
    hyperparameter grid, the raw material for the throughput prior
    (parallel-coordinates CSV);
  * timing_distribution: histogram plus a deterministic two-cluster
    bimodality detector for per-epoch training times;
  * weak_scaling: pool throughput as workload grows with worker count,
    with upper/lower bounds constructed from the best/worst observed
    evaluation duplicated across all workers.

Timing columns are measurements and vary run to run; FLOP columns are
exact and reproducible.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .evaluator import EvalRecord
from .genome import ThroughputPrior
from .nn import Conv2d
from .workers import WorkerPool, idle_fraction


@dataclass
class SweepGrid:
    in_channels: tuple = (3, 8, 16, 32)
    out_channels: tuple = (8, 16, 32, 64, 128)
    kernels: tuple = (1, 2, 3, 4, 5, 7)
    strides: tuple = (1, 2, 3)
    batch_sizes: tuple = (8, 16)
    height: int = 24
    width: int = 24

    def configs(self):
        for cin in self.in_channels:
            for cout in self.out_channels:
                for k in self.kernels:
                    for s in self.strides:
                        for b in self.batch_sizes:
                            yield {"in_channels": cin, "out_channels": cout,
                                   "kernel": k, "stride": s, "batch_size": b}

    def size(self):
        return (len(self.in_channels) * len(self.out_channels) * len(self.kernels)
                * len(self.strides) * len(self.batch_sizes))


@dataclass
class SweepRow:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    batch_size: int
    height: int
    width: int
    median_forward_backward_s: float
    flops_per_layer: int        # forward FLOPs for a single patch
    flops_per_s: float


SWEEP_CSV_FIELDS = ["in_channels", "out_channels", "kernel", "stride",
                    "batch_size", "height", "width",
                    "median_forward_backward_s", "flops_per_layer",
                    "flops_per_s"]


def conv_layer_flops(cin, cout, kernel, stride, height, width):
    oh = (height - kernel) // stride + 1
    ow = (width - kernel) // stride + 1
    return 2 * kernel * kernel * cin * cout * oh * ow


def sweep_conv(grid, reps=3, seed=0, log=None):
    """Time every grid config; returns (rows, skipped).

    Configs whose output would collapse below 1x1 are skipped with a
    reason. Runs sequentially so timings aren't polluted by contention.
    """
    if reps < 3:
        raise ValueError(f"need reps >= 3, got {reps}")
    rng = np.random.default_rng(seed)
    rows, skipped = [], []
    for cfg in grid.configs():
        k = cfg["kernel"]
        if k > grid.height or k > grid.width:
            reason = (f"kernel {k} exceeds input {grid.height}x{grid.width}")
            skipped.append((cfg, reason))
            if log:
                log(f"skip {cfg}: {reason}")
            continue
        layer = Conv2d(cfg["in_channels"], cfg["out_channels"], k,
                       cfg["stride"], rng=rng, dtype=np.float32)
        x = rng.random((cfg["batch_size"], cfg["in_channels"],
                        grid.height, grid.width), dtype=np.float32)
        times = []
        for _ in range(reps):
            t0 = time.monotonic()
            out = layer.forward(x)
            layer.backward(np.ones_like(out))
            times.append(time.monotonic() - t0)
        median = float(np.median(times))
        flops = conv_layer_flops(cfg["in_channels"], cfg["out_channels"],
                                 k, cfg["stride"], grid.height, grid.width)
        rows.append(SweepRow(
            in_channels=cfg["in_channels"], out_channels=cfg["out_channels"],
            kernel=k, stride=cfg["stride"], batch_size=cfg["batch_size"],
            height=grid.height, width=grid.width,
            median_forward_backward_s=median, flops_per_layer=flops,
            flops_per_s=flops * cfg["batch_size"] / median))
    return rows, skipped


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_CSV_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({f: getattr(r, f) for f in SWEEP_CSV_FIELDS})


def read_sweep_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(SweepRow(
                in_channels=int(rec["in_channels"]),
                out_channels=int(rec["out_channels"]),
                kernel=int(rec["kernel"]), stride=int(rec["stride"]),
                batch_size=int(rec["batch_size"]),
                height=int(rec["height"]), width=int(rec["width"]),
                median_forward_backward_s=float(rec["median_forward_backward_s"]),
                flops_per_layer=int(rec["flops_per_layer"]),
                flops_per_s=float(rec["flops_per_s"])))
    return rows


def top_k_by_throughput(rows, k):
    if k > len(rows):
        raise ValueError(f"k={k} exceeds {len(rows)} rows")
    return sorted(rows, key=lambda r: -r.flops_per_s)[:k]


def build_prior(rows, k, beta=0.5):
    """Add-one-smoothed frequencies of each conv hyperparameter among the
    top-k rows by throughput; support is every value observed in `rows`."""
    top = top_k_by_throughput(rows, k)
    prior = {}
    for hp, attr in (("out_channels", "out_channels"), ("kernel", "kernel"),
                     ("stride", "stride")):
        support = sorted({getattr(r, attr) for r in rows})
        counts = {v: 1 for v in support}          # add-one smoothing
        for r in top:
            counts[getattr(r, attr)] += 1
        total = sum(counts.values())
        prior[hp] = {v: c / total for v, c in counts.items()}
    return ThroughputPrior(out_channels=prior["out_channels"],
                           kernel=prior["kernel"], stride=prior["stride"],
                           beta=beta)


# --------------------------------------------------------------------------
# Timing distribution (bimodality detector)


@dataclass
class TimingSample:
    worker_id: str
    epoch_time_s: float
    genome_id: str = "benchmark"


@dataclass
class TimingSummary:
    bin_edges: np.ndarray
    counts: np.ndarray
    modes: int
    mode_centers: tuple
    separation_stat: float


def _two_means_1d(values):
    """Exact optimal 1-d 2-means via sorted prefix-sum scan.

    Returns (center_lo, center_hi, std_lo, std_hi) for the SSE-optimal
    split of the sorted values into a low and a high cluster.
    """
    x = np.sort(values)
    n = len(x)
    csum = np.cumsum(x)
    csq = np.cumsum(x * x)
    best = (np.inf, 1)
    for t in range(1, n):
        sa, qa = csum[t - 1], csq[t - 1]
        sb, qb = csum[-1] - sa, csq[-1] - qa
        sse = (qa - sa * sa / t) + (qb - sb * sb / (n - t))
        if sse < best[0]:
            best = (sse, t)
    t = best[1]
    a, b = x[:t], x[t:]
    return (float(a.mean()), float(b.mean()),
            float(a.std()), float(b.std()))


def timing_distribution(samples, bins=30):
    """Histogram plus two-cluster analysis of epoch times.

    Reports 2 modes when the cluster separation exceeds twice the summed
    within-cluster spreads (separation_stat = |c2-c1| / (s1+s2) > 2),
    which a single tight distribution cannot reach but well-separated
    mixtures exceed easily. Output is invariant to sample order.
    """
    values = np.asarray([s.epoch_time_s if isinstance(s, TimingSample) else s
                         for s in samples], dtype=np.float64)
    if len(values) < 30:
        raise ValueError(f"need >= 30 samples, got {len(values)}")
    counts, edges = np.histogram(values, bins=bins)
    if np.ptp(values) == 0.0:
        return TimingSummary(bin_edges=edges, counts=counts, modes=1,
                             mode_centers=(float(values[0]),),
                             separation_stat=0.0)
    c1, c2, s1, s2 = _two_means_1d(values)
    spread = s1 + s2
    stat = float("inf") if spread == 0.0 else (c2 - c1) / spread
    if stat > 2.0:
        return TimingSummary(bin_edges=edges, counts=counts, modes=2,
                             mode_centers=(c1, c2), separation_stat=stat)
    return TimingSummary(bin_edges=edges, counts=counts, modes=1,
                         mode_centers=(float(values.mean()),),
                         separation_stat=stat)


def write_histogram_csv(summary, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(summary.bin_edges[:-1], summary.bin_edges[1:],
                             summary.counts):
            writer.writerow([lo, hi, int(c)])


# --------------------------------------------------------------------------
# Weak scaling


@dataclass
class StubTask:
    id: str
    duration_s: float


class TaskListMaster:
    """Hands out a fixed task list; collects records. For benchmarks and
    scheduler tests."""

    def __init__(self, tasks):
        self.tasks = list(tasks)
        self._next = 0
        self.results = []

    def issue(self, worker_id):
        if self._next >= len(self.tasks):
            return None
        task = self.tasks[self._next]
        self._next += 1
        return task

    def collect(self, record):
        self.results.append(record)


def stub_evaluate(task, worker_id):
    time.sleep(task.duration_s)
    return EvalRecord(genome_id=task.id, ok=True, fitness=0.0,
                      worker_id=worker_id)


def make_stub_tasks(count, dur_lo, dur_hi, seed=0, prefix="task"):
    rng = np.random.default_rng(seed)
    return [StubTask(id=f"{prefix}{i}", duration_s=float(rng.uniform(dur_lo, dur_hi)))
            for i in range(count)]


@dataclass
class ScalingRow:
    workers: int
    tasks: int
    wall_s: float
    throughput_per_s: float
    efficiency: float
    upper_bound_per_s: float
    lower_bound_per_s: float
    aggregate_idle_fraction: float


SCALING_CSV_FIELDS = ["workers", "tasks", "wall_s", "throughput_per_s",
                      "efficiency", "upper_bound_per_s", "lower_bound_per_s",
                      "aggregate_idle_fraction"]


def weak_scaling(worker_counts, tasks_per_worker, evaluate_fn=stub_evaluate,
                 task_factory=None, seed=0):
    """Throughput and efficiency as workload grows with worker count.

    The workload is tasks_per_worker * W tasks at each W. Bounds assume
    the best (upper) or worst (lower) observed evaluation time is
    duplicated across all workers.
    """
    if list(worker_counts) != sorted(worker_counts):
        raise ValueError("worker_counts must be ascending")
    task_factory = task_factory or (
        lambda count, s: make_stub_tasks(count, 0.05, 0.15, seed=s))
    results = []
    all_durations = []
    runs = []
    for wi, w in enumerate(worker_counts):
        tasks = task_factory(tasks_per_worker * w, seed + wi)
        master = TaskListMaster(tasks)
        pool = WorkerPool(w, evaluate_fn, master)
        report = pool.run()
        durations = [d for st in report.stats.values() for d in st.durations]
        all_durations.extend(durations)
        runs.append((w, len(tasks), report))
    best = min(all_durations)
    worst = max(all_durations)
    base_throughput = None
    for w, n_tasks, report in runs:
        throughput = n_tasks / report.wall_time_s
        if base_throughput is None:
            base_throughput = throughput
        results.append(ScalingRow(
            workers=w, tasks=n_tasks, wall_s=report.wall_time_s,
            throughput_per_s=throughput,
            efficiency=throughput / (w * base_throughput),
            upper_bound_per_s=w / best, lower_bound_per_s=w / worst,
            aggregate_idle_fraction=idle_fraction(report)["aggregate"]))
    return results


def write_scaling_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SCALING_CSV_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({f: getattr(r, f) for f in SCALING_CSV_FIELDS})
