"""Candidate scoring: short training, validation metrics, cost accounting.

evaluate() is the worker-side unit of work. It never raises for a bad
candidate: shape collapses and diverging losses become failed EvalRecords
carrying a -inf fitness sentinel, so the evolution loop simply moves on.

FLOP convention (fixed, so the numbers are auditable):
    conv:   2 * k^2 * c_in * c_out * h_out * w_out   (multiply-add = 2)
    dense:  2 * in_units * out_units
    pool:   c * h_out * w_out        (comparisons)
    relu:   elements of its output
    flatten: 0
Counts are per single patch (batch of one).
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import fitness as fitness_mod
from .errors import EvalFailure, ShapeError
from .genome import instantiate
from .metrics import auc_roc, confusion_counts, f1_score
from .nn import Conv2d, Dense, Flatten, MaxPool, ReLU, infer_shapes, train_batch


@dataclass
class TrainBudget:
    epochs: int = 2
    max_batches_per_epoch: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"budget needs epochs >= 1, got {self.epochs}")


@dataclass
class LatencyStats:
    median_s_per_batch: float
    min_s_per_batch: float
    max_s_per_batch: float
    reps: int
    batch_size: int

    @property
    def patches_per_s(self):
        return self.batch_size / self.median_s_per_batch

    def to_dict(self):
        return {"median_s_per_batch": self.median_s_per_batch,
                "min_s_per_batch": self.min_s_per_batch,
                "max_s_per_batch": self.max_s_per_batch,
                "reps": self.reps, "batch_size": self.batch_size,
                "patches_per_s": self.patches_per_s}


@dataclass
class EvalRecord:
    genome_id: str
    ok: bool = True
    failure_reason: str = ""
    val_f1: float = 0.0
    val_auc: float = 0.0
    train_time_s: float = 0.0
    flops_inference: int = 0
    params: int = 0
    latency: LatencyStats | None = None
    objective_raw: float = 0.0
    objective_m: float = 0.0
    fitness: float = fitness_mod.FAILED_FITNESS
    worker_id: str = ""
    started_unix: float = 0.0
    finished_unix: float = 0.0
    extras: dict = field(default_factory=dict)

    def to_json_dict(self):
        d = {"genome_id": self.genome_id, "ok": self.ok,
             "failure_reason": self.failure_reason,
             "val_f1": self.val_f1, "val_auc": self.val_auc,
             "train_time_s": self.train_time_s,
             "flops_inference": self.flops_inference, "params": self.params,
             "latency": self.latency.to_dict() if self.latency else None,
             "objective_raw": self.objective_raw, "objective_m": self.objective_m,
             "fitness": None if self.fitness == fitness_mod.FAILED_FITNESS else self.fitness,
             "worker_id": self.worker_id,
             "started_unix": self.started_unix, "finished_unix": self.finished_unix}
        if self.extras:
            d["extras"] = self.extras
        return d

    @classmethod
    def from_json_dict(cls, d):
        lat = d.get("latency")
        latency = None
        if lat is not None:
            latency = LatencyStats(
                median_s_per_batch=lat["median_s_per_batch"],
                min_s_per_batch=lat["min_s_per_batch"],
                max_s_per_batch=lat["max_s_per_batch"],
                reps=lat["reps"], batch_size=lat["batch_size"])
        return cls(genome_id=d["genome_id"], ok=d["ok"],
                   failure_reason=d.get("failure_reason", ""),
                   val_f1=d["val_f1"], val_auc=d["val_auc"],
                   train_time_s=d["train_time_s"],
                   flops_inference=d["flops_inference"], params=d["params"],
                   latency=latency, objective_raw=d["objective_raw"],
                   objective_m=d["objective_m"],
                   fitness=fitness_mod.FAILED_FITNESS if d["fitness"] is None else d["fitness"],
                   worker_id=d.get("worker_id", ""),
                   started_unix=d.get("started_unix", 0.0),
                   finished_unix=d.get("finished_unix", 0.0),
                   extras=d.get("extras", {}))


def count_params(network):
    return sum(int(w.size) for _, _, w in network.parameters())


def count_flops_inference(network, input_shape):
    """Per-patch forward FLOPs under the documented convention."""
    shapes = infer_shapes(network.layers, input_shape)
    total = 0
    for layer, out_shape in zip(network.layers, shapes):
        if isinstance(layer, Conv2d):
            c_out, h, w = out_shape
            total += 2 * layer.kernel ** 2 * layer.in_channels * c_out * h * w
        elif isinstance(layer, Dense):
            total += 2 * layer.in_units * layer.out_units
        elif isinstance(layer, (MaxPool, ReLU)):
            total += int(np.prod(out_shape))
        elif isinstance(layer, Flatten):
            pass
        else:
            raise ValueError(f"no FLOP rule for layer {type(layer).__name__}")
    return int(total)


def _batches(n, batch_size, perm):
    batch_size = min(batch_size, n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield perm[start:start + batch_size]


def train_short(genome, train_set, budget, seed, input_shape=None,
                dtype=np.float32):
    """Instantiate and train for the budget; returns (network, seconds).

    Shuffling is seeded per epoch. A non-finite loss aborts the candidate
    with EvalFailure rather than poisoning the weights.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    input_shape = input_shape or train_set.input_shape
    network = instantiate(genome, input_shape, seed, dtype=dtype)
    x = train_set.as_float(dtype)
    y = train_set.labels.astype(np.int64)
    shuffle_rng = np.random.default_rng([seed, 0xDA7A])
    t0 = time.monotonic()
    for epoch in range(budget.epochs):
        perm = shuffle_rng.permutation(len(train_set))
        for bi, idx in enumerate(_batches(len(train_set), genome.learn.batch_size, perm)):
            if (budget.max_batches_per_epoch is not None
                    and bi >= budget.max_batches_per_epoch):
                break
            loss = train_batch(network, x[idx], y[idx],
                               genome.learn.lr, genome.learn.momentum)
            if not np.isfinite(loss):
                raise EvalFailure(
                    f"non-finite loss {loss} at epoch {epoch} batch {bi}")
    return network, time.monotonic() - t0


def predict_scores(network, pset, batch_size=128, dtype=np.float32):
    """Positive-class scores and argmax predictions over a patch set."""
    x = pset.as_float(dtype)
    scores = np.empty(len(pset), dtype=np.float64)
    preds = np.empty(len(pset), dtype=np.int64)
    for start in range(0, len(pset), batch_size):
        logits = network.forward(x[start:start + batch_size])
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        scores[start:start + len(logits)] = p[:, 1]
        preds[start:start + len(logits)] = logits.argmax(axis=1)
    return scores, preds


def measure_latency(network, batch_size, reps=5, warmup=1, seed=0):
    """Median/min/max forward seconds per batch on a fixed random batch."""
    if reps < 3:
        raise ValueError(f"need reps >= 3, got {reps}")
    if warmup < 1:
        raise ValueError(f"need warmup >= 1, got {warmup}")
    if network.input_shape is None:
        raise ValueError("network has no input_shape; cannot build a batch")
    rng = np.random.default_rng(seed)
    batch = rng.random((batch_size, *network.input_shape), dtype=np.float32)
    if network.dtype == np.float64:
        batch = batch.astype(np.float64)
    for _ in range(warmup):
        network.forward(batch)
    times = []
    for _ in range(reps):
        t0 = time.monotonic()
        network.forward(batch)
        times.append(time.monotonic() - t0)
    return LatencyStats(median_s_per_batch=float(np.median(times)),
                        min_s_per_batch=min(times), max_s_per_batch=max(times),
                        reps=reps, batch_size=batch_size)


def raw_objective(kind, flops, params, latency):
    if kind == "flop_proxy":
        return float(flops)
    if kind == "param_count":
        return float(params)
    if kind == "measured_latency":
        return latency.median_s_per_batch
    return 0.0


def evaluate(genome, splits, budget, objective, seed, worker_id="",
             latency_batch=64, latency_reps=5, latency_warmup=1,
             dtype=np.float32, input_shape=None):
    """Score one genome end to end; never raises for a bad candidate."""
    started = time.time()
    try:
        network, train_time = train_short(genome, splits.train, budget, seed,
                                          input_shape=input_shape, dtype=dtype)
        if len(np.unique(splits.val.labels)) < 2:
            raise EvalFailure("validation set has a single class")
        scores, preds = predict_scores(network, splits.val, dtype=dtype)
        conf = confusion_counts(preds, splits.val.labels)
        val_f1 = f1_score(conf["tp"], conf["fp"], conf["fn"])
        val_auc = auc_roc(scores, splits.val.labels)
        shape = input_shape or splits.train.input_shape
        flops = count_flops_inference(network, shape)
        params = count_params(network)
        latency = None
        if objective.kind == "measured_latency":
            latency = measure_latency(network, latency_batch, latency_reps,
                                      latency_warmup, seed=seed)
        raw = raw_objective(objective.kind, flops, params, latency)
        fv = fitness_mod.score(val_f1, raw, objective)
        return EvalRecord(genome_id=genome.id, ok=True, val_f1=val_f1,
                          val_auc=val_auc, train_time_s=train_time,
                          flops_inference=flops, params=params, latency=latency,
                          objective_raw=raw, objective_m=fv.m, fitness=fv.f,
                          worker_id=worker_id, started_unix=started,
                          finished_unix=time.time())
    except (EvalFailure, ShapeError) as e:
        return EvalRecord(genome_id=genome.id, ok=False, failure_reason=str(e),
                          worker_id=worker_id, started_unix=started,
                          finished_unix=time.time())
