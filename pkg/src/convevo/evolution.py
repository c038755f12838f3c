"""Asynchronous steady-state genetic algorithm master.

The master owns the population and the genome RNG. Workers interact with
it through exactly two calls: issue() to pull a candidate and
receive_result() to push back an EvalRecord. The master never evaluates
anything itself and never blocks on other workers, so heterogeneous
evaluation times keep every worker busy.

Replacement is per-result: insert, then evict the worst non-elite when
over capacity. The surviving population therefore depends only on the
multiset of records received, not their arrival order, and best-so-far
fitness is non-decreasing over the log.
"""

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, EvalFailure, ShapeError
from .fitness import sort_key
from .genome import (MutationRates, crossover, format_genome, mutate,
                     random_genome)

LOG_SCHEMA_VERSION = 1


class JsonlLog:
    """Append-only JSON-lines sink."""

    def __init__(self, path):
        self.path = str(path)
        self._fh = open(path, "w", encoding="utf-8")

    def write(self, obj):
        self._fh.write(json.dumps(obj, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_log(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class PopMember:
    record: object
    genome: object


class Population:
    def __init__(self, capacity=50, elite_count=2):
        if capacity <= elite_count:
            raise ConfigError(
                f"population capacity {capacity} must exceed elite count {elite_count}")
        self.capacity = capacity
        self.elite_count = elite_count
        self.members = []

    def __len__(self):
        return len(self.members)

    def insert(self, record, genome):
        """Insert; evict and return the worst non-elite when over capacity."""
        self.members.append(PopMember(record, genome))
        if len(self.members) <= self.capacity:
            return None
        self.members.sort(key=lambda m: sort_key(m.record))
        # elites are the head of the sorted list and can never be last
        evicted = self.members.pop()
        return evicted

    def best(self):
        if not self.members:
            return None
        return min(self.members, key=lambda m: sort_key(m.record))

    def tournament(self, rng, size):
        contestants = [self.members[int(rng.integers(0, len(self.members)))]
                       for _ in range(size)]
        return min(contestants, key=lambda m: sort_key(m.record))


@dataclass
class EvolutionSettings:
    capacity: int = 50
    elite_count: int = 2
    tournament_size: int = 3
    crossover_prob: float = 0.5
    rates: MutationRates = field(default_factory=MutationRates)
    max_evaluations: int | None = 200
    wall_clock_budget_s: float | None = None


class Master:
    """Owns population, pending work, and the genome RNG. Not thread-safe
    by itself: pools serialize access with a lock."""

    def __init__(self, space, objective, settings=None, seed=0, prior=None,
                 log=None):
        self.space = space
        self.objective = objective
        self.settings = settings or EvolutionSettings()
        self.rng = np.random.default_rng(seed)
        self.seed = seed
        self.prior = prior
        self.log = log
        self.population = Population(self.settings.capacity,
                                     self.settings.elite_count)
        self.pending = {}            # genome_id -> Genome
        self.issued = 0
        self.completed = 0
        self.protocol_errors = 0
        self.best = None
        self._started = time.monotonic()

    # -- the two worker-facing messages ------------------------------------

    def next_candidate(self, worker_id):
        """Produce a genome for an idle worker; never blocks."""
        if len(self.population) < self.settings.capacity:
            child = random_genome(self.rng, self.space, self.prior)
        else:
            s = self.settings
            p1 = self.population.tournament(self.rng, s.tournament_size)
            p2 = self.population.tournament(self.rng, s.tournament_size)
            if self.rng.random() < s.crossover_prob:
                inter = crossover(p1.genome, p2.genome, self.rng,
                                  input_shape=self.space.input_shape)
                child = mutate(inter, self.rng, s.rates, self.space, self.prior)
                child = replace(child, parent_ids=inter.parent_ids)
            else:
                best_parent = min(p1, p2, key=lambda m: sort_key(m.record))
                child = mutate(best_parent.genome, self.rng, s.rates,
                               self.space, self.prior)
        self.pending[child.id] = child
        self.issued += 1
        return child

    def receive_result(self, record):
        """Ingest one EvalRecord; returns True when accepted."""
        genome = self.pending.pop(record.genome_id, None)
        if genome is None:
            self.protocol_errors += 1
            if self.log:
                self.log.write({"type": "protocol_error",
                                "genome_id": record.genome_id,
                                "detail": "result for unknown/expired genome"})
            return False
        self.completed += 1
        self.population.insert(record, genome)
        if self.best is None or sort_key(record) < sort_key(self.best.record):
            self.best = PopMember(record, genome)
        if self.log:
            self.log.write({"type": "eval", "seq": self.completed,
                            "genome": format_genome(genome),
                            "record": record.to_json_dict(),
                            "best_genome_id": self.best.record.genome_id,
                            "best_fitness": _json_fitness(self.best.record.fitness)})
        return True

    # -- scheduling face used by worker pools ------------------------------

    def stop_reached(self):
        s = self.settings
        if s.max_evaluations is not None and self.issued >= s.max_evaluations:
            return True
        if (s.wall_clock_budget_s is not None
                and time.monotonic() - self._started >= s.wall_clock_budget_s):
            return True
        return False

    def issue(self, worker_id):
        if self.stop_reached():
            return None
        return self.next_candidate(worker_id)

    def collect(self, record):
        self.receive_result(record)

    def outstanding(self):
        return len(self.pending)


def _json_fitness(f):
    return None if f == float("-inf") else f


def calibrate(master, raw_objective_fn, k):
    """Sample k random genomes, measure the raw secondary objective, and
    set normalization bounds to (min, max) widened by 10% each way."""
    if k < 2:
        raise ConfigError(f"calibration needs k >= 2, got {k}")
    values = []
    for _ in range(k):
        genome = random_genome(master.rng, master.space, master.prior)
        try:
            values.append(float(raw_objective_fn(genome)))
        except (EvalFailure, ShapeError):
            continue
    if not values:
        raise ConfigError(f"calibration failed: all {k} probe genomes failed")
    lo, hi = min(values), max(values)
    if lo == hi:
        raise ConfigError(
            f"calibration degenerate: all {len(values)} probes measured "
            f"{lo}; lo == hi gives no normalization range")
    lo, hi = lo * 0.9, hi * 1.1
    master.objective = replace(master.objective, lo=lo, hi=hi)
    if master.log:
        master.log.write({"type": "calibration", "k": k, "raw_values": values,
                          "lo": lo, "hi": hi})
    return lo, hi


def run_serial(master, evaluate_fn, worker_id="w0"):
    """Synchronous test mode: worker calls inlined in one thread."""
    while (genome := master.issue(worker_id)) is not None:
        master.collect(evaluate_fn(genome, worker_id))
    return master.best


def write_header(log, objective, settings, seed, config_text=""):
    log.write({"type": "header", "schema": LOG_SCHEMA_VERSION,
               "seed": seed, "config_text": config_text,
               "objective": {"kind": objective.kind, "alpha": objective.alpha,
                             "lo": objective.lo, "hi": objective.hi,
                             "clamp": objective.clamp},
               "population": settings.capacity, "elites": settings.elite_count,
               "tournament_size": settings.tournament_size,
               "crossover_prob": settings.crossover_prob,
               "max_evaluations": settings.max_evaluations,
               "started_unix": time.time()})


def audit_log(path):
    """Check structural invariants of an evolution log.

    Returns a dict with counts; raises AssertionError on violation:
    best-so-far fitness must be non-decreasing, seq contiguous from 1,
    and exactly one header.
    """
    rows = read_log(path)
    headers = [r for r in rows if r["type"] == "header"]
    evals = [r for r in rows if r["type"] == "eval"]
    assert len(headers) == 1, f"expected 1 header, found {len(headers)}"
    last_best = float("-inf")
    for i, row in enumerate(evals):
        assert row["seq"] == i + 1, f"seq gap at position {i}: {row['seq']}"
        best = row["best_fitness"]
        if best is None:
            best = float("-inf")
        assert best >= last_best, (
            f"best fitness regressed at seq {row['seq']}: {best} < {last_best}")
        last_best = best
    return {"evaluations": len(evals),
            "failures": sum(1 for r in evals if not r["record"]["ok"]),
            "final_best_fitness": last_best}
