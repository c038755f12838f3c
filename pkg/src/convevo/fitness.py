"""Scalarized multi-objective fitness: f = v + alpha * m.

v is validation performance, m the secondary objective normalized into
[0, 1] against fixed calibration bounds. alpha's sign encodes direction:
negative alpha penalizes larger raw objective values (costs to minimize),
positive alpha rewards them. Records are totally ordered so selection and
eviction are deterministic.
"""

from dataclasses import dataclass

OBJECTIVE_KINDS = ("none", "flop_proxy", "param_count", "measured_latency")

FAILED_FITNESS = float("-inf")


@dataclass
class ObjectiveConfig:
    kind: str = "none"
    alpha: float = 0.0
    lo: float | None = None
    hi: float | None = None
    clamp: bool = True

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(
                f"objective kind {self.kind!r} not in {OBJECTIVE_KINDS}")
        if self.kind != "none" and self.lo is not None and self.hi is not None:
            if not self.lo < self.hi:
                raise ValueError(f"objective bounds need lo < hi, got "
                                 f"lo={self.lo} hi={self.hi}")

    @property
    def calibrated(self):
        return self.kind == "none" or (self.lo is not None and self.hi is not None)


@dataclass
class FitnessValue:
    v: float
    m: float
    f: float


def normalize_objective(raw, lo, hi, clamp=True):
    if not lo < hi:
        raise ValueError(f"normalization bounds need lo < hi, got {lo}, {hi}")
    m = (raw - lo) / (hi - lo)
    if clamp:
        m = min(max(m, 0.0), 1.0)
    return m


def fitness(v, m, alpha):
    return v + alpha * m


def score(v, raw, objective):
    """Full pipeline from raw objective value to FitnessValue."""
    if objective.kind == "none":
        return FitnessValue(v=v, m=0.0, f=v)
    if not objective.calibrated:
        raise ValueError("objective bounds not calibrated")
    m = normalize_objective(raw, objective.lo, objective.hi, objective.clamp)
    return FitnessValue(v=v, m=m, f=fitness(v, m, objective.alpha))


def sort_key(record):
    """Total order: fitness descending, then fewer inference FLOPs, then
    genome id. Failed records (-inf fitness) always sort last."""
    return (-record.fitness, record.flops_inference, record.genome_id)


def compare(a, b):
    """-1 if a ranks before (better than) b, 1 if after, 0 if identical."""
    ka, kb = sort_key(a), sort_key(b)
    if ka < kb:
        return -1
    if ka > kb:
        return 1
    return 0
