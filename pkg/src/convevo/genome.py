"""Evolvable CNN encodings: genes, sampling, mutation, crossover, repair.

A genome is a linear chain of conv/pool feature genes followed by up to
three dense head genes; a final 2-unit Dense classifier is appended
implicitly at instantiation and is not evolvable. Genomes are immutable
values; every operator returns a new genome and leaves its inputs alone,
so they are safe to share across worker threads.

Conv hyperparameter sampling can be biased by a ThroughputPrior (built by
the sweep benchmark from measured layer throughput): each categorical is
drawn from ``beta * prior + (1 - beta) * uniform``.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ShapeError
from .nn import Conv2d, Dense, Flatten, MaxPool, Network, ReLU

MAX_FEATURE_LAYERS = 12
MAX_HEAD_LAYERS = 3
LR_MIN, LR_MAX = 1e-5, 1.0


@dataclass(frozen=True)
class ConvGene:
    out_channels: int
    kernel: int
    stride: int
    relu: bool = True


@dataclass(frozen=True)
class PoolGene:
    size: int
    stride: int


@dataclass(frozen=True)
class DenseGene:
    units: int


@dataclass(frozen=True)
class LearnParams:
    lr: float
    momentum: float
    batch_size: int


@dataclass(frozen=True)
class Genome:
    feature_layers: tuple
    head_layers: tuple
    learn: LearnParams
    id: str
    parent_ids: tuple = ()

    def same_structure(self, other):
        """Equality ignoring identity fields (id, parent_ids)."""
        return (self.feature_layers == other.feature_layers
                and self.head_layers == other.head_layers
                and self.learn == other.learn)


@dataclass
class SearchSpace:
    """Value ranges genomes are sampled from; also fixes the input shape
    genomes must stay valid for."""
    out_channels: tuple = (8, 16, 32, 64, 128, 256)
    kernels: tuple = (1, 2, 3, 4, 5, 6, 7)
    strides: tuple = (1, 2, 3)
    pool_sizes: tuple = (2, 3)
    pool_strides: tuple = (1, 2, 3)
    dense_units: tuple = (16, 1024)          # inclusive integer range
    batch_sizes: tuple = (16, 32, 64, 128, 256)
    momentums: tuple = (0.0, 0.5, 0.9)
    lr_range: tuple = (1e-4, 1e-1)           # log-uniform sampling bounds
    input_shape: tuple = (3, 100, 100)
    min_init_features: int = 1
    max_init_features: int = 4
    max_init_heads: int = 1
    conv_prob: float = 0.75


@dataclass
class MutationRates:
    perturb_hparam: float = 0.8
    add_layer: float = 0.2
    remove_layer: float = 0.2
    perturb_lr: float = 0.3

    @classmethod
    def zero(cls):
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass
class ThroughputPrior:
    """Categorical weights over conv hyperparameters, each summing to 1,
    blended with uniform via the mixing coefficient beta."""
    out_channels: dict = field(default_factory=dict)
    kernel: dict = field(default_factory=dict)
    stride: dict = field(default_factory=dict)
    beta: float = 0.5

    def weights_for(self, field_name):
        return getattr(self, field_name)


def new_id(rng):
    return f"{rng.integers(0, 2 ** 32):08x}{rng.integers(0, 2 ** 32):08x}"


def _choice(rng, values, p=None):
    idx = rng.choice(len(values), p=p)
    return values[int(idx)]


def _biased_choice(rng, values, prior, field_name):
    """Draw from beta*prior + (1-beta)*uniform, restricted to `values`."""
    if prior is None:
        return _choice(rng, values)
    pw = prior.weights_for(field_name)
    probs = np.array([prior.beta * pw.get(v, 0.0) + (1.0 - prior.beta) / len(values)
                      for v in values], dtype=np.float64)
    total = probs.sum()
    if total <= 0.0:
        return _choice(rng, values)
    return _choice(rng, values, p=probs / total)


def _random_conv_gene(rng, space, prior):
    return ConvGene(
        out_channels=int(_biased_choice(rng, space.out_channels, prior, "out_channels")),
        kernel=int(_biased_choice(rng, space.kernels, prior, "kernel")),
        stride=int(_biased_choice(rng, space.strides, prior, "stride")),
        relu=bool(rng.random() < 0.9),
    )


def _random_feature_gene(rng, space, prior):
    if rng.random() < space.conv_prob:
        return _random_conv_gene(rng, space, prior)
    return PoolGene(size=int(_choice(rng, space.pool_sizes)),
                    stride=int(_choice(rng, space.pool_strides)))


def _random_dense_gene(rng, space):
    lo, hi = space.dense_units
    return DenseGene(units=int(rng.integers(lo, hi + 1)))


def _random_learn(rng, space):
    lo, hi = space.lr_range
    lr = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
    return LearnParams(lr=lr,
                       momentum=float(_choice(rng, space.momentums)),
                       batch_size=int(_choice(rng, space.batch_sizes)))


def random_genome(rng, space, prior=None):
    """Sample a fresh genome; always returns a shape-valid genome
    (repair removes collapsing layers)."""
    n_feat = int(rng.integers(space.min_init_features, space.max_init_features + 1))
    features = tuple(_random_feature_gene(rng, space, prior) for _ in range(n_feat))
    n_head = int(rng.integers(0, space.max_init_heads + 1))
    heads = tuple(_random_dense_gene(rng, space) for _ in range(n_head))
    g = Genome(feature_layers=features, head_layers=heads,
               learn=_random_learn(rng, space), id=new_id(rng))
    return repair(g, space.input_shape)


@dataclass
class ShapeTrace:
    """Per-layer output shapes; feature entries are (c, h, w), head entries
    are flat unit counts."""
    input_shape: tuple
    feature_shapes: tuple
    flat_units: int
    head_units: tuple
    out_units: int = 2


def validate_shapes(genome, input_shape):
    """Trace shapes through the genome; raises ShapeError naming the first
    layer whose output would collapse below 1x1."""
    c, h, w = input_shape
    shapes = []
    for idx, gene in enumerate(genome.feature_layers):
        if isinstance(gene, ConvGene):
            k, s = gene.kernel, gene.stride
            if h < k or w < k:
                raise ShapeError(
                    f"layer {idx}: conv kernel {k} exceeds input {h}x{w}",
                    layer_index=idx, dimension="rows" if h < k else "cols")
            c = gene.out_channels
        elif isinstance(gene, PoolGene):
            k, s = gene.size, gene.stride
            if h < k or w < k:
                raise ShapeError(
                    f"layer {idx}: pool window {k} exceeds input {h}x{w}",
                    layer_index=idx, dimension="rows" if h < k else "cols")
        else:
            raise ShapeError(f"layer {idx}: unknown gene {gene!r}", layer_index=idx)
        h = (h - k) // s + 1
        w = (w - k) // s + 1
        shapes.append((c, h, w))
    flat = c * h * w
    head_units = []
    units = flat
    for gene in genome.head_layers:
        units = gene.units
        head_units.append(units)
    return ShapeTrace(input_shape=tuple(input_shape), feature_shapes=tuple(shapes),
                      flat_units=flat, head_units=tuple(head_units))


def repair(genome, input_shape):
    """Drop the first collapsing feature layer until the shape trace is
    valid. Idempotent; the worst case is an empty feature list (which is
    always valid: flatten feeds the dense head directly)."""
    g = genome
    while True:
        try:
            validate_shapes(g, input_shape)
            return g
        except ShapeError as e:
            feats = list(g.feature_layers)
            del feats[e.layer_index]
            g = replace(g, feature_layers=tuple(feats))


def mutate(genome, rng, rates, space, prior=None):
    """Apply each operator independently with its configured probability,
    then repair. The parent is untouched."""
    features = list(genome.feature_layers)
    heads = list(genome.head_layers)
    learn = genome.learn

    if rng.random() < rates.perturb_hparam and (features or heads):
        slot = int(rng.integers(0, len(features) + len(heads)))
        if slot < len(features):
            features[slot] = _perturb_feature(features[slot], rng, space, prior)
        else:
            heads[slot - len(features)] = _random_dense_gene(rng, space)

    if rng.random() < rates.add_layer and len(features) < MAX_FEATURE_LAYERS:
        pos = int(rng.integers(0, len(features) + 1))
        features.insert(pos, _random_feature_gene(rng, space, prior))

    if rng.random() < rates.remove_layer and len(features) > 1:
        del features[int(rng.integers(0, len(features)))]

    if rng.random() < rates.perturb_lr:
        factor = math.exp(rng.uniform(math.log(1.0 / 3.0), math.log(3.0)))
        lr = min(max(learn.lr * factor, LR_MIN), LR_MAX)
        learn = replace(learn, lr=lr)

    child = Genome(feature_layers=tuple(features), head_layers=tuple(heads),
                   learn=learn, id=new_id(rng), parent_ids=(genome.id,))
    return repair(child, space.input_shape)


def _perturb_feature(gene, rng, space, prior):
    if isinstance(gene, ConvGene):
        which = int(rng.integers(0, 4))
        if which == 0:
            return replace(gene, out_channels=int(
                _biased_choice(rng, space.out_channels, prior, "out_channels")))
        if which == 1:
            return replace(gene, kernel=int(
                _biased_choice(rng, space.kernels, prior, "kernel")))
        if which == 2:
            return replace(gene, stride=int(
                _biased_choice(rng, space.strides, prior, "stride")))
        return replace(gene, relu=not gene.relu)
    if isinstance(gene, PoolGene):
        if rng.random() < 0.5:
            return replace(gene, size=int(_choice(rng, space.pool_sizes)))
        return replace(gene, stride=int(_choice(rng, space.pool_strides)))
    raise TypeError(f"unknown feature gene {gene!r}")


def crossover(a, b, rng, input_shape=(3, 100, 100)):
    """Single-cut recombination of the feature chains.

    One cut fraction is drawn and mapped into each parent, so
    crossover(a, a) reproduces a's layer genes exactly. Learn parameters
    are picked gene-wise; the head comes from one parent wholesale.
    """
    frac = rng.random()
    i = round(frac * len(a.feature_layers))
    j = round(frac * len(b.feature_layers))
    features = (a.feature_layers[:i] + b.feature_layers[j:])[:MAX_FEATURE_LAYERS]
    heads = a.head_layers if rng.random() < 0.5 else b.head_layers
    learn = LearnParams(
        lr=(a if rng.random() < 0.5 else b).learn.lr,
        momentum=(a if rng.random() < 0.5 else b).learn.momentum,
        batch_size=(a if rng.random() < 0.5 else b).learn.batch_size,
    )
    child = Genome(feature_layers=features, head_layers=heads, learn=learn,
                   id=new_id(rng), parent_ids=(a.id, b.id))
    return repair(child, input_shape)


def instantiate(genome, input_shape, seed, dtype=np.float32):
    """Build the concrete trainable network: feature genes, flatten, head
    genes, and the implicit final Dense(2). Weight init is seeded."""
    validate_shapes(genome, input_shape)
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    layers = []
    for gene in genome.feature_layers:
        if isinstance(gene, ConvGene):
            layers.append(Conv2d(c, gene.out_channels, gene.kernel, gene.stride,
                                 rng=rng, dtype=dtype))
            c = gene.out_channels
            k, s = gene.kernel, gene.stride
            if gene.relu:
                layers.append(ReLU())
        else:
            layers.append(MaxPool(gene.size, gene.stride))
            k, s = gene.size, gene.stride
        h = (h - k) // s + 1
        w = (w - k) // s + 1
    layers.append(Flatten())
    units = c * h * w
    for gene in genome.head_layers:
        layers.append(Dense(units, gene.units, rng=rng, dtype=dtype))
        units = gene.units
    layers.append(Dense(units, 2, rng=rng, dtype=dtype))
    return Network(layers, input_shape=tuple(input_shape), class_count=2)


# ---------------------------------------------------------------------------
# Text serialization: one self-describing line per genome, used verbatim in
# evolution logs and on the socket transport. Round-trips exactly.

def format_genome(genome):
    parts = [f"id={genome.id}", f"parents={','.join(genome.parent_ids)}",
             f"lr={genome.learn.lr!r}", f"momentum={genome.learn.momentum!r}",
             f"batch_size={genome.learn.batch_size}"]
    for i, gene in enumerate(genome.feature_layers):
        if isinstance(gene, ConvGene):
            parts.append(f"f{i}=conv:oc={gene.out_channels},k={gene.kernel},"
                         f"s={gene.stride},relu={int(gene.relu)}")
        else:
            parts.append(f"f{i}=pool:size={gene.size},s={gene.stride}")
    for i, gene in enumerate(genome.head_layers):
        parts.append(f"h{i}=dense:units={gene.units}")
    return " ".join(parts)


def _parse_fields(body, token):
    fields = {}
    for item in body.split(","):
        if "=" not in item:
            raise ValueError(f"malformed genome token {token!r}")
        k, v = item.split("=", 1)
        fields[k] = v
    return fields


def parse_genome(line):
    scalars = {}
    features = {}
    heads = {}
    for token in line.strip().split():
        if "=" not in token:
            raise ValueError(f"malformed genome token {token!r}")
        key, value = token.split("=", 1)
        if key.startswith("f") and key[1:].isdigit():
            kind, _, body = value.partition(":")
            f = _parse_fields(body, token)
            if kind == "conv":
                features[int(key[1:])] = ConvGene(
                    out_channels=int(f["oc"]), kernel=int(f["k"]),
                    stride=int(f["s"]), relu=bool(int(f["relu"])))
            elif kind == "pool":
                features[int(key[1:])] = PoolGene(size=int(f["size"]),
                                                  stride=int(f["s"]))
            else:
                raise ValueError(f"unknown feature kind {kind!r} in {token!r}")
        elif key.startswith("h") and key[1:].isdigit():
            kind, _, body = value.partition(":")
            if kind != "dense":
                raise ValueError(f"unknown head kind {kind!r} in {token!r}")
            f = _parse_fields(body, token)
            heads[int(key[1:])] = DenseGene(units=int(f["units"]))
        else:
            scalars[key] = value
    for required in ("id", "parents", "lr", "momentum", "batch_size"):
        if required not in scalars:
            raise ValueError(f"genome record missing field {required!r}")
    parent_ids = tuple(p for p in scalars["parents"].split(",") if p)
    learn = LearnParams(lr=float(scalars["lr"]),
                        momentum=float(scalars["momentum"]),
                        batch_size=int(scalars["batch_size"]))
    return Genome(
        feature_layers=tuple(features[i] for i in sorted(features)),
        head_layers=tuple(heads[i] for i in sorted(heads)),
        learn=learn, id=scalars["id"], parent_ids=parent_ids)
