"""Genetic-programming symbolic regression on surrogate density labels.

Several populations evolve independently (regularized evolution: tournament
selection, offspring replace the oldest member) and exchange their best member
around a ring after every iteration. Every evaluated offspring is scored on the
full training set and offered to a global pareto front of complexity vs loss.
"""
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import optimize

from .density import GridDensity, KdeModel
from .errors import ConfigError
from .expr import (
    ARITY,
    BINARY_OPS,
    Expression,
    Node,
    Op,
    const,
    evaluate_batch,
    is_valid_constant,
    iter_nodes,
    parse,
    random_constant,
    random_node,
    replace_at,
    simplify,
    subtree_at,
    to_string,
    var,
)
from .support import SupportRegion, grid_in_support

logger = logging.getLogger(__name__)

DEFAULT_OPERATORS = BINARY_OPS + (Op.EXP, Op.LOG, Op.POW2, Op.POW3)
MUTATION_KINDS = ("operator", "constant", "subtree", "hoist")
MUTATION_RETRIES = 10
INIT_MAX_SIZE = 10
SUBTREE_MAX_SIZE = 10
LOSS_SCALE_FLOOR = 1e-12
# Full-data losses remembered by expression text; cleared once full.
FULL_LOSS_CACHE_SIZE = 4096


class LossRegime(str, Enum):
    MSE = "mse"
    MSE_NLL_NP = "mse_nll_np"
    MSE_NP = "mse_np"
    NLL_NP = "nll_np"

    def weights(self, labels: Optional[np.ndarray] = None) -> Tuple[float, float, float]:
        if self is LossRegime.MSE:
            return (1.0, 0.0, 0.0)
        if self is LossRegime.MSE_NP:
            return (1.0, 0.0, 1.0)
        if self is LossRegime.NLL_NP:
            return (0.0, 1.0, 1.0)
        variance = float(np.var(labels)) if labels is not None and len(labels) > 1 else 1.0
        return (1.0 / variance if variance > 0 else 1.0, 1.0, 1.0)


@dataclass(frozen=True)
class SrConfig:
    operators: Tuple[Op, ...] = DEFAULT_OPERATORS
    maxsize: int = 50
    niterations: int = 200
    ncycles_per_iteration: int = 380
    populations: int = 15
    population_size: int = 30
    parsimony: float = 0.001
    adaptive_parsimony_scaling: float = 1040.0
    batch_size: int = 128
    loss_weights: Tuple[float, float, float] = (1.0, 0.0, 0.0)
    clip_threshold: float = 1e-12
    seed: int = 0
    threads: int = 1
    tournament_size: int = 7
    crossover_probability: float = 0.1
    mutation_weights: Tuple[float, float, float, float] = (0.3, 0.35, 0.25, 0.1)
    optimize_probability: float = 0.0
    optimize_iterations: int = 60

    def validate(self) -> "SrConfig":
        counts = (
            self.maxsize, self.niterations, self.ncycles_per_iteration, self.populations,
            self.population_size, self.batch_size, self.threads, self.tournament_size,
        )
        if any(int(v) < 1 for v in counts):
            raise ConfigError("SR counts must all be at least 1")
        if self.parsimony < 0 or self.adaptive_parsimony_scaling < 0:
            raise ConfigError("parsimony settings must be non-negative")
        w_mse, w_nll, w_np = self.loss_weights
        if min(self.loss_weights) < 0 or (w_mse + w_nll) <= 0:
            raise ConfigError(f"invalid loss weights {self.loss_weights}")
        if not self.clip_threshold > 0:
            raise ConfigError("clip_threshold must be positive")
        if not self.operators:
            raise ConfigError("at least one operator must be enabled")
        if len(self.mutation_weights) != len(MUTATION_KINDS) or sum(self.mutation_weights) <= 0:
            raise ConfigError("mutation_weights needs four non-negative entries")
        if not 0 <= self.optimize_probability <= 1 or not 0 <= self.crossover_probability <= 1:
            raise ConfigError("probabilities must lie in [0, 1]")
        return self

    def with_regime(self, regime: Union[str, LossRegime], labels: Optional[np.ndarray] = None) -> "SrConfig":
        return replace(self, loss_weights=LossRegime(regime).weights(labels))

    def to_dict(self) -> dict:
        data = {k: getattr(self, k) for k in self.__dataclass_fields__}
        data["operators"] = [op.value for op in self.operators]
        data["loss_weights"] = list(self.loss_weights)
        data["mutation_weights"] = list(self.mutation_weights)
        return data


@dataclass(frozen=True, eq=False)
class TrainingSet:
    grid_points: np.ndarray
    labels: np.ndarray
    raw_samples: np.ndarray
    support: Optional[SupportRegion] = None

    @property
    def d(self) -> int:
        return self.grid_points.shape[1]


Surrogate = Union[KdeModel, GridDensity, Callable[[np.ndarray], np.ndarray]]


def build_training_set(model: Surrogate, support: SupportRegion, resolution, raw_samples) -> TrainingSet:
    """Label the support-restricted grid with the surrogate density."""
    points = grid_in_support(support, resolution)
    labels = np.asarray(model(points), dtype=float)
    logger.info("training set: %d grid points, %d raw samples", points.shape[0], len(raw_samples))
    return TrainingSet(points, labels, np.asarray(raw_samples, dtype=float), support)


# --------------------------------------------------------------------------- loss

def loss(
    e: Expression,
    t: TrainingSet,
    c: SrConfig,
    batch: Optional[np.ndarray] = None,
    sample_batch: Optional[np.ndarray] = None,
) -> float:
    """Weighted MSE + NLL + negative-prediction penalty; +inf on any non-finite output.

    ``batch`` indexes grid points and ``sample_batch`` raw samples; ``None`` means all.
    """
    w_mse, w_nll, w_np = c.loss_weights
    points = t.grid_points if batch is None else t.grid_points[batch]
    prediction = evaluate_batch(e, points)
    if not np.all(np.isfinite(prediction)):
        return float("inf")
    total = 0.0
    if w_mse:
        labels = t.labels if batch is None else t.labels[batch]
        total += w_mse * float(np.mean((prediction - labels) ** 2))
    predictions = [prediction]
    if (w_nll or w_np) and len(t.raw_samples):
        samples = t.raw_samples if sample_batch is None else t.raw_samples[sample_batch]
        at_samples = evaluate_batch(e, samples)
        if not np.all(np.isfinite(at_samples)):
            return float("inf")
        if w_nll:
            total += w_nll * float(np.mean(-np.log(np.maximum(at_samples, c.clip_threshold))))
        predictions.append(at_samples)
    if w_np:
        values = np.concatenate(predictions)
        total += w_np * float(np.mean(np.maximum(0.0, -values) ** 2))
    return total if np.isfinite(total) else float("inf")


# --------------------------------------------------------------------------- pareto front

@dataclass
class ParetoFront:
    """complexity -> (loss, expression); loss strictly falls as complexity grows."""

    entries: Dict[int, Tuple[float, Expression]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def sorted_entries(self) -> List[Tuple[int, float, Expression]]:
        return [(k, self.entries[k][0], self.entries[k][1]) for k in sorted(self.entries)]

    def best(self) -> Tuple[int, float, Expression]:
        if not self.entries:
            raise ValueError("pareto front is empty")
        return min(self.sorted_entries(), key=lambda item: (item[1], item[0]))

    def to_dict(self) -> dict:
        return {
            "entries": [
                {"complexity": k, "loss": l, "expression": to_string(e), "var_count": e.var_count}
                for k, l, e in self.sorted_entries()
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ParetoFront":
        front = cls()
        for item in data["entries"]:
            e = parse(item["expression"], item["var_count"])
            front.entries[int(item["complexity"])] = (float(item["loss"]), e)
        return front


def pareto_update(front: ParetoFront, candidate: Tuple[int, float, Expression]) -> ParetoFront:
    """Insert unless dominated; then drop entries the candidate dominates or ties."""
    complexity, value, e = candidate
    if not np.isfinite(value):
        return front
    for k, (stored, _) in front.entries.items():
        if k <= complexity and stored <= value and (k < complexity or stored < value):
            return front
    for k in [k for k, (stored, _) in front.entries.items() if k >= complexity and stored >= value]:
        del front.entries[k]
    front.entries[complexity] = (float(value), e)
    return front


# --------------------------------------------------------------------------- variation

def _with_node(e: Expression, path, node: Node) -> Expression:
    return Expression(replace_at(e.root, path, node), e.var_count)


def _mutate_operator(e: Expression, c: SrConfig, rng: np.random.Generator) -> Optional[Expression]:
    nodes = list(iter_nodes(e.root))
    path, node = nodes[int(rng.integers(len(nodes)))]
    if node.is_leaf:
        if node.op is Op.CONST:
            return _with_node(e, path, var(int(rng.integers(1, e.var_count + 1))))
        return _with_node(e, path, const(random_constant(rng)))
    same_arity = [op for op in c.operators if ARITY[op] == ARITY[node.op] and op is not node.op]
    if not same_arity:
        return None
    op = same_arity[int(rng.integers(len(same_arity)))]
    return _with_node(e, path, Node(op, node.children))


def _mutate_constant(e: Expression, c: SrConfig, rng: np.random.Generator) -> Optional[Expression]:
    constants = [(p, n) for p, n in iter_nodes(e.root) if n.op is Op.CONST]
    if not constants:
        return None
    path, node = constants[int(rng.integers(len(constants)))]
    sigma = 10.0 ** rng.uniform(-2.0, 0.0)
    value = node.value * float(np.exp(sigma * rng.standard_normal()))
    if not is_valid_constant(value):
        return None
    return _with_node(e, path, const(value))


def _mutate_subtree(e: Expression, c: SrConfig, rng: np.random.Generator) -> Optional[Expression]:
    nodes = list(iter_nodes(e.root))
    path, node = nodes[int(rng.integers(len(nodes)))]
    budget = min(SUBTREE_MAX_SIZE, c.maxsize - (e.complexity - node.size))
    if budget < 1:
        return None
    return _with_node(e, path, random_node(e.var_count, int(rng.integers(1, budget + 1)), rng, c.operators))


def _mutate_hoist(e: Expression, c: SrConfig, rng: np.random.Generator) -> Optional[Expression]:
    internal = [(p, n) for p, n in iter_nodes(e.root) if not n.is_leaf]
    if not internal:
        return None
    path, node = internal[int(rng.integers(len(internal)))]
    return _with_node(e, path, node.children[int(rng.integers(len(node.children)))])


_MUTATIONS = {
    "operator": _mutate_operator,
    "constant": _mutate_constant,
    "subtree": _mutate_subtree,
    "hoist": _mutate_hoist,
}


def mutate(e: Expression, c: SrConfig, rng: np.random.Generator) -> Expression:
    """Apply one weighted mutation; give up and return ``e`` after 10 failed tries."""
    weights = np.asarray(c.mutation_weights, dtype=float)
    weights = weights / weights.sum()
    for _ in range(MUTATION_RETRIES):
        kind = MUTATION_KINDS[int(rng.choice(len(MUTATION_KINDS), p=weights))]
        child = _MUTATIONS[kind](e, c, rng)
        if child is not None and child.complexity <= c.maxsize:
            return child
    return e


def crossover(
    e1: Expression, e2: Expression, rng: np.random.Generator, maxsize: int = 50
) -> Tuple[Expression, Expression]:
    """Swap uniformly chosen subtrees; oversized offspring fall back to their parent.

    Crossing a tree with an identical copy of itself swaps matching subtrees, so the
    offspring equal the parents.
    """
    nodes1 = list(iter_nodes(e1.root))
    path1, sub1 = nodes1[int(rng.integers(len(nodes1)))]
    if e1.root == e2.root:
        path2, sub2 = path1, sub1
    else:
        nodes2 = list(iter_nodes(e2.root))
        path2, sub2 = nodes2[int(rng.integers(len(nodes2)))]
    child1 = _with_node(e1, path1, sub2) if sub2.size - sub1.size + e1.complexity <= maxsize else e1
    child2 = Expression(replace_at(e2.root, path2, sub1), e2.var_count)
    if child2.complexity > maxsize:
        child2 = e2
    return child1, child2


def _constant_paths(node: Node):
    return [p for p, n in iter_nodes(node) if n.op is Op.CONST]


def optimize_constants(
    e: Expression, t: TrainingSet, c: SrConfig, batch=None, sample_batch=None
) -> Expression:
    """Nelder-Mead refinement of the constants on the given batch."""
    paths = _constant_paths(e.root)
    if not paths:
        return e
    start = np.array([subtree_at(e.root, p).value for p in paths])

    def build(values: np.ndarray) -> Expression:
        root = e.root
        for p, v in zip(paths, values):
            root = replace_at(root, p, const(float(v)))
        return Expression(root, e.var_count)

    def objective(values: np.ndarray) -> float:
        value = loss(build(values), t, c, batch, sample_batch)
        return value if np.isfinite(value) else 1e300

    before = objective(start)
    result = optimize.minimize(
        objective, start, method="Nelder-Mead",
        options={"maxiter": c.optimize_iterations, "xatol": 1e-10, "fatol": 1e-14},
    )
    if result.fun < before and all(is_valid_constant(v) for v in result.x):
        return build(result.x)
    return e


# --------------------------------------------------------------------------- parsimony

def effective_parsimony(histogram: Dict[int, int], c: SrConfig) -> Dict[int, float]:
    """penalty(k) = parsimony * (1 + scaling * freq(k)) for k = 1 .. maxsize."""
    total = sum(histogram.values())
    penalties = {}
    for k in range(1, c.maxsize + 1):
        freq = histogram.get(k, 0) / total if total else 0.0
        penalties[k] = c.parsimony * (1.0 + c.adaptive_parsimony_scaling * freq)
    return penalties


# --------------------------------------------------------------------------- warm start

def warm_start(front: ParetoFront, c: SrConfig, d: int, rng: np.random.Generator) -> List[List[Expression]]:
    """Seed every population with the front (ascending complexity), fill up randomly."""
    seeds = [e for _, _, e in front.sorted_entries()][: c.population_size]
    populations = []
    for _ in range(c.populations):
        members = list(seeds)
        while len(members) < c.population_size:
            size = int(rng.integers(1, min(c.maxsize, INIT_MAX_SIZE) + 1))
            members.append(Expression(random_node(d, size, rng, c.operators), d))
        populations.append(members)
    return populations


# --------------------------------------------------------------------------- engine

@dataclass
class Member:
    expression: Expression
    loss: float
    birth: int


class SymbolicRegressor:
    """
    Multi-population regularized evolution with a shared pareto front.
    Populations use independent generators spawned from the seed, and front updates
    happen in population order after each iteration, so results do not depend on
    the thread count.
    """

    def __init__(self, config: SrConfig):
        self.config = config.validate()
        self.front = ParetoFront()
        self.populations: List[List[Member]] = []
        self._full_loss_cache: Dict[str, float] = {}
        self._clocks: List[int] = []
        self._loss_scale = 1.0

    def fit(self, t: TrainingSet, initial_populations: Optional[List[List[Expression]]] = None) -> ParetoFront:
        c = self.config
        seeds = np.random.SeedSequence(c.seed).spawn(c.populations + 1)
        rngs = [np.random.default_rng(s) for s in seeds[: c.populations]]
        init_rng = np.random.default_rng(seeds[-1])

        baseline = loss(Expression(const(float(np.mean(t.labels))), t.d), t, c)
        self._loss_scale = max(abs(baseline), LOSS_SCALE_FLOOR) if np.isfinite(baseline) else 1.0

        filler = warm_start(ParetoFront(), c, t.d, init_rng)
        initial_populations = list(initial_populations or [])[: c.populations]
        self.populations = []
        self._clocks = [0] * c.populations
        for p in range(c.populations):
            expressions = list(initial_populations[p]) if p < len(initial_populations) else []
            expressions = expressions[: c.population_size]
            expressions += filler[p][len(expressions):]
            members = []
            for e in expressions:
                batch, sample_batch = self._draw_batches(t, rngs[p])
                members.append(self._member(p, e, loss(e, t, c, batch, sample_batch)))
                self._offer(e, t)
            self.populations.append(members)

        for iteration in range(c.niterations):
            penalties = effective_parsimony(self._histogram(), c)
            jobs = range(c.populations)
            if c.threads > 1:
                with ThreadPoolExecutor(max_workers=c.threads) as pool:
                    offspring = list(pool.map(lambda p: self._run_population(p, rngs[p], penalties, t), jobs))
            else:
                offspring = [self._run_population(p, rngs[p], penalties, t) for p in jobs]
            for evaluated in offspring:
                for e in evaluated:
                    self._offer(e, t)
            self._migrate(penalties)
            if len(self.front) and logger.isEnabledFor(logging.DEBUG):
                k, best, _ = self.front.best()
                logger.debug("iteration %d: front size %d, best loss %.6g at complexity %d",
                             iteration + 1, len(self.front), best, k)
        logger.info("SR finished: %d pareto entries", len(self.front))
        return self.front

    # -- internals

    def _member(self, p: int, e: Expression, value: float) -> Member:
        self._clocks[p] += 1
        return Member(e, value, self._clocks[p])

    def _histogram(self) -> Dict[int, int]:
        return Counter(m.expression.complexity for pop in self.populations for m in pop)

    def _fitness(self, member: Member, penalties: Dict[int, float]) -> float:
        k = member.expression.complexity
        return member.loss / self._loss_scale + penalties.get(k, self.config.parsimony) * k

    def _draw_batches(self, t: TrainingSet, rng: np.random.Generator):
        c = self.config
        batch = rng.integers(0, t.grid_points.shape[0], size=c.batch_size)
        sample_batch = None
        if len(t.raw_samples):
            sample_batch = rng.integers(0, t.raw_samples.shape[0], size=c.batch_size)
        return batch, sample_batch

    def _tournament(self, pop: List[Member], rng: np.random.Generator, penalties) -> Member:
        size = min(self.config.tournament_size, len(pop))
        picks = rng.choice(len(pop), size=size, replace=False)
        return min((pop[i] for i in sorted(picks)), key=lambda m: self._fitness(m, penalties))

    def _run_population(self, p: int, rng: np.random.Generator, penalties, t: TrainingSet):
        c = self.config
        pop = self.populations[p]
        evaluated = []
        for _ in range(c.ncycles_per_iteration):
            batch, sample_batch = self._draw_batches(t, rng)
            if len(pop) >= 2 and rng.random() < c.crossover_probability:
                a = self._tournament(pop, rng, penalties)
                b = self._tournament(pop, rng, penalties)
                children = list(crossover(a.expression, b.expression, rng, c.maxsize))
            else:
                children = [mutate(self._tournament(pop, rng, penalties).expression, c, rng)]
            for child in children:
                child = simplify(child)
                if c.optimize_probability and rng.random() < c.optimize_probability:
                    child = optimize_constants(child, t, c, batch, sample_batch)
                value = loss(child, t, c, batch, sample_batch)
                oldest = min(range(len(pop)), key=lambda i: pop[i].birth)
                pop[oldest] = self._member(p, child, value)
                evaluated.append(child)
        return evaluated

    def _migrate(self, penalties) -> None:
        if len(self.populations) < 2:
            return
        best = [min(pop, key=lambda m: self._fitness(m, penalties)) for pop in self.populations]
        for p, migrant in enumerate(best):
            q = (p + 1) % len(self.populations)
            target = self.populations[q]
            worst = max(range(len(target)), key=lambda i: self._fitness(target[i], penalties))
            target[worst] = self._member(q, migrant.expression, migrant.loss)

    def full_loss(self, e: Expression, t: TrainingSet) -> float:
        key = to_string(e)
        if key not in self._full_loss_cache:
            if len(self._full_loss_cache) >= FULL_LOSS_CACHE_SIZE:
                self._full_loss_cache.clear()
            self._full_loss_cache[key] = loss(e, t, self.config)
        return self._full_loss_cache[key]

    def _offer(self, e: Expression, t: TrainingSet) -> None:
        value = self.full_loss(e, t)
        if np.isfinite(value):
            pareto_update(self.front, (e.complexity, value, e))


def evolve(
    t: TrainingSet, c: SrConfig, initial_populations: Optional[List[List[Expression]]] = None
) -> ParetoFront:
    return SymbolicRegressor(c).fit(t, initial_populations)
