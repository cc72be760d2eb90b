"""Pool-based active-learning loop and test-set metrics."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .diffops import ns_residuals
from .geometry import ParamRanges, Shape, generate_bifurcation, sample_params
from .oracle import AnalyticOracle, FluidConstants, VelocityField, as_values
from .queries import (DEFAULT_LAMBDA, STRATEGIES, DistanceMatrix, QueryResult, distance_matrix,
                      predict, query_gv, query_pa, query_qbc, query_random)
from .surrogate import ModelConfig, SurrogateModel, TrainConfig, init_model, train

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METRICS = ("approx_disp", "cos_sim", "continuity", "momentum")


class ConfigError(ValueError):
    """Invalid experiment configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def approx_disparity(pred, gt) -> float:
    """sqrt(sum |pred - gt|^2 / sum |gt|^2) over all points."""
    yh, y = as_values(pred), as_values(gt)
    denom = float((y**2).sum())
    if denom == 0.0:
        raise ValueError("approximation disparity is undefined for an all-zero ground truth")
    return float(np.sqrt(((yh - y) ** 2).sum() / denom))


def cos_similarity(pred, gt) -> float:
    """Mean per-point cosine; pairs involving a zero vector count as 0."""
    yh, y = as_values(pred), as_values(gt)
    mh = np.sqrt((yh**2).sum(axis=1))
    m = np.sqrt((y**2).sum(axis=1))
    valid = (mh > 0) & (m > 0)
    cos = np.zeros(len(y))
    cos[valid] = (yh[valid] * y[valid]).sum(axis=1) / (mh[valid] * m[valid])
    return float(cos.mean())


def spearman(scores: Sequence[float], targets: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    a = np.asarray(scores, dtype=np.float64)
    b = np.asarray(targets, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 3:
        raise ValueError("spearman needs two equal-length vectors of length >= 3")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise ValueError("spearman correlation is undefined for a constant vector")
    ra = rankdata(a) - (len(a) + 1) / 2
    rb = rankdata(b) - (len(b) + 1) / 2
    return float((ra * rb).sum() / np.sqrt((ra**2).sum() * (rb**2).sum()))


@dataclass
class Evaluation:
    ids: list[str]
    per_sample: dict[str, list[float]]

    def aggregates(self) -> dict[str, float]:
        out = {}
        for name in METRICS:
            v = np.asarray(self.per_sample[name])
            out[f"{name}_mean"] = float(v.mean())
            out[f"{name}_std"] = float(v.std())
        return out


def evaluate(model, shapes: Sequence[Shape], labels: Sequence[VelocityField],
             constants: FluidConstants = FluidConstants()) -> Evaluation:
    """Accuracy and physics residuals of ``model``'s predictions on labeled shapes.

    ``model`` is a SurrogateModel or any callable mapping a shape to a field.
    """
    per = {name: [] for name in METRICS}
    for shape, gt in zip(shapes, labels):
        pred = predict(model, shape)
        cont, mom = ns_residuals(shape, pred, constants)
        per["approx_disp"].append(approx_disparity(pred, gt))
        per["cos_sim"].append(cos_similarity(pred, gt))
        per["continuity"].append(cont)
        per["momentum"].append(mom)
    return Evaluation([s.id for s in shapes], per)


class Dataset:
    """Shapes split into an active-learning pool and a test pool, with an oracle.

    Labels are computed once per shape and cached; the pool state, not the
    dataset, meters how often a label is revealed to the learner.
    """

    def __init__(self, shapes: Iterable[Shape], pool_ids: Sequence[str], test_ids: Sequence[str],
                 oracle: Callable[[Shape], VelocityField] | None = None,
                 labels: dict[str, VelocityField] | None = None):
        self.shapes = {s.id: s for s in shapes}
        self.pool_ids = list(pool_ids)
        self.test_ids = list(test_ids)
        if set(self.pool_ids) & set(self.test_ids):
            raise ValueError("pool and test ids overlap")
        unknown = [sid for sid in self.pool_ids + self.test_ids if sid not in self.shapes]
        if unknown:
            raise ValueError(f"unknown shape ids: {unknown[:5]}")
        self.oracle = oracle or AnalyticOracle()
        self._labels = dict(labels or {})
        self._dm: dict[int, DistanceMatrix] = {}

    def label(self, sid: str) -> VelocityField:
        if sid not in self._labels:
            self._labels[sid] = self.oracle(self.shapes[sid])
        return self._labels[sid]

    def distance_matrix(self, subsample: int, threads: int = 1) -> DistanceMatrix:
        if subsample not in self._dm:
            self._dm[subsample] = distance_matrix([self.shapes[i] for i in self.pool_ids],
                                                  subsample, threads=threads)
        return self._dm[subsample]

    @classmethod
    def generate(cls, n_pool: int, n_test: int, seed: int = 0, ranges: ParamRanges = ParamRanges(),
                 n_interior: int = 2048, n_wall: int = 1024, n_cap: int = 64,
                 oracle=None) -> "Dataset":
        shapes = generate_shapes(n_pool + n_test, seed, ranges, n_interior, n_wall, n_cap)
        ids = [s.id for s in shapes]
        return cls(shapes, ids[:n_pool], ids[n_pool:], oracle)


def generate_shapes(n: int, seed: int = 0, ranges: ParamRanges = ParamRanges(),
                    n_interior: int = 2048, n_wall: int = 1024, n_cap: int = 64) -> list[Shape]:
    """``n`` random bifurcations with ids s0000, s0001, ... drawn from one stream."""
    ranges.validate()
    rng = np.random.default_rng(seed)
    shapes = []
    for i in range(n):
        params = sample_params(rng, ranges, n_interior, n_wall, n_cap)
        shapes.append(generate_bifurcation(params, shape_id=f"s{i:04d}"))
    return shapes


@dataclass
class PoolState:
    labeled: dict[str, VelocityField] = field(default_factory=dict)
    unlabeled: list[str] = field(default_factory=list)
    test: dict[str, VelocityField] = field(default_factory=dict)
    oracle_calls: int = 0

    def acquire(self, ids: Sequence[str], dataset: Dataset) -> None:
        pending = set(self.unlabeled)
        for sid in ids:
            if sid not in pending:
                raise ValueError(f"{sid!r} is not in the unlabeled pool")
            pending.discard(sid)
            self.labeled[sid] = dataset.label(sid)
            self.oracle_calls += 1
        self.unlabeled = [sid for sid in self.unlabeled if sid in pending]

    def check(self) -> None:
        lab, unl, tst = set(self.labeled), set(self.unlabeled), set(self.test)
        if lab & unl or lab & tst or unl & tst:
            raise AssertionError("pools are not pairwise disjoint")
        if len(unl) != len(self.unlabeled):
            raise AssertionError("unlabeled pool has repeated ids")


@dataclass(frozen=True)
class QueryConfig:
    chamfer_subsample: int = 256
    committee_members: int = 8
    pa_lambda: float = DEFAULT_LAMBDA

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ExperimentConfig:
    strategy: str = "random"
    initial_labeled: int = 2
    schedule: tuple[int, ...] = (4, 8, 16, 32)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    query: QueryConfig = QueryConfig()
    constants: FluidConstants = FluidConstants()
    warm_start: bool = False

    @property
    def repetitions(self) -> int:
        return len(self.seeds)

    def validate(self, pool_size: int | None = None) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError("strategy", f"unknown strategy {self.strategy!r}")
        if self.initial_labeled < 1:
            raise ConfigError("initial_labeled", "must be at least 1")
        if not self.schedule or any(k <= 0 for k in self.schedule):
            raise ConfigError("schedule", "entries must be positive")
        if not self.seeds:
            raise ConfigError("seeds", "at least one repetition seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds", "seeds must be distinct")
        if pool_size is not None and self.initial_labeled + sum(self.schedule) > pool_size:
            raise ConfigError("schedule", f"initial {self.initial_labeled} + schedule {sum(self.schedule)} "
                                          f"exceeds the unlabeled pool of {pool_size}")

    def to_json(self) -> dict:
        return {"strategy": self.strategy, "initial_labeled": self.initial_labeled,
                "schedule": list(self.schedule), "seeds": list(self.seeds),
                "model": self.model.to_json(), "train": self.train.to_json(),
                "query": self.query.to_json(), "constants": self.constants.to_json(),
                "warm_start": self.warm_start}


@dataclass
class RoundRecord:
    strategy: str
    repetition: int
    seed: int
    round: int
    selected_ids: list[str]
    labeled_ids: list[str]
    oracle_calls: int
    metrics: dict[str, float]
    per_sample: dict
    query: dict | None
    train: dict
    wall_clock_s: float = 0.0
    residual_domain: str = "interior"
    schema_version: int = SCHEMA_VERSION

    @property
    def labeled_count(self) -> int:
        return len(self.labeled_ids)

    def to_json(self) -> dict:
        d = asdict(self)
        d["labeled_count"] = self.labeled_count
        return d


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def initial_draw(pool_ids: Sequence[str], n: int, seed: int) -> list[str]:
    """Initial labeled ids; depends only on the repetition seed and the pool."""
    rng = np.random.default_rng(seed)
    return [pool_ids[i] for i in rng.choice(len(pool_ids), size=n, replace=False)]


def _fit(cfg: ExperimentConfig, state: PoolState, dataset: Dataset, seed: int, rnd: int,
         previous: SurrogateModel | None) -> tuple[SurrogateModel, dict]:
    model_seed = _derive_seed(cfg.model.seed, seed, rnd)
    train_seed = _derive_seed(cfg.train.seed, seed, rnd, 1)
    if cfg.warm_start and previous is not None:
        start = SurrogateModel(previous.params.copy(), previous.config)
    else:
        start = init_model(ModelConfig(**{**cfg.model.to_json(), "seed": model_seed}))
    samples = [(dataset.shapes[sid], y) for sid, y in state.labeled.items()]
    tcfg = TrainConfig(**{**cfg.train.to_json(), "seed": train_seed})
    model = train(start, samples, tcfg)
    info = {"model_seed": model_seed, "train_seed": train_seed, "steps": tcfg.steps,
            "initial_loss": model.train_log[-tcfg.steps], "final_loss": model.train_log[-1]}
    return model, info


def run_query(cfg: ExperimentConfig, model: SurrogateModel, state: PoolState, dataset: Dataset,
              k: int, seed: int, threads: int = 1) -> QueryResult:
    shapes = [dataset.shapes[sid] for sid in state.unlabeled]
    q = cfg.query
    if cfg.strategy == "random":
        return query_random(state.unlabeled, k, seed)
    if cfg.strategy == "gv":
        M = dataset.distance_matrix(q.chamfer_subsample, threads)
        return query_gv(M, list(state.labeled), state.unlabeled, k)
    if cfg.strategy == "qbc":
        return query_qbc(model, shapes, q.committee_members, k, seed)
    return query_pa(model, shapes, cfg.constants, q.pa_lambda, k)


def run_repetition(cfg: ExperimentConfig, dataset: Dataset, repetition: int,
                   on_record: Callable[[RoundRecord], None] | None = None,
                   threads: int = 1) -> list[RoundRecord]:
    seed = cfg.seeds[repetition]
    test_shapes = [dataset.shapes[sid] for sid in dataset.test_ids]
    state = PoolState(unlabeled=list(dataset.pool_ids),
                      test={sid: dataset.label(sid) for sid in dataset.test_ids})
    records: list[RoundRecord] = []
    model = None
    rounds = [cfg.initial_labeled] + list(cfg.schedule)
    for rnd, k in enumerate(rounds):
        t0 = time.perf_counter()
        query_info = None
        if rnd == 0:
            selected = initial_draw(state.unlabeled, k, seed)
        else:
            result = run_query(cfg, model, state, dataset, k, _derive_seed(seed, rnd, 2), threads)
            selected = result.selected_ids
            # diagnostic only: true error of the querying model on U, not metered as oracle calls
            true_err = {sid: approx_disparity(predict(model, dataset.shapes[sid]), dataset.label(sid))
                        for sid in state.unlabeled}
            ids = list(result.scores)
            try:
                rho = spearman([result.scores[i] for i in ids], [true_err[i] for i in ids])
            except ValueError:
                rho = None
            query_info = {**result.to_json(), "true_disparity": true_err, "spearman": rho}
        state.acquire(selected, dataset)
        state.check()
        model, train_info = _fit(cfg, state, dataset, seed, rnd, model)
        ev = evaluate(model, test_shapes, [state.test[sid] for sid in dataset.test_ids], cfg.constants)
        rec = RoundRecord(
            strategy=cfg.strategy, repetition=repetition, seed=seed, round=rnd,
            selected_ids=list(selected), labeled_ids=list(state.labeled),
            oracle_calls=state.oracle_calls, metrics=ev.aggregates(),
            per_sample={"test_ids": ev.ids, **ev.per_sample}, query=query_info,
            train=train_info, wall_clock_s=time.perf_counter() - t0)
        log.info("%s rep %d round %d: %d labeled, approx disp %.4f", cfg.strategy, repetition, rnd,
                 rec.labeled_count, rec.metrics["approx_disp_mean"])
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    return records


def run_experiment(cfg: ExperimentConfig, dataset: Dataset,
                   on_record: Callable[[RoundRecord], None] | None = None,
                   threads: int = 1) -> list[list[RoundRecord]]:
    """Run every repetition of one strategy; returns RoundRecords per repetition."""
    cfg.validate(len(dataset.pool_ids))
    return [run_repetition(cfg, dataset, r, on_record, threads) for r in range(cfg.repetitions)]
