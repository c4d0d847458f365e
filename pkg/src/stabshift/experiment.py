"""End-to-end shift-detection experiments: data, training, testing, aggregation."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import contexts as ctx
from . import dynamics as dyn
from .classifier import ProbabilityModel, train_binary_classifier
from .errors import ConfigError, InfeasibleRatioError, TrainingFailure
from .latent_tests import TestResult, permutation_test, welch_t_test
from .surrogate import SequenceData, SurrogateModel, TrainConfig, observed_sequences, train

METHODS = ("l2t", "context_mmd", "binary_classifier", "recon_only", "uniform_only")
LATENT_METHODS = ("l2t", "recon_only", "uniform_only")
REGIMES = ("null", "boundary", "alternative")

STABILITY = {"spring": dyn.SPRING_STABILITY, "pendulum": dyn.PENDULUM_STABILITY}

# desk-scale training budget; the full-scale setting is TrainConfig()
DESK_TRAIN = TrainConfig(epochs=30)

# seed stream tags
_S_TRAIN, _S_HOLDOUT, _S_MODEL, _S_TEST, _S_PERM = range(5)


@dataclass(frozen=True)
class ExperimentConfig:
    system: str = "spring"
    family: str | None = None
    regimes: tuple[str, ...] = ("null", "boundary")
    deltas: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    n_train: int = 5000
    n_holdout: int = 1000
    n_test: int = 500
    stable_ratio: float = 0.9
    runs: int = 20
    alpha: float = 0.1
    methods: tuple[str, ...] = ("l2t", "context_mmd")
    n_perm: int = 199
    seed: int = 0
    dt: float = 0.05
    t_end: float = 10.0
    time_stride: int = 4
    type1_delta: float = 1.0
    type2_delta: float = 0.5
    workers: int = 1
    train: TrainConfig = DESK_TRAIN

    def __post_init__(self):
        if self.system not in STABILITY:
            raise ConfigError(f"unknown system {self.system!r}")
        fam = self.shift_family
        for r in self.regimes:
            if r not in ctx.SHIFT_TABLE.get((self.system, fam), ()):
                raise ConfigError(f"regime {r!r} not available for {self.system}/{fam}")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if not self.regimes or not self.methods:
            raise ConfigError("need at least one regime and one method")
        if not self.deltas or any(d < 0 for d in self.deltas):
            raise ConfigError("delta grid must be nonempty and non-negative")
        for k in ("n_train", "n_holdout", "n_test", "runs", "time_stride", "workers"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be positive")
        if not 0 < self.stable_ratio <= 1:
            raise ConfigError("stable_ratio must lie in (0, 1]")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.n_perm < 19:
            raise ConfigError("n_perm must be at least 19")

    @property
    def shift_family(self) -> str:
        return self.family or ctx.DEFAULT_FAMILY[self.system]

    @property
    def grid(self) -> dyn.TimeGrid:
        return dyn.TimeGrid(0.0, self.t_end, self.dt)

    @property
    def stability(self) -> dyn.StabilitySpec:
        return STABILITY[self.system]


def _seed(*key) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def _delta_key(delta: float) -> int:
    return int(round(delta * 10000))


# ---------------------------------------------------------------------------
# data


def simulate_system(system: str, X, grid: dyn.TimeGrid = dyn.TimeGrid()) -> dyn.TrajectoryBatch:
    if system == "spring":
        return dyn.simulate_spring_batch(X, grid=grid)
    if system == "pendulum":
        return dyn.simulate_pendulum_batch(X, grid=grid)
    raise ConfigError(f"unknown system {system!r}")


def stability_scores(system: str, trajs: dyn.TrajectoryBatch) -> np.ndarray:
    if system == "spring":
        return np.atleast_1d(dyn.stability_max_abs(trajs, STABILITY[system]))
    return np.atleast_1d(dyn.stability_max_swing_angle(trajs, STABILITY[system]))


@dataclass
class TrainingSet:
    system: str
    contexts: np.ndarray
    trajectories: dyn.TrajectoryBatch
    stable: np.ndarray

    def __len__(self) -> int:
        return len(self.contexts)

    def sequences(self, stride: int = 1) -> SequenceData:
        return observed_sequences(self.system, self.contexts, self.trajectories, stride, self.stable)


def build_training_set(system: str, config: ExperimentConfig, seed) -> TrainingSet:
    """Baseline contexts rejection-sampled by simulated label to the target stable share.

    Accepted draws keep their draw order. Raises when ``10 * n_train`` draws do
    not fill both classes.
    """
    n = config.n_train
    need_unstable = int(round(n * (1 - config.stable_ratio)))
    need = {True: n - need_unstable, False: need_unstable}
    rng = np.random.default_rng(seed)
    budget, drawn = 10 * n, 0
    chunk = max(n, 256)
    keep_X, keep_T, keep_y = [], [], []
    while need[True] > 0 or need[False] > 0:
        if drawn >= budget:
            raise InfeasibleRatioError(
                f"could not reach {config.stable_ratio:.0%} stable within {budget} draws "
                f"(missing {need[True]} stable, {need[False]} unstable)"
            )
        k = min(chunk, budget - drawn)
        X = ctx.sample_baseline(system, k, rng)
        drawn += k
        T = simulate_system(system, X, config.grid)
        y = np.asarray(dyn.label_stable(stability_scores(system, T), config.stability), dtype=bool)
        mask = np.zeros(k, dtype=bool)
        for cls in (True, False):
            hit = np.flatnonzero(y == cls)[: need[cls]]
            mask[hit] = True
            need[cls] -= len(hit)
        keep_X.append(X[mask])
        keep_T.append(T.take(np.flatnonzero(mask)))
        keep_y.append(y[mask])
    return TrainingSet(system, np.concatenate(keep_X), dyn.TrajectoryBatch.concat(keep_T), np.concatenate(keep_y))


# ---------------------------------------------------------------------------
# methods


def train_methods(
    train_set: TrainingSet, config: ExperimentConfig, run: int = 0
) -> dict[str, SurrogateModel | ProbabilityModel | None]:
    """Fit whatever each configured method needs, once per run."""
    states: dict = {}
    tc = replace(config.train, tau=config.train.tau or config.stability.tau)
    data = None
    for m in config.methods:
        seed = _seed(config.seed, run, _S_MODEL, METHODS.index(m))
        try:
            if m in LATENT_METHODS:
                data = data if data is not None else train_set.sequences(config.time_stride)
                cfg = replace(tc, seed=seed)
                if m == "recon_only":
                    cfg = replace(cfg, lam=0.0)
                elif m == "uniform_only":
                    cfg = replace(cfg, recon_weight=0.0)
                states[m], _ = train(data, cfg)
            elif m == "binary_classifier":
                states[m] = train_binary_classifier(
                    train_set.contexts,
                    train_set.stable,
                    epochs=tc.epochs,
                    batch_size=tc.batch_size,
                    lr=tc.lr,
                    hidden_dim=tc.hidden_dim,
                    depth=tc.depth,
                    seed=seed,
                )
            else:
                states[m] = None
        except TrainingFailure as exc:
            raise TrainingFailure(exc.epoch, f"run {run}, method {m}: {exc}") from exc
    return states


def run_method(method: str, state, holdout, test, alpha: float = 0.1, seed=None, n_perm: int = 199) -> TestResult:
    holdout = np.asarray(holdout, dtype=float)
    test = np.asarray(test, dtype=float)
    if method in LATENT_METHODS:
        if not isinstance(state, SurrogateModel):
            raise ConfigError(f"method {method!r} needs a trained surrogate model")
        return permutation_test(state.encode(holdout), state.encode(test), "mmd", n_perm, alpha, seed)
    if method == "context_mmd":
        mean, std = holdout.mean(0), np.maximum(holdout.std(0), 1e-8)
        return permutation_test((holdout - mean) / std, (test - mean) / std, "mmd", n_perm, alpha, seed)
    if method == "binary_classifier":
        if not isinstance(state, ProbabilityModel):
            raise ConfigError("binary_classifier needs a trained probability model")
        res = welch_t_test(state.predict_proba(holdout), state.predict_proba(test), alpha)
        return replace(res, seed=seed)
    raise ConfigError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# experiment loop


@dataclass(frozen=True)
class ResultRow:
    run: int
    method: str
    regime: str
    delta: float
    result: TestResult

    def to_dict(self) -> dict:
        return {"run": self.run, "method": self.method, "regime": self.regime, "delta": self.delta,
                "test": self.result.to_dict()}


@dataclass(frozen=True)
class RejectionCurve:
    method: str
    regime: str
    deltas: tuple[float, ...]
    rates: tuple[float, ...]
    stderrs: tuple[float, ...]
    runs: tuple[int, ...]

    def rate_at(self, delta: float) -> float:
        return self.rates[self.deltas.index(delta)]


def rejection_stderr(rate: float, runs: int) -> float:
    return float(np.sqrt(rate * (1 - rate) / runs))


def aggregate(rows: list[ResultRow], methods, regimes, deltas) -> list[RejectionCurve]:
    curves = []
    for m in methods:
        for r in regimes:
            rates, errs, counts = [], [], []
            for d in deltas:
                rej = [row.result.reject for row in rows if row.method == m and row.regime == r and row.delta == d]
                k = len(rej)
                rate = float(np.mean(rej)) if k else float("nan")
                rates.append(rate)
                errs.append(rejection_stderr(rate, k) if k else float("nan"))
                counts.append(k)
            curves.append(RejectionCurve(m, r, tuple(deltas), tuple(rates), tuple(errs), tuple(counts)))
    return curves


def run_single(config: ExperimentConfig, run: int) -> list[ResultRow]:
    """One run: fresh training set, models trained once, then every (regime, delta, method)."""
    ts = build_training_set(config.system, config, _seed(config.seed, run, _S_TRAIN))
    states = train_methods(ts, config, run)
    holdout = ctx.sample_baseline(config.system, config.n_holdout, _seed(config.seed, run, _S_HOLDOUT))
    rows = []
    for regime in config.regimes:
        ri = REGIMES.index(regime)
        for delta in config.deltas:
            setting = ctx.ShiftSetting(config.system, config.shift_family, regime, delta)
            test = ctx.sample_shifted(setting, config.n_test, _seed(config.seed, run, _S_TEST, ri, _delta_key(delta)))
            for m in config.methods:
                seed = _seed(config.seed, run, _S_PERM, ri, _delta_key(delta), METHODS.index(m))
                res = run_method(m, states[m], holdout, test, config.alpha, seed, config.n_perm)
                rows.append(ResultRow(run, m, regime, delta, res))
    return rows


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    curves: list[RejectionCurve]
    rows: list[ResultRow] = field(default_factory=list)


def run_experiment(config: ExperimentConfig, progress=None) -> ExperimentResult:
    """Every run is a pure function of ``(config, run)``; rows are ordered by run."""
    runs = range(config.runs)
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            per_run = list(pool.map(run_single, [config] * config.runs, runs))
    else:
        per_run = []
        for r in runs:
            per_run.append(run_single(config, r))
            if progress is not None:
                progress(r, per_run[-1])
    rows = [row for chunk in per_run for row in chunk]
    return ExperimentResult(config, aggregate(rows, config.methods, config.regimes, config.deltas), rows)
