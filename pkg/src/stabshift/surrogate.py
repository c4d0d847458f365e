"""Context encoder, recurrent trajectory surrogate, and the training loop.

The encoder maps a context to a latent ``u`` in (0,1)^d. A GRU driven by
``[s_k, u]`` evolves a history embedding ``h`` (``h_1 = 0``) and a decoder reads
``s_hat_k`` from ``h_k``. Training minimizes a stability-weighted reconstruction
error plus ``lam`` times the squared MMD between the latent batch and uniform draws.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import TrajectoryBatch
from .errors import ConfigError, DivergenceError, GradientOverflowError, TrainingFailure
from .latent_tests import BANDWIDTH_FLOOR, gaussian_kernel, median_bandwidth, mmd2_vstat
from .neuralcore import (
    AdamState,
    GruCell,
    MLPSpec,
    ParamSet,
    adam_update,
    check_finite,
    params_from_json,
    params_to_json,
    zeros_like_params,
)

STD_FLOOR = 1e-8
FEED_MODES = ("teacher", "free")


# ---------------------------------------------------------------------------
# architecture and model


@dataclass(frozen=True)
class Architecture:
    context_dim: int
    state_dim: int
    latent_dim: int = 1
    hidden_dim: int = 32
    depth: int = 2
    feed: str = "teacher"

    def __post_init__(self):
        for k in ("context_dim", "state_dim", "latent_dim", "hidden_dim", "depth"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be positive")
        if self.feed not in FEED_MODES:
            raise ConfigError(f"feed must be one of {FEED_MODES}")

    @property
    def encoder(self) -> MLPSpec:
        hid = (self.hidden_dim,) * (self.depth - 1)
        return MLPSpec("enc", (self.context_dim, *hid, self.latent_dim), ("tanh",) * (self.depth - 1) + ("sigmoid",))

    @property
    def decoder(self) -> MLPSpec:
        return MLPSpec(
            "dec", (self.hidden_dim,) * self.depth + (self.state_dim,), ("tanh",) * (self.depth - 1) + ("identity",)
        )

    def init(self, rng: np.random.Generator) -> ParamSet:
        params = self.encoder.init(rng)
        params.update(GruCell.init(rng, self.state_dim + self.latent_dim, self.hidden_dim))
        params.update(self.decoder.init(rng))
        return params


@dataclass(frozen=True)
class Normalizer:
    x_mean: np.ndarray
    x_std: np.ndarray
    s_mean: np.ndarray
    s_std: np.ndarray

    @classmethod
    def fit(cls, contexts, states, floor: float = STD_FLOOR) -> "Normalizer":
        X = np.asarray(contexts, dtype=float)
        S = np.asarray(states, dtype=float).reshape(-1, np.shape(states)[-1])
        return cls(X.mean(0), np.maximum(X.std(0), floor), S.mean(0), np.maximum(S.std(0), floor))

    @classmethod
    def identity(cls, context_dim: int, state_dim: int) -> "Normalizer":
        return cls(np.zeros(context_dim), np.ones(context_dim), np.zeros(state_dim), np.ones(state_dim))

    def x(self, X):
        return (X - self.x_mean) / self.x_std

    def s(self, S):
        return (S - self.s_mean) / self.s_std

    def s_inv(self, S):
        return S * self.s_std + self.s_mean

    def to_dict(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)] for k in ("x_mean", "x_std", "s_mean", "s_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


@dataclass
class SurrogateModel:
    arch: Architecture
    params: ParamSet
    norm: Normalizer

    def __post_init__(self):
        expected = self.arch.init(np.random.default_rng(0))
        for k, v in expected.items():
            if k not in self.params or self.params[k].shape != v.shape:
                raise ConfigError(f"parameter {k} missing or misshaped for this architecture")

    @property
    def gru(self) -> GruCell:
        return GruCell.from_params(self.params)

    def encode(self, x) -> np.ndarray:
        """Latents in (0,1)^d for one context or a batch of contexts."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        if X.shape[1] != self.arch.context_dim:
            raise ConfigError(f"context dimension {X.shape[1]} != {self.arch.context_dim}")
        u, _ = self.arch.encoder.forward(self.params, self.norm.x(X))
        # keep the open interval even where the sigmoid saturates in floating point
        u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
        return u[0] if single else u

    def reconstruct(self, contexts, states) -> np.ndarray:
        """Rollout from the encoded contexts; ``states`` in physical units, ``(n, K, D)``."""
        S = np.asarray(states, dtype=float)
        u, _ = self.arch.encoder.forward(self.params, self.norm.x(np.atleast_2d(contexts)))
        s_hat, _ = _rollout_forward(self.params, self.arch, u, self.norm.s(S))
        return self.norm.s_inv(s_hat)

    def to_json(self) -> dict:
        hyper = {"arch": asdict(self.arch), "normalizer": self.norm.to_dict()}
        return params_to_json(self.params, hyper)

    @classmethod
    def from_json(cls, doc: dict) -> "SurrogateModel":
        params, hyper = params_from_json(doc)
        return cls(Architecture(**hyper["arch"]), params, Normalizer.from_dict(hyper["normalizer"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "SurrogateModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def encode(model: SurrogateModel, x) -> np.ndarray:
    return model.encode(x)


def rollout(model: SurrogateModel, u, observed) -> np.ndarray:
    """Reconstructed states for latent(s) ``u`` and observed state sequence(s).

    ``observed`` is ``(K, D)`` or ``(n, K, D)`` in physical units, ``K >= 2``; the
    output has the same shape. In teacher mode the true ``s_k`` drives each update.
    """
    S = np.asarray(observed, dtype=float)
    single = S.ndim == 2
    S = S[None] if single else S
    if S.shape[1] < 2:
        raise ValueError("observed trajectory needs at least two steps")
    U = np.asarray(u, dtype=float).reshape(S.shape[0], -1)
    s_hat, _ = _rollout_forward(model.params, model.arch, U, model.norm.s(S))
    out = model.norm.s_inv(s_hat)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# forward / backward of the recurrent part


def _rollout_forward(params: ParamSet, arch: Architecture, u: np.ndarray, s_n: np.ndarray):
    """Normalized reconstruction ``(B, K, D)`` and a cache for the backward pass."""
    cell = GruCell.from_params(params)
    dec = arch.decoder
    B, K, D = s_n.shape
    h = np.zeros((B, arch.hidden_dim))
    if arch.feed == "teacher":
        xin = np.concatenate([s_n[:, :-1], np.broadcast_to(u[:, None, :], (B, K - 1, u.shape[1]))], axis=2)
        wcat = np.concatenate([cell.Wz, cell.Wr, cell.Wh])
        xproj = xin @ wcat.T
        hs, caches = [h], []
        for k in range(K - 1):
            h, c = cell.step(None, h, xproj[:, k])
            if not np.all(np.isfinite(h)):
                raise DivergenceError("non-finite hidden state", step=k + 1)
            hs.append(h)
            caches.append(c)
        H = np.stack(hs, axis=1)
        y, acts = dec.forward(params, H.reshape(B * K, -1))
        return y.reshape(B, K, D), ("teacher", xin, caches, acts)

    outs, dec_acts, xs, caches = [], [], [], []
    for k in range(K):
        y, acts = dec.forward(params, h)
        outs.append(y)
        dec_acts.append(acts)
        if k == K - 1:
            break
        x = np.concatenate([y, u], axis=1)
        h, c = cell.step(x, h)
        if not np.all(np.isfinite(h)):
            raise DivergenceError("non-finite hidden state", step=k + 1)
        xs.append(x)
        caches.append(c)
    return np.stack(outs, axis=1), ("free", xs, caches, dec_acts)


def _rollout_backward(params: ParamSet, arch: Architecture, cache, ds: np.ndarray, grads: ParamSet) -> np.ndarray:
    """Accumulate GRU/decoder gradients for ``d loss / d s_hat = ds``; returns ``d loss / d u``."""
    cell = GruCell.from_params(params)
    dec = arch.decoder
    B, K, D = ds.shape
    mode = cache[0]
    if mode == "teacher":
        _, xin, caches, acts = cache
        dH = dec.backward(params, acts, ds.reshape(B * K, D), grads).reshape(B, K, -1)
        da_all = np.empty((B, K - 1, 3 * arch.hidden_dim))
        carry = np.zeros((B, arch.hidden_dim))
        for k in range(K - 2, -1, -1):
            da_all[:, k], carry = cell.step_backward(dH[:, k + 1] + carry, caches[k], grads)
        dx = cell.input_backward(da_all, xin, grads)
        return dx[..., D:].sum(axis=1)

    _, xs, caches, dec_acts = cache
    du = np.zeros((B, arch.latent_dim))
    carry = None
    for k in range(K - 1, -1, -1):
        dy = ds[:, k].copy()
        dh = np.zeros((B, arch.hidden_dim))
        if carry is not None:
            da, dh = cell.step_backward(carry, caches[k], grads)
            dx = cell.input_backward(da, xs[k], grads)
            dy += dx[:, :D]
            du += dx[:, D:]
        carry = dh + dec.backward(params, dec_acts[k], dy, grads)
    return du


# ---------------------------------------------------------------------------
# loss pieces


def stability_weight(s: float, s_hat: float, tau: float, omega: float) -> float:
    """``omega`` if ``|s| > tau`` and the reconstruction falls short of ``s`` in the
    direction of its sign, else 1."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    sg = np.sign(s)
    return float(omega) if abs(s) > tau and sg * s_hat < sg * s else 1.0


def stability_weights(s, s_hat, tau: float, omega: float) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    sg = np.sign(s)
    return np.where((np.abs(s) > tau) & (sg * np.asarray(s_hat) < sg * s), float(omega), 1.0)


def weighted_reconstruction_loss(states, recon, weights=None) -> float:
    """``(1/n) sum_i (1/K) sum_k w_ik ||s_ik - s_hat_ik||^2`` for ``(n, K, D)`` arrays."""
    S = np.asarray(states, dtype=float)
    R = np.asarray(recon, dtype=float)
    if S.ndim == 2:
        S, R = S[..., None], R[..., None]
    sq = ((S - R) ** 2).sum(axis=-1)
    w = np.ones_like(sq) if weights is None else np.asarray(weights, dtype=float)
    return float((w * sq).mean())


def uniform_reference(n: int, d: int, seed=None) -> np.ndarray:
    return np.random.default_rng(seed).random((n, d))


def resolve_bandwidth(rule, u, v) -> float:
    if rule == "median":
        return median_bandwidth(np.vstack([u, v]), BANDWIDTH_FLOOR)
    return float(rule)


def mmd_to_uniform(latents, bandwidth="median", seed=None) -> float:
    """V-statistic MMD^2 between ``latents`` and an equal-size fresh uniform sample."""
    u = np.asarray(latents, dtype=float)
    u = u[:, None] if u.ndim == 1 else u
    if len(u) < 2:
        raise ValueError("need a batch of at least two latents")
    v = uniform_reference(len(u), u.shape[1], seed)
    return mmd2_vstat(u, v, resolve_bandwidth(bandwidth, u, v))


def mmd_uniform_grad(u: np.ndarray, v: np.ndarray, bandwidth: float) -> tuple[float, np.ndarray]:
    """MMD^2 V-statistic between ``u`` and ``v`` and its gradient in ``u`` (bandwidth fixed)."""
    B, Bv = len(u), len(v)
    kuu = gaussian_kernel(u, u, bandwidth)
    kvv = gaussian_kernel(v, v, bandwidth)
    kuv = gaussian_kernel(u, v, bandwidth)
    val = kuu.mean() + kvv.mean() - 2.0 * kuv.mean()
    self_term = (u * kuu.sum(1, keepdims=True) - kuu @ u) / B**2
    cross_term = (u * kuv.sum(1, keepdims=True) - kuv @ v) / (B * Bv)
    grad = -(2.0 / bandwidth**2) * (self_term - cross_term)
    return float(val), grad


# ---------------------------------------------------------------------------
# monitored scalar for the stability weight


@dataclass(frozen=True)
class SignedMonitor:
    """Signed scalar on which the stability weight acts, aligned with the observed states.

    ``position``: the first observed coordinate. ``swing``: the swing angle of the
    bob about the true pivot, signed by the horizontal displacement along the true
    swing direction (so the true angle is nonnegative).
    """

    kind: str
    true_signed: np.ndarray  # (n, K)
    pivot: np.ndarray | None = None  # (n, K, 3)
    direction: np.ndarray | None = None  # (n, K, 2)

    def take(self, idx) -> "SignedMonitor":
        sel = lambda a: None if a is None else a[idx]
        return SignedMonitor(self.kind, self.true_signed[idx], sel(self.pivot), sel(self.direction))

    def signed(self, s_hat: np.ndarray) -> np.ndarray:
        if self.kind == "position":
            return s_hat[..., 0]
        rel = s_hat[..., :3] - self.pivot
        horiz = (rel[..., :2] * self.direction).sum(-1)
        return np.arctan2(horiz, -rel[..., 2])

    @classmethod
    def for_swing(cls, bob: np.ndarray, pivot: np.ndarray) -> "SignedMonitor":
        rel = bob - pivot
        norm = np.linalg.norm(rel[..., :2], axis=-1, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        direction = np.where(norm > 0, rel[..., :2] / safe, np.array([1.0, 0.0]))
        angle = np.arctan2(norm[..., 0], -rel[..., 2])
        return cls("swing", angle, pivot, direction)


@dataclass
class SequenceData:
    """Training inputs: contexts ``(n, dc)``, observed states ``(n, K, D)``, monitor, labels.

    ``step_weights`` (length ``K``) optionally rescales the per-step reconstruction
    terms, e.g. zeros on the first half to score only a forecast of the second half.
    """

    contexts: np.ndarray
    states: np.ndarray
    monitor: SignedMonitor | None = None
    labels: np.ndarray | None = None
    step_weights: np.ndarray | None = None

    def __post_init__(self):
        self.contexts = np.asarray(self.contexts, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if len(self.contexts) != len(self.states):
            raise ValueError("contexts and trajectories must have equal counts")
        if len(self.contexts) == 0:
            raise ValueError("dataset is empty")
        if self.states.ndim != 3 or self.states.shape[1] < 2:
            raise ValueError("states must be (n, K, D) with K >= 2")
        if self.step_weights is not None and np.shape(self.step_weights) != (self.states.shape[1],):
            raise ValueError("step_weights must have one entry per step")

    def __len__(self) -> int:
        return len(self.contexts)

    def take(self, idx) -> "SequenceData":
        return SequenceData(
            self.contexts[idx],
            self.states[idx],
            None if self.monitor is None else self.monitor.take(idx),
            None if self.labels is None else self.labels[idx],
            self.step_weights,
        )


def observed_sequences(system: str, contexts, trajs: TrajectoryBatch, stride: int = 1, labels=None) -> SequenceData:
    """Observed features per system: spring position; pendulum bob position."""
    sl = slice(None, None, stride)
    if system == "spring":
        states = trajs.states[:, sl, :1]
        monitor = SignedMonitor("position", states[..., 0])
    elif system == "pendulum":
        states = trajs.states[:, sl, :3]
        monitor = SignedMonitor.for_swing(states, trajs.pivot[:, sl])
    else:
        raise ConfigError(f"unknown system {system!r}")
    return SequenceData(contexts, np.ascontiguousarray(states), monitor, labels)


# ---------------------------------------------------------------------------
# objective


@dataclass
class Objective:
    total: float
    recon: float
    reg: float
    grads: ParamSet | None
    latents: np.ndarray
    recon_states: np.ndarray  # normalized
    weights: np.ndarray


def objective(
    params: ParamSet,
    arch: Architecture,
    x_n: np.ndarray,
    s_n: np.ndarray,
    *,
    lam: float,
    v: np.ndarray,
    bandwidth="median",
    recon_weight: float = 1.0,
    weights: np.ndarray | None = None,
    weight_fn=None,
    want_grads: bool = True,
) -> Objective:
    """Loss ``recon_weight * weighted_recon + lam * MMD^2(u, v)`` and its exact gradient.

    Stability weights are constants of the forward pass: pass them in ``weights``,
    or give ``weight_fn(s_hat_normalized) -> (B, K)``; the default is all ones.
    The kernel bandwidth is likewise treated as a constant.
    """
    enc = arch.encoder
    u, enc_acts = enc.forward(params, x_n)
    check_finite("latents", u)
    s_hat, cache = _rollout_forward(params, arch, u, s_n)
    check_finite("reconstruction", s_hat)
    if weights is None:
        weights = weight_fn(s_hat) if weight_fn is not None else np.ones(s_hat.shape[:2])
    resid = s_hat - s_n
    B, K, _ = s_n.shape
    recon = float((weights * (resid**2).sum(-1)).mean())
    bw = resolve_bandwidth(bandwidth, u, v)
    if lam > 0:
        reg, dreg = mmd_uniform_grad(u, v, bw)
    else:
        reg, dreg = mmd2_vstat(u, v, bw), None
    total = recon_weight * recon + lam * reg
    grads = None
    if want_grads:
        grads = zeros_like_params(params)
        ds = (2.0 * recon_weight / (B * K)) * weights[..., None] * resid
        du = _rollout_backward(params, arch, cache, ds, grads)
        if dreg is not None:
            du = du + lam * dreg
        enc.backward(params, enc_acts, check_finite("d_latents", du), grads)
        for k, g in grads.items():
            check_finite(f"grad[{k}]", g)
    return Objective(total, recon, float(reg), grads, u, s_hat, weights)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 3e-3
    lam: float = 0.01
    omega: float = 2.0
    tau: float | None = None
    bandwidth: str | float = "median"
    seed: int = 0
    recon_weight: float = 1.0
    hidden_dim: int = 32
    depth: int = 2
    latent_dim: int = 1
    feed: str = "teacher"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 1 and batch_size >= 2")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not self.lam >= 0:
            raise ConfigError("lambda must be non-negative")
        if not self.omega >= 1:
            raise ConfigError("omega must be at least 1")
        if self.tau is not None and not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.bandwidth != "median":
            try:
                ok = float(self.bandwidth) > 0
            except (TypeError, ValueError):
                ok = False
            if not ok:
                raise ConfigError("bandwidth must be 'median' or a positive number")
        if self.recon_weight < 0:
            raise ConfigError("recon_weight must be non-negative")
        if self.feed not in FEED_MODES:
            raise ConfigError(f"feed must be one of {FEED_MODES}")


@dataclass
class TrainingRecord:
    total: list[float] = field(default_factory=list)
    recon: list[float] = field(default_factory=list)
    reg: list[float] = field(default_factory=list)
    wall_clock: float = 0.0
    latents: np.ndarray | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "total", "recon", "reg"])
            for i, row in enumerate(zip(self.total, self.recon, self.reg), start=1):
                w.writerow([i, *(repr(float(x)) for x in row)])


def _weight_fn(monitor: SignedMonitor | None, norm: Normalizer, tau, omega, step_weights=None):
    use_stab = monitor is not None and tau is not None and omega != 1
    if not use_stab and step_weights is None:
        return None

    def fn(s_hat_n):
        if use_stab:
            w = stability_weights(monitor.true_signed, monitor.signed(norm.s_inv(s_hat_n)), tau, omega)
        else:
            w = np.ones(s_hat_n.shape[:2])
        return w if step_weights is None else w * step_weights

    return fn


def train(data: SequenceData, config: TrainConfig = TrainConfig()) -> tuple[SurrogateModel, TrainingRecord]:
    """Minibatch Adam on the full objective; deterministic given ``config.seed``."""
    t0 = time.perf_counter()
    arch = Architecture(
        data.contexts.shape[1], data.states.shape[2], config.latent_dim, config.hidden_dim, config.depth, config.feed
    )
    norm = Normalizer.fit(data.contexts, data.states)
    init_ss, order_ss, ref_ss = np.random.SeedSequence(config.seed).spawn(3)
    params = arch.init(np.random.default_rng(init_ss))
    order_rng = np.random.default_rng(order_ss)
    ref_rng = np.random.default_rng(ref_ss)
    state = AdamState(lr=config.lr)
    X_n = norm.x(data.contexts)
    S_n = norm.s(data.states)
    n = len(data)
    rec = TrainingRecord()
    for epoch in range(1, config.epochs + 1):
        perm = order_rng.permutation(n)
        sums = np.zeros(2)
        for start in range(0, n, config.batch_size):
            idx = np.sort(perm[start : start + config.batch_size])
            if len(idx) < 2:
                continue
            mon = None if data.monitor is None else data.monitor.take(idx)
            v = ref_rng.random((len(idx), config.latent_dim))
            try:
                obj = objective(
                    params,
                    arch,
                    X_n[idx],
                    S_n[idx],
                    lam=config.lam,
                    v=v,
                    bandwidth=config.bandwidth,
                    recon_weight=config.recon_weight,
                    weight_fn=_weight_fn(mon, norm, config.tau, config.omega, data.step_weights),
                )
            except (GradientOverflowError, DivergenceError) as exc:
                raise TrainingFailure(epoch, str(exc)) from exc
            if not np.isfinite(obj.total):
                raise TrainingFailure(epoch, "non-finite loss")
            params, state = adam_update(params, obj.grads, state)
            sums += len(idx) * np.array([obj.recon, obj.reg])
        recon, reg = sums / n
        rec.recon.append(float(recon))
        rec.reg.append(float(reg))
        rec.total.append(float(config.recon_weight * recon + config.lam * reg))
    model = SurrogateModel(arch, params, norm)
    rec.latents = model.encode(data.contexts)
    rec.wall_clock = time.perf_counter() - t0
    return model, rec
