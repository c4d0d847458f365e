"""Small differentiable building blocks with hand-derived backward passes.

Everything is batched along the leading axis. Parameters live in plain
``dict[str, np.ndarray]`` parameter sets so that the optimizer and the
checkpoint writer can treat every model uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import GradientOverflowError

ParamSet = dict[str, np.ndarray]


def sigmoid(x):
    # tanh form is overflow-free for any finite x
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def _identity(x):
    return x


def _relu(x):
    return np.maximum(x, 0.0)


# activation -> (forward, derivative expressed through the output)
ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "sigmoid": (sigmoid, lambda y: y * (1.0 - y)),
    "identity": (_identity, lambda y: np.ones_like(y)),
    "relu": (_relu, lambda y: (y > 0).astype(float)),
}


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise GradientOverflowError(name)
    return arr


# ---------------------------------------------------------------------------
# dense layers

@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("inconsistent dense layer shapes")


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """``activation(W x + b)`` for a vector or a batch of row vectors."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != layer.weights.shape[1]:
        raise ValueError(f"input dimension {x.shape[-1]} != layer fan-in {layer.weights.shape[1]}")
    f, _ = ACTIVATIONS[layer.activation]
    return f(x @ layer.weights.T + layer.bias)


def dense_backward(layer: DenseLayer, x: np.ndarray, y: np.ndarray, dy: np.ndarray):
    """Return ``(dx, dW, db)`` given the forward input ``x`` and output ``y`` (batched rows)."""
    _, df = ACTIVATIONS[layer.activation]
    da = dy * df(y)
    return da @ layer.weights, da.T @ x, da.sum(axis=0)


@dataclass(frozen=True)
class MLPSpec:
    """Stack of dense layers stored under ``{prefix}.{i}.W`` / ``{prefix}.{i}.b``."""

    prefix: str
    sizes: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if len(self.activations) != len(self.sizes) - 1:
            raise ValueError("need one activation per layer")

    def init(self, rng: np.random.Generator) -> ParamSet:
        params: ParamSet = {}
        for i, (fi, fo) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            params[f"{self.prefix}.{i}.W"] = uniform_init(rng, (fo, fi), fi)
            params[f"{self.prefix}.{i}.b"] = np.zeros(fo)
        return params

    def layers(self, params: ParamSet) -> list[DenseLayer]:
        return [
            DenseLayer(params[f"{self.prefix}.{i}.W"], params[f"{self.prefix}.{i}.b"], act)
            for i, act in enumerate(self.activations)
        ]

    def forward(self, params: ParamSet, x: np.ndarray):
        """Returns the output and the list of layer activations (input first)."""
        acts = [x]
        for layer in self.layers(params):
            acts.append(dense_forward(layer, acts[-1]))
        return acts[-1], acts

    def backward(self, params: ParamSet, acts: list[np.ndarray], dy: np.ndarray, grads: ParamSet) -> np.ndarray:
        """Accumulate parameter gradients into ``grads``; returns d(loss)/d(input)."""
        for i in reversed(range(len(self.activations))):
            layer = DenseLayer(params[f"{self.prefix}.{i}.W"], params[f"{self.prefix}.{i}.b"], self.activations[i])
            dy, dW, db = dense_backward(layer, acts[i], acts[i + 1], dy)
            grads[f"{self.prefix}.{i}.W"] += dW
            grads[f"{self.prefix}.{i}.b"] += db
        return dy


# ---------------------------------------------------------------------------
# gated recurrent cell

GRU_NAMES = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")


@dataclass
class GruCell:
    """Update gate z, reset gate r, candidate c; ``h' = (1 - z) h + z c``."""

    Wz: np.ndarray
    Uz: np.ndarray
    bz: np.ndarray
    Wr: np.ndarray
    Ur: np.ndarray
    br: np.ndarray
    Wh: np.ndarray
    Uh: np.ndarray
    bh: np.ndarray

    def __post_init__(self):
        H, I = self.Wz.shape
        for W, U, b in ((self.Wz, self.Uz, self.bz), (self.Wr, self.Ur, self.br), (self.Wh, self.Uh, self.bh)):
            if W.shape != (H, I) or U.shape != (H, H) or b.shape != (H,):
                raise ValueError("GRU blocks must share input and hidden dimensions")

    @property
    def hidden_dim(self) -> int:
        return self.Wz.shape[0]

    @property
    def input_dim(self) -> int:
        return self.Wz.shape[1]

    @classmethod
    def from_params(cls, params: ParamSet, prefix: str = "gru") -> "GruCell":
        return cls(**{k: params[f"{prefix}.{k}"] for k in GRU_NAMES})

    @staticmethod
    def init(rng: np.random.Generator, input_dim: int, hidden_dim: int, prefix: str = "gru") -> ParamSet:
        out: ParamSet = {}
        for gate in "zrh":
            out[f"{prefix}.W{gate}"] = uniform_init(rng, (hidden_dim, input_dim), input_dim)
            out[f"{prefix}.U{gate}"] = uniform_init(rng, (hidden_dim, hidden_dim), hidden_dim)
            out[f"{prefix}.b{gate}"] = np.zeros(hidden_dim)
        # canonical order
        return {f"{prefix}.{k}": out[f"{prefix}.{k}"] for k in GRU_NAMES}

    def step(self, x, h, x_proj=None):
        """One batched update. ``x_proj`` optionally carries precomputed input projections
        ``x @ [Wz; Wr; Wh].T`` of shape ``(B, 3H)``. Returns ``(h_new, cache)``."""
        H = self.hidden_dim
        if x_proj is None:
            x_proj = x @ np.concatenate([self.Wz, self.Wr, self.Wh]).T
        z = sigmoid(x_proj[:, :H] + h @ self.Uz.T + self.bz)
        r = sigmoid(x_proj[:, H : 2 * H] + h @ self.Ur.T + self.br)
        rh = r * h
        c = np.tanh(x_proj[:, 2 * H :] + rh @ self.Uh.T + self.bh)
        h_new = (1.0 - z) * h + z * c
        return h_new, (x, h, z, r, rh, c)

    def step_backward(self, dh_new, cache, grads: ParamSet, prefix: str = "gru"):
        """Backward through the recurrent part of one step.

        Accumulates the U and bias gradients and returns ``(da, dh)`` where ``da``
        holds the pre-activation gradients ``[z | r | c]``; feed it to
        :meth:`input_backward` (possibly batched over many steps).
        """
        x, h, z, r, rh, c = cache
        dz = dh_new * (c - h)
        dac = dh_new * z * (1.0 - c * c)
        dh = dh_new * (1.0 - z)
        drh = dac @ self.Uh
        dar = drh * h * r * (1.0 - r)
        dh += drh * r
        daz = dz * z * (1.0 - z)
        dh += daz @ self.Uz + dar @ self.Ur
        grads[f"{prefix}.Uh"] += dac.T @ rh
        grads[f"{prefix}.Ur"] += dar.T @ h
        grads[f"{prefix}.Uz"] += daz.T @ h
        grads[f"{prefix}.bh"] += dac.sum(0)
        grads[f"{prefix}.br"] += dar.sum(0)
        grads[f"{prefix}.bz"] += daz.sum(0)
        return np.concatenate([daz, dar, dac], axis=-1), dh

    def input_backward(self, da, x, grads: ParamSet, prefix: str = "gru"):
        """Input-weight gradients for pre-activation grads ``da`` (``(..., 3H)``) and inputs
        ``x`` (``(..., I)``); returns d(loss)/dx."""
        H = self.hidden_dim
        da2 = da.reshape(-1, 3 * H)
        x2 = x.reshape(-1, x.shape[-1])
        grads[f"{prefix}.Wz"] += da2[:, :H].T @ x2
        grads[f"{prefix}.Wr"] += da2[:, H : 2 * H].T @ x2
        grads[f"{prefix}.Wh"] += da2[:, 2 * H :].T @ x2
        return da @ np.concatenate([self.Wz, self.Wr, self.Wh])


def gru_step(cell: GruCell, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    single = x.ndim == 1
    if x.shape[-1] != cell.input_dim or h.shape[-1] != cell.hidden_dim:
        raise ValueError("GRU input or hidden dimension mismatch")
    h_new, _ = cell.step(np.atleast_2d(x), np.atleast_2d(h))
    return h_new[0] if single else h_new


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: ParamSet = field(default_factory=dict)
    v: ParamSet = field(default_factory=dict)


def adam_update(params: ParamSet, grads: ParamSet, state: AdamState) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam step. Inputs are not modified."""
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.beta1 * state.m.get(name, 0.0) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(name, 0.0) + (1.0 - state.beta2) * (g * g)
        new_m[name], new_v[name] = m, v
        new_params[name] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return new_params, AdamState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)


def zeros_like_params(params: ParamSet) -> ParamSet:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# finite-difference gradient check

@dataclass
class GradCheckReport:
    step: float
    tolerance: float
    max_rel_error: dict[str, float]
    n_checked: dict[str, int]

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    @property
    def degraded(self) -> bool:
        return not self.passed

    def __str__(self) -> str:
        lines = [f"finite-difference check: step={self.step:g} tol={self.tolerance:g} worst={self.worst:.3e}"]
        for name, err in self.max_rel_error.items():
            flag = "ok" if err <= self.tolerance else "DEGRADED"
            lines.append(f"  {name:<16} n={self.n_checked[name]:<4d} max_rel={err:.3e} {flag}")
        return "\n".join(lines)


def finite_difference_check(
    loss_fn: Callable[[ParamSet], float],
    params: ParamSet,
    grads: ParamSet,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: int | None = 64,
    seed=0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic ``grads`` with central differences of ``loss_fn``.

    Never raises on disagreement; inspect ``report.passed``. Large tensors are
    probed at ``max_entries`` random coordinates. The relative error uses
    ``max(|analytic|, |numeric|, floor)`` as denominator.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    rng = np.random.default_rng(seed)
    work = {k: v.copy() for k, v in params.items()}
    errs: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name, p in work.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        analytic = grads[name].reshape(-1)
        worst = 0.0
        for j in idx:
            orig = flat[j]
            flat[j] = orig + step
            lp = loss_fn(work)
            flat[j] = orig - step
            lm = loss_fn(work)
            flat[j] = orig
            num = (lp - lm) / (2 * step)
            denom = max(abs(analytic[j]), abs(num), floor)
            worst = max(worst, abs(analytic[j] - num) / denom)
        errs[name] = worst
        counts[name] = len(idx)
    return GradCheckReport(step, tolerance, errs, counts)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "stabshift-checkpoint/1"


def params_to_json(params: ParamSet, hyper: dict) -> dict:
    """JSON-ready document: format tag, hyperparameters, and named tensors with shapes.

    Floats are written with ``repr`` precision, so a round trip is bit-exact.
    """
    return {
        "format": CHECKPOINT_FORMAT,
        "hyper": hyper,
        "tensors": [
            {"name": k, "shape": list(v.shape), "data": [float(x) for x in v.ravel()]}
            for k, v in params.items()
        ],
    }


def params_from_json(doc: dict) -> tuple[ParamSet, dict]:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    params: ParamSet = {}
    for t in doc["tensors"]:
        if t["name"] in params:
            raise ValueError(f"duplicate tensor {t['name']!r}")
        params[t["name"]] = np.asarray(t["data"], dtype=float).reshape(t["shape"])
    return params, doc["hyper"]


def total_count(params: ParamSet) -> int:
    return int(sum(v.size for v in params.values()))
