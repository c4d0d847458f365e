"""Stability-probability classifier used by the binary-classifier baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLabelsError, TrainingFailure
from .neuralcore import AdamState, MLPSpec, ParamSet, adam_update, sigmoid, zeros_like_params


@dataclass
class ProbabilityModel:
    spec: MLPSpec
    params: ParamSet
    x_mean: np.ndarray
    x_std: np.ndarray

    def predict_proba(self, X) -> np.ndarray:
        """Predicted probability that each context yields a stable trajectory."""
        z, _ = self.spec.forward(self.params, (np.atleast_2d(X) - self.x_mean) / self.x_std)
        return sigmoid(z[:, 0])


def bce_loss_and_grads(spec: MLPSpec, params: ParamSet, X, y):
    """Mean logistic cross-entropy; the network's last layer outputs the logit."""
    z, acts = spec.forward(params, X)
    z = z[:, 0]
    # log(1 + e^z) - y z, written stably
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    grads = zeros_like_params(params)
    spec.backward(params, acts, ((sigmoid(z) - y) / len(y))[:, None], grads)
    return loss, grads


def train_binary_classifier(
    contexts,
    stable,
    epochs: int = 100,
    batch_size: int = 128,
    lr: float = 3e-3,
    hidden_dim: int = 32,
    depth: int = 2,
    seed: int = 0,
) -> ProbabilityModel:
    """MLP context -> P(stable) fitted with logistic cross-entropy and Adam."""
    X = np.asarray(contexts, dtype=float)
    y = np.asarray(stable, dtype=float).ravel()
    if len(np.unique(y)) < 2:
        raise DegenerateLabelsError("classifier needs both stable and unstable examples")
    mean, std = X.mean(0), np.maximum(X.std(0), 1e-8)
    Xn = (X - mean) / std
    hid = (hidden_dim,) * (depth - 1)
    spec = MLPSpec("clf", (X.shape[1], *hid, 1), ("tanh",) * (depth - 1) + ("identity",))
    init_ss, order_ss = np.random.SeedSequence(seed).spawn(2)
    params = spec.init(np.random.default_rng(init_ss))
    rng = np.random.default_rng(order_ss)
    state = AdamState(lr=lr)
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = perm[start : start + batch_size]
            loss, grads = bce_loss_and_grads(spec, params, Xn[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingFailure(epoch, "classifier loss is not finite")
            params, state = adam_update(params, grads, state)
    return ProbabilityModel(spec, params, mean, std)
