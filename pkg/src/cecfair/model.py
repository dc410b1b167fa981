"""The scoring network f_theta: a small fully connected MLP with a scalar logit."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Var

FORMAT_NAME = "cecfair.mlp"
FORMAT_VERSION = 1

ACTIVATIONS = ("tanh", "relu")


class SchemaError(ValueError):
    """Input dimensions do not match the model."""


@dataclass
class MLPModel:
    """Parameter container for ``input -> hidden... -> 1``.

    ``weights[k]`` has shape ``(dims[k], dims[k+1])`` so a batch ``X`` of shape
    ``(n, d)`` maps through ``X @ W + b``.  ``threshold`` is applied to the
    sigmoid output (0.5 means logit >= 0).
    """

    dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"
    dropout: float = 0.2
    threshold: float = 0.5
    feature_names: list[str] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.dims[-1] != 1:
            raise ValueError("output layer must have exactly one unit")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.dims[k], self.dims[k + 1]) or b.shape != (self.dims[k + 1],):
                raise ValueError(f"layer {k} parameter shapes do not match dims {self.dims}")

    @classmethod
    def init(
        cls,
        input_dim: int,
        hidden: Sequence[int] = (128, 64),
        *,
        activation: str = "tanh",
        dropout: float = 0.2,
        threshold: float = 0.5,
        seed: int | np.random.Generator | None = 0,
        feature_names: list[str] | None = None,
    ) -> MLPModel:
        """Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        rng = np.random.default_rng(seed)
        dims = [int(input_dim), *map(int, hidden), 1]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(dims, weights, biases, activation, dropout, threshold, feature_names)

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def n_params(self) -> int:
        return int(np.sum([w.size + b.size for w, b in zip(self.weights, self.biases)]))

    @property
    def logit_threshold(self) -> float:
        return float(np.log(self.threshold / (1.0 - self.threshold)))

    def parameters(self) -> list[np.ndarray]:
        """Parameters in canonical order ``W0, b0, W1, b1, ...``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def variables(self) -> list[Var]:
        """Fresh differentiable leaves for the current parameters."""
        return [Var(p, requires_grad=True) for p in self.parameters()]

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def with_flat_parameters(self, flat: np.ndarray) -> MLPModel:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError("flat parameter vector has the wrong length")
        arrays, pos = [], 0
        for p in self.parameters():
            arrays.append(flat[pos : pos + p.size].reshape(p.shape).copy())
            pos += p.size
        return MLPModel(
            list(self.dims), arrays[0::2], arrays[1::2], self.activation,
            self.dropout, self.threshold, self.feature_names,
        )

    def copy(self) -> MLPModel:
        return self.with_flat_parameters(self.flat_parameters())

    # -- fast numpy paths (no tape) --------------------------------------

    def logits(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        h = X
        act = np.tanh if self.activation == "tanh" else _np_relu
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = act(h)
        return h[:, 0]

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return ad._stable_sigmoid(self.logits(X))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.int64)

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise SchemaError(f"expected inputs with {self.input_dim} features, got shape {X.shape}")
        return X

    # -- serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "layer_dims": list(self.dims),
            "activation": self.activation,
            "dropout": self.dropout,
            "threshold": self.threshold,
            "feature_names": self.feature_names,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> MLPModel:
        if d.get("format") != FORMAT_NAME:
            raise ValueError("not a cecfair model file")
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model file version {d.get('version')}")
        return cls(
            dims=[int(v) for v in d["layer_dims"]],
            weights=[np.array(w, dtype=np.float64).reshape(-1, n) for w, n in zip(d["weights"], d["layer_dims"][1:])],
            biases=[np.array(b, dtype=np.float64) for b in d["biases"]],
            activation=d["activation"],
            dropout=float(d["dropout"]),
            threshold=float(d["threshold"]),
            feature_names=d.get("feature_names"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> MLPModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _np_relu(x):
    return np.maximum(x, 0.0)


def logits_graph(
    model: MLPModel,
    params: Sequence[Var],
    X,
    dropout_masks: Sequence[np.ndarray] | None = None,
) -> Var:
    """Taped forward pass; returns a ``(n,)`` Var of logits.

    ``dropout_masks`` (already scaled by 1/keep) are applied after each hidden
    activation when given.
    """
    X = X if isinstance(X, Var) else Var(model._check(X))
    if X.shape[1] != model.input_dim:
        raise SchemaError(f"expected inputs with {model.input_dim} features, got shape {X.shape}")
    act = ad.tanh if model.activation == "tanh" else ad.relu
    h = X
    n_layers = len(params) // 2
    for k in range(n_layers):
        h = ad.add(ad.matmul(h, params[2 * k]), params[2 * k + 1])
        if k < n_layers - 1:
            h = act(h)
            if dropout_masks is not None:
                h = ad.mul(h, dropout_masks[k])
    return ad.reshape(h, (h.shape[0],))


def dropout_masks(model: MLPModel, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    keep = 1.0 - model.dropout
    return [
        (rng.random((n, width)) < keep).astype(np.float64) / keep
        for width in model.dims[1:-1]
    ]


# -- the three kernel entry points ---------------------------------------------


def forward(model: MLPModel, x) -> float | np.ndarray:
    """f_theta(x): a float for one input vector, an array for a batch."""
    x = np.asarray(x, dtype=np.float64)
    out = model.logits(x)
    return float(out[0]) if x.ndim == 1 else out


def grad_input(model: MLPModel, x) -> np.ndarray:
    """df/dx at ``x`` (row-wise for a batch)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = Var(model._check(x), requires_grad=True)
    params = [Var(p) for p in model.parameters()]
    out = ad.sum(logits_graph(model, params, X))
    (g,) = ad.grad(out, [X])
    return g.value[0] if single else g.value


def grad_params_of_scalar(params: Sequence[Var], loss: Var) -> np.ndarray:
    """Flat gradient of a taped scalar ``loss`` w.r.t. ``params``.

    ``loss`` may contain input-gradients produced with ``create_graph=True``,
    in which case the result is the mixed second-order derivative.
    """
    if not isinstance(loss, Var):
        loss = Var(loss)
    if loss.value.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    grads = ad.grad(loss, list(params))
    return np.concatenate([g.value.ravel() for g in grads])
