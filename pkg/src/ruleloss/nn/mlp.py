"""Feed-forward ReLU regressor with addressable dropout masks."""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..rng import Purpose, random_stream
from .autodiff import DimensionMismatch, Tensor, as_tensor, parameter

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ForwardTrace:
    """What a forward pass exposes beyond the output."""

    hidden: Tensor | None  # last hidden activation (before dropout), (B, H)
    gates: list[np.ndarray]  # per hidden layer: relu gate times dropout scale, (B, H)


@dataclass
class DropoutMasks:
    """Inverted-dropout multipliers for one batch, one array per hidden layer."""

    layers: list[np.ndarray]

    def take(self, rows: np.ndarray) -> DropoutMasks:
        return DropoutMasks([m[rows] for m in self.layers])


@dataclass
class MlpRegressor:
    dims: tuple[int, ...]
    weights: list[Tensor]
    biases: list[Tensor]
    dropout_p: float = 0.1
    # fixed affine maps: inputs are standardized, outputs de-standardized
    x_shift: np.ndarray = field(default=None)
    x_scale: np.ndarray = field(default=None)
    y_shift: float = 0.0
    y_scale: float = 1.0

    def __post_init__(self) -> None:
        if len(self.dims) < 2 or self.dims[-1] != 1:
            raise DimensionMismatch("dims must run from input width to a single output")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.dims[k], self.dims[k + 1]) or b.shape != (self.dims[k + 1],):
                raise DimensionMismatch(f"layer {k} parameters do not match dims {self.dims}")
        if self.x_shift is None:
            self.x_shift = np.zeros(self.dims[0])
        if self.x_scale is None:
            self.x_scale = np.ones(self.dims[0])
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")

    @classmethod
    def init(cls, dims: Sequence[int], seed: int, dropout_p: float = 0.1) -> MlpRegressor:
        """He-initialized weights (std sqrt(2 / fan_in)) and zero biases."""
        rng = random_stream(seed, Purpose.INIT)
        dims = tuple(int(d) for d in dims)
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))))
            biases.append(parameter(np.zeros(fan_out)))
        return cls(dims, weights, biases, dropout_p)

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def hidden_width(self) -> int:
        """Width of the representation fed to the output layer."""
        return self.dims[-2]

    @property
    def n_hidden(self) -> int:
        return len(self.dims) - 2

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def set_normalization(self, x: np.ndarray, y: np.ndarray) -> None:
        """Fix input/output standardization from training data (std floored at 1)."""
        self.x_shift = x.mean(axis=0)
        self.x_scale = 1.0 / np.maximum(x.std(axis=0), 1.0)
        self.y_shift = float(y.mean())
        self.y_scale = float(max(y.std(), 1.0))

    def dropout_masks(self, n_rows: int, seed: int, mask_id: int) -> DropoutMasks | None:
        """Masks for a batch, reproducible from ``(seed, mask_id)``."""
        if self.dropout_p == 0 or self.n_hidden == 0:
            return None
        rng = random_stream(seed, Purpose.DROPOUT, mask_id)
        keep = 1.0 - self.dropout_p
        return DropoutMasks([
            (rng.random((n_rows, width)) < keep) / keep for width in self.dims[1:-1]
        ])

    def forward(self, x, masks: DropoutMasks | None = None) -> tuple[Tensor, ForwardTrace]:
        """Predictions of shape (B,). ``masks=None`` is eval mode."""
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionMismatch(f"expected (batch, {self.input_dim}) input, got {x.shape}")
        h = (x - self.x_shift) * self.x_scale
        hidden = None
        gates = []
        for k in range(self.n_hidden):
            pre = h @ self.weights[k] + self.biases[k]
            hidden = pre.relu()
            gate = (pre.data > 0).astype(np.float64)
            h = hidden
            if masks is not None:
                h = hidden * masks.layers[k]
                gate = gate * masks.layers[k]
            gates.append(gate)
        out = h @ self.weights[-1] + self.biases[-1]
        y = out.reshape(-1) * self.y_scale + self.y_shift
        return y, ForwardTrace(hidden, gates)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.detached().forward(np.asarray(x, dtype=np.float64))[0].data.copy()

    def directional_derivative(self, trace: ForwardTrace, directions: np.ndarray) -> Tensor:
        """d y / d x along each row of ``directions`` at every traced input.

        Forward-mode propagation expressed in differentiable operations, with
        the ReLU and dropout gates of ``trace`` held fixed. Returns (R, B).
        """
        directions = np.asarray(directions, dtype=np.float64)
        if directions.ndim != 2 or directions.shape[1] != self.input_dim:
            raise DimensionMismatch("directions must be (R, input_dim)")
        r = directions.shape[0]
        t = as_tensor(directions * self.x_scale)
        if self.n_hidden == 0:
            slope = (t @ self.weights[0]).reshape(r, 1)
            return slope * self.y_scale
        b = trace.gates[0].shape[0]
        t = (t @ self.weights[0]).reshape(r, 1, self.dims[1]) * trace.gates[0]
        for k in range(1, self.n_hidden):
            t = (t @ self.weights[k]) * trace.gates[k]
        return (t @ self.weights[-1]).reshape(r, b) * self.y_scale

    def detached(self) -> MlpRegressor:
        """A copy sharing parameter values but recording no gradients."""
        return MlpRegressor(
            self.dims,
            [Tensor(w.data) for w in self.weights],
            [Tensor(b.data) for b in self.biases],
            self.dropout_p,
            self.x_shift,
            self.x_scale,
            self.y_shift,
            self.y_scale,
        )

    def input_sensitivities(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode gradient of each prediction with respect to its inputs, (B, D)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        xt = Tensor(x, requires_grad=True)
        y, _ = self.detached().forward(xt)
        y.sum().backward()
        return xt.grad

    # -- state -------------------------------------------------------------

    def state(self) -> dict:
        return {
            "dims": list(self.dims),
            "dropout_p": self.dropout_p,
            "weights": [w.data.ravel().tolist() for w in self.weights],
            "biases": [b.data.tolist() for b in self.biases],
            "x_shift": self.x_shift.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_shift": self.y_shift,
            "y_scale": self.y_scale,
        }

    def copy_state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_values(self, values: Sequence[np.ndarray]) -> None:
        for p, v in zip(self.parameters(), values, strict=True):
            p.data[...] = v

    @classmethod
    def from_state(cls, d: dict) -> MlpRegressor:
        dims = tuple(d["dims"])
        weights = [
            parameter(np.array(w).reshape(dims[k], dims[k + 1])) for k, w in enumerate(d["weights"])
        ]
        biases = [parameter(np.array(b)) for b in d["biases"]]
        return cls(dims, weights, biases, d["dropout_p"], np.array(d["x_shift"]),
                   np.array(d["x_scale"]), float(d["y_shift"]), float(d["y_scale"]))


def save_checkpoint(path: str | Path, model: MlpRegressor, extra: dict | None = None) -> None:
    payload = {"format_version": CHECKPOINT_FORMAT_VERSION, "model": model.state(), "extra": extra or {}}
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[MlpRegressor, dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    return MlpRegressor.from_state(payload["model"]), payload.get("extra", {})
