"""Dense MLPs with hand-written reverse mode, Adam, and gradient checking.

Everything runs in float64. Weight matrices are stored ``(out, in)`` so a
layer computes ``x @ W.T + b`` on row-batched inputs.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_ACTIVATIONS = ("tanh", "relu", "identity")


def orthogonal_init(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix scaled by ``gain``; the shorter side is orthonormal."""
    if len(shape) != 2:
        raise ShapeError(f"orthogonal_init needs a 2-d shape, got {shape}")
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    # sign fix makes the distribution uniform over the orthogonal group
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def decay_schedule(initial: float, fraction_done: float) -> float:
    if not 0.0 <= fraction_done <= 1.0:
        raise ValueError(f"fraction_done must lie in [0, 1], got {fraction_done}")
    return initial * (1.0 - fraction_done)


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(kind: str, z: np.ndarray, out: np.ndarray, g: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return g * (1.0 - out * out)
    if kind == "relu":
        return g * (z > 0.0)
    return g


@dataclass
class Mlp:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        if self.hidden_activation not in ("tanh", "relu"):
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in ("identity", "tanh"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("number of layers does not match layer_sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if w.shape != expected or b.shape != (expected[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}, expected {expected}")

    @classmethod
    def create(
        cls,
        layer_sizes: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = "tanh",
        output_activation: str = "identity",
        hidden_gain: float = np.sqrt(2.0),
        output_gain: float = 1.0,
    ) -> "Mlp":
        sizes = [int(s) for s in layer_sizes]
        n = len(sizes) - 1
        weights = [
            orthogonal_init((sizes[i + 1], sizes[i]), hidden_gain if i < n - 1 else output_gain, rng)
            for i in range(n)
        ]
        biases = [np.zeros(sizes[i + 1]) for i in range(n)]
        return cls(sizes, weights, biases, hidden_activation, output_activation)

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list[np.ndarray]:
        """Live parameter arrays, interleaved ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return copy.deepcopy(self)

    def load_params_from(self, other: "Mlp") -> None:
        for dst, src in zip(self.params(), other.params()):
            dst[...] = src

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1:] != (self.in_dim,):
            raise ShapeError(f"input has trailing dim {x.shape[-1:]}, network expects {self.in_dim}")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cache(x)[0]

    def forward_cache(self, x: np.ndarray):
        x = self._check_input(x)
        single = x.ndim == 1
        h = x[None, :] if single else x
        zs, hs = [], [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            h = _activate(self.hidden_activation if i < last else self.output_activation, z)
            zs.append(z)
            hs.append(h)
        out = h[0] if single else h
        return out, (single, zs, hs)

    def backward(self, cache, grad_out: np.ndarray):
        """Return ``(param_grads, input_grad)`` for a scalar loss with dL/dy = ``grad_out``.

        Parameter gradients are summed over the batch, in ``params()`` order.
        """
        single, zs, hs = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if single:
            g = g[None, :]
        if g.shape != hs[-1].shape:
            raise ShapeError(f"upstream gradient shape {g.shape} does not match output {hs[-1].shape}")
        last = len(self.weights) - 1
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        for i in range(last, -1, -1):
            kind = self.hidden_activation if i < last else self.output_activation
            g = _activation_grad(kind, zs[i], hs[i + 1], g)
            grads[2 * i] = g.T @ hs[i]
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i]
        return grads, (g[0] if single else g)


@dataclass
class Adam:
    """Bias-corrected Adam over a fixed list of parameter arrays (updated in place)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(grads):
            raise ShapeError(f"{len(params)} parameter tensors but {len(grads)} gradients")
        for k, (p, g) in enumerate(zip(params, grads)):
            if p.shape != np.shape(g):
                raise ShapeError(f"gradient {k} has shape {np.shape(g)}, parameter {p.shape}")
            bad = ~np.isfinite(g)
            if bad.any():
                idx = tuple(int(i) for i in np.argwhere(bad)[0])
                raise NumericError(f"non-finite gradient in tensor {k} at index {idx}")
        if not self.first_moment:
            self.first_moment = [np.zeros_like(p) for p in params]
            self.second_moment = [np.zeros_like(p) for p in params]
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(params, grads, self.first_moment, self.second_moment):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_parameter_index: tuple[int, tuple[int, ...]]
    tolerance: float
    n_checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def finite_diff_gradcheck(
    loss_fn: Callable[[], tuple[float, list[np.ndarray]]],
    params: list[np.ndarray],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_coords_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
    exclude: Callable[[], bool] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn`` reads the (mutated in place) ``params`` and returns the loss and
    its analytic gradients in the same order. ``exclude`` is evaluated at each
    perturbed point; a True return drops that coordinate (kinks of piecewise
    losses).
    """
    _, analytic = loss_fn()
    analytic = [np.array(g, dtype=np.float64) for g in analytic]
    worst = 0.0
    worst_idx: tuple[int, tuple[int, ...]] = (0, ())
    checked = 0
    rng = rng or np.random.default_rng(0)
    for k, p in enumerate(params):
        coords = list(np.ndindex(p.shape))
        if max_coords_per_tensor is not None and len(coords) > max_coords_per_tensor:
            pick = rng.choice(len(coords), size=max_coords_per_tensor, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        for idx in coords:
            orig = p[idx]
            p[idx] = orig + step
            lp, _ = loss_fn()
            skip = exclude is not None and exclude()
            p[idx] = orig - step
            lm, _ = loss_fn()
            skip = skip or (exclude is not None and exclude())
            p[idx] = orig
            if skip:
                continue
            numeric = (lp - lm) / (2.0 * step)
            a = analytic[k][idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            if err > worst:
                worst, worst_idx = err, (k, tuple(int(i) for i in idx))
    return GradCheckReport(float(worst), worst_idx, tolerance, checked)
