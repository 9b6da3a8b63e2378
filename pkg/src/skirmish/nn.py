"""Small fully-connected networks with hand-written gradients.

float64 end to end.  Parameters live in plain numpy arrays inside explicit
containers, so target-network copies, checkpointing and hashing stay
trivial; forward and backward are pure functions of (net, input).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


class ShapeMismatch(ValueError):
    pass


@dataclass
class Mlp:
    """Affine layers with rectified-linear hidden units and a linear head."""

    widths: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def clone(self) -> "Mlp":
        return Mlp(self.widths, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def copy_from(self, other: "Mlp") -> None:
        for dst, src in zip(self.params(), other.params()):
            np.copyto(dst, src)


def init_params(widths: tuple[int, ...] | list[int], seed: int) -> Mlp:
    """He-style initialisation: N(0, 2/fan_in) weights, zero biases."""
    if len(widths) < 2:
        raise ShapeMismatch("need at least an input and an output width")
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        std = np.sqrt(2.0 / fan_in)
        weights.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(tuple(widths), weights, biases)


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a single input or a batch of rows."""
    y, _ = forward_trace(net, x)
    return y


def forward_trace(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass that also returns per-layer pre-activations for backward."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    a = x[None, :] if squeeze else x
    if a.shape[-1] != net.widths[0]:
        raise ShapeMismatch(f"input width {a.shape[-1]} != {net.widths[0]}")
    trace = [a]
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        trace.append(z)
        a = z if l == last else np.maximum(z, 0.0)
        if l != last:
            trace.append(a)
    y = a[0] if squeeze else a
    return y, trace


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    wrt_input: np.ndarray

    def params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def backward(net: Mlp, x: np.ndarray, output_gradient: np.ndarray) -> Gradients:
    """Exact reverse-mode gradients of ``sum(forward(net, x) * output_gradient)``.

    Batched inputs accumulate over rows, matching a sum-reduced loss.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    _, trace = forward_trace(net, x)
    g = np.asarray(output_gradient, dtype=float)
    if squeeze:
        g = g[None, :]
    if g.shape[-1] != net.widths[-1]:
        raise ShapeMismatch(f"output gradient width {g.shape[-1]} != {net.widths[-1]}")
    n_layers = len(net.weights)
    gw: list[np.ndarray | None] = [None] * n_layers
    gb: list[np.ndarray | None] = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        a_in = trace[2 * l]
        z = trace[2 * l + 1]
        if l != n_layers - 1:
            g = g * (z > 0.0)
        gw[l] = g.T @ a_in
        gb[l] = g.sum(axis=0)
        g = g @ net.weights[l]
    wrt_input = g[0] if squeeze else g
    return Gradients(gw, gb, wrt_input)


@dataclass
class OptimState:
    """Adam accumulators for an explicit list of parameter arrays."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float) -> "OptimState":
        return cls(lr=lr, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimState) -> OptimState:
    """One bias-corrected adaptive-moment update, in place on ``params``."""
    if len(params) != len(state.m):
        raise ShapeMismatch("optimizer state does not match the parameter list")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_diff_check(net: Mlp, x: np.ndarray, tolerance: float, h: float = 1e-4) -> GradCheckReport:
    """Compare backward against central differences over every parameter.

    Uses the scalar loss ``0.5 * sum(y^2)``, whose output gradient is the
    forward value itself.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    x = np.asarray(x, dtype=float)

    def loss() -> float:
        y = forward(net, x)
        return 0.5 * float(np.sum(y * y))

    analytic = backward(net, x, forward(net, x)).params()
    worst = 0.0
    for p, g in zip(net.params(), analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + h
            hi = loss()
            flat[k] = keep - h
            lo = loss()
            flat[k] = keep
            numeric = (hi - lo) / (2.0 * h)
            err = abs(numeric - gflat[k]) / max(abs(numeric), abs(gflat[k]), 1.0)
            if err > worst:
                worst = err
    return GradCheckReport(max_rel_error=worst, tolerance=tolerance)


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path, net: Mlp, opt: OptimState | None = None, meta: dict | None = None) -> None:
    """Write widths, parameters, optimizer state and metadata to one .npz."""
    arrays: dict[str, np.ndarray] = {
        "format_version": np.array([1], dtype=np.int64),
        "widths": np.array(net.widths, dtype=np.int64),
    }
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"w{l}"] = w
        arrays[f"b{l}"] = b
    if opt is not None:
        arrays["opt_scalars"] = np.array([opt.lr, opt.beta1, opt.beta2, opt.eps, float(opt.step)])
        for k, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays[f"opt_m{k}"] = m
            arrays[f"opt_v{k}"] = v
    meta_json = json.dumps(meta or {}, sort_keys=True)
    arrays["meta"] = np.frombuffer(meta_json.encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[Mlp, OptimState | None, dict]:
    """Bit-exact inverse of :func:`save_checkpoint`."""
    with np.load(path) as data:
        widths = tuple(int(w) for w in data["widths"])
        n_layers = len(widths) - 1
        net = Mlp(widths, [data[f"w{l}"] for l in range(n_layers)], [data[f"b{l}"] for l in range(n_layers)])
        opt = None
        if "opt_scalars" in data:
            lr, b1, b2, eps, step = data["opt_scalars"]
            n_opt = sum(1 for k in data.files if k.startswith("opt_m"))
            opt = OptimState(
                lr=float(lr), beta1=float(b1), beta2=float(b2), eps=float(eps), step=int(step),
                m=[data[f"opt_m{k}"] for k in range(n_opt)],
                v=[data[f"opt_v{k}"] for k in range(n_opt)],
            )
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
    return net, opt, meta


def params_hash(arrays: list[np.ndarray]) -> str:
    """Content hash of a parameter list, independent of file encoding."""
    digest = hashlib.sha256()
    for i, a in enumerate(arrays):
        a = np.ascontiguousarray(a)
        digest.update(f"{i}:{a.dtype.str}:{a.shape}".encode())
        digest.update(a.tobytes())
    return digest.hexdigest()
