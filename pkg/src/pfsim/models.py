"""Tiny differentiable reference models with hand-written backward passes.

Two model kinds are supported: multinomial logistic regression and a tanh
MLP whose hidden layers may carry a per-sample normalization (scale/shift
groups tagged ``norm``). Parameter group names sort in layer order, e.g.
``fc0.W, fc0.b, fc1.W, fc1.b, norm0.scale, norm0.shift``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pfsim.params import NamedParams, ShapeMismatchError, check_compatible

NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "logistic_regression"
    input_dim: int = 2
    n_classes: int = 2
    hidden_dims: tuple[int, ...] = field(default_factory=tuple)
    use_norm_layers: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.kind not in ("logistic_regression", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.kind == "logistic_regression" and (self.hidden_dims or self.use_norm_layers):
            raise ValueError("logistic_regression takes no hidden layers or norm layers")
        if self.kind == "mlp" and not self.hidden_dims:
            raise ValueError("mlp needs at least one hidden layer")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden dims must be >= 1")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.n_classes]

    def layout(self) -> dict[str, tuple[int, str]]:
        """Map of group name to (length, category)."""
        if self.kind == "logistic_regression":
            return {
                "W": (self.input_dim * self.n_classes, "dense"),
                "b": (self.n_classes, "dense"),
            }
        dims = self.layer_dims
        out: dict[str, tuple[int, str]] = {}
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            out[f"fc{i}.W"] = (d_in * d_out, "dense")
            out[f"fc{i}.b"] = (d_out, "dense")
            if self.use_norm_layers and i < len(dims) - 2:
                out[f"norm{i}.scale"] = (d_out, "norm")
                out[f"norm{i}.shift"] = (d_out, "norm")
        return out

    def n_params(self) -> int:
        return sum(n for n, _ in self.layout().values())

    def categories(self) -> dict[str, str]:
        return {k: c for k, (_, c) in self.layout().items()}


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"row count mismatch: {x.shape[0]} features vs {y.shape[0]} labels")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def init_params(spec: ModelSpec, seed: int) -> NamedParams:
    """Scaled-uniform fan-in initialization; norm scales 1, shifts 0."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1A17]))
    groups: dict[str, np.ndarray] = {}
    dims = spec.layer_dims
    pairs = list(zip(dims[:-1], dims[1:]))
    for i, (d_in, d_out) in enumerate(pairs):
        bound = 1.0 / np.sqrt(d_in)
        w = rng.uniform(-bound, bound, size=d_in * d_out)
        if spec.kind == "logistic_regression":
            groups["W"], groups["b"] = w, np.zeros(d_out)
        else:
            groups[f"fc{i}.W"], groups[f"fc{i}.b"] = w, np.zeros(d_out)
            if spec.use_norm_layers and i < len(pairs) - 1:
                groups[f"norm{i}.scale"] = np.ones(d_out)
                groups[f"norm{i}.shift"] = np.zeros(d_out)
    return NamedParams(groups, spec.categories())


def check_layout(spec: ModelSpec, params: NamedParams) -> None:
    layout = spec.layout()
    if sorted(layout) != list(params):
        raise ShapeMismatchError(
            f"params groups {list(params)} do not match model layout {sorted(layout)}"
        )
    for name, (n, cat) in layout.items():
        if params[name].size != n or params.category(name) != cat:
            raise ShapeMismatchError(f"group {name!r} does not match model layout", group=name)


# Core numerics on plain dicts -----------------------------------------------
def _dense(spec: ModelSpec, p, i: int):
    dims = spec.layer_dims
    if spec.kind == "logistic_regression":
        return p["W"].reshape(dims[0], dims[1]), p["b"]
    return p[f"fc{i}.W"].reshape(dims[i], dims[i + 1]), p[f"fc{i}.b"]


def _forward(spec: ModelSpec, p, x: np.ndarray):
    """Logits plus the cache needed by the backward pass."""
    n_layers = len(spec.layer_dims) - 1
    cache = []
    h = x
    for i in range(n_layers - 1):
        W, b = _dense(spec, p, i)
        z = h @ W + b
        entry = {"h_in": h}
        if spec.use_norm_layers:
            mu = z.mean(axis=1, keepdims=True)
            inv = 1.0 / np.sqrt(z.var(axis=1, keepdims=True) + NORM_EPS)
            u = (z - mu) * inv
            entry.update(u=u, inv=inv)
            z = u * p[f"norm{i}.scale"] + p[f"norm{i}.shift"]
        h = np.tanh(z)
        entry["a"] = h
        cache.append(entry)
    W, b = _dense(spec, p, n_layers - 1)
    return h @ W + b, cache, h


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_probs(spec: ModelSpec, p, x: np.ndarray) -> np.ndarray:
    logits, _, _ = _forward(spec, p, x)
    return _log_softmax(logits)


def sample_losses(spec: ModelSpec, p, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy."""
    lp = log_probs(spec, p, x)
    return -lp[np.arange(y.shape[0]), y]


def loss_and_grad(spec: ModelSpec, p, x: np.ndarray, y: np.ndarray, sample_weight=None):
    """Mean (optionally per-sample weighted) cross-entropy and its gradient.

    With weights ``w`` the objective is ``sum(w_i * l_i) / n``; ``None`` means
    all ones. Returns ``(loss, grads, n_correct)``.
    """
    n = y.shape[0]
    logits, cache, h_last = _forward(spec, p, x)
    lp = _log_softmax(logits)
    rows = np.arange(n)
    nll = -lp[rows, y]
    dlogits = np.exp(lp)
    dlogits[rows, y] -= 1.0
    if sample_weight is None:
        loss = nll.sum() / n
        dlogits = dlogits / n
    else:
        loss = (sample_weight * nll).sum() / n
        dlogits = dlogits * (sample_weight / n)[:, None]
    n_correct = int(np.sum(np.argmax(logits, axis=1) == y))

    grads: dict[str, np.ndarray] = {}
    n_layers = len(spec.layer_dims) - 1
    if spec.kind == "logistic_regression":
        grads["W"] = (x.T @ dlogits).reshape(-1)
        grads["b"] = dlogits.sum(axis=0)
        return float(loss), grads, n_correct

    last = n_layers - 1
    W, _ = _dense(spec, p, last)
    grads[f"fc{last}.W"] = (h_last.T @ dlogits).reshape(-1)
    grads[f"fc{last}.b"] = dlogits.sum(axis=0)
    delta = dlogits @ W.T
    for i in range(n_layers - 2, -1, -1):
        entry = cache[i]
        dz = delta * (1.0 - entry["a"] ** 2)
        if spec.use_norm_layers:
            u, inv = entry["u"], entry["inv"]
            grads[f"norm{i}.scale"] = (dz * u).sum(axis=0)
            grads[f"norm{i}.shift"] = dz.sum(axis=0)
            du = dz * p[f"norm{i}.scale"]
            dz = inv * (du - du.mean(axis=1, keepdims=True) - u * (du * u).mean(axis=1, keepdims=True))
        W, _ = _dense(spec, p, i)
        grads[f"fc{i}.W"] = (entry["h_in"].T @ dz).reshape(-1)
        grads[f"fc{i}.b"] = dz.sum(axis=0)
        if i > 0:
            delta = dz @ W.T
    return float(loss), grads, n_correct


# Public API on NamedParams ------------------------------------------------------
def forward_loss_grad(
    spec: ModelSpec, params: NamedParams, batch: Batch
) -> tuple[float, NamedParams, int]:
    """Mean cross-entropy, its gradient and the number of correct argmax predictions."""
    check_layout(spec, params)
    if len(batch) == 0:
        raise ValueError("empty batch")
    loss, grads, n_correct = loss_and_grad(spec, params, batch.features, batch.labels)
    return loss, NamedParams(grads, params.categories), n_correct


def regularized_loss_grad(
    spec: ModelSpec,
    params: NamedParams,
    batch: Batch,
    ref: NamedParams | None = None,
    coeff: float = 0.0,
) -> tuple[float, NamedParams]:
    """``f(theta) + coeff/2 * ||theta - ref||^2`` and its gradient."""
    loss, grads, _ = forward_loss_grad(spec, params, batch)
    if ref is None or coeff == 0.0:
        return loss, grads
    check_compatible(params, ref)
    out = {}
    for k in params:
        d = params[k] - ref[k]
        loss += 0.5 * coeff * float(d @ d)
        out[k] = grads[k] + coeff * d
    return loss, NamedParams(out, params.categories)


def predict_proba(spec: ModelSpec, params, x: np.ndarray) -> np.ndarray:
    return np.exp(log_probs(spec, params, x))


def mixture_eval(
    spec: ModelSpec,
    components: list[tuple[NamedParams, float]],
    x: np.ndarray,
    y: np.ndarray,
) -> tuple[int, float]:
    """Correct count and summed NLL of a weighted mixture of class probabilities.

    A single component with weight 1 reduces exactly to the plain model.
    """
    if y.shape[0] == 0:
        return 0, 0.0
    if len(components) == 1:
        lp = log_probs(spec, components[0][0], x)
    else:
        probs = None
        for params, w in components:
            term = w * predict_proba(spec, params, x)
            probs = term if probs is None else probs + term
        lp = np.log(np.maximum(probs, 1e-300))
    pred = np.argmax(lp, axis=1)
    nll = -lp[np.arange(y.shape[0]), y]
    return int(np.sum(pred == y)), float(nll.sum())
