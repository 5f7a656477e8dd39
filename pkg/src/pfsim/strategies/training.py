"""Local optimization primitives shared by all strategies.

Everything here is a pure function of its arguments plus an explicit
``numpy.random.Generator``; nothing touches server or client state.
"""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np

from pfsim.data import DataSplit
from pfsim.metrics import flops_estimate
from pfsim.models import ModelSpec, check_layout, loss_and_grad, mixture_eval, sample_losses
from pfsim.params import NamedParams, NonFiniteError, check_compatible, linear_combine, weighted_average

logger = logging.getLogger(__name__)

REF_KINDS = ("prox", "ditto")


def _sgd_epochs(
    spec: ModelSpec,
    p: dict[str, np.ndarray],
    data: DataSplit,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    ref: dict[str, np.ndarray] | None = None,
    coeff: float = 0.0,
    sample_weight: np.ndarray | None = None,
) -> float:
    """In-place mini-batch SGD over ``p``; returns the last epoch's mean loss.

    With a reference point the squared-L2 pull ``coeff * (theta - ref)`` is
    taken semi-implicitly, ``theta' = (theta - lr*g + lr*coeff*ref) / (1 + lr*coeff)``,
    which stays stable for arbitrarily large ``coeff``.
    """
    x, y = data.features, data.labels
    n = y.shape[0]
    use_ref = ref is not None and coeff != 0.0
    denom = 1.0 + lr * coeff
    epoch_loss = 0.0
    for _ in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            w = None if sample_weight is None else sample_weight[idx]
            loss, grads, _ = loss_and_grad(spec, p, x[idx], y[idx], w)
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite training loss ({loss})")
            total += loss * idx.size
            for k, g in grads.items():
                if use_ref:
                    p[k] = (p[k] - lr * g + (lr * coeff) * ref[k]) / denom
                else:
                    p[k] = p[k] - lr * g
        epoch_loss = total / n
    return epoch_loss


def local_train(
    spec: ModelSpec,
    params: NamedParams,
    data: DataSplit,
    steps: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    ref: tuple[NamedParams, float, str] | None = None,
    sample_weight: np.ndarray | None = None,
) -> tuple[NamedParams, int, float]:
    """Run ``steps`` epochs of mini-batch SGD.

    Args:
        ref: optional ``(theta_ref, coeff, kind)`` adding the regularizer
            ``coeff/2 * ||theta - theta_ref||^2`` (FedProx or Ditto).
        sample_weight: optional per-sample loss weights (FedEM M-step).

    Returns:
        Updated parameters, training FLOPs and the final epoch's mean loss.
    """
    check_layout(spec, params)
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if len(data) == 0:
        raise ValueError("cannot train on an empty split")
    ref_groups, coeff = None, 0.0
    if ref is not None:
        ref_params, coeff, kind = ref
        if kind not in REF_KINDS:
            raise ValueError(f"unknown regularizer kind {kind!r}")
        check_compatible(params, ref_params)
        ref_groups = dict(ref_params)
    if sample_weight is not None:
        sample_weight = np.asarray(sample_weight, dtype=np.float64)
        if sample_weight.shape != (len(data),):
            raise ValueError("sample_weight must have one entry per sample")
    p = params.to_dict()
    loss = _sgd_epochs(spec, p, data, steps, lr, batch_size, rng, ref_groups, coeff, sample_weight)
    flops = flops_estimate(spec, steps * len(data), "training")
    return NamedParams(p, params.categories), flops, loss


def finetune_before_eval(
    spec: ModelSpec,
    params: NamedParams,
    train: DataSplit,
    ft_steps: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[NamedParams, int]:
    """Locally fine-tuned copy of ``params``; the input is left untouched."""
    if ft_steps < 1:
        raise ValueError("ft_steps must be >= 1")
    tuned, flops, _ = local_train(spec, params, train, ft_steps, lr, batch_size, rng)
    return tuned, flops


def fedavg_aggregate(updates: Sequence[tuple[NamedParams, int]]) -> NamedParams:
    """Average client models weighted by their training-set sizes."""
    return weighted_average([(p, float(n)) for p, n in updates])


def fedopt_server_step(global_params: NamedParams, aggregated: NamedParams, server_lr: float) -> NamedParams:
    """Server SGD on the pseudo-gradient ``global - aggregated``.

    Written as ``(1 - lr) * global + lr * aggregated`` so lr=1 and lr=0 give
    the aggregate and the old global exactly.
    """
    return linear_combine(1.0 - server_lr, global_params, server_lr, aggregated)


def interpolate_personal(global_params: NamedParams, local: NamedParams, w_g: float) -> NamedParams:
    if not 0.0 <= w_g <= 1.0:
        raise ValueError("w_g must lie in [0, 1]")
    return linear_combine(w_g, global_params, 1.0 - w_g, local)


def ditto_round(
    spec: ModelSpec,
    personal: NamedParams,
    global_in: NamedParams,
    data: DataSplit,
    steps: int,
    lr: float,
    batch_size: int,
    reg_lambda: float,
    rng_global: np.random.Generator,
    rng_personal: np.random.Generator,
) -> tuple[NamedParams, NamedParams, int]:
    """One Ditto client round: a plain global branch and a regularized personal branch.

    Only the first return value is meant for upload.
    """
    global_update, f1, _ = local_train(spec, global_in, data, steps, lr, batch_size, rng_global)
    new_personal, f2, _ = local_train(
        spec, personal, data, steps, lr, batch_size, rng_personal, ref=(global_in, reg_lambda, "ditto")
    )
    return global_update, new_personal, f1 + f2


def prox_solve(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    theta0: np.ndarray,
    anchor: np.ndarray,
    lam: float,
    steps: int,
    lr: float,
) -> np.ndarray:
    """Approximate ``argmin f(theta) + lam/2 ||theta - anchor||^2`` by gradient steps."""
    theta = np.array(theta0, dtype=np.float64)
    for _ in range(steps):
        theta = theta - lr * (grad_fn(theta) + lam * (theta - anchor))
    return theta


def pfedme_local(
    spec: ModelSpec,
    global_in: NamedParams,
    data: DataSplit,
    reg_lambda: float,
    inner_steps: int,
    lr: float,
    personal_lr: float,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[NamedParams, NamedParams, int]:
    """pFedMe client update via the Moreau envelope.

    For every mini-batch the personalized model is moved ``inner_steps``
    gradient steps towards the prox point of the batch loss around the local
    copy ``w``, after which ``w <- w - lr * lam * (w - theta_hat)``.

    Returns ``(w to upload, theta_hat, flops)``.
    """
    if not reg_lambda > 0:
        raise ValueError("pFedMe needs reg_lambda > 0")
    if inner_steps < 1:
        raise ValueError("inner_steps must be >= 1")
    check_layout(spec, global_in)
    w = global_in.to_dict()
    theta = global_in.to_dict()
    x, y = data.features, data.labels
    n = y.shape[0]
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            xb, yb = x[idx], y[idx]
            for _ in range(inner_steps):
                loss, grads, _ = loss_and_grad(spec, theta, xb, yb)
                if not np.isfinite(loss):
                    raise NonFiniteError(f"non-finite pFedMe inner loss ({loss})")
                for k in theta:
                    theta[k] = theta[k] - personal_lr * (grads[k] + reg_lambda * (theta[k] - w[k]))
            for k in w:
                w[k] = w[k] - lr * reg_lambda * (w[k] - theta[k])
    cats = global_in.categories
    flops = flops_estimate(spec, epochs * inner_steps * n, "training")
    return NamedParams(w, cats), NamedParams(theta, cats), flops


def responsibilities(
    spec: ModelSpec, components: Sequence[NamedParams], pi: np.ndarray, data: DataSplit
) -> np.ndarray:
    """E-step: ``q[i, k] ∝ pi_k * exp(-loss_k(x_i, y_i))``, normalized per sample."""
    losses = np.stack(
        [sample_losses(spec, c, data.features, data.labels) for c in components], axis=1
    )
    with np.errstate(divide="ignore"):
        logq = np.log(pi)[None, :] - losses
    logq -= logq.max(axis=1, keepdims=True)
    q = np.exp(logq)
    return q / q.sum(axis=1, keepdims=True)


def fedem_local(
    spec: ModelSpec,
    components: Sequence[NamedParams],
    pi: np.ndarray,
    data: DataSplit,
    epochs: int,
    lr: float,
    batch_size: int,
    rngs: Sequence[np.random.Generator],
) -> tuple[np.ndarray, list[NamedParams], np.ndarray, int]:
    """One EM round on a client: E-step, mixture-weight update, weighted M-step.

    With a single component the responsibilities are identically one and the
    M-step is ordinary SGD, so the round coincides with a FedAvg client step.
    """
    k = len(components)
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (k,):
        raise ValueError(f"mixture has {k} components but {pi.size} weights")
    if len(rngs) != k:
        raise ValueError("need one rng per component")
    n = len(data)
    flops = 0
    if k == 1:
        q = np.ones((n, 1))
        new_pi = np.ones(1)
        weights = [None]
    else:
        q = responsibilities(spec, components, pi, data)
        new_pi = q.mean(axis=0)
        weights = [q[:, j] for j in range(k)]
        flops += flops_estimate(spec, k * n, "inference")
    updated = []
    for comp, w, rng in zip(components, weights, rngs):
        new, f, _ = local_train(spec, comp, data, epochs, lr, batch_size, rng, sample_weight=w)
        updated.append(new)
        flops += f
    return new_pi, updated, q, flops


def choose_cluster(scores: Sequence[float]) -> int:
    """Index of the best score; ties go to the lowest index."""
    return int(np.argmax(np.asarray(scores, dtype=np.float64)))


def hypcluster_assign(
    spec: ModelSpec,
    client_val: DataSplit,
    cluster_models: Sequence[NamedParams],
    fallback: DataSplit | None = None,
) -> int:
    """Pick the cluster model with the best validation accuracy."""
    if not cluster_models:
        raise ValueError("need at least one cluster model")
    data = client_val
    if len(data) == 0:
        if fallback is None or len(fallback) == 0:
            raise ValueError("client has neither validation nor training data")
        logger.warning("empty validation split; assigning cluster on the training split")
        data = fallback
    scores = [mixture_eval(spec, [(m, 1.0)], data.features, data.labels)[0] / len(data) for m in cluster_models]
    return choose_cluster(scores)
