"""Pluggable federated methods.

A strategy owns a list of server-side model *slots* (one global model for
FedAvg-like methods, one per cluster for HypCluster, one per mixture
component for FedEM) and four client-side hooks:

* ``broadcast_slots`` - which slots a selected client downloads,
* ``local_work``      - local training, returning the slots to upload,
* ``eval_components`` - the (model, weight) mixture a participating client predicts with,
* ``unseen_components`` - the same for a client that never took part.

Aggregation is shared: per slot, a data-size weighted average of the
uploads, optionally followed by a server SGD step (FedOpt) and with masked
groups (FedBN) left untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, ClassVar

import numpy as np

from pfsim.data import ClientData
from pfsim.models import ModelSpec, init_params
from pfsim.params import KeyMask, NamedParams, apply_masked_update
from pfsim.strategies.training import (
    ditto_round,
    fedem_local,
    hypcluster_assign,
    interpolate_personal,
    local_train,
    pfedme_local,
)

BASES = (
    "global_train",
    "isolated",
    "fedavg",
    "fedprox",
    "fedopt",
    "ditto",
    "pfedme",
    "hypcluster",
    "fedem",
)
DISPLAY = {
    "global_train": "Global-Train",
    "isolated": "Isolated",
    "fedavg": "FedAvg",
    "fedprox": "FedProx",
    "fedopt": "FedOpt",
    "ditto": "Ditto",
    "pfedme": "pFedMe",
    "hypcluster": "HypCluster",
    "fedem": "FedEM",
}
NON_FEDERATED = ("global_train", "isolated")


@dataclass(frozen=True)
class StrategyConfig:
    base: str = "fedavg"
    mask: tuple[str, ...] = ()  # parameter categories kept local, e.g. ("norm",)
    finetune_steps: int = 0
    finetune_lr: float | None = None  # defaults to the local lr
    server_lr: float | None = None  # set => FedOpt server step
    prox_mu: float = 0.01
    reg_lambda: float = 0.1
    mixture_K: int = 3
    pfedme_inner_steps: int = 3
    interp_w_g: float | None = None
    warmup_rounds: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "mask", tuple(self.mask))

    def violations(self) -> list[str]:
        errs = []
        if self.base not in REGISTRY:
            errs.append(f"strategy.base: unknown method {self.base!r} (choose from {', '.join(REGISTRY)})")
            return errs
        if self.finetune_steps < 0:
            errs.append("strategy.finetune_steps must be >= 0")
        if self.prox_mu < 0:
            errs.append("strategy.prox_mu must be >= 0")
        if self.reg_lambda < 0:
            errs.append("strategy.reg_lambda must be >= 0")
        if self.base == "pfedme" and not self.reg_lambda > 0:
            errs.append("strategy.reg_lambda must be > 0 for pfedme")
        if self.mixture_K < 1:
            errs.append("strategy.mixture_K must be >= 1")
        if self.pfedme_inner_steps < 1:
            errs.append("strategy.pfedme_inner_steps must be >= 1")
        if self.interp_w_g is not None and not 0 <= self.interp_w_g <= 1:
            errs.append("strategy.interp_w_g must lie in [0, 1]")
        if self.server_lr is not None and self.server_lr < 0:
            errs.append("strategy.server_lr must be >= 0")
        if self.warmup_rounds < 0:
            errs.append("strategy.warmup_rounds must be >= 0")
        # Combined variants: FedOpt composes with aggregating bases, FedBN masks
        # with bases that transmit parameters.
        if self.base in NON_FEDERATED and self.server_lr is not None:
            errs.append(
                f"strategy.server_lr: FedOpt composes only with aggregating methods, not {self.base}"
            )
        if self.base in NON_FEDERATED and self.mask:
            errs.append(
                f"strategy.mask: FedBN-style masking needs a method that transmits parameters, not {self.base}"
            )
        if self.base == "global_train" and self.finetune_steps:
            errs.append("strategy.finetune_steps: fine-tuning does not apply to global_train")
        if self.interp_w_g is not None and self.base not in ("ditto", "pfedme"):
            errs.append("strategy.interp_w_g applies only to methods with personal models (ditto, pfedme)")
        return errs

    @property
    def effective_server_lr(self) -> float | None:
        if self.base == "fedopt" and self.server_lr is None:
            return 1.0
        return self.server_lr

    def method_name(self) -> str:
        """Display name in the usual combined-variant style, e.g. ``Ditto-FedBN-FedOpt-FT``."""
        if self.base == "fedavg" and self.mask:
            parts = ["FedBN"]
        elif self.base == "fedopt" and self.mask:
            parts = ["FedBN", "FedOpt"]
        else:
            parts = [DISPLAY.get(self.base, self.base)]
            if self.mask:
                parts.append("FedBN")
        if self.server_lr is not None and self.base != "fedopt":
            parts.append("FedOpt")
        if self.finetune_steps:
            parts.append("FT")
        return "-".join(parts)


@dataclass
class ClientStrategyState:
    personal_params: NamedParams | None = None
    mixture_weights: np.ndarray | None = None
    cluster_id: int | None = None
    local_models: dict[int, NamedParams] = field(default_factory=dict)


@dataclass
class LocalContext:
    """Everything a client's local work may touch."""

    client: ClientData
    state: ClientStrategyState
    received: dict[int, NamedParams]
    round: int
    rng: Callable[[int], np.random.Generator]  # rng(stream_index)
    epochs: int
    lr: float
    batch_size: int


@dataclass
class LocalResult:
    uploads: dict[int, NamedParams]
    flops: int
    sample_passes: int


class Strategy:
    """Base class: a FedAvg-style method with one global slot."""

    name: ClassVar[str] = "fedavg"
    communicates: ClassVar[bool] = True
    evaluates_unseen: ClassVar[bool] = True

    def __init__(self, cfg: StrategyConfig, spec: ModelSpec) -> None:
        self.cfg = cfg
        self.spec = spec
        self._mask_cats = tuple(cfg.mask)

    # slots ------------------------------------------------------------------
    @property
    def n_slots(self) -> int:
        return 1

    def init_slots(self, seed: int) -> list[NamedParams]:
        return [init_params(self.spec, slot_seed(seed, k)) for k in range(self.n_slots)]

    def mask_for(self, params: NamedParams) -> KeyMask:
        return KeyMask.from_categories(params, self._mask_cats)

    def new_client_state(self, client: ClientData) -> ClientStrategyState:
        return ClientStrategyState()

    def broadcast_slots(self, state: ClientStrategyState) -> list[int]:
        return list(range(self.n_slots))

    def receive(
        self, state: ClientStrategyState, slot: int, incoming: NamedParams, init: NamedParams
    ) -> NamedParams:
        """What a client's model for ``slot`` looks like after a broadcast."""
        mask = self.mask_for(incoming)
        if not mask:
            return incoming
        return apply_masked_update(state.local_models.get(slot, init), incoming, mask)

    # client hooks -------------------------------------------------------------
    def local_work(self, ctx: LocalContext) -> LocalResult:
        params, flops, _ = local_train(
            self.spec, ctx.received[0], ctx.client.train, ctx.epochs, ctx.lr, ctx.batch_size, ctx.rng(0)
        )
        ctx.state.local_models[0] = params
        return LocalResult({0: params}, flops, ctx.epochs * ctx.client.n_train)

    def client_view(
        self, slots: list[NamedParams], state: ClientStrategyState, init: list[NamedParams]
    ) -> list[NamedParams]:
        return [self.receive(state, k, s, init[k]) for k, s in enumerate(slots)]

    def eval_components(
        self,
        slots: list[NamedParams],
        state: ClientStrategyState,
        client: ClientData,
        init: list[NamedParams],
    ) -> list[tuple[NamedParams, float]]:
        return [(self.client_view(slots, state, init)[0], 1.0)]

    def unseen_components(
        self, slots: list[NamedParams], client: ClientData, init: list[NamedParams]
    ) -> list[tuple[NamedParams, float]]:
        # A fresh client has only its initialization for masked groups.
        return self.eval_components(slots, self.new_client_state(client), client, init)

    def finetune(
        self,
        comps: list[tuple[NamedParams, float]],
        client: ClientData,
        rng: np.random.Generator,
        lr: float,
        batch_size: int,
    ) -> tuple[list[tuple[NamedParams, float]], int]:
        out, flops = [], 0
        for params, w in comps:
            tuned, f, _ = local_train(
                self.spec, params, client.train, self.cfg.finetune_steps, lr, batch_size, rng
            )
            out.append((tuned, w))
            flops += f
        return out, flops


class FedAvg(Strategy):
    name = "fedavg"


class FedOpt(Strategy):
    """FedAvg client side; the server SGD step is applied by the shared aggregator."""

    name = "fedopt"


class FedProx(Strategy):
    name = "fedprox"

    def local_work(self, ctx: LocalContext) -> LocalResult:
        start = ctx.received[0]
        params, flops, _ = local_train(
            self.spec,
            start,
            ctx.client.train,
            ctx.epochs,
            ctx.lr,
            ctx.batch_size,
            ctx.rng(0),
            ref=(start, self.cfg.prox_mu, "prox"),
        )
        ctx.state.local_models[0] = params
        return LocalResult({0: params}, flops, ctx.epochs * ctx.client.n_train)


class Isolated(Strategy):
    """Every client trains alone from the common initialization."""

    name = "isolated"
    communicates = False
    evaluates_unseen = False

    def local_work(self, ctx: LocalContext) -> LocalResult:
        start = ctx.state.personal_params if ctx.state.personal_params is not None else ctx.received[0]
        params, flops, _ = local_train(
            self.spec, start, ctx.client.train, ctx.epochs, ctx.lr, ctx.batch_size, ctx.rng(0)
        )
        ctx.state.personal_params = params
        return LocalResult({}, flops, ctx.epochs * ctx.client.n_train)

    def eval_components(self, slots, state, client, init):
        return [(state.personal_params if state.personal_params is not None else init[0], 1.0)]


class GlobalTrain(Strategy):
    """Centralized training on the pooled data of all participating clients."""

    name = "global_train"
    communicates = False
    evaluates_unseen = False


class Ditto(Strategy):
    name = "ditto"

    def _personal(self, state: ClientStrategyState, init: list[NamedParams]) -> NamedParams:
        return state.personal_params if state.personal_params is not None else init[0]

    def local_work(self, ctx: LocalContext) -> LocalResult:
        g = ctx.received[0]
        if ctx.state.personal_params is None:
            ctx.state.personal_params = g
        upload, personal, flops = ditto_round(
            self.spec,
            ctx.state.personal_params,
            g,
            ctx.client.train,
            ctx.epochs,
            ctx.lr,
            ctx.batch_size,
            self.cfg.reg_lambda,
            ctx.rng(0),
            ctx.rng(1),
        )
        ctx.state.personal_params = personal
        ctx.state.local_models[0] = upload
        return LocalResult({0: upload}, flops, 2 * ctx.epochs * ctx.client.n_train)

    def eval_components(self, slots, state, client, init):
        personal = self._personal(state, init)
        if self.cfg.interp_w_g is not None:
            g = self.client_view(slots, state, init)[0]
            personal = interpolate_personal(g, personal, self.cfg.interp_w_g)
        return [(personal, 1.0)]

    def unseen_components(self, slots, client, init):
        # A non-participating client never trained its personal model: it
        # predicts with the initialization, as the original method would.
        return [(init[0], 1.0)]


class PFedMe(Strategy):
    name = "pfedme"

    def local_work(self, ctx: LocalContext) -> LocalResult:
        upload, personal, flops = pfedme_local(
            self.spec,
            ctx.received[0],
            ctx.client.train,
            self.cfg.reg_lambda,
            self.cfg.pfedme_inner_steps,
            ctx.lr,
            ctx.lr,
            ctx.epochs,
            ctx.batch_size,
            ctx.rng(0),
        )
        ctx.state.personal_params = personal
        ctx.state.local_models[0] = upload
        passes = ctx.epochs * self.cfg.pfedme_inner_steps * ctx.client.n_train
        return LocalResult({0: upload}, flops, passes)

    def eval_components(self, slots, state, client, init):
        g = self.client_view(slots, state, init)[0]
        personal = state.personal_params if state.personal_params is not None else g
        if self.cfg.interp_w_g is not None:
            personal = interpolate_personal(g, personal, self.cfg.interp_w_g)
        return [(personal, 1.0)]

    def unseen_components(self, slots, client, init):
        return [(self.client_view(slots, self.new_client_state(client), init)[0], 1.0)]


class HypCluster(Strategy):
    name = "hypcluster"

    @property
    def n_slots(self) -> int:
        return self.cfg.mixture_K

    def local_work(self, ctx: LocalContext) -> LocalResult:
        models = [ctx.received[k] for k in range(self.n_slots)]
        if ctx.round <= self.cfg.warmup_rounds:
            cid = int(ctx.rng(2).integers(self.n_slots))
        else:
            cid = hypcluster_assign(self.spec, ctx.client.val, models, fallback=ctx.client.train)
        ctx.state.cluster_id = cid
        params, flops, _ = local_train(
            self.spec, models[cid], ctx.client.train, ctx.epochs, ctx.lr, ctx.batch_size, ctx.rng(0)
        )
        ctx.state.local_models[cid] = params
        return LocalResult({cid: params}, flops, ctx.epochs * ctx.client.n_train)

    def eval_components(self, slots, state, client, init):
        models = self.client_view(slots, state, init)
        cid = hypcluster_assign(self.spec, client.val, models, fallback=client.train)
        return [(models[cid], 1.0)]


class FedEM(Strategy):
    name = "fedem"

    @property
    def n_slots(self) -> int:
        return self.cfg.mixture_K

    def new_client_state(self, client: ClientData) -> ClientStrategyState:
        k = self.n_slots
        return ClientStrategyState(mixture_weights=np.full(k, 1.0 / k))

    def local_work(self, ctx: LocalContext) -> LocalResult:
        k = self.n_slots
        comps = [ctx.received[j] for j in range(k)]
        pi, updated, _, flops = fedem_local(
            self.spec,
            comps,
            ctx.state.mixture_weights,
            ctx.client.train,
            ctx.epochs,
            ctx.lr,
            ctx.batch_size,
            [ctx.rng(j) for j in range(k)],
        )
        ctx.state.mixture_weights = pi
        for j, params in enumerate(updated):
            ctx.state.local_models[j] = params
        return LocalResult(dict(enumerate(updated)), flops, k * ctx.epochs * ctx.client.n_train)

    def eval_components(self, slots, state, client, init):
        models = self.client_view(slots, state, init)
        pi = state.mixture_weights
        return [(m, float(w)) for m, w in zip(models, pi)]

    def finetune(self, comps, client, rng, lr, batch_size):
        params = [p for p, _ in comps]
        pi = np.array([w for _, w in comps])
        rngs = [rng] + [np.random.default_rng(rng.integers(2**63)) for _ in params[1:]]
        new_pi, tuned, _, flops = fedem_local(
            self.spec, params, pi, client.train, self.cfg.finetune_steps, lr, batch_size, rngs
        )
        return [(p, float(w)) for p, w in zip(tuned, new_pi)], flops


REGISTRY: dict[str, type[Strategy]] = {
    cls.name: cls
    for cls in (FedAvg, FedOpt, FedProx, Isolated, GlobalTrain, Ditto, PFedMe, HypCluster, FedEM)
}


def register(cls: type[Strategy]) -> type[Strategy]:
    """Class decorator adding a new method to the registry."""
    REGISTRY[cls.name] = cls
    return cls


def build_strategy(cfg: StrategyConfig, spec: ModelSpec) -> Strategy:
    try:
        cls = REGISTRY[cfg.base]
    except KeyError:
        raise ValueError(f"unknown strategy {cfg.base!r}") from None
    return cls(cfg, spec)


def slot_seed(seed: int, slot: int) -> int:
    """Initialization seed for server slot ``slot``; slot 0 is shared by all methods."""
    return int(np.random.SeedSequence([int(seed), 0x1417, int(slot)]).generate_state(1)[0])


def unseen_inference_policy(
    strategy: Strategy, slots: list[NamedParams], client: ClientData, init: list[NamedParams]
) -> list[tuple[NamedParams, float]]:
    """Models a non-participating client evaluates with (before any fine-tuning)."""
    if client.participates:
        raise ValueError("unseen_inference_policy expects a non-participating client")
    if not strategy.evaluates_unseen:
        raise ValueError(f"{strategy.name} does not evaluate unseen clients")
    return strategy.unseen_components(slots, client, init)


__all__ = [
    "BASES",
    "ClientStrategyState",
    "LocalContext",
    "LocalResult",
    "REGISTRY",
    "Strategy",
    "StrategyConfig",
    "build_strategy",
    "register",
    "slot_seed",
    "unseen_inference_policy",
]
