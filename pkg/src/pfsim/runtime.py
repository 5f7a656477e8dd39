"""Deterministic discrete-event round loop.

Each round the server samples participants, broadcasts the slots each
client needs, runs the strategy's local work, schedules the uploads on a
virtual clock, aggregates the earliest ``s_agg`` fraction and evaluates
every client. All randomness comes from per-(purpose, client, round)
streams so the outcome does not depend on execution order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from pfsim.data import ClientData, DataSplit, DeviceProfile, DeviceShare
from pfsim.metrics import EvalReport, FairnessReport, fairness_report, flops_estimate, weighted_accuracy
from pfsim.models import ModelSpec, mixture_eval
from pfsim.params import KeyMask, NamedParams, apply_masked_update, l2_norm, weighted_average
from pfsim.privacy import DpConfig, clip_update, noise_update
from pfsim.strategies.methods import LocalContext, StrategyConfig, build_strategy
from pfsim.strategies.training import fedopt_server_step

logger = logging.getLogger(__name__)

EVENT_SCHEMA = "pfsim.events/1"
RESULT_SCHEMA = "pfsim.result/1"
SERVER = -1

# RNG stream purposes
SAMPLE, TRAIN, FINETUNE, NOISE = 1, 2, 3, 4


class RunError(RuntimeError):
    """A strategy or model failure, annotated with where it happened."""


@dataclass(frozen=True)
class RuntimeConfig:
    total_rounds: int = 100
    sample_rate: float = 1.0
    patience: int = 20
    local_steps: int = 1
    batch_size: int = 32
    lr: float = 0.1
    seed: int = 0
    hetero_device: bool = False
    s_agg: float = 1.0
    device_default: DeviceProfile = field(default_factory=DeviceProfile)
    device_mix: tuple[DeviceShare, ...] = ()  # applied to clients when the dataset is built

    def violations(self) -> list[str]:
        errs = []
        if self.total_rounds < 1:
            errs.append("runtime.total_rounds must be >= 1")
        if not 0 < self.sample_rate <= 1:
            errs.append("runtime.sample_rate must lie in (0, 1]")
        if self.patience < 1:
            errs.append("runtime.patience must be >= 1")
        if self.local_steps < 1:
            errs.append("runtime.local_steps must be >= 1")
        if self.batch_size < 1:
            errs.append("runtime.batch_size must be >= 1")
        if not self.lr >= 0:
            errs.append("runtime.lr must be >= 0")
        if not 0 < self.s_agg <= 1:
            errs.append("runtime.s_agg must lie in (0, 1]")
        if sum(s.fraction for s in self.device_mix) > 1 + 1e-9:
            errs.append("runtime.device_mix fractions must sum to at most 1")
        if self.s_agg != 1.0 and not self.hetero_device:
            errs.append("runtime.s_agg requires runtime.hetero_device: true")
        return errs


def rng_stream(seed: int, purpose: int, client: int, rnd: int, k: int = 0) -> np.random.Generator:
    """Independent generator keyed by (seed, purpose, client, round, k)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), purpose, client + 1, rnd, k]))


# ---------------------------------------------------------------------------
# scheduling primitives


def sample_count(n: int, rate: float) -> int:
    return max(1, int(math.floor(rate * n + 0.5)))


def sample_clients(participant_ids: Sequence[int], rate: float, rng: np.random.Generator) -> list[int]:
    """``max(1, round(rate*n))`` distinct ids drawn uniformly without replacement, sorted."""
    ids = sorted(participant_ids)
    if not ids:
        raise ValueError("no participating clients to sample from")
    if not 0 < rate <= 1:
        raise ValueError("rate must lie in (0, 1]")
    k = sample_count(len(ids), rate)
    if k == len(ids):
        return ids
    return sorted(int(i) for i in rng.choice(ids, size=k, replace=False))


def _per_client(value, cid):
    return value[cid] if isinstance(value, Mapping) else value


def virtual_schedule(
    selected: Sequence[int],
    broadcast_time: float,
    payload_down: int | Mapping[int, int],
    payload_up: int | Mapping[int, int],
    work: float | Mapping[int, float],
    profiles: DeviceProfile | Mapping[int, DeviceProfile],
) -> list[tuple[int, float]]:
    """Arrival times ``t0 + down/bw + work/speed + up/bw``, sorted by (time, id)."""
    out = []
    for cid in selected:
        dev = _per_client(profiles, cid)
        t = (
            broadcast_time
            + _per_client(payload_down, cid) / dev.bandwidth
            + _per_client(work, cid) / dev.compute_speed
            + _per_client(payload_up, cid) / dev.bandwidth
        )
        out.append((cid, t))
    out.sort(key=lambda a: (a[1], a[0]))
    return out


def overselect_gate(
    arrivals: Sequence[tuple[int, float]], s_agg: float
) -> tuple[list[int], list[int], float]:
    """Keep the ``ceil(s_agg*n)`` earliest arrivals; returns (used, dropped, gate_time)."""
    if not arrivals:
        raise ValueError("no arrivals")
    if not 0 < s_agg <= 1:
        raise ValueError("s_agg must lie in (0, 1]")
    ordered = sorted(arrivals, key=lambda a: (a[1], a[0]))
    # the epsilon keeps 0.8*25 = 20.000000000000004 from rounding up to 21
    k = min(len(ordered), max(1, math.ceil(s_agg * len(ordered) - 1e-9)))
    used = [c for c, _ in ordered[:k]]
    dropped = [c for c, _ in ordered[k:]]
    return used, dropped, max(t for _, t in ordered[:k])


def early_stop_check(history: Sequence[float], patience: int, mode: str = "max") -> bool:
    """True once ``patience`` evaluations have passed since the (first) best one."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if mode not in ("max", "min"):
        raise ValueError("mode must be 'max' or 'min'")
    if len(history) <= patience:
        return False
    h = np.asarray(history, dtype=np.float64)
    best = int(np.argmax(h) if mode == "max" else np.argmin(h))
    return len(h) - 1 - best >= patience


# ---------------------------------------------------------------------------
# results


@dataclass
class RoundRecord:
    round: int
    val_acc: float
    test: FairnessReport
    clients: list[EvalReport]
    n_selected: int
    n_used: int
    n_dropped: int
    flops: int
    comm_bytes: int

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "val_acc": self.val_acc,
            "test": self.test.to_dict(),
            "clients": [r.to_dict() for r in self.clients],
            "n_selected": self.n_selected,
            "n_used": self.n_used,
            "n_dropped": self.n_dropped,
            "flops": self.flops,
            "comm_bytes": self.comm_bytes,
        }


@dataclass
class RunResult:
    method: str
    seed: int
    rounds: list[RoundRecord]
    best_round: int
    convergence_round: int
    rounds_run: int
    total_flops: int
    comm_bytes: int
    dropped: list[tuple[int, int]]  # (round, client)
    trained_clients: list[int]
    dp_sigma: float | None
    final_models: dict[int, list[tuple[NamedParams, float]]] = field(repr=False, default_factory=dict)
    messages: list[dict] = field(repr=False, default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def best(self) -> RoundRecord:
        return self.rounds[self.best_round - 1]

    @property
    def final(self) -> FairnessReport:
        return self.best.test

    def model_digests(self) -> dict[str, str]:
        out = {}
        for cid, comps in sorted(self.final_models.items()):
            h = hashlib.sha256()
            for params, w in comps:
                h.update(params.to_bytes())
                h.update(np.float64(w).tobytes())
            out[str(cid)] = h.hexdigest()
        return out

    def to_dict(self, include_meta: bool = True) -> dict:
        d: dict[str, Any] = {
            "schema": RESULT_SCHEMA,
            "seed": self.seed,
            "rounds": [r.to_dict() for r in self.rounds],
            "best_round": self.best_round,
            "convergence_round": self.convergence_round,
            "rounds_run": self.rounds_run,
            "total_flops": self.total_flops,
            "comm_bytes": self.comm_bytes,
            "dropped": [list(x) for x in self.dropped],
            "trained_clients": self.trained_clients,
            "dp_sigma": self.dp_sigma,
            "final": self.final.to_dict(),
            "final_val_acc": self.best.val_acc,
            "model_digests": self.model_digests(),
        }
        if include_meta:
            d["method"] = self.method
            d["meta"] = self.meta
        return d

    def to_json(self, include_meta: bool = True) -> str:
        return json.dumps(self.to_dict(include_meta), sort_keys=True, indent=1)


class EventLog:
    """JSON-lines sink; also keeps the records in memory."""

    def __init__(self, path: str | Path | None, header: dict) -> None:
        self.records: list[dict] = []
        self._fh = open(path, "w", encoding="utf-8") if path is not None else None
        self._write({"schema": EVENT_SCHEMA, **header}, keep=False)

    def _write(self, rec: dict, keep: bool = True) -> None:
        if keep:
            self.records.append(rec)
        if self._fh is not None:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def message(self, kind: str, rnd: int, sender: int, receiver: int, payload_bytes: int, t: float, **extra) -> None:
        self._write(
            {
                "kind": kind,
                "round": rnd,
                "sender": sender,
                "receiver": receiver,
                "payload_bytes": int(payload_bytes),
                "virtual_time": float(t),
                **extra,
            }
        )

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def recount_bytes(messages: Sequence[dict]) -> int:
    """Sum of payload bytes over every broadcast and update message."""
    return sum(m["payload_bytes"] for m in messages if m["kind"] in ("broadcast", "update"))


# ---------------------------------------------------------------------------
# the loop


def _privatize(
    upload: NamedParams,
    received: NamedParams,
    mask: KeyMask,
    dp: DpConfig,
    sigma: float,
    rng: np.random.Generator,
) -> tuple[NamedParams, float]:
    sent = [g for g in upload if g not in mask]
    cats = upload.categories
    delta = NamedParams({g: upload[g] - received[g] for g in sent}, {g: cats[g] for g in sent})
    clipped = clip_update(delta, dp.clip_norm)
    norm = l2_norm(clipped)
    noisy = noise_update(clipped, sigma, rng)
    return upload.replace({g: received[g] + noisy[g] for g in sent}), norm


def _evaluate(
    spec: ModelSpec, comps: list[tuple[NamedParams, float]], client: ClientData
) -> tuple[EvalReport, EvalReport]:
    out = []
    for split in (client.val, client.test):
        correct, nll = mixture_eval(spec, comps, split.features, split.labels)
        n = len(split)
        out.append(EvalReport(client.id, n, correct, nll / n if n else 0.0, client.participates))
    return out[0], out[1]


def run_federated(
    clients: Sequence[ClientData],
    spec: ModelSpec,
    strategy_cfg: StrategyConfig,
    runtime: RuntimeConfig,
    dp: DpConfig | None = None,
    event_log: str | Path | None = None,
    meta: dict | None = None,
) -> RunResult:
    errs = runtime.violations() + strategy_cfg.violations()
    if errs:
        raise ValueError("; ".join(errs))
    dp = dp or DpConfig()
    strategy = build_strategy(strategy_cfg, spec)
    seed = runtime.seed
    sigma = dp.noise_scale() if dp.enabled else None

    by_id = {c.id: c for c in clients}
    if len(by_id) != len(clients):
        raise ValueError("client ids must be unique")
    participants = sorted(c.id for c in clients if c.participates)
    if not participants:
        raise ValueError("no participating clients")

    init = strategy.init_slots(seed)
    slots = list(init)
    mask = strategy.mask_for(init[0])
    states = {c.id: strategy.new_client_state(c) for c in clients}
    trained: set[int] = set()

    train_pool: dict[int, ClientData] = by_id
    if strategy.name == "global_train":
        # one virtual client holding the pooled data of all participants
        part = [by_id[i] for i in participants]
        pooled = ClientData(
            id=participants[0],
            train=DataSplit.concat([c.train for c in part]),
            val=DataSplit.concat([c.val for c in part]),
            test=DataSplit.concat([c.test for c in part]),
        )
        train_pool = {participants[0]: pooled}

    log = EventLog(
        event_log,
        {"method": strategy_cfg.method_name(), "seed": seed, "n_clients": len(clients), **(meta or {})},
    )
    ft_lr = strategy_cfg.finetune_lr if strategy_cfg.finetune_lr is not None else runtime.lr
    server_lr = strategy_cfg.effective_server_lr

    total_flops = 0
    total_bytes = 0
    dropped_log: list[tuple[int, int]] = []
    records: list[RoundRecord] = []
    history: list[float] = []
    best_models: dict[int, list[tuple[NamedParams, float]]] = {}
    clock = 0.0
    stopped = False

    try:
        for t in range(1, runtime.total_rounds + 1):
            if strategy.name == "global_train":
                selected = [participants[0]]
            else:
                selected = sample_clients(participants, runtime.sample_rate, rng_stream(seed, SAMPLE, -1, t))

            uploads: dict[int, tuple[dict[int, NamedParams], int]] = {}
            down: dict[int, int] = {}
            up: dict[int, int] = {}
            work: dict[int, int] = {}
            extra: dict[int, dict] = {}
            for cid in selected:
                client = train_pool[cid]
                if not by_id[cid].participates:
                    raise RunError(f"round {t}: non-participating client {cid} selected for training")
                state = states[cid]
                keys = strategy.broadcast_slots(state)
                received = {k: strategy.receive(state, k, slots[k], init[k]) for k in keys}
                down[cid] = sum(slots[k].serialized_size(exclude=mask) for k in keys) if strategy.communicates else 0

                def rng(i: int, _cid=cid, _t=t) -> np.random.Generator:
                    return rng_stream(seed, TRAIN, _cid, _t, i)

                ctx = LocalContext(client, state, received, t, rng, runtime.local_steps, runtime.lr, runtime.batch_size)
                try:
                    res = strategy.local_work(ctx)
                except Exception as exc:  # annotate and re-raise
                    raise RunError(f"round {t}, client {cid}: {exc}") from exc
                trained.add(cid)
                total_flops += res.flops
                work[cid] = res.sample_passes

                outgoing = dict(res.uploads)
                norms = {}
                if dp.enabled and strategy.communicates:
                    for k in sorted(outgoing):
                        outgoing[k], norms[k] = _privatize(
                            outgoing[k], received[k], mask, dp, sigma, rng_stream(seed, NOISE, cid, t, k)
                        )
                uploads[cid] = (outgoing, client.n_train)
                up[cid] = sum(p.serialized_size(exclude=mask) for p in outgoing.values())
                if norms:
                    extra[cid] = {"delta_norm": max(norms.values())}

            # delivery --------------------------------------------------------
            if strategy.communicates:
                profiles = (
                    {cid: by_id[cid].device for cid in selected}
                    if runtime.hetero_device
                    else runtime.device_default
                )
                arrivals = virtual_schedule(selected, clock, down, up, work, profiles)
                used, dropped, gate_time = overselect_gate(
                    arrivals, runtime.s_agg if runtime.hetero_device else 1.0
                )
                dropped_set = set(dropped)
                for cid in selected:
                    log.message("broadcast", t, SERVER, cid, down[cid], clock)
                    total_bytes += down[cid]
                for cid, at in arrivals:
                    log.message(
                        "update", t, cid, SERVER, up[cid], at, dropped=cid in dropped_set, **extra.get(cid, {})
                    )
                    total_bytes += up[cid]
                for cid in dropped:
                    dropped_log.append((t, cid))

                # aggregation, per slot, in arrival order ----------------------
                for k in range(strategy.n_slots):
                    entries = [
                        (uploads[cid][0][k], float(uploads[cid][1])) for cid in used if k in uploads[cid][0]
                    ]
                    if not entries:
                        continue
                    agg = weighted_average(entries)
                    new = fedopt_server_step(slots[k], agg, server_lr) if server_lr is not None else agg
                    slots[k] = apply_masked_update(slots[k], new, mask) if mask else new
                clock = gate_time
            else:
                used, dropped = list(selected), []
                if strategy.name == "global_train":
                    slots[0] = uploads[selected[0]][0][0]

            # evaluation ------------------------------------------------------
            val_reports, test_reports = [], []
            models: dict[int, list[tuple[NamedParams, float]]] = {}
            for c in clients:
                if not c.participates and not strategy.evaluates_unseen:
                    continue
                if strategy.name == "global_train":
                    comps = [(slots[0], 1.0)]
                elif c.participates:
                    comps = strategy.eval_components(slots, states[c.id], c, init)
                else:
                    comps = strategy.unseen_components(slots, c, init)
                if strategy_cfg.finetune_steps:
                    comps, f = strategy.finetune(comps, c, rng_stream(seed, FINETUNE, c.id, t), ft_lr, runtime.batch_size)
                    total_flops += f
                total_flops += flops_estimate(spec, len(comps) * (len(c.val) + len(c.test)), "inference")
                v, te = _evaluate(spec, comps, c)
                val_reports.append(v)
                test_reports.append(te)
                models[c.id] = comps
            seen_val = [r for r in val_reports if r.participates and r.n_samples]
            val_acc = weighted_accuracy(seen_val) if seen_val else 0.0
            if not np.isfinite(val_acc):
                raise RunError(f"round {t}: non-finite validation accuracy")
            history.append(val_acc)
            rec = RoundRecord(
                round=t,
                val_acc=val_acc,
                test=fairness_report(test_reports),
                clients=test_reports,
                n_selected=len(selected),
                n_used=len(used),
                n_dropped=len(dropped),
                flops=total_flops,
                comm_bytes=total_bytes,
            )
            records.append(rec)
            if int(np.argmax(history)) == len(history) - 1:
                best_models = models
            log._write(
                {
                    "kind": "evaluate",
                    "round": t,
                    "virtual_time": clock,
                    "val_acc": val_acc,
                    "test_acc": rec.test.weighted_acc,
                    "unseen_acc": rec.test.unseen_acc,
                }
            )
            if early_stop_check(history, runtime.patience):
                stopped = True
                break

        leaked = sorted(i for i in trained if not by_id[i].participates)
        if leaked:
            raise RunError(f"unseen clients {leaked} contributed training data")
        best_round = int(np.argmax(history)) + 1
        log._write(
            {"kind": "finish", "round": len(records), "virtual_time": clock, "comm_bytes": total_bytes, "flops": total_flops}
        )
    finally:
        log.close()

    return RunResult(
        method=strategy_cfg.method_name(),
        seed=seed,
        rounds=records,
        best_round=best_round,
        convergence_round=best_round if stopped else 0,
        rounds_run=len(records),
        total_flops=total_flops,
        comm_bytes=total_bytes,
        dropped=dropped_log,
        trained_clients=sorted(trained),
        dp_sigma=sigma,
        final_models=best_models,
        messages=log.records,
        meta=dict(meta or {}),
    )


def run_experiment(config, seed: int | None = None, event_log: str | Path | None = None) -> RunResult:
    """Build the clients described by an ``ExperimentConfig`` and run one seed."""
    from dataclasses import replace

    seed = config.seeds[0] if seed is None else int(seed)
    clients = config.build_clients(seed)
    runtime = replace(config.runtime, seed=seed)
    meta = {"config_hash": config.hash(), "dataset": config.dataset_name()}
    return run_federated(clients, config.model, config.strategy, runtime, config.privacy, event_log, meta)
