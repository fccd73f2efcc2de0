"""Round loop for ensemble-distillation federated learning on a shared pool.

One round: select pool indices with the current global model, send indices
and the matching group model to the sampled clients, train locally, collect
logits on the selected inputs (plus parameters on FedAvg-init rounds), then
per architecture group optionally average parameters and distill on the
weighted mean of all clients' logits.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import LabelledDataset
from .errors import InvalidConfigError, MisalignedTargetsError, RoundAbortedError
from .nn import ModelState, TrainConfig, distill, forward_batched, init_model, preset, weighted_average
from .nn.layers import softmax
from .nn.train import train_fedprox, train_supervised
from .pruning import EntropyPruneConfig, KMeansBalanceConfig, KMeansModel, prune_pipeline

log = logging.getLogger(__name__)

SCHEDULE_MODES = ("uniform", "proportional", "front_loaded")


def derive_seed(*keys: int) -> int:
    """64-bit seed derived from a tuple of non-negative integers."""
    ss = np.random.SeedSequence([k & 0xFFFFFFFFFFFFFFFF for k in keys])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


# --- configuration -------------------------------------------------------------------


@dataclass(frozen=True)
class ClientSpec:
    id: int
    arch: str
    shard: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(self.shard) == 0:
            raise InvalidConfigError(f"client {self.id} has an empty shard", "clients")

    @property
    def size(self) -> int:
        return len(self.shard)


@dataclass(frozen=True)
class DistillSchedule:
    """``steps`` means: per group per round (uniform), per round shared by
    groups (proportional), or the grand total over ``rounds`` (front_loaded).
    """

    mode: str = "uniform"
    steps: int = 500
    decay: float = 0.9
    rounds: int = 30

    def __post_init__(self):
        if self.mode not in SCHEDULE_MODES:
            raise InvalidConfigError(f"schedule mode must be one of {SCHEDULE_MODES}", "schedule.mode")
        if self.steps < 0:
            raise InvalidConfigError("steps must be >= 0", "schedule.steps")
        if not 0 < self.decay <= 1:
            raise InvalidConfigError("decay must be in (0, 1]", "schedule.decay")
        if self.rounds < 1:
            raise InvalidConfigError("rounds must be >= 1", "schedule.rounds")


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 30
    participation: float = 0.4
    fedavg_init_rate: float = 20.0
    local_epochs: int = 40
    local_lr: float = 0.01
    local_batch_size: int = 32
    local_mode: str = "plain"  # or "fedprox"
    mu: float = 0.0
    distill_lr: float = 0.005
    distill_batch_size: int = 32
    schedule: DistillSchedule = DistillSchedule()
    temperature: float = 1.0
    teacher_mode: str = "logits"  # or "probs"
    momentum: float = 0.0
    kmeans: KMeansBalanceConfig | None = KMeansBalanceConfig()
    entropy: EntropyPruneConfig | None = EntropyPruneConfig()
    selection_target: int | None = None  # pool prefix size when both stages are off
    score_mode: str = "softmax"
    pruning_group: str | None = None  # None: the largest group
    source: str = "patches"  # or "labelled"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise InvalidConfigError("rounds must be >= 1", "rounds")
        if not 0 < self.participation <= 1:
            raise InvalidConfigError("participation must be in (0, 1]", "participation")
        if not 0 < self.fedavg_init_rate <= 100:
            raise InvalidConfigError("FedAvg init rate must be in (0, 100]", "fedavg_init_rate_percent")
        if self.local_mode not in ("plain", "fedprox"):
            raise InvalidConfigError("local mode must be 'plain' or 'fedprox'", "local_mode")
        if self.local_mode == "fedprox" and not self.mu > 0:
            raise InvalidConfigError("fedprox needs mu > 0", "mu")
        if self.teacher_mode not in ("logits", "probs"):
            raise InvalidConfigError("teacher mode must be 'logits' or 'probs'", "teacher_mode")
        if self.source not in ("patches", "labelled"):
            raise InvalidConfigError("source must be 'patches' or 'labelled'", "source")
        if self.local_epochs < 0:
            raise InvalidConfigError("local epochs must be >= 0", "local_epochs")


# --- schedules ----------------------------------------------------------------------------


def schedule_fedavg_init(round_no: int, rate: float) -> bool:
    """True on rounds that seed distillation with averaged parameters.

    The period is ``round(100 / rate)`` (half-to-even); rounds are 1-based.
    """
    if not rate > 0 or rate > 100:
        raise InvalidConfigError("rate must be in (0, 100]", "fedavg_init_rate_percent")
    if round_no < 1:
        raise InvalidConfigError("rounds are 1-based", "round")
    period = max(1, round(100 / rate))
    return round_no % period == 0


def schedule_distillation_steps(
    round_no: int, group: str, schedule: DistillSchedule, group_sizes: dict[str, int] | None = None
) -> int:
    if schedule.mode == "uniform":
        return schedule.steps
    if schedule.mode == "proportional":
        sizes = group_sizes or {group: 1}
        names = sorted(sizes)
        total = sum(sizes.values())
        base = {g: schedule.steps * sizes[g] // total for g in names}
        largest = max(names, key=lambda g: (sizes[g], [-ord(ch) for ch in g]))
        base[largest] += schedule.steps - sum(base.values())
        return base[group]
    # front-loaded: geometric weights, cumulative rounding keeps the sum exact
    if not 1 <= round_no <= schedule.rounds:
        return 0
    w = schedule.decay ** np.arange(schedule.rounds)
    cum = np.concatenate([[0.0], np.cumsum(w) / w.sum()])
    cum[-1] = 1.0
    hi = int(np.floor(schedule.steps * cum[round_no] + 0.5))
    lo = int(np.floor(schedule.steps * cum[round_no - 1] + 0.5))
    return hi - lo


def sample_clients(round_no: int, clients: Sequence[ClientSpec], fraction: float, seed: int) -> list[ClientSpec]:
    """Seeded uniform sample without replacement, returned in id order."""
    if not clients:
        raise InvalidConfigError("no clients to sample", "clients")
    n = max(1, round(fraction * len(clients)))
    rng = np.random.default_rng(derive_seed(seed, round_no, 0x5A))
    pick = np.sort(rng.choice(len(clients), size=n, replace=False))
    return [clients[i] for i in pick]


def ensemble_logits(per_client: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Row-wise weighted mean of client logit matrices."""
    mats = [np.asarray(m, dtype=np.float64) for m in per_client]
    if not mats:
        raise MisalignedTargetsError("no logit matrices")
    if any(m.shape != mats[0].shape for m in mats):
        raise MisalignedTargetsError("logit matrices differ in shape")
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(mats) or np.any(w < 0) or w.sum() <= 0:
        raise MisalignedTargetsError("need one non-negative weight per matrix, not all zero")
    out = np.zeros_like(mats[0])
    for m, wi in zip(mats, w / w.sum()):
        out += wi * m
    return out.astype(np.float32)


def evaluate(models: dict[str, ModelState], test: LabelledDataset) -> tuple[dict[str, float], float]:
    """Top-1 accuracy per group and their unweighted mean."""
    if len(test) == 0:
        raise InvalidConfigError("empty test set", "test")
    acc = {
        g: float((forward_batched(m, test.inputs).argmax(axis=1) == test.labels).mean())
        for g, m in sorted(models.items())
    }
    return acc, float(np.mean(list(acc.values())))


# --- state --------------------------------------------------------------------------------


@dataclass(frozen=True)
class Environment:
    """Everything fixed for a run: clients, private data, pool and test set."""

    clients: tuple[ClientSpec, ...]
    train: LabelledDataset
    pool: np.ndarray  # distillation inputs [P, C, H, W]
    test: LabelledDataset
    architectures: dict[str, object] = field(default_factory=dict)

    def groups(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for c in self.clients:
            out.setdefault(c.arch, []).append(c.id)
        return dict(sorted(out.items()))

    def arch_for(self, name: str):
        if name in self.architectures:
            return self.architectures[name]
        shape = tuple(self.train.inputs.shape[1:])
        return preset(name, shape, self.train.num_classes)


@dataclass(frozen=True)
class FederationState:
    round: int
    models: dict[str, ModelState]
    kmeans: KMeansModel | None = None


@dataclass
class RoundRecord:
    round: int
    sampled: list[int]
    fedavg_init: bool
    selected: list[int]
    accuracy_pre: dict[str, float]
    accuracy: dict[str, float]
    macro_accuracy: float
    distill_steps: dict[str, int]
    bytes: dict[str, int]
    flows: dict[str, dict[int, str]]
    prune_stages: list[dict]
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flows"] = {k: {str(c): g for c, g in v.items()} for k, v in self.flows.items()}
        return d


def init_state(env: Environment, cfg: FederationConfig) -> FederationState:
    ids = {c.id for c in env.clients}
    if len(ids) != len(env.clients):
        raise InvalidConfigError("client ids must be unique", "clients")
    models = {
        name: init_model(env.arch_for(name), derive_seed(cfg.seed, gi, 0xA1))
        for gi, name in enumerate(env.groups())
    }
    return FederationState(0, models)


def _pruning_group(env: Environment, cfg: FederationConfig) -> str:
    groups = env.groups()
    if cfg.pruning_group is not None:
        if cfg.pruning_group not in groups:
            raise InvalidConfigError(f"unknown group {cfg.pruning_group!r}", "pruning_group")
        return cfg.pruning_group
    return max(groups, key=lambda g: (len(groups[g]), [-ord(ch) for ch in g]))


def client_update(
    client: ClientSpec,
    env: Environment,
    global_model: ModelState,
    selected_inputs: np.ndarray,
    cfg: FederationConfig,
    round_no: int,
) -> tuple[ModelState, np.ndarray]:
    """Load global params, train on the private shard, predict on the selection."""
    tcfg = TrainConfig(
        lr=cfg.local_lr,
        epochs=cfg.local_epochs,
        batch_size=cfg.local_batch_size,
        seed=derive_seed(cfg.seed, round_no, client.id, 0xC1),
        mu=cfg.mu if cfg.local_mode == "fedprox" else 0.0,
        momentum=cfg.momentum,
    )
    x = env.train.inputs[client.shard]
    y = env.train.labels[client.shard]
    if cfg.local_mode == "fedprox":
        local = train_fedprox(global_model, x, y, global_model, tcfg)
    else:
        local = train_supervised(global_model, x, y, tcfg)
    return local, forward_batched(local, selected_inputs)


def run_round(env: Environment, state: FederationState, cfg: FederationConfig):
    """Execute one round. Returns ``(new_state, record)``; ``state`` is untouched."""
    round_no = state.round + 1
    t0 = time.perf_counter()
    try:
        groups = env.groups()
        sizes = {g: len(m) for g, m in groups.items()}

        scorer = state.models[_pruning_group(env, cfg)]
        kcfg = cfg.kmeans
        if kcfg is not None:
            kcfg = replace(kcfg, seed=derive_seed(cfg.seed, round_no, kcfg.seed, 0xB1))
        ecfg = cfg.entropy
        if ecfg is not None:
            ecfg = replace(ecfg, seed=derive_seed(cfg.seed, round_no, ecfg.seed, 0xB2))
        reuse = state.kmeans if (cfg.kmeans is not None and not cfg.kmeans.refit) else None
        selected, report, kmeans = prune_pipeline(
            env.pool, scorer, kcfg, ecfg, cfg.selection_target, kmeans=reuse, score_mode=cfg.score_mode
        )
        inputs = env.pool[selected]

        sampled = sample_clients(round_no, env.clients, cfg.participation, cfg.seed)
        flag = schedule_fedavg_init(round_no, cfg.fedavg_init_rate)

        def work(client):
            return client_update(client, env, state.models[client.arch], inputs, cfg, round_no)

        if cfg.workers > 1:
            with ThreadPoolExecutor(cfg.workers) as pool:
                results = list(pool.map(work, sampled))
        else:
            results = [work(c) for c in sampled]

        weights = [c.size for c in sampled]
        logits = [r[1] for r in results]
        if cfg.teacher_mode == "logits":
            targets = ensemble_logits(logits, weights)
        else:
            probs = ensemble_logits([softmax(l.astype(np.float64)) for l in logits], weights)
            targets = np.log(np.maximum(probs.astype(np.float64), 1e-12)).astype(np.float32)

        new_models: dict[str, ModelState] = {}
        init_models: dict[str, ModelState] = {}
        steps: dict[str, int] = {}
        for gi, (g, _) in enumerate(groups.items()):
            members = [(c, r[0]) for c, r in zip(sampled, results) if c.arch == g]
            if flag and members:
                init = weighted_average([m for _, m in members], [c.size for c, _ in members])
            else:
                init = state.models[g]
            init_models[g] = init
            steps[g] = schedule_distillation_steps(round_no, g, cfg.schedule, sizes)
            dcfg = TrainConfig(
                lr=cfg.distill_lr,
                batch_size=cfg.distill_batch_size,
                seed=derive_seed(cfg.seed, round_no, gi, 0xD1),
                momentum=cfg.momentum,
                temperature=cfg.temperature,
            )
            new_models[g] = distill(init, inputs, targets, steps[g], dcfg)

        acc_pre, _ = evaluate(init_models, env.test)
        acc, macro = evaluate(new_models, env.test)
    except RoundAbortedError:
        raise
    except Exception as exc:
        raise RoundAbortedError(f"round {round_no} aborted: {type(exc).__name__}: {exc}") from exc

    s, n = len(selected), env.train.num_classes
    nbytes = {c.id: state.models[c.arch].nbytes for c in sampled}
    record = RoundRecord(
        round=round_no,
        sampled=[c.id for c in sampled],
        fedavg_init=flag,
        selected=[int(i) for i in selected],
        accuracy_pre=acc_pre,
        accuracy=acc,
        macro_accuracy=macro,
        distill_steps=steps,
        bytes={
            "params_down": sum(nbytes.values()),
            "indices_down": 4 * s * len(sampled),
            "params_up": sum(nbytes.values()) if flag else 0,
            "logits_up": 4 * s * n * len(sampled),
        },
        flows={
            "down": {c.id: c.arch for c in sampled},
            "up": {c.id: c.arch for c in sampled} if flag else {},
        },
        prune_stages=report.stages,
        wall_time=time.perf_counter() - t0,
    )
    return FederationState(round_no, new_models, kmeans), record


@dataclass
class RunResult:
    baseline: dict[str, float]
    baseline_macro: float
    records: list[RoundRecord]
    state: FederationState

    @property
    def best_macro(self) -> float:
        return max(r.macro_accuracy for r in self.records)

    def best_per_group(self) -> dict[str, float]:
        groups = self.records[0].accuracy
        return {g: max(r.accuracy[g] for r in self.records) for g in groups}

    def total_bytes(self) -> dict[str, int]:
        keys = self.records[0].bytes
        return {k: sum(r.bytes[k] for r in self.records) for k in keys}


def run_federation(
    env: Environment,
    cfg: FederationConfig,
    on_round: Callable[[RoundRecord, FederationState], None] | None = None,
) -> RunResult:
    state = init_state(env, cfg)
    baseline, baseline_macro = evaluate(state.models, env.test)
    records = []
    for _ in range(cfg.rounds):
        state, record = run_round(env, state, cfg)
        records.append(record)
        log.info(
            "round %d init=%s macro=%.4f steps=%s %.2fs",
            record.round,
            record.fedavg_init,
            record.macro_accuracy,
            record.distill_steps,
            record.wall_time,
        )
        if on_round is not None:
            on_round(record, state)
    return RunResult(baseline, baseline_macro, records, state)
