"""Federated round orchestration, accounting, and experiment running.

One round has three phases.  (a) Every participating client fine-tunes
its private model on local data under the proximal objective and
uploads the parameter difference against the current consensus model.
(b) The server averages the differences into the consensus model,
takes one meta-loss training step on the aggregator, and computes each
client's personalized head update from noise-free attention.  (c) Each
client adds its personalized head update; the fine-tune that completes
the update happens at the start of the next round.

Rounds are atomic: the caller's state is never mutated, and a round
that raises leaves it untouched.  All randomness flows from one master
seed through named streams, so client scheduling order cannot affect
results.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .aggregator import (
    AggregatorConfig,
    AggregatorState,
    aggregate_game,
    aggregate_mean,
    aggregate_single_attention,
    init_aggregator,
    register_client,
    train_step,
)
from .data import make_windows, load_csv, synth_generate
from .errors import ConfigError, FedGameError, UsageError
from .forecaster import ForecasterConfig, ForecasterModel, init_forecaster, local_train
from .metrics import EvalReport, evaluate
from .params import (
    LayerSpec,
    ParameterVector,
    add_scaled,
    compute_delta,
    DeltaUpdate,
    head_length,
    mean_deltas,
    scatter_head,
    total_params,
)

AGGREGATOR_KINDS = ("game", "mean", "single_attention", "fedavg", "fedprox_only", "local_only")
PERSONALIZED_KINDS = ("game", "mean", "single_attention")
BYTES_PER_PARAM = 8


def seed_stream(master_seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named role under one master seed.

    The stream depends only on (master_seed, name), so adding clients
    or reordering work never perturbs existing streams.
    """
    return np.random.default_rng(np.random.SeedSequence([master_seed] + list(name.encode())))


@dataclass(frozen=True)
class HyperParams:
    """Protocol-level knobs for one experiment."""

    rounds: int
    eta: float = 1.0
    gamma: float = 1.0
    aggregator_kind: str = "game"
    participation: float = 1.0

    def __post_init__(self) -> None:
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.eta < 0 or self.gamma < 0:
            raise ConfigError("eta and gamma must be >= 0")
        if self.aggregator_kind not in AGGREGATOR_KINDS:
            raise ConfigError(
                f"aggregator_kind must be one of {AGGREGATOR_KINDS}, "
                f"got {self.aggregator_kind!r}"
            )
        if not 0.0 < self.participation <= 1.0:
            raise ConfigError("participation must lie in (0, 1]")


@dataclass
class RoundState:
    """Everything that persists between rounds on clients and server."""

    round_index: int
    global_params: ParameterVector
    client_models: dict[str, ForecasterModel]
    client_rngs: dict[str, np.random.Generator]
    server_rng: np.random.Generator
    pending_deltas: dict[str, DeltaUpdate] = field(default_factory=dict)


@dataclass
class RoundReport:
    """Diagnostics for one completed round.

    ``attention[i, j]`` is client ``client_ids[i]``'s weight on client
    ``client_ids[j]`` (zero diagonal, zero rows for kinds without
    attention).  ``wall_time`` is informational only and deliberately
    left out of the serialized form so reruns are byte-identical.
    """

    round_index: int
    client_ids: tuple[str, ...]
    train_losses: dict[str, float]
    meta_loss: float
    attention: np.ndarray
    gate_mixes: dict[str, tuple[float, ...]]
    upstream_bytes: int
    downstream_bytes: int
    wall_time: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "round": self.round_index,
            "client_ids": list(self.client_ids),
            "train_losses": {k: self.train_losses[k] for k in sorted(self.train_losses)},
            "meta_loss": self.meta_loss,
            "attention": [[float(v) for v in row] for row in self.attention],
            "gate_mixes": {k: list(self.gate_mixes[k]) for k in sorted(self.gate_mixes)},
            "upstream_bytes": self.upstream_bytes,
            "downstream_bytes": self.downstream_bytes,
        }


def init_round_state(
    cfg: ForecasterConfig, client_ids, master_seed: int
) -> RoundState:
    """Consensus model plus per-client copies and named RNG streams."""
    ids = sorted(str(c) for c in client_ids)
    if not ids:
        raise ConfigError("need at least one client")
    if len(set(ids)) != len(ids):
        raise ConfigError("client ids must be unique")
    global_model = init_forecaster(cfg, seed_stream(master_seed, "init"))
    return RoundState(
        round_index=0,
        global_params=global_model.params,
        client_models={c: ForecasterModel(global_model.params.copy(), cfg) for c in ids},
        client_rngs={c: seed_stream(master_seed, f"client:{c}") for c in ids},
        server_rng=seed_stream(master_seed, "server"),
    )


def comm_cost(n_clients: int, spec, aggregator_kind: str) -> dict[str, float]:
    """Per-round exchanged parameter counts and the cost ratio.

    Upstream is always one full model per client; downstream adds the
    personalized head on top of the consensus broadcast.  The ratio is
    total traffic relative to the two full-model exchanges of plain
    consensus training.
    """
    if aggregator_kind not in AGGREGATOR_KINDS:
        raise ConfigError(f"unknown aggregator_kind {aggregator_kind!r}")
    total = total_params(spec)
    head = head_length(spec)
    if aggregator_kind == "local_only":
        upstream = downstream = 0
    else:
        upstream = n_clients * total
        downstream = n_clients * total
        if aggregator_kind in PERSONALIZED_KINDS:
            downstream += n_clients * head
    baseline = 2 * n_clients * total
    return {
        "upstream": upstream,
        "downstream": downstream,
        "ratio": (upstream + downstream) / baseline if baseline else 0.0,
    }


def _select_participants(state: RoundState, hyper: HyperParams) -> list[str]:
    ids = sorted(state.client_models)
    if hyper.participation >= 1.0 or len(ids) == 1:
        return ids
    count = max(1, int(round(hyper.participation * len(ids))))
    chosen = state.server_rng.choice(len(ids), size=count, replace=False)
    return sorted(ids[i] for i in chosen)


def _attention_matrix(ids: list[str], rows) -> np.ndarray:
    index = {c: i for i, c in enumerate(ids)}
    matrix = np.zeros((len(ids), len(ids)))
    for row in rows:
        i = index[row.client_id]
        for j, weight in zip(row.neighbor_ids, row.weights):
            matrix[i, index[j]] = weight
    return matrix


def _uniform_matrix(ids: list[str]) -> np.ndarray:
    n = len(ids)
    if n < 2:
        return np.zeros((n, n))
    matrix = np.full((n, n), 1.0 / (n - 1))
    np.fill_diagonal(matrix, 0.0)
    return matrix


def run_round(
    state: RoundState,
    hyper: HyperParams,
    aggregator: AggregatorState | None,
    train_data: dict,
) -> tuple[RoundState, RoundReport]:
    """One federated round; returns fresh state, never mutating the input.

    ``train_data`` maps client id to its training windows.  For the
    personalized kinds ``aggregator`` must be provided; its parameters
    advance by one meta-loss step inside the round.
    """
    started = time.perf_counter()
    kind = hyper.aggregator_kind
    if kind in PERSONALIZED_KINDS and aggregator is None:
        raise UsageError(f"aggregator_kind {kind!r} needs an aggregator state")
    for cid in state.client_models:
        if cid not in train_data or len(train_data[cid]) == 0:
            raise UsageError(f"client {cid!r} has no training data")

    new_state = copy.deepcopy(state)
    spec = new_state.global_params.spec
    participants = _select_participants(new_state, hyper)

    deltas: dict[str, DeltaUpdate] = {}
    train_losses: dict[str, float] = {}
    for cid in participants:
        model = new_state.client_models[cid]
        trained, loss = local_train(
            model, train_data[cid], new_state.global_params, model.config,
            new_state.client_rngs[cid],
        )
        deltas[cid] = compute_delta(
            trained.params, new_state.global_params,
            round_index=new_state.round_index, client_id=cid,
        )
        train_losses[cid] = loss
        new_state.client_models[cid] = trained

    if kind != "local_only":
        new_state.global_params = add_scaled(
            new_state.global_params, mean_deltas(list(deltas.values())), hyper.eta
        )

    head_deltas = {cid: deltas[cid].head for cid in participants}
    meta = 0.0
    gate_mixes: dict[str, tuple[float, ...]] = {}
    personalized: dict[str, np.ndarray] = {}
    if kind in ("game", "single_attention"):
        if len(participants) >= 2:
            meta = train_step(aggregator, head_deltas)
        if kind == "game":
            personalized, rows = aggregate_game(aggregator, head_deltas)
        else:
            personalized, rows = aggregate_single_attention(aggregator, head_deltas)
        attention = _attention_matrix(participants, rows)
        gate_mixes = {r.client_id: tuple(float(v) for v in r.expert_mix) for r in rows}
    elif kind == "mean":
        personalized = aggregate_mean(head_deltas, aggregator.config.w_self)
        attention = _uniform_matrix(participants)
    else:
        attention = np.zeros((len(participants), len(participants)))

    zero_template = ParameterVector.zeros(spec)
    for cid in participants:
        if kind in PERSONALIZED_KINDS:
            update = scatter_head(zero_template, personalized[cid])
            model = new_state.client_models[cid]
            new_params = add_scaled(model.params, update, hyper.gamma)
            new_state.client_models[cid] = model.with_params(new_params.values)
        elif kind == "fedavg":
            model = new_state.client_models[cid]
            new_state.client_models[cid] = model.with_params(
                new_state.global_params.values.copy()
            )

    n = len(participants)
    total = total_params(spec)
    head = head_length(spec)
    if kind == "local_only":
        upstream = downstream = 0
    else:
        upstream = n * total * BYTES_PER_PARAM
        downstream = n * total * BYTES_PER_PARAM
        if kind in PERSONALIZED_KINDS:
            downstream += n * head * BYTES_PER_PARAM

    report = RoundReport(
        round_index=new_state.round_index,
        client_ids=tuple(participants),
        train_losses=train_losses,
        meta_loss=meta,
        attention=attention,
        gate_mixes=gate_mixes,
        upstream_bytes=upstream,
        downstream_bytes=downstream,
        wall_time=time.perf_counter() - started,
    )
    new_state.pending_deltas = deltas
    new_state.round_index += 1
    return new_state, report


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat bundle of every knob an experiment needs.

    ``csv_path = None`` selects the synthetic generator.  The split
    fractions apply per client series, chronologically.
    """

    csv_path: str | None = None
    n_clients: int = 4
    n_clusters: int = 2
    series_length: int = 400
    noise_sd: float = 0.1
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2
    history_len: int = 12
    horizon: int = 2
    quantiles: tuple[float, ...] = (0.1, 0.5, 0.9)
    hidden_sizes: tuple[int, ...] = (32,)
    arch: str = "mlp"
    local_lr: float = 0.0005
    local_epochs: int = 1
    prox_mu: float = 0.2
    batch_size: int = 32
    embed_dim: int = 64
    num_experts: int = 4
    top_k: int = 2
    temperature: float = 1.0
    w_self: float = 0.6
    alpha: float = 0.5
    beta: float = 0.5
    server_lr: float = 1e-3
    noise_enabled: bool = True
    rounds: int = 10
    eta: float = 1.0
    gamma: float = 1.0
    aggregator_kind: str = "game"
    participation: float = 1.0
    master_seed: int = 0
    output_dir: str = "out"
    baselines: tuple[str, ...] = ("game", "mean", "single_attention", "fedavg", "local_only")
    published_total_params: int | None = None
    published_head_params: int | None = None

    def forecaster_config(self, kind: str | None = None) -> ForecasterConfig:
        """Client settings; consensus-only kinds drop the proximal pull."""
        kind = kind or self.aggregator_kind
        mu = 0.0 if kind in ("fedavg", "local_only") else self.prox_mu
        return ForecasterConfig(
            history_len=self.history_len,
            horizon=self.horizon,
            quantiles=tuple(self.quantiles),
            hidden_sizes=tuple(self.hidden_sizes),
            arch=self.arch,
            local_lr=self.local_lr,
            local_epochs=self.local_epochs,
            prox_mu=mu,
            batch_size=self.batch_size,
        )

    def aggregator_config(self, kind: str | None = None) -> AggregatorConfig:
        """Server settings; the single-attention baseline degenerates."""
        kind = kind or self.aggregator_kind
        cfg = AggregatorConfig(
            embed_dim=self.embed_dim,
            num_experts=self.num_experts,
            top_k=self.top_k,
            temperature=self.temperature,
            w_self=self.w_self,
            alpha=self.alpha,
            beta=self.beta,
            server_lr=self.server_lr,
            noise_enabled=self.noise_enabled,
        )
        if kind == "single_attention":
            cfg = replace(cfg, num_experts=1, top_k=1, noise_enabled=False)
        return cfg

    def hyper_params(self, kind: str | None = None) -> HyperParams:
        return HyperParams(
            rounds=self.rounds,
            eta=self.eta,
            gamma=self.gamma,
            aggregator_kind=kind or self.aggregator_kind,
            participation=self.participation,
        )

    def splits(self) -> tuple[float, float, float]:
        return (self.train_frac, self.val_frac, self.test_frac)


@dataclass
class RunResult:
    """Everything an experiment produces, reports plus final state."""

    aggregator_kind: str
    reports: list[RoundReport]
    eval_report: EvalReport
    cluster_labels: dict[str, int] | None
    state: RoundState
    aggregator: AggregatorState | None


def _load_shards(config: ExperimentConfig):
    if config.csv_path:
        return load_csv(config.csv_path)
    return synth_generate(
        config.n_clients,
        config.n_clusters,
        config.series_length,
        config.noise_sd,
        seed_stream(config.master_seed, "data"),
    )


def run_experiment(config: ExperimentConfig, aggregator_kind: str | None = None) -> RunResult:
    """Run the full protocol once and evaluate the personalized models.

    ``aggregator_kind`` overrides the configured kind but reuses every
    seed stream, which is what makes ablation rows comparable.
    """
    kind = aggregator_kind or config.aggregator_kind
    hyper = config.hyper_params(kind)
    fcfg = config.forecaster_config(kind)

    shards = _load_shards(config)
    labels = None
    if all(s.cluster_label is not None for s in shards):
        labels = {s.client_id: int(s.cluster_label) for s in shards}
    windows = {s.client_id: make_windows(s, fcfg.history_len, fcfg.horizon, config.splits())
               for s in shards}
    train_data = {cid: w["train"] for cid, w in windows.items()}
    test_data = {cid: w["test"] for cid, w in windows.items()}

    state = init_round_state(fcfg, list(train_data), config.master_seed)
    aggregator = None
    if kind in PERSONALIZED_KINDS:
        aggregator = init_aggregator(
            config.aggregator_config(kind),
            head_length(state.global_params.spec),
            seed_stream(config.master_seed, "server"),
        )
        for cid in sorted(train_data):
            register_client(aggregator, cid)

    reports = []
    for _ in range(hyper.rounds):
        try:
            state, report = run_round(state, hyper, aggregator, train_data)
        except FedGameError as exc:
            raise type(exc)(f"round {state.round_index}: {exc}") from exc
        reports.append(report)

    eval_report = evaluate(state.client_models, test_data, fcfg.quantiles)
    return RunResult(
        aggregator_kind=kind,
        reports=reports,
        eval_report=eval_report,
        cluster_labels=labels,
        state=state,
        aggregator=aggregator,
    )


def _row_entropy(row: np.ndarray) -> float:
    positive = row[row > 0]
    return float(-np.sum(positive * np.log(positive)))


def attention_diagnostics(
    reports: list[RoundReport], labels: dict[str, int] | None = None
) -> list[dict]:
    """Per-round attention statistics: entropy, variance, cluster mass.

    Entropy and variance are over off-diagonal weights; with cluster
    labels available, ``intra_cluster_mass`` is the mean total weight
    each client puts on same-cluster peers.
    """
    out = []
    for report in reports:
        ids = report.client_ids
        matrix = np.asarray(report.attention)
        n = len(ids)
        off_diag = matrix[~np.eye(n, dtype=bool)] if n > 1 else np.zeros(0)
        entry = {
            "round": report.round_index,
            "entropy": float(np.mean([_row_entropy(matrix[i]) for i in range(n)])) if n else 0.0,
            "variance": float(np.var(off_diag)) if off_diag.size else 0.0,
            "intra_cluster_mass": None,
        }
        if labels is not None and n > 1:
            masses = []
            for i, cid in enumerate(ids):
                peers = [j for j, other in enumerate(ids) if other != cid
                         and labels[other] == labels[cid]]
                masses.append(math.fsum(matrix[i, j] for j in peers))
            entry["intra_cluster_mass"] = float(np.mean(masses))
        out.append(entry)
    return out
