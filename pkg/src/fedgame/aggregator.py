"""Learnable server aggregator: graph attention over a mixture of experts.

The server never sees raw data, only each client's output-head delta.
A shared affine encoder embeds every delta; shared scoring experts rate
each ordered (neighbor, self) pair; a per-client noisy top-k gate mixes
the expert scores into one relevance logit per neighbor; a
temperature-scaled softmax over neighbors turns logits into attention
weights; and the personalized update blends the client's own delta with
the attention-weighted neighbor deltas.

Two parallel implementations of the same formulas live here on purpose:

* a plain numpy path (:func:`attention_row`, :func:`personalized_delta`)
  used for the deltas actually shipped to clients.  It sums with
  ``math.fsum`` so results are exactly invariant to client relabeling;
* a differentiable path inside :func:`train_step` built on the autodiff
  tape, used to descend the similarity meta-loss with Adam.

A consistency test pins the two paths to each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, dot, stack_scalars
from .errors import ConfigError, NumericError, StructuralError, UsageError
from .params import NORM_TOLERANCE, cosine_similarity

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class AggregatorConfig:
    """Sizes and coefficients of the server aggregator."""

    embed_dim: int = 64
    num_experts: int = 4
    top_k: int = 2
    temperature: float = 1.0
    w_self: float = 0.6
    alpha: float = 0.5
    beta: float = 0.5
    server_lr: float = 1e-3
    noise_enabled: bool = True

    def __post_init__(self) -> None:
        if self.embed_dim < 1 or self.num_experts < 1:
            raise ConfigError("embed_dim and num_experts must be >= 1")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(
                f"top_k must satisfy 1 <= k <= {self.num_experts}, got {self.top_k}"
            )
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if not 0.0 <= self.w_self <= 1.0:
            raise ConfigError("w_self must lie in [0, 1]")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if self.server_lr <= 0:
            raise ConfigError("server_lr must be > 0")


@dataclass
class GatePair:
    """Per-client gate projections: clean logits and noise scale."""

    weight: np.ndarray
    noise: np.ndarray


@dataclass
class AttentionRow:
    """One client's attention over its peers, plus gate diagnostics.

    ``weights[n]`` belongs to ``neighbor_ids[n]``; ``expert_mix`` has
    exactly ``top_k`` nonzero entries; ``logits`` are the gate logits
    that selected them.
    """

    client_id: str
    neighbor_ids: tuple[str, ...]
    weights: np.ndarray
    expert_mix: np.ndarray
    logits: np.ndarray


@dataclass
class AggregatorState:
    """All learnable server parameters plus optimizer slots and RNG."""

    config: AggregatorConfig
    head_dim: int
    encoder_w: np.ndarray
    encoder_b: np.ndarray
    experts_w: np.ndarray
    experts_b: np.ndarray
    gates: dict[str, GatePair]
    rng: np.random.Generator
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0


def init_aggregator(
    cfg: AggregatorConfig, head_dim: int, rng: np.random.Generator
) -> AggregatorState:
    """Uniform(-s, s) init with s = 1/sqrt(fan_in); gates start empty."""
    if head_dim < 1:
        raise ConfigError("head_dim must be >= 1")
    d = cfg.embed_dim
    s_enc = 1.0 / math.sqrt(head_dim)
    s_exp = 1.0 / math.sqrt(2 * d)
    return AggregatorState(
        config=cfg,
        head_dim=head_dim,
        encoder_w=rng.uniform(-s_enc, s_enc, size=(head_dim, d)),
        encoder_b=rng.uniform(-s_enc, s_enc, size=d),
        experts_w=rng.uniform(-s_exp, s_exp, size=(cfg.num_experts, 2 * d)),
        experts_b=rng.uniform(-s_exp, s_exp, size=cfg.num_experts),
        gates={},
        rng=rng,
    )


def register_client(state: AggregatorState, client_id: str) -> None:
    """Create the client's gate pair; a second call is a no-op.

    Registration draws from the aggregator RNG, so callers should
    register clients in a fixed (sorted) order for reproducibility.
    """
    if client_id in state.gates:
        return
    d = state.config.embed_dim
    s = 1.0 / math.sqrt(d)
    state.gates[client_id] = GatePair(
        weight=state.rng.uniform(-s, s, size=(d, state.config.num_experts)),
        noise=state.rng.uniform(-s, s, size=(d, state.config.num_experts)),
    )


def _check_head(state: AggregatorState, vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    if vec.size != state.head_dim:
        raise StructuralError(
            f"head delta has length {vec.size}, aggregator expects {state.head_dim}"
        )
    return vec


def encode(state: AggregatorState, head_delta: np.ndarray) -> np.ndarray:
    """Affine embedding of one head delta."""
    vec = _check_head(state, head_delta)
    return vec @ state.encoder_w + state.encoder_b


def expert_scores(state: AggregatorState, e_i: np.ndarray, e_j: np.ndarray) -> np.ndarray:
    """Score vector over experts for the pair (self e_i, neighbor e_j).

    Each expert is an affine map on the concatenation [e_j, e_i],
    neighbor first.
    """
    d = state.config.embed_dim
    e_i = np.asarray(e_i, dtype=np.float64).reshape(-1)
    e_j = np.asarray(e_j, dtype=np.float64).reshape(-1)
    if e_i.size != d or e_j.size != d:
        raise StructuralError(f"embeddings must have length {d}")
    cat = np.concatenate([e_j, e_i])
    return state.experts_w @ cat + state.experts_b


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def gate_logits(
    state: AggregatorState, client_id: str, e_i: np.ndarray, training: bool = False
) -> np.ndarray:
    """Per-expert gate logits for one client.

    During training the clean logits get additive Gaussian exploration
    noise scaled elementwise by softplus of a learned projection; the
    draw comes from the aggregator RNG.  Outside training the logits
    are the clean term only, so shipped aggregations are reproducible.
    """
    gate = _require_gate(state, client_id)
    e_i = np.asarray(e_i, dtype=np.float64).reshape(-1)
    clean = e_i @ gate.weight
    if training and state.config.noise_enabled:
        scale = _softplus(e_i @ gate.noise)
        clean = clean + state.rng.standard_normal(clean.size) * scale
    return clean


def _require_gate(state: AggregatorState, client_id: str) -> GatePair:
    if client_id not in state.gates:
        raise UsageError(f"client {client_id!r} has no registered gate")
    return state.gates[client_id]


def top_k_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest logits, ties broken by lower index."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 1 <= k <= logits.size:
        raise ConfigError(f"k must satisfy 1 <= k <= {logits.size}, got {k}")
    order = np.argsort(-logits, kind="stable")
    return np.sort(order[:k])


def gate_weights(logits: np.ndarray, k: int) -> np.ndarray:
    """Sparse expert mix: softmax over the k largest logits, 0 elsewhere."""
    logits = np.asarray(logits, dtype=np.float64)
    kept = top_k_indices(logits, k)
    z = logits[kept] - logits[kept].max()
    ez = np.exp(z)
    out = np.zeros_like(logits)
    out[kept] = ez / math.fsum(ez)
    return out


def _neighbor_softmax(values: np.ndarray, temperature: float) -> np.ndarray:
    z = (values - values.max()) / temperature
    ez = np.exp(z)
    return ez / math.fsum(ez)


def attention_row(
    state: AggregatorState,
    client_id: str,
    embeddings: dict[str, np.ndarray],
    training: bool = False,
) -> AttentionRow:
    """Attention of one client over all other embedded clients.

    Neighbors are every key of ``embeddings`` except the client itself,
    in sorted order.  A lone client gets an empty row; its personalized
    update then falls back to its own delta.
    """
    if client_id not in embeddings:
        raise UsageError(f"client {client_id!r} missing from embeddings")
    e_i = embeddings[client_id]
    logits = gate_logits(state, client_id, e_i, training)
    mix = gate_weights(logits, state.config.top_k)
    neighbors = tuple(sorted(j for j in embeddings if j != client_id))
    if not neighbors:
        return AttentionRow(client_id, (), np.zeros(0), mix, logits)
    scores = np.array(
        [float(mix @ expert_scores(state, e_i, embeddings[j])) for j in neighbors]
    )
    weights = _neighbor_softmax(scores, state.config.temperature)
    return AttentionRow(client_id, neighbors, weights, mix, logits)


def personalized_delta(
    state: AggregatorState,
    client_id: str,
    head_deltas: dict[str, np.ndarray],
    row: AttentionRow,
) -> np.ndarray:
    """Blend of own delta and attention-weighted neighbor deltas.

    Computes w_self * own + (1 - w_self) * sum_j w_ij * delta_j, with
    every coordinate of the neighbor sum reduced by ``math.fsum`` so
    the result is independent of client labeling.  With no neighbors
    the own delta is returned unscaled.
    """
    own = _check_head(state, head_deltas[client_id])
    if not row.neighbor_ids:
        return own.copy()
    stacked = np.stack([_check_head(state, head_deltas[j]) for j in row.neighbor_ids])
    terms = row.weights[:, np.newaxis] * stacked
    mixed = np.array([math.fsum(terms[:, d]) for d in range(state.head_dim)])
    w_self = state.config.w_self
    return w_self * own + (1.0 - w_self) * mixed


def meta_loss(delta_pers: np.ndarray, delta_u: np.ndarray, alpha: float, beta: float) -> float:
    """Squared-distance plus cosine-dissimilarity alignment loss."""
    delta_pers = np.asarray(delta_pers, dtype=np.float64).reshape(-1)
    delta_u = np.asarray(delta_u, dtype=np.float64).reshape(-1)
    if delta_pers.shape != delta_u.shape:
        raise StructuralError("personalized and raw deltas have different lengths")
    sq = float(np.sum((delta_pers - delta_u) ** 2))
    return alpha * sq + beta * (1.0 - cosine_similarity(delta_pers, delta_u))


def _sorted_deltas(state: AggregatorState, head_deltas: dict[str, np.ndarray]):
    ids = sorted(head_deltas)
    return ids, {i: _check_head(state, head_deltas[i]) for i in ids}


def aggregate_game(
    state: AggregatorState, head_deltas: dict[str, np.ndarray], training: bool = False
) -> tuple[dict[str, np.ndarray], list[AttentionRow]]:
    """Personalized deltas plus attention rows for every client."""
    ids, deltas = _sorted_deltas(state, head_deltas)
    embeddings = {i: encode(state, deltas[i]) for i in ids}
    rows = [attention_row(state, i, embeddings, training) for i in ids]
    pers = {r.client_id: personalized_delta(state, r.client_id, deltas, r) for r in rows}
    return pers, rows


def aggregate_single_attention(
    state: AggregatorState, head_deltas: dict[str, np.ndarray]
) -> tuple[dict[str, np.ndarray], list[AttentionRow]]:
    """Single shared attention score per pair: one expert, trivial gate."""
    if state.config.num_experts != 1 or state.config.top_k != 1:
        raise ConfigError("single-attention baseline needs num_experts = 1 and top_k = 1")
    return aggregate_game(state, head_deltas, training=False)


def aggregate_mean(
    head_deltas: dict[str, np.ndarray], w_self: float
) -> dict[str, np.ndarray]:
    """Fixed uniform neighbor averaging with the same self blend."""
    ids = sorted(head_deltas)
    deltas = {i: np.asarray(head_deltas[i], dtype=np.float64).reshape(-1) for i in ids}
    out = {}
    for i in ids:
        neighbors = [j for j in ids if j != i]
        if not neighbors:
            out[i] = deltas[i].copy()
            continue
        dim = deltas[i].size
        share = 1.0 / len(neighbors)
        terms = np.stack([share * deltas[j] for j in neighbors])
        mixed = np.array([math.fsum(terms[:, d]) for d in range(dim)])
        out[i] = w_self * deltas[i] + (1.0 - w_self) * mixed
    return out


# -- differentiable training path ----------------------------------------


def _parameter_names(state: AggregatorState) -> list[str]:
    names = ["encoder.w", "encoder.b", "experts.w", "experts.b"]
    for cid in sorted(state.gates):
        names.append(f"gate:{cid}.w")
        names.append(f"gate:{cid}.noise")
    return names


def _parameter_array(state: AggregatorState, name: str) -> np.ndarray:
    if name == "encoder.w":
        return state.encoder_w
    if name == "encoder.b":
        return state.encoder_b
    if name == "experts.w":
        return state.experts_w
    if name == "experts.b":
        return state.experts_b
    kind, _, rest = name.partition(":")
    cid, _, part = rest.rpartition(".")
    if kind == "gate" and cid in state.gates:
        return state.gates[cid].weight if part == "w" else state.gates[cid].noise
    raise ConfigError(f"unknown aggregator parameter {name!r}")


def flatten_parameters(state: AggregatorState) -> np.ndarray:
    """All learnable server parameters as one flat vector."""
    return np.concatenate(
        [_parameter_array(state, n).reshape(-1) for n in _parameter_names(state)]
    )


def load_parameters(state: AggregatorState, values: np.ndarray) -> None:
    """Inverse of :func:`flatten_parameters`; writes arrays in place."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    offset = 0
    for name in _parameter_names(state):
        arr = _parameter_array(state, name)
        chunk = values[offset : offset + arr.size]
        if chunk.size != arr.size:
            raise StructuralError("flat vector shorter than the parameter set")
        arr[...] = chunk.reshape(arr.shape)
        offset += arr.size
    if offset != values.size:
        raise StructuralError(
            f"flat vector has {values.size} entries, parameters need {offset}"
        )


def _graph_meta_loss(
    state: AggregatorState,
    deltas: dict[str, np.ndarray],
    masks: dict[str, np.ndarray],
    noise_draws: dict[str, np.ndarray] | None,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Differentiable mean meta-loss with a frozen top-k mask per client.

    Head deltas and noise draws enter as constants; gradients flow into
    encoder, experts and gates only.
    """
    cfg = state.config
    ids = sorted(deltas)
    tensors = {name: Tensor(_parameter_array(state, name)) for name in _parameter_names(state)}
    embeddings = {
        i: Tensor(deltas[i]) @ tensors["encoder.w"] + tensors["encoder.b"] for i in ids
    }
    losses = []
    for i in ids:
        e_i = embeddings[i]
        logits = e_i @ tensors[f"gate:{i}.w"]
        if noise_draws is not None:
            scale = (e_i @ tensors[f"gate:{i}.noise"]).softplus()
            logits = logits + scale * noise_draws[i]
        kept = masks[i]
        z = logits[kept]
        ez = (z - float(np.max(z.data))).exp()
        mix = ez / ez.sum()
        neighbors = [j for j in ids if j != i]
        own = Tensor(deltas[i])
        if neighbors:
            scores = []
            for j in neighbors:
                cat = concat([embeddings[j], e_i])
                s_ij = tensors["experts.w"] @ cat + tensors["experts.b"]
                scores.append(dot(mix, s_ij[kept]))
            vs = stack_scalars(scores)
            zz = (vs - float(np.max(vs.data))) * (1.0 / cfg.temperature)
            ew = zz.exp()
            weights = ew / ew.sum()
            neighbor_mat = np.stack([deltas[j] for j in neighbors])
            pers = own * cfg.w_self + (weights @ neighbor_mat) * (1.0 - cfg.w_self)
        else:
            pers = own
        diff = pers - own
        sq = (diff * diff).sum()
        norm_p = float(np.linalg.norm(pers.data))
        norm_u = float(np.linalg.norm(deltas[i]))
        if norm_p < NORM_TOLERANCE or norm_u < NORM_TOLERANCE:
            cos = Tensor(0.0)
        else:
            cos = dot(pers, own) / ((dot(pers, pers).sqrt() * dot(own, own).sqrt()))
        losses.append(sq * cfg.alpha + (1.0 - cos) * cfg.beta)
    return stack_scalars(losses).mean(), tensors


def clean_top_k_masks(
    state: AggregatorState, head_deltas: dict[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """Noise-free top-k expert selection per client, as index arrays."""
    masks = {}
    for i in sorted(head_deltas):
        e_i = encode(state, _check_head(state, head_deltas[i]))
        masks[i] = top_k_indices(gate_logits(state, i, e_i, training=False), state.config.top_k)
    return masks


def mean_meta_loss(
    state: AggregatorState,
    head_deltas: dict[str, np.ndarray],
    masks: dict[str, np.ndarray] | None = None,
) -> float:
    """Noise-free mean meta-loss; pass ``masks`` to pin top-k selection."""
    ids, deltas = _sorted_deltas(state, head_deltas)
    for i in ids:
        _require_gate(state, i)
    if masks is None:
        masks = clean_top_k_masks(state, deltas)
    loss, _ = _graph_meta_loss(state, deltas, masks, noise_draws=None)
    return float(loss.data)


def meta_gradient(
    state: AggregatorState,
    head_deltas: dict[str, np.ndarray],
    masks: dict[str, np.ndarray] | None = None,
) -> np.ndarray:
    """Noise-free gradient of the mean meta-loss, flattened like
    :func:`flatten_parameters`."""
    ids, deltas = _sorted_deltas(state, head_deltas)
    for i in ids:
        _require_gate(state, i)
    if masks is None:
        masks = clean_top_k_masks(state, deltas)
    loss, tensors = _graph_meta_loss(state, deltas, masks, noise_draws=None)
    loss.backward()
    return np.concatenate(
        [tensors[n].grad.reshape(-1) for n in _parameter_names(state)]
    )


def train_step(state: AggregatorState, head_deltas: dict[str, np.ndarray]) -> float:
    """One Adam step on the mean meta-loss; returns the pre-step loss.

    Exploration noise (when enabled) perturbs the gate logits for both
    expert selection and the surviving softmax; the noise draw and the
    selected top-k mask are constants within the step.
    """
    ids, deltas = _sorted_deltas(state, head_deltas)
    if len(ids) < 2:
        raise UsageError("train_step needs at least two clients")
    for i in ids:
        _require_gate(state, i)

    cfg = state.config
    noise_draws = None
    if cfg.noise_enabled:
        noise_draws = {i: state.rng.standard_normal(cfg.num_experts) for i in ids}

    masks = {}
    step_logits = {}
    for i in ids:
        e_i = encode(state, deltas[i])
        logits = e_i @ state.gates[i].weight
        if noise_draws is not None:
            logits = logits + noise_draws[i] * _softplus(e_i @ state.gates[i].noise)
        masks[i] = top_k_indices(logits, cfg.top_k)
        step_logits[i] = logits

    loss, tensors = _graph_meta_loss(state, deltas, masks, noise_draws)
    loss.backward()

    state.adam_t += 1
    t = state.adam_t
    for name in _parameter_names(state):
        grad = tensors[name].grad
        if not np.all(np.isfinite(grad)):
            dump = "; ".join(f"{i}: {np.array2string(step_logits[i])}" for i in ids)
            raise NumericError(
                f"non-finite meta-loss gradient for {name!r}; gate logits {dump}"
            )
        m = state.adam_m.setdefault(name, np.zeros_like(grad))
        v = state.adam_v.setdefault(name, np.zeros_like(grad))
        m[...] = ADAM_BETA1 * m + (1 - ADAM_BETA1) * grad
        v[...] = ADAM_BETA2 * v + (1 - ADAM_BETA2) * grad**2
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        arr = _parameter_array(state, name)
        arr -= cfg.server_lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return float(loss.data)
