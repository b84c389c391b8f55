"""
Inside the learned aggregator
=============================

Feeds hand-made head deltas through every stage of the server-side
aggregator: embedding, expert scoring, sparse gating, attention, and
the personalized delta, then trains the aggregator on a fixed batch
and watches the meta-loss fall.
"""

import numpy as np

from fedgame import (
    AggregatorConfig,
    aggregate_game,
    init_aggregator,
    mean_meta_loss,
    register_client,
    train_step,
)
from fedgame.aggregator import attention_row, encode, gate_weights, gate_logits

rng = np.random.default_rng(3)
cfg = AggregatorConfig(embed_dim=6, num_experts=4, top_k=2, noise_enabled=False)
state = init_aggregator(cfg, head_dim=10, rng=np.random.default_rng(42))

# Two clients share a direction, the third points elsewhere.
shared = rng.normal(size=10)
deltas = {
    "a": shared + 0.05 * rng.normal(size=10),
    "b": shared + 0.05 * rng.normal(size=10),
    "c": -shared + 0.05 * rng.normal(size=10),
}
for cid in sorted(deltas):
    register_client(state, cid)

# Stage 1: a shared affine encoder maps each head delta to an embedding.
embeddings = {cid: encode(state, delta) for cid, delta in deltas.items()}
print("embedding norms:", {c: round(float(np.linalg.norm(e)), 3)
                           for c, e in embeddings.items()})

# Stage 2: per-client gates pick top-k experts and softmax their logits.
logits = gate_logits(state, "a", embeddings["a"], training=False)
mix = gate_weights(logits, cfg.top_k)
print(f"client a logits {np.round(logits, 3)} -> expert mix {np.round(mix, 3)}")
print(f"nonzero experts: {np.count_nonzero(mix)} of {cfg.num_experts}")

# Stage 3: mixed expert scores become attention over the other clients.
row = attention_row(state, "a", embeddings, training=False)
print("client a attends to",
      {j: round(float(w), 3) for j, w in zip(row.neighbor_ids, row.weights)})

# Stage 4: the personalized delta blends own and neighbor updates.
pers, rows = aggregate_game(state, deltas)
for cid in sorted(pers):
    align = float(np.dot(pers[cid], deltas[cid])
                  / (np.linalg.norm(pers[cid]) * np.linalg.norm(deltas[cid])))
    print(f"{cid}: |pers| {np.linalg.norm(pers[cid]):.3f}, "
          f"cosine to own delta {align:.3f}")

# Training aligns personalized deltas with the clients' raw deltas.
print("\nmeta-loss over 40 training steps:")
for step in range(40):
    loss = train_step(state, deltas)
    if step % 10 == 0:
        print(f"  step {step:2d}: {loss:.6f}")
print(f"  final  : {mean_meta_loss(state, deltas):.6f}")
