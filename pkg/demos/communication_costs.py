"""
What personalization costs on the wire
======================================

Per round every client uploads its full parameter difference and
downloads the consensus model; the personalized kinds add one head
slice per client on the downlink.  With r = head/total the traffic
ratio against plain consensus training is 1 + r/2, which stays tiny
because the head is a sliver of the model.
"""

from fedgame.cli import comm_summary, config_from_dict
from fedgame import ExperimentConfig, run_experiment

# Published large-scale forecasters: two stacked LSTM layers (256, 128)
# with a quantile head for 6- and 12-step horizons.
for horizon, total in ((6, 996_013), (12, 994_852)):
    config, errors = config_from_dict({
        "arch": "lstm",
        "hidden_sizes": [256, 128],
        "horizon": horizon,
        "quantiles": [0.1, 0.5, 0.9],
        "published_total_params": total,
        "n_clients": 8,
    })
    assert not errors
    summary = comm_summary(config)
    print(f"{horizon:2d}-step model: head {summary['head_params']:,} of "
          f"{summary['total_params']:,} params, ratio {summary['ratio']:.6f}, "
          f"overhead {summary['overhead_percent']}%")

# The same arithmetic on a desk-scale model, then measured per round.
config = ExperimentConfig(n_clients=4, n_clusters=2, series_length=200,
                          rounds=3, history_len=8, horizon=2,
                          hidden_sizes=(16,), embed_dim=8, master_seed=1)
summary = comm_summary(config)
print(f"\ndesk model: head {summary['head_params']} of "
      f"{summary['total_params']} params, ratio {summary['ratio']:.6f}")

print(f"\n{'kind':12s} {'up bytes/round':>15s} {'down bytes/round':>17s}")
for kind in ("game", "fedavg", "local_only"):
    result = run_experiment(config, kind)
    report = result.reports[-1]
    print(f"{kind:12s} {report.upstream_bytes:15,d} {report.downstream_bytes:17,d}")
