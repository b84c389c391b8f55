"""Command-line entry point: config parsing, commands, report files.

Configs are flat JSON objects.  Validation is exhaustive: every
problem is reported at once and unknown keys are rejected, so a typo
cannot silently fall back to a default.  All output files are written
deterministically; re-running an emitted effective config reproduces
them byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

from .data import shards_to_csv, synth_generate
from .errors import FedGameError
from .forecaster import build_spec
from .params import head_length, total_params
from .protocol import (
    AGGREGATOR_KINDS,
    PERSONALIZED_KINDS,
    ExperimentConfig,
    RunResult,
    run_experiment,
    seed_stream,
)

OUTPUT_DIR_ENV = "FEDGAME_OUTPUT_DIR"

_INT_KEYS = {
    "n_clients", "n_clusters", "series_length", "history_len", "horizon",
    "local_epochs", "batch_size", "embed_dim", "num_experts", "top_k",
    "rounds", "master_seed", "published_total_params", "published_head_params",
}
_FLOAT_KEYS = {
    "noise_sd", "train_frac", "val_frac", "test_frac", "local_lr", "prox_mu",
    "temperature", "w_self", "alpha", "beta", "server_lr", "eta", "gamma",
    "participation",
}
_STR_KEYS = {"csv_path", "arch", "aggregator_kind", "output_dir"}
_BOOL_KEYS = {"noise_enabled"}
_FLOAT_LIST_KEYS = {"quantiles"}
_INT_LIST_KEYS = {"hidden_sizes"}
_STR_LIST_KEYS = {"baselines"}
_OPTIONAL_KEYS = {"csv_path", "published_total_params", "published_head_params"}
ALL_KEYS = (
    _INT_KEYS | _FLOAT_KEYS | _STR_KEYS | _BOOL_KEYS
    | _FLOAT_LIST_KEYS | _INT_LIST_KEYS | _STR_LIST_KEYS
)


def _typed(raw: dict, errors: list[str]) -> dict:
    """Coerce values to their schema types, recording every mismatch."""
    out = {}
    for key, value in raw.items():
        if key not in ALL_KEYS:
            errors.append(f"unknown key {key!r}")
            continue
        if value is None and key in _OPTIONAL_KEYS:
            out[key] = None
            continue
        if key in _INT_KEYS:
            if isinstance(value, bool) or not isinstance(value, int):
                errors.append(f"{key} must be an integer, got {value!r}")
            else:
                out[key] = value
        elif key in _FLOAT_KEYS:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                errors.append(f"{key} must be a number, got {value!r}")
            else:
                out[key] = float(value)
        elif key in _BOOL_KEYS:
            if not isinstance(value, bool):
                errors.append(f"{key} must be true or false, got {value!r}")
            else:
                out[key] = value
        elif key in _STR_KEYS:
            if not isinstance(value, str):
                errors.append(f"{key} must be a string, got {value!r}")
            else:
                out[key] = value
        elif key in _FLOAT_LIST_KEYS:
            if (not isinstance(value, list) or not value
                    or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value)):
                errors.append(f"{key} must be a non-empty list of numbers, got {value!r}")
            else:
                out[key] = tuple(float(v) for v in value)
        elif key in _INT_LIST_KEYS:
            if (not isinstance(value, list) or not value
                    or any(isinstance(v, bool) or not isinstance(v, int) for v in value)):
                errors.append(f"{key} must be a non-empty list of integers, got {value!r}")
            else:
                out[key] = tuple(value)
        elif key in _STR_LIST_KEYS:
            if (not isinstance(value, list) or not value
                    or any(not isinstance(v, str) for v in value)):
                errors.append(f"{key} must be a non-empty list of strings, got {value!r}")
            else:
                out[key] = tuple(value)
    return out


def _check_domains(cfg: dict, errors: list[str]) -> None:
    """Domain checks on top of type checks; every violation recorded."""

    def got(key):
        return cfg.get(key, getattr(ExperimentConfig, key))

    for key in ("n_clients", "n_clusters", "series_length", "history_len",
                "horizon", "local_epochs", "batch_size", "embed_dim",
                "num_experts", "top_k", "rounds"):
        if key in cfg and cfg[key] < (0 if key == "rounds" else 1):
            errors.append(f"{key} must be positive, got {cfg[key]}")
    for key in ("noise_sd", "prox_mu", "alpha", "beta", "eta", "gamma"):
        if key in cfg and cfg[key] < 0:
            errors.append(f"{key} must be >= 0, got {cfg[key]}")
    for key in ("local_lr", "server_lr", "temperature"):
        if key in cfg and cfg[key] <= 0:
            errors.append(f"{key} must be > 0, got {cfg[key]}")
    if not 0.0 <= got("w_self") <= 1.0:
        errors.append(f"w_self must lie in [0, 1], got {got('w_self')}")
    if not 0.0 < got("participation") <= 1.0:
        errors.append(f"participation must lie in (0, 1], got {got('participation')}")

    fracs = [got(k) for k in ("train_frac", "val_frac", "test_frac")]
    if any(f < 0 for f in fracs):
        errors.append("train_frac, val_frac, test_frac must be >= 0")
    elif abs(sum(fracs) - 1.0) > 1e-9:
        errors.append(
            f"train_frac, val_frac, test_frac must sum to 1, got {sum(fracs)}"
        )

    if got("top_k") > got("num_experts"):
        errors.append(
            f"top_k must not exceed num_experts "
            f"(top_k={got('top_k')}, num_experts={got('num_experts')})"
        )
    if any(not 0.0 < q < 1.0 for q in got("quantiles")):
        errors.append(f"quantiles must lie strictly in (0, 1), got {list(got('quantiles'))}")
    if any(h < 1 for h in got("hidden_sizes")):
        errors.append(f"hidden_sizes must be positive, got {list(got('hidden_sizes'))}")
    if got("arch") not in ("mlp", "lstm"):
        errors.append(f"arch must be 'mlp' or 'lstm', got {got('arch')!r}")
    if got("aggregator_kind") not in AGGREGATOR_KINDS:
        errors.append(
            f"aggregator_kind must be one of {list(AGGREGATOR_KINDS)}, "
            f"got {got('aggregator_kind')!r}"
        )
    bad = [b for b in got("baselines") if b not in AGGREGATOR_KINDS]
    if bad:
        errors.append(f"baselines contains unknown kinds {bad}")
    for key in ("published_total_params", "published_head_params"):
        if cfg.get(key) is not None and cfg[key] < 1:
            errors.append(f"{key} must be positive, got {cfg[key]}")


def config_from_dict(raw: dict) -> tuple[ExperimentConfig | None, list[str]]:
    """Validate a parsed JSON object; returns (config, errors)."""
    if not isinstance(raw, dict):
        return None, ["config must be a JSON object"]
    errors: list[str] = []
    cfg = _typed(raw, errors)
    _check_domains(cfg, errors)
    if errors:
        return None, errors
    return ExperimentConfig(**cfg), []


def load_config(path: str) -> tuple[ExperimentConfig | None, list[str]]:
    try:
        with open(path, encoding="utf-8") as handle:
            raw = json.load(handle)
    except OSError as exc:
        return None, [f"cannot read config file: {exc}"]
    except json.JSONDecodeError as exc:
        return None, [f"config is not valid JSON: {exc}"]
    return config_from_dict(raw)


def config_to_dict(config: ExperimentConfig) -> dict:
    out = {}
    for field in fields(config):
        value = getattr(config, field.name)
        out[field.name] = list(value) if isinstance(value, tuple) else value
    return out


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_run_outputs(result: RunResult, out_dir: Path, config: ExperimentConfig) -> None:
    """rounds.jsonl, eval.json, eval.csv, attention.csv, config.json."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "rounds.jsonl", "w", encoding="utf-8") as handle:
        for report in result.reports:
            handle.write(json.dumps(report.to_json_dict(), sort_keys=True) + "\n")
    _json_dump(result.eval_report.to_dict(), out_dir / "eval.json")
    rows = result.eval_report.csv_rows()
    _write_csv(
        out_dir / "eval.csv",
        ["client_id", "qs", "mil", "icp", "n"],
        [[r["client_id"], repr(r["qs"]), repr(r["mil"]), repr(r["icp"]), r["n"]] for r in rows],
    )
    attention_rows = []
    for report in result.reports:
        ids = report.client_ids
        for i, src in enumerate(ids):
            for j, dst in enumerate(ids):
                if i != j:
                    attention_rows.append(
                        [report.round_index, src, dst, repr(float(report.attention[i, j]))]
                    )
    _write_csv(out_dir / "attention.csv", ["round", "i", "j", "w_ij"], attention_rows)
    _json_dump(config_to_dict(config), out_dir / "config.json")


def cmd_run(config: ExperimentConfig, out_dir: Path) -> int:
    result = run_experiment(config)
    write_run_outputs(result, out_dir, config)
    print(f"wrote {out_dir / 'rounds.jsonl'} and evaluation reports")
    print(f"macro qs={result.eval_report.macro_qs:.6f} "
          f"mil={result.eval_report.macro_mil:.6f} "
          f"icp={result.eval_report.macro_icp:.6f}")
    return 0


def cmd_ablate(config: ExperimentConfig, out_dir: Path) -> int:
    """Same seeds per method; one comparison row per aggregator kind."""
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for kind in config.baselines:
        result = run_experiment(config, kind)
        report = result.eval_report
        rows.append([kind, repr(report.macro_qs), repr(report.macro_mil),
                     repr(report.macro_icp)])
        print(f"{kind:18s} qs={report.macro_qs:.6f} "
              f"mil={report.macro_mil:.6f} icp={report.macro_icp:.6f}")
    _write_csv(out_dir / "ablation.csv", ["method", "qs", "mil", "icp"], rows)
    _json_dump(config_to_dict(config), out_dir / "config.json")
    print(f"wrote {out_dir / 'ablation.csv'}")
    return 0


def comm_summary(config: ExperimentConfig) -> dict:
    """Closed-form per-round traffic for the configured model.

    Published parameter counts, when provided, replace the counts
    derived from the layer layout, so externally reported model sizes
    can be checked without rebuilding the exact architecture.
    """
    spec = build_spec(config.forecaster_config())
    total = config.published_total_params or total_params(spec)
    head = config.published_head_params or head_length(spec)
    kind = config.aggregator_kind
    n = config.n_clients
    r = head / total
    if kind == "local_only":
        upstream = downstream = 0
        ratio = 0.0
        percent = 0.0
    else:
        upstream = n * total
        downstream = n * total
        ratio = 1.0
        percent = 0.0
        if kind in PERSONALIZED_KINDS:
            downstream += n * head
            ratio = 1.0 + r / 2.0
            percent = round(round(r, 4) / 2.0 * 100.0, 6)
    return {
        "aggregator_kind": kind,
        "n_clients": n,
        "total_params": int(total),
        "head_params": int(head),
        "upstream_params": int(upstream),
        "downstream_params": int(downstream),
        "ratio": ratio,
        "overhead_percent": percent,
    }


def cmd_comm(config: ExperimentConfig) -> int:
    print(json.dumps(comm_summary(config), sort_keys=True, indent=2))
    return 0


def cmd_synth(config: ExperimentConfig, out_dir: Path) -> int:
    shards = synth_generate(
        config.n_clients, config.n_clusters, config.series_length,
        config.noise_sd, seed_stream(config.master_seed, "data"),
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "synth.csv"
    shards_to_csv(shards, path)
    print(f"wrote {path}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedgame",
        description="Personalized federated forecasting experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "run": "run one experiment and write round and evaluation reports",
        "ablate": "run every configured baseline on the same seeds",
        "comm": "print per-round communication cost for the configured model",
        "synth": "emit the configured synthetic dataset as CSV",
    }
    for name, text in descriptions.items():
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("config", help="path to a JSON config file")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override master_seed from the config")
        cmd.add_argument("--output-dir", default=None,
                         help=f"override output directory (also {OUTPUT_DIR_ENV})")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    config, errors = load_config(args.config)
    if errors:
        print(f"config has {len(errors)} error(s):", file=sys.stderr)
        for error in errors:
            print(f"  - {error}", file=sys.stderr)
        return 2

    updates = {}
    if args.seed is not None:
        updates["master_seed"] = args.seed
    out_override = args.output_dir or os.environ.get(OUTPUT_DIR_ENV)
    if out_override:
        updates["output_dir"] = out_override
    if updates:
        config = replace(config, **updates)
    out_dir = Path(config.output_dir)

    try:
        if args.command == "run":
            return cmd_run(config, out_dir)
        if args.command == "ablate":
            return cmd_ablate(config, out_dir)
        if args.command == "comm":
            return cmd_comm(config)
        return cmd_synth(config, out_dir)
    except FedGameError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
