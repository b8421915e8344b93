"""Experiment harness: generate data, train grouping variants, sweep seeds,
and emit the benchmark table plus cluster-history artifacts.

All outputs are reproducible bit-exactly from (config, seed): no timestamps
or machine state enter results.json, history.jsonl, checkpoints, or CSVs.
Wall-clock timings live only in the benchmark manifest.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .metrics import ari, nmi, silhouette
from .serialization import read_checkpoint, write_checkpoint, write_tensors
from .synthdata import (
    GpSpec,
    LabeledDataset,
    STATIC_MODES,
    export_csv,
    generate_dataset,
    load_dataset,
    save_dataset,
    static_kmeans_baseline,
    static_transform,
)
from .trainer import (
    RESULTS_SCHEMA,
    ExperimentConfig,
    TrainResult,
    TrainingDiverged,
    train,
)

CONFIG_SCHEMA = "featgroups-config-v1"
BENCHMARK_SCHEMA = "featgroups-benchmark-v1"
FLOW_SCHEMA = "featgroups-clusterflow-v1"
OUTPUT_ROOT_ENV = "FEATGROUPS_OUT"

BENCHMARK_VARIANTS = ("random", "oracle") + tuple(f"static_{m}" for m in STATIC_MODES) + ("dynamic",)


class ConfigError(Exception):
    """Anything wrong with the configuration file or overrides."""


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------


def default_config() -> dict:
    return {
        "schema": CONFIG_SCHEMA,
        "dataset": {
            "samples": 10000,
            "length": 20,
            "features": 6,
            "length_scales": [1.0, 2.0, 4.0, 8.0, 1.0, 2.0],
            "amplitudes": [0.5, 1.0, 3.5, 0.5, 0.5, 0.5],
            "seed": 0,
        },
        "train": ExperimentConfig().to_dict(),
        "output_dir": "runs",
    }


def load_config(path: str | None, overrides: list[str]) -> dict:
    config = default_config()
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}")
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        schema = user.get("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ConfigError(f"{path}: unsupported schema {schema!r} (expected {CONFIG_SCHEMA})")
        for section in ("dataset", "train"):
            body = user.get(section, {})
            if not isinstance(body, dict):
                raise ConfigError(f"{path}: section {section!r} must be an object")
            for key, value in body.items():
                if key not in config[section]:
                    raise ConfigError(f"{path}: unknown field {section}.{key}")
                config[section][key] = value
        if "output_dir" in user:
            config["output_dir"] = user["output_dir"]
        unknown = set(user) - {"schema", "dataset", "train", "output_dir"}
        if unknown:
            raise ConfigError(f"{path}: unknown top-level fields {sorted(unknown)}")
    for item in overrides:
        apply_override(config, item)
    return config


def apply_override(config: dict, item: str):
    """`--override dotted.path=value`; bare keys resolve into the train section."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    if len(parts) == 1:
        if parts[0] in config["train"]:
            config["train"][parts[0]] = value
            return
        if parts[0] == "output_dir":
            config["output_dir"] = value
            return
        raise ConfigError(f"override {key!r}: no such train field")
    node = config
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"override {key!r}: no such config path")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"override {key!r}: no such config path")
    node[parts[-1]] = value


def experiment_config(config: dict, **replacements) -> ExperimentConfig:
    body = dict(config["train"])
    body.update(replacements)
    try:
        return ExperimentConfig.from_dict(body)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train config invalid: {exc}")


def gp_spec(config: dict) -> GpSpec:
    try:
        return GpSpec(**config["dataset"])
    except TypeError as exc:
        raise ConfigError(f"dataset config invalid: {exc}")
    except ValueError as exc:
        raise ConfigError(f"dataset config invalid: {exc}")


def output_dir(args, config: dict) -> Path:
    if args.out is not None:
        root = Path(args.out)
    elif OUTPUT_ROOT_ENV in os.environ:
        root = Path(os.environ[OUTPUT_ROOT_ENV])
    else:
        root = Path(config.get("output_dir", "runs"))
    root.mkdir(parents=True, exist_ok=True)
    return root


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True).encode()
    return hashlib.sha256(canon).hexdigest()[:16]


def parse_seeds(arg: str | None, fallback: list[int]) -> list[int]:
    if arg is None:
        return fallback
    try:
        return [int(s) for s in arg.split(",") if s.strip() != ""]
    except ValueError:
        raise ConfigError(f"--seeds must be a comma-separated list of integers, got {arg!r}")


# ----------------------------------------------------------------------
# dataset plumbing
# ----------------------------------------------------------------------


def dataset_paths(root: Path) -> tuple[Path, Path]:
    return root / "dataset.bin", root / "dataset.json"


def require_dataset(root: Path, config: dict) -> LabeledDataset:
    binary, sidecar = dataset_paths(root)
    if not binary.exists() or not sidecar.exists():
        raise ConfigError(
            f"dataset not found under {root} (expected {binary.name} and {sidecar.name}); "
            "run the generate command first"
        )
    return load_dataset(binary, sidecar)


# ----------------------------------------------------------------------
# per-run artifacts
# ----------------------------------------------------------------------


def run_single_training(config: dict, dataset: LabeledDataset, seed: int, out: Path) -> dict:
    exp = experiment_config(config, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = train(exp, dataset)
    except TrainingDiverged as exc:
        diagnostic = {
            "schema": RESULTS_SCHEMA,
            "status": "diverged",
            "seed": seed,
            "divergence": exc.result.divergence_info,
        }
        (out / "results.json").write_text(json.dumps(diagnostic, sort_keys=True, indent=2) + "\n")
        raise
    write_run_artifacts(result, exp, out)
    return result.metrics


def write_run_artifacts(result: TrainResult, exp: ExperimentConfig, out: Path):
    with open(out / "history.jsonl", "w") as fh:
        for record in result.history:
            fh.write(record.to_json() + "\n")
    metrics = {k: v for k, v in result.metrics.items() if k != "partition"}
    results = {
        "schema": RESULTS_SCHEMA,
        "status": "ok",
        "config": exp.to_dict(),
        "best_epoch": result.best_epoch,
        "epochs_ran": len(result.history),
        "metrics": metrics,
        "partition": result.metrics.get("partition"),
    }
    (out / "results.json").write_text(json.dumps(results, sort_keys=True, indent=2) + "\n")
    model_state = result.model.state_dict()
    model_state["input_norm/mean"] = result.norm_mean
    model_state["input_norm/std"] = result.norm_std
    write_checkpoint(out / "checkpoint.bin", model_state, result.cluster_state)


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------


def cmd_generate(args) -> int:
    config = load_config(args.config, args.override)
    root = output_dir(args, config)
    dataset = generate_dataset(gp_spec(config))
    binary, sidecar = dataset_paths(root)
    save_dataset(dataset, binary, sidecar)
    if args.csv:
        export_csv(dataset, root / "dataset.csv")
    print(f"wrote {binary} ({dataset.series.shape[0]}x{dataset.series.shape[1]}x{dataset.series.shape[2]})")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config, args.override)
    root = output_dir(args, config)
    dataset = require_dataset(root, config)
    seeds = parse_seeds(args.seeds, [int(config["train"]["seed"])])
    jobs = max(1, args.jobs)

    def one(seed: int):
        out = root if len(seeds) == 1 else root / f"seed_{seed}"
        return run_single_training(config, dataset, seed, out)

    if jobs == 1 or len(seeds) == 1:
        all_metrics = [one(seed) for seed in seeds]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            all_metrics = list(pool.map(one, seeds))
    for seed, metrics in zip(seeds, all_metrics):
        shown = {k: round(v, 4) for k, v in metrics.items() if isinstance(v, float)}
        print(f"seed {seed}: {shown}")
    return 0


def _float_or_nan(value) -> float:
    return float("nan") if value is None else float(value)


def benchmark_variant(
    variant: str, config: dict, dataset: LabeledDataset, seed: int, out_root: Path
) -> dict:
    """One (variant, seed) cell: returns ari/nmi/silhouette plus run info."""
    truth = dataset.truth_labels
    start = time.monotonic()
    if variant.startswith("static_"):
        mode = variant[len("static_") :]
        member = static_kmeans_baseline(dataset, mode, int(config["train"]["groups"]), seed)
        partition = member.argmax(axis=1)
        vectors = static_transform(dataset, mode)
        sil = silhouette(vectors, partition) if len(np.unique(partition)) >= 2 else None
        return {
            "ari": ari(truth, partition),
            "nmi": nmi(truth, partition),
            "silhouette": sil,
            "seconds": time.monotonic() - start,
            "out": None,
        }
    if variant == "oracle":
        replacements = {"grouping": "fixed", "fixed_groups": truth.tolist()}
    elif variant == "random":
        k = int(config["train"]["groups"])
        assignment = np.random.default_rng([seed, 99]).integers(0, k, size=truth.size)
        replacements = {"grouping": "fixed", "fixed_groups": assignment.tolist()}
    else:  # dynamic
        replacements = {"grouping": "dynamic", "fixed_groups": None}
    exp = experiment_config(config, seed=seed, **replacements)
    out = out_root / variant / f"seed_{seed}"
    out.mkdir(parents=True, exist_ok=True)
    result = train(exp, dataset)
    write_run_artifacts(result, exp, out)
    return {
        "ari": result.metrics["ari"],
        "nmi": result.metrics["nmi"],
        "silhouette": result.metrics["silhouette"],
        "seconds": time.monotonic() - start,
        "out": str(out),
    }


def cmd_benchmark(args) -> int:
    config = load_config(args.config, args.override)
    root = output_dir(args, config)
    binary, sidecar = dataset_paths(root)
    if binary.exists() and sidecar.exists():
        dataset = load_dataset(binary, sidecar)
    else:
        dataset = generate_dataset(gp_spec(config))
        save_dataset(dataset, binary, sidecar)
    seeds = parse_seeds(args.seeds, [0, 1, 2, 3, 4])
    jobs = max(1, args.jobs)
    cells = [(variant, seed) for variant in BENCHMARK_VARIANTS for seed in seeds]

    def one(cell):
        variant, seed = cell
        try:
            return benchmark_variant(variant, config, dataset, seed, root)
        except Exception as exc:  # a failed cell must not sink the table
            return {"error": f"{type(exc).__name__}: {exc}", "seconds": 0.0, "out": None}

    if jobs == 1:
        outcomes = [one(cell) for cell in cells]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(one, cells))
    by_variant: dict[str, list] = {v: [] for v in BENCHMARK_VARIANTS}
    for (variant, seed), outcome in zip(cells, outcomes):
        by_variant[variant].append((seed, outcome))

    table_path = root / "benchmark.csv"
    with open(table_path, "w") as fh:
        fh.write(f"# schema: {BENCHMARK_SCHEMA}\n")
        fh.write(
            "variant,seeds,ari_mean,ari_std,nmi_mean,nmi_std,"
            "silhouette_mean,silhouette_std,status\n"
        )
        for variant in BENCHMARK_VARIANTS:
            rows = by_variant[variant]
            failed = [outcome for _, outcome in rows if "error" in outcome]
            if failed:
                fh.write(f"{variant},{len(rows)},,,,,,,FAILED\n")
                continue
            stats = {}
            for key in ("ari", "nmi", "silhouette"):
                values = np.array([_float_or_nan(outcome[key]) for _, outcome in rows])
                stats[key] = (np.nanmean(values), np.nanstd(values))
            fh.write(
                f"{variant},{len(rows)},"
                f"{stats['ari'][0]:.6f},{stats['ari'][1]:.6f},"
                f"{stats['nmi'][0]:.6f},{stats['nmi'][1]:.6f},"
                f"{stats['silhouette'][0]:.6f},{stats['silhouette'][1]:.6f},OK\n"
            )

    manifest = {
        "schema": BENCHMARK_SCHEMA,
        "version": __version__,
        "config_hash": config_hash(config),
        "seeds": seeds,
        "table": str(table_path),
        "runs": [
            {
                "variant": variant,
                "seed": seed,
                "out": outcome.get("out"),
                "wall_seconds": round(outcome.get("seconds", 0.0), 3),
                "error": outcome.get("error"),
            }
            for (variant, seed), outcome in zip(cells, outcomes)
        ],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print(table_path.read_text(), end="")
    failures = [run for run in manifest["runs"] if run["error"]]
    for run in failures:
        print(f"FAILED {run['variant']} seed {run['seed']}: {run['error']}", file=sys.stderr)
    return 0


def cmd_history(args) -> int:
    path = Path(args.history)
    if not path.exists():
        raise ConfigError(f"history file not found: {path}")
    flow_rows = []
    size_rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                epoch = record["epoch"]
                member = np.asarray(record["membership"], dtype=np.int64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"{path}:{lineno}: malformed history record ({exc})")
            for feature in range(member.shape[0]):
                flow_rows.append((epoch, feature, int(member[feature].argmax())))
            for cluster in range(member.shape[1]):
                size_rows.append((epoch, cluster, int(member[:, cluster].sum())))
    out = Path(args.out) if args.out else path.parent
    out.mkdir(parents=True, exist_ok=True)
    flow_path = out / "cluster_flow.csv"
    with open(flow_path, "w") as fh:
        fh.write(f"# schema: {FLOW_SCHEMA}\n")
        fh.write("epoch,feature,cluster\n")
        for row in flow_rows:
            fh.write(f"{row[0]},{row[1]},{row[2]}\n")
    sizes_path = out / "cluster_sizes.csv"
    with open(sizes_path, "w") as fh:
        fh.write(f"# schema: {FLOW_SCHEMA}\n")
        fh.write("epoch,cluster,size\n")
        for row in size_rows:
            fh.write(f"{row[0]},{row[1]},{row[2]}\n")
    print(f"wrote {flow_path} and {sizes_path}")
    return 0


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featgroups",
        description="Learned feature-group experiments on the synthetic benchmark",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--out", help=f"output directory (or ${OUTPUT_ROOT_ENV}, or config output_dir)")
        p.add_argument(
            "--override",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="config override, dotted path (train.seed=3) or bare train field (seed=3)",
        )

    p = sub.add_parser("generate", help="generate the synthetic dataset files")
    common(p)
    p.add_argument("--csv", action="store_true", help="also write a CSV view of the series")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one run (or a seed sweep) on the generated dataset")
    common(p)
    p.add_argument("--seeds", help="comma-separated training seeds (default: config train.seed)")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers for seed sweeps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("benchmark", help="random/oracle/static/dynamic table over seeds")
    common(p)
    p.add_argument("--seeds", help="comma-separated seeds (default: 0,1,2,3,4)")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("history", help="convert a history.jsonl into cluster-flow CSVs")
    p.add_argument("history", help="path to history.jsonl")
    p.add_argument("--out", help="output directory (default: alongside the history file)")
    p.set_defaults(func=cmd_history)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(json.dumps({"error": str(exc), "info": exc.result.divergence_info}), file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure contract: exit 1 with diagnostic
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
