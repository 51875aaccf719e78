"""Command-line pipeline: gen-data, train, adapt, eval, report.

Every command is deterministic given its inputs and seed. Seed precedence:
--seed flag, then the TADE_SEED environment variable, then the config file.
Exit codes: 0 ok, 2 I/O error, 3 divergence, 4 contract violation,
5 empty/invalid input.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .aggregate import adapt
from .config import RunConfig, load_config
from .data import (
    ClassGroups,
    class_groups,
    empirical_prior,
    gen_gaussian_mixture,
    load_dataset,
    make_profile,
    make_test_split,
    percentile_thresholds,
    save_dataset,
)
from .errors import (
    AdaptationDiverged,
    CapacityError,
    ContractError,
    DomainError,
    InvalidInputError,
    ShapeError,
    TrainingDiverged,
)
from .evaluation import CSV_FIELDS, evaluate
from .model import check_weights, init_model, load_checkpoint, save_checkpoint
from .numkit import Rng
from .train import train

EXIT_OK = 0
EXIT_IO = 2
EXIT_DIVERGED = 3
EXIT_CONTRACT = 4
EXIT_INVALID = 5


def _resolve_seed(cfg: RunConfig, flag_seed: int | None) -> int:
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get("TADE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise InvalidInputError(f"TADE_SEED is not an integer: {env!r}") from e
    return cfg.seed


def _split_name(direction: str, rho: float) -> str:
    if direction == "uniform":
        return "uniform"
    r = int(rho) if float(rho).is_integer() else rho
    return f"{direction}_{r}"


def cmd_gen_data(cfg: RunConfig, seed: int, out_dir: Path) -> int:
    """Write the long-tailed train set, the balanced test pool, the full grid
    of skewed test splits, the class-group map, and the resolved config."""
    rng = Rng(seed).child("data")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "splits").mkdir(exist_ok=True)

    d = cfg.data
    train_profile = make_profile(d.classes, d.train_max_count, d.train_rho, "forward")
    train_set = gen_gaussian_mixture(train_profile, d.dim, d.separation, rng.child("train-set"))
    save_dataset(train_set, out_dir / "train.bin")

    pool_profile = make_profile(d.classes, d.test_per_class, 1.0, "uniform")
    pool = gen_gaussian_mixture(pool_profile, d.dim, d.separation, rng.child("pool"))
    save_dataset(pool, out_dir / "pool.bin")

    names = []
    for direction in ("forward", "backward"):
        for rho in d.rho_grid:
            if rho == 1.0:
                continue  # rho=1 collapses to the uniform split
            name = _split_name(direction, rho)
            split = make_test_split(pool, rho, direction, rng.child(f"split-{name}"))
            save_dataset(split, out_dir / "splits" / f"{name}.bin")
            names.append(name)
    uniform = make_test_split(pool, 1.0, "uniform", rng.child("split-uniform"))
    save_dataset(uniform, out_dir / "splits" / "uniform.bin")
    names.append("uniform")

    if d.group_mode == "percentile":
        many_t, few_t = percentile_thresholds(train_profile)
    else:
        many_t, few_t = d.many_thresh, d.few_thresh
    groups = class_groups(train_profile, many_t, few_t)
    payload = groups.to_dict()
    payload["thresholds"] = {"many": many_t, "few": few_t, "mode": d.group_mode}
    (out_dir / "groups.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    snapshot = cfg.to_dict()
    snapshot["seed"] = seed
    (out_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    print(f"wrote train set, pool, and {len(names)} test splits to {out_dir}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, seed: int, data_path: Path, out_path: Path,
              stats_path: Path | None) -> int:
    dataset = load_dataset(data_path)
    prior = empirical_prior(dataset)
    rng = Rng(seed)
    model = init_model(
        input_dim=dataset.dim,
        hidden=cfg.model.hidden,
        n_experts=cfg.model.experts,
        n_classes=dataset.profile.class_count,
        rng=rng.child("init"),
        head_hidden=cfg.model.head_hidden,
    )
    tcfg = cfg.train
    tcfg.seed = seed
    stream = open(stats_path, "w") if stats_path else None
    try:
        train(model, dataset, prior, tcfg, rng.child("train"), stats_stream=stream)
    finally:
        if stream:
            stream.close()
    save_checkpoint(model, out_path)
    print(f"checkpoint written to {out_path}")
    return EXIT_OK


def cmd_adapt(cfg: RunConfig, seed: int, ckpt_path: Path, split_path: Path,
              out_path: Path) -> int:
    model = load_checkpoint(ckpt_path)
    split = load_dataset(split_path)
    result = adapt(model, split, cfg.adapt, Rng(seed).child("adapt"))
    payload = {
        "w": [float(x) for x in result.state.w],
        "raw": [float(x) for x in result.state.raw],
        "stopped": result.state.stopped,
        "epochs_run": result.state.epoch,
        "trace": [
            {"epoch": r.epoch, "S": r.S, "w": list(r.w), "stopped": r.stopped}
            for r in result.trace
        ],
        "seed": seed,
    }
    out_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"weights {np.round(result.state.w, 4).tolist()} written to {out_path}"
          + (" (stopped early)" if result.state.stopped else ""))
    return EXIT_OK


def _load_weights(path: Path, n_experts: int) -> np.ndarray:
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise InvalidInputError(f"{path}: not valid JSON ({e})") from e
    w = doc["w"] if isinstance(doc, dict) else doc
    return check_weights(np.asarray(w, dtype=np.float64), n_experts)


def cmd_eval(cfg: RunConfig, seed: int, ckpt_path: Path, split_path: Path,
             weights_path: Path | None, groups_path: Path | None,
             out_path: Path | None, csv_path: Path | None, variant: str | None) -> int:
    model = load_checkpoint(ckpt_path)
    split = load_dataset(split_path)
    if weights_path is None:
        w = np.full(model.n_experts, 1.0 / model.n_experts)
        variant = variant or "uniform"
    else:
        w = _load_weights(weights_path, model.n_experts)
        variant = variant or "adapted"
    groups = None
    if groups_path is not None:
        groups = ClassGroups.from_dict(json.loads(groups_path.read_text()))
    report = evaluate(model, split, w, cfg.views, Rng(seed).child("eval"), groups=groups)
    report.split = split_path.stem
    report.variant = variant

    text = report.to_json()
    if out_path is None:
        sys.stdout.write(text)
    else:
        out_path.write_text(text)
    if csv_path is not None:
        new = not csv_path.exists()
        with open(csv_path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(CSV_FIELDS)
            writer.writerow(report.csv_row())
    return EXIT_OK


_DIR_ORDER = {"forward": 0, "uniform": 1, "backward": 2}


def _split_sort_key(row: dict) -> tuple:
    direction = row["direction"]
    rho = float(row["rho"])
    primary = _DIR_ORDER.get(direction, 3)
    # Figure-style x axis: forward by descending rho, then uniform, then
    # backward by ascending rho
    secondary = -rho if direction == "forward" else rho
    return (primary, secondary, row["split"])


def cmd_report(csv_paths: list[Path], out_dir: Path) -> int:
    rows: list[dict] = []
    for path in csv_paths:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise InvalidInputError(f"{path}: empty CSV")
            if tuple(header) != CSV_FIELDS:
                raise InvalidInputError(f"{path}: unexpected CSV schema {header}")
            for rec in reader:
                rows.append(dict(zip(CSV_FIELDS, rec)))
    if not rows:
        raise InvalidInputError("no data rows in the supplied CSV files")

    out_dir.mkdir(parents=True, exist_ok=True)
    variants = sorted({r["variant"] for r in rows})
    by_variant = {
        v: sorted((r for r in rows if r["variant"] == v), key=_split_sort_key)
        for v in variants
    }

    def pct(cell: str) -> str:
        return f"{100 * float(cell):.1f}" if cell else "-"

    lines = ["# Evaluation summary", ""]
    for v in variants:
        lines += [f"## Variant: {v}", "",
                  "| Split | Top-1 | Many | Medium | Few | Confidence | I(pred;label) | H(pred) | Stability |",
                  "|---|---|---|---|---|---|---|---|---|"]
        for r in by_variant[v]:
            lines.append(
                f"| {r['split']} | {pct(r['top1'])} | {pct(r['acc_many'])} | "
                f"{pct(r['acc_medium'])} | {pct(r['acc_few'])} | {float(r['confidence']):.3f} | "
                f"{float(r['mi_nats']):.3f} | {float(r['entropy_nats']):.3f} | "
                f"{float(r['stability']):.3f} |"
            )
        lines.append("")
        tsv = out_dir / f"curve_{v}.tsv"
        with open(tsv, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t")
            w.writerow(["split", "x", "top1", "acc_many", "acc_medium", "acc_few"])
            for i, r in enumerate(by_variant[v]):
                w.writerow([r["split"], i, r["top1"], r["acc_many"],
                            r["acc_medium"], r["acc_few"]])

    if "uniform" in by_variant and "adapted" in by_variant:
        uni = {r["split"]: r for r in by_variant["uniform"]}
        ada = {r["split"]: r for r in by_variant["adapted"]}
        shared = [r["split"] for r in by_variant["uniform"] if r["split"] in ada]
        if shared:
            lines += ["## Adaptation gain (adapted - uniform, top-1 points)", "",
                      "| Split | Uniform | Adapted | Delta |", "|---|---|---|---|"]
            for s in shared:
                u = 100 * float(uni[s]["top1"])
                a = 100 * float(ada[s]["top1"])
                lines.append(f"| {s} | {u:.1f} | {a:.1f} | {a - u:+.1f} |")
            lines.append("")

    (out_dir / "summary.md").write_text("\n".join(lines))
    print(f"report written to {out_dir / 'summary.md'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tailexperts",
        description="Skill-diverse expert training and test-time aggregation "
                    "for long-tailed classification.",
    )
    p.add_argument("--config", type=Path, default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate train set, pool, and test splits")
    g.add_argument("--out", type=Path, required=True, help="output directory")

    t = sub.add_parser("train", help="train the multi-expert model")
    t.add_argument("--data", type=Path, required=True, help="training dataset (.bin)")
    t.add_argument("--out", type=Path, required=True, help="checkpoint path")
    t.add_argument("--stats", type=Path, default=None, help="epoch stats JSON-lines path")

    a = sub.add_parser("adapt", help="learn aggregation weights on a test split")
    a.add_argument("--checkpoint", type=Path, required=True)
    a.add_argument("--split", type=Path, required=True)
    a.add_argument("--out", type=Path, required=True, help="weights JSON path")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--split", type=Path, required=True)
    e.add_argument("--weights", type=Path, default=None,
                   help="weights JSON (defaults to uniform weights)")
    e.add_argument("--groups", type=Path, default=None, help="class groups JSON")
    e.add_argument("--out", type=Path, default=None, help="report JSON (stdout if omitted)")
    e.add_argument("--csv", type=Path, default=None, help="append a CSV row here")
    e.add_argument("--variant", type=str, default=None, help="variant label for the CSV row")

    r = sub.add_parser("report", help="assemble summary tables from eval CSVs")
    r.add_argument("csvs", type=Path, nargs="+", help="eval CSV files")
    r.add_argument("--out", type=Path, required=True, help="output directory")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        seed = _resolve_seed(cfg, args.seed)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, seed, args.out)
        if args.command == "train":
            return cmd_train(cfg, seed, args.data, args.out, args.stats)
        if args.command == "adapt":
            return cmd_adapt(cfg, seed, args.checkpoint, args.split, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, seed, args.checkpoint, args.split, args.weights,
                            args.groups, args.out, args.csv, args.variant)
        if args.command == "report":
            return cmd_report(args.csvs, args.out)
        raise InvalidInputError(f"unknown command {args.command!r}")
    except (TrainingDiverged, AdaptationDiverged) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ContractError, DomainError, ShapeError, CapacityError, IndexError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except (InvalidInputError, KeyError) as e:
        print(f"error: invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"error: I/O failure: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
