"""Experiment runner CLI.

Subcommands: run, ablate, report, gen-preview, taskgen dump, eval.
Exit codes: 0 ok, 1 runtime failure, 2 config error.  Run directories are
append-only: rerunning into an existing directory is refused.
SYNREPLAY_WORKERS caps the ablation process pool.
"""

import argparse
import csv
import itertools
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

import synreplay
from synreplay import backend, continual, lora, pgmio, selection, vlm
from synreplay.config import ConfigError, ExperimentConfig, load_config
from synreplay.numcore import checkpoint
from synreplay.numcore.rng import derive_key
from synreplay.taskgen import PIXELS

SCHEMA_VERSION = 1


def _run_dir_name(cfg: ExperimentConfig) -> str:
    return f"run-{cfg.config_hash()}-s{cfg['run.seed']}"


def _write_matrix_csv(path, matrix: np.ndarray) -> None:
    n = matrix.shape[0] - 1
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row"] + ["base"] + [f"task{j}" for j in range(1, n + 1)])
        for i in range(n + 1):
            label = "pretrain" if i == 0 else f"after_task{i}"
            writer.writerow([label] + [f"{v:.10f}" for v in matrix[i]])


def _metrics_payload(cfg: ExperimentConfig, result) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "method": result.method,
        "seed": result.seed,
        "config_hash": cfg.config_hash(),
        "suite_hash": cfg.suite_hash(),
        "n_tasks": len(result.matrix) - 1,
        "matrix": [[float(v) for v in row] for row in result.matrix],
        "storage": result.storage,
        **result.report.to_dict(),
    }


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.method is not None:
        overrides["run.method"] = args.method
    if overrides:
        cfg = cfg.with_overrides(overrides)

    out_root = Path(args.out)
    run_dir = out_root / _run_dir_name(cfg)
    if run_dir.exists():
        print(f"error: run directory {run_dir} already exists; runs are append-only",
              file=sys.stderr)
        return 1
    run_dir.mkdir(parents=True)

    t0 = time.time()
    seq = continual.build_suite(cfg)
    pretrained = continual.build_models(seq, cfg, cfg["run.seed"])
    result = continual.run_method(seq, cfg, pretrained=pretrained)
    elapsed = time.time() - t0

    (run_dir / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")
    _write_matrix_csv(run_dir / "matrix.csv", result.matrix)
    with open(run_dir / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(_metrics_payload(cfg, result), fh, indent=2, sort_keys=True)

    with open(run_dir / "loss_log.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "step", "ce", "cd", "ita", "awc", "total"])
        for row in result.loss_log:
            writer.writerow([row["task"], row["step"], row["ce"], row["cd"],
                             row["ita"], row["awc"], row["total"]])

    pretrained[0].save(run_dir / "vlm_pretrained.llcp")
    result.generator.save(run_dir / "generator.llcp")
    checkpoints = {"vlm_pretrained": "vlm_pretrained.llcp", "generator": "generator.llcp"}
    if result.method != "zero_shot":
        result.model.save(run_dir / "vlm_final.llcp")
        checkpoints["vlm_final"] = "vlm_final.llcp"
    adapters_manifest = lora.save_registry(result.registry, run_dir, result.generator) \
        if len(result.registry) else {"adapters": [], "class_to_adapter": {}}
    if cfg["run.save_replay"]:
        for i, replay in enumerate(result.replay_sets, start=1):
            if replay is not None:
                selection.save_replay_set(replay, run_dir / f"replay_task{i}")

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "package_version": synreplay.__version__,
        "backend": backend.BACKEND,
        "config": cfg.values,
        "config_hash": cfg.config_hash(),
        "suite_hash": cfg.suite_hash(),
        "seed": cfg["run.seed"],
        "method": result.method,
        "checkpoints": checkpoints,
        "adapters": adapters_manifest,
        "storage": result.storage,
        "elapsed_seconds": elapsed,
    }
    with open(run_dir / "run_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"run complete: {run_dir}  "
          f"transfer={result.report.transfer_mean:.4f} "
          f"avg={result.report.avg_mean:.4f} last={result.report.last_mean:.4f}")
    return 0


def _ablate_cell(payload):
    """One grid cell x one seed; returns a metrics row (runs in a worker)."""
    values, seed = payload
    cfg = ExperimentConfig(values).with_overrides({"run.seed": seed})
    seq = continual.build_suite(cfg)
    result = continual.run_method(seq, cfg)
    return {"transfer": result.report.transfer_mean, "avg": result.report.avg_mean,
            "last": result.report.last_mean}


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    axes = []
    for spec in args.set or []:
        key, _, raw = spec.partition("=")
        if not raw:
            raise ConfigError(f"--set needs key=v1,v2,... got {spec!r}")
        axes.append((key.strip(), [v.strip() for v in raw.split(",")]))
    seeds = [int(s) for s in args.seeds.split(",")]
    cells = list(itertools.product(*[[(k, v) for v in vals] for k, vals in axes])) or [()]

    jobs = []
    for cell in cells:
        cell_cfg = cfg.with_overrides(dict(cell))
        for seed in seeds:
            jobs.append((cell, (cell_cfg.values, seed)))

    workers = int(os.environ.get("SYNREPLAY_WORKERS", "1"))
    results = {}
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for (cell, _), out in zip(jobs, pool.map(_ablate_cell_safe, [j[1] for j in jobs])):
                results.setdefault(cell, []).append(out)
    else:
        for cell, payload in jobs:
            results.setdefault(cell, []).append(_ablate_cell_safe(payload))

    rows = []
    for cell in cells:
        outs = results[cell]
        errors = [o["error"] for o in outs if "error" in o]
        row = {key: val for key, val in cell}
        if errors:
            row.update({"error": "; ".join(errors)})
        else:
            for metric in ("transfer", "avg", "last"):
                vals = np.array([o[metric] for o in outs])
                row[f"{metric}_mean"] = float(vals.mean())
                row[f"{metric}_std"] = float(vals.std())
        row["seeds"] = len(outs)
        rows.append(row)

    fieldnames = sorted({k for row in rows for k in row})
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    print(f"ablation grid written: {args.out} ({len(rows)} cells x {len(seeds)} seeds)")
    return 0


def _ablate_cell_safe(payload):
    try:
        return _ablate_cell(payload)
    except Exception as exc:  # record and keep the grid going
        return {"error": f"{type(exc).__name__}: {exc}"}


def cmd_report(args) -> int:
    runs = []
    for run_dir in args.runs:
        path = Path(run_dir) / "metrics.json"
        if not path.exists():
            print(f"error: {path} not found", file=sys.stderr)
            return 1
        with open(path, encoding="utf-8") as fh:
            runs.append((Path(run_dir).name, json.load(fh)))
    ref_path = Path(args.reference) / "metrics.json"
    with open(ref_path, encoding="utf-8") as fh:
        ref = json.load(fh)

    suite_hashes = {m["suite_hash"] for _, m in runs} | {ref["suite_hash"]}
    if len(suite_hashes) != 1:
        print(f"error: runs cover different task suites: {sorted(suite_hashes)}",
              file=sys.stderr)
        return 1

    header = ["run", "method", "seed", "transfer", "d_transfer", "avg", "d_avg",
              "last", "d_last", "storage_bytes"]
    lines = ["| " + " | ".join(header) + " |",
             "|" + "|".join("---" for _ in header) + "|"]
    csv_rows = []
    for name, m in runs:
        storage = m["storage"]["real_replay_bytes"] + m["storage"]["adapter_bytes"]
        row = {
            "run": name, "method": m["method"], "seed": m["seed"],
            "transfer": m["transfer_mean"], "d_transfer": m["transfer_mean"] - ref["transfer_mean"],
            "avg": m["avg_mean"], "d_avg": m["avg_mean"] - ref["avg_mean"],
            "last": m["last_mean"], "d_last": m["last_mean"] - ref["last_mean"],
            "storage_bytes": storage,
        }
        csv_rows.append(row)
        lines.append("| " + " | ".join(
            f"{row[h]:+.4f}" if h.startswith("d_") else
            (f"{row[h]:.4f}" if isinstance(row[h], float) else str(row[h]))
            for h in header) + " |")

    text = "\n".join(lines) + "\n"
    out = Path(args.out)
    out.write_text(text, encoding="utf-8")
    with open(out.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        writer.writerows(csv_rows)
    print(text)
    return 0


def _load_run_models(run_dir: Path):
    with open(run_dir / "run_manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = ExperimentConfig(manifest["config"])
    seq = continual.build_suite(cfg)
    from synreplay.generator import GeneratorModel, NoiseSchedule
    from synreplay.vlm import PromptTemplate
    schedule = NoiseSchedule(steps=cfg["gen.steps"], beta_start=cfg["gen.beta_start"],
                             beta_end=cfg["gen.beta_end"])
    gen = GeneratorModel(class_names=seq.all_class_names, pixels=PIXELS,
                         width=cfg["gen.width"], time_dim=cfg["gen.time_dim"],
                         cond_dim=cfg["gen.cond_dim"], schedule=schedule,
                         template=PromptTemplate(cfg["vlm.template"]),
                         init_seed=0)
    gen.load(run_dir / manifest["checkpoints"]["generator"])
    gen.freeze()
    model = vlm.DualEncoder(pixels=PIXELS, embed_dim=cfg["vlm.embed_dim"],
                            hidden=cfg["vlm.hidden"], token_dim=cfg["vlm.token_dim"],
                            vocab_cap=cfg["vlm.vocab_cap"], tau_init=cfg["vlm.tau_init"],
                            template=PromptTemplate(cfg["vlm.template"]), init_seed=0)
    vlm_file = manifest["checkpoints"].get("vlm_final") or manifest["checkpoints"]["vlm_pretrained"]
    model.load(run_dir / vlm_file)
    model.frozen = True
    registry = lora.load_registry(run_dir, gen) if (run_dir / "registry.json").exists() \
        else lora.AdapterRegistry()
    return manifest, cfg, seq, model, gen, registry


def cmd_gen_preview(args) -> int:
    run_dir = Path(args.run)
    manifest, cfg, seq, model, gen, registry = _load_run_models(run_dir)
    pool = seq.all_class_names
    if args.class_name not in pool:
        print(f"error: class {args.class_name!r} not in the run's class pool", file=sys.stderr)
        return 1
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    view = lora.select_generator(registry, gen, args.class_name)
    adapted = "base" if view is gen else "adapter"
    entries = []
    from synreplay.generator import sample_cfg
    ids = model.prompt_ids(args.class_name)
    for m in range(args.count):
        seed = derive_key(cfg["run.seed"], "preview", args.class_name, m)
        for tag, g in (("base", gen), (adapted, view)):
            cand = sample_cfg(g, args.class_name, cfg["gen.guidance"], seed)
            conf = vlm.confidence(model, cand.sample, ids)
            fname = f"{args.class_name}_{tag}_{m}.pgm"
            pgmio.write_pgm(out_dir / fname, cand.sample)
            entries.append({"file": fname, "class": args.class_name, "generator": tag,
                            "seed": seed, "confidence": conf})
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)
    print(f"wrote {len(entries)} previews to {out_dir}")
    return 0


def cmd_taskgen_dump(args) -> int:
    cfg = load_config(args.config)
    seq = continual.build_suite(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"suite_hash": cfg.suite_hash(), "gap": seq.gap, "datasets": []}
    for data in [seq.base] + list(seq.tasks):
        dset_dir = out_dir / data.name
        dset_dir.mkdir(exist_ok=True)
        entry = {"name": data.name, "classes": data.class_names,
                 "train": int(len(data.train_images)), "test": int(len(data.test_images))}
        for split, images, labels in (("train", data.train_images, data.train_labels),
                                      ("test", data.test_images, data.test_labels)):
            for j, (img, lab) in enumerate(zip(images, labels)):
                pgmio.write_pgm(dset_dir / f"{split}_{j:04d}_{data.class_names[lab]}.pgm", img)
        manifest["datasets"].append(entry)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"suite dumped to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    seq = continual.build_suite(cfg)
    from synreplay.vlm import PromptTemplate
    model = vlm.DualEncoder(pixels=PIXELS, embed_dim=cfg["vlm.embed_dim"],
                            hidden=cfg["vlm.hidden"], token_dim=cfg["vlm.token_dim"],
                            vocab_cap=cfg["vlm.vocab_cap"], tau_init=cfg["vlm.tau_init"],
                            template=PromptTemplate(cfg["vlm.template"]), init_seed=0)
    model.load(args.checkpoint)
    row = continual.eval_row(model, seq, cfg["run.class_incremental"])
    payload = {"checkpoint": str(args.checkpoint),
               "checkpoint_sha256": checkpoint.file_sha256(args.checkpoint),
               "accuracy": {"base": float(row[0]),
                            **{f"task{j}": float(row[j]) for j in range(1, len(row))}}}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synreplay",
                                     description="Continual-learning experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute one configured run")
    p.add_argument("--config", required=True, help="config file path or preset name")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--method", default=None)
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run a hyperparameter grid")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=V1,V2,...")
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="summarize runs against a reference run")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True, help="output markdown path (CSV written alongside)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gen-preview", help="dump base vs adapted samples for one class")
    p.add_argument("--run", required=True)
    p.add_argument("--class", dest="class_name", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_preview)

    p = sub.add_parser("taskgen", help="task suite utilities")
    tg = p.add_subparsers(dest="taskgen_command", required=True)
    d = tg.add_parser("dump", help="write the suite to disk as PGMs + manifest")
    d.add_argument("--config", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_taskgen_dump)

    p = sub.add_parser("eval", help="re-score a VLM checkpoint on the suite")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
