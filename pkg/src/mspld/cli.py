"""Command-line entry point: ``python -m mspld <command> ...``.

Commands
--------
gen-data      generate a synthetic dataset (initial labels sampled) as JSON
run           one configuration end to end; writes a run directory
compare       single / ensemble / mspld over several seeds, mean and std
oracle-check  closed-form selection versus brute force on random instances
eval          score a detections file against a dataset

Configs are JSON files with the fields of :class:`mspld.engine.RunConfig`
plus an optional ``seeds`` list used by ``compare``. Failures print a JSON
object with ``error`` and ``message`` to stderr and exit with status 1.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import engine
from .data import (
    Annotation,
    DatasetFormatError,
    dataset_to_dict,
    generate_synthetic_dataset,
    load_dataset,
    sample_initial_labels,
    save_dataset,
)
from .evaluate import PseudoQuality, average_precision, corloc, metrics_csv, pseudo_quality
from .geometry import BBox, ScoredBox
from .oracle import check_equivalence

WORKERS_ENV = "MSPLD_WORKERS"

log = logging.getLogger("mspld")


class CLIError(RuntimeError):
    pass


# -- config and data helpers ---------------------------------------------------

def load_config(path: str | Path) -> tuple[engine.RunConfig, list[int]]:
    """The run config plus the seed list for ``compare`` (defaults to the config seed)."""
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"config {path}: {e.msg}", e.lineno, e.colno) from None
    seeds = obj.pop("seeds", None)
    cfg = engine.RunConfig.from_dict(obj)
    return cfg, [cfg.seed] if seeds is None else [int(s) for s in seeds]


def _override(cfg: engine.RunConfig, args) -> engine.RunConfig:
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        changes["mode"] = args.mode
    if getattr(args, "max_iters", None) is not None:
        changes["max_iterations"] = args.max_iters
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    return replace(cfg, **changes) if changes else cfg


def make_dataset(cfg: engine.RunConfig, seed: int):
    data = generate_synthetic_dataset(cfg.scene, seed)
    return sample_initial_labels(data, cfg.k, seed)


def dataset_hash(data) -> str:
    blob = json.dumps(dataset_to_dict(data), sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def _trace_line(trace: engine.IterationTrace) -> str:
    obj = trace.to_dict()
    # infinities cannot appear in strict JSON
    obj["block_objectives"] = [[None if b is None or not np.isfinite(b) else b for b in pair]
                               for pair in obj["block_objectives"]]
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def _mean_quality(result: engine.RunResult, c: int) -> PseudoQuality:
    """Class-``c`` pseudo-label quality averaged over the models of a run."""
    gts = {i: result.data[i].objects for i in result.data.unlabeled_ids}
    qs = [pseudo_quality({i: p.annotations for i, p in pj.items()}, gts, classes=[c]) for pj in result.pseudo]
    return PseudoQuality(
        float(np.mean([q.img_precision for q in qs])),
        float(np.mean([q.img_recall for q in qs])),
        float(np.mean([q.ins_precision for q in qs])),
        float(np.mean([q.ins_recall for q in qs])),
        sum(q.n_images for q in qs),
        sum(q.n_boxes for q in qs),
    )


def final_metrics_csv(result: engine.RunResult) -> str:
    cfg, data = result.config, result.data
    bank = engine.ProposalBank(data, cfg.proposals, cfg.proposal_seed)
    ap, cl = engine.evaluate_models(result.models, data, bank, cfg)
    quality = {c: _mean_quality(result, c) for c in range(data.num_classes)}
    return metrics_csv(data.num_classes, ap, cl, quality)


def detections_json(result: engine.RunResult) -> str:
    """Fused test-set detections of the final models, in the format ``eval`` reads."""
    cfg, data = result.config, result.data
    bank = engine.ProposalBank(data, cfg.proposals, cfg.proposal_seed)
    rows = []
    for i in sorted(data.test_ids):
        for d in engine.detect(result.models, bank, i, cfg.test_nms_iou, cfg.min_det_score):
            rows.append({"image_id": i, "box": d.box.as_list(), "class_id": d.class_id, "score": d.score})
    return json.dumps({"detections": rows}, sort_keys=True) + "\n"


# -- commands ----------------------------------------------------------------------

def cmd_gen_data(config_path: str, out_path: str, seed: int | None = None) -> dict:
    cfg, _ = load_config(config_path)
    seed = cfg.seed if seed is None else seed
    data = make_dataset(cfg, seed)
    save_dataset(data, out_path)
    return {"out": str(out_path), "images": len(data.images), "labeled": len(data.labeled_ids),
            "unlabeled": len(data.unlabeled_ids), "test": len(data.test_ids), "sha256": dataset_hash(data)}


def cmd_run(config_path: str, data_path: str | None, out_dir: str, overrides=None, resume: bool = False) -> dict:
    cfg, _ = load_config(config_path)
    if overrides is not None:
        cfg = _override(cfg, overrides)
    data = load_dataset(data_path) if data_path else make_dataset(cfg, cfg.seed)
    data = engine.prepare_split(data, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    _write(out / "dataset.sha256", dataset_hash(data) + "\n")

    state = None
    ckpt = out / "checkpoints"
    if resume and cfg.mode != "spl_ensemble":
        found = sorted(ckpt.glob("iter_*.json"))
        if found:
            state = engine.load_checkpoint(found[-1])
    traces_path = out / "trace.jsonl"
    lines = []
    if state is not None:
        lines = [_trace_line(engine.trace_from_dict(t)) for t in state["traces"]]

    def on_trace(t):
        lines.append(_trace_line(t))
        _write(traces_path, "\n".join(lines) + "\n")

    if cfg.mode == "spl_ensemble":
        result = engine.run_ensemble_baseline(cfg, data)
        for t in result.traces:
            on_trace(t)
    else:
        result = engine.run(cfg, data, checkpoint_dir=ckpt, resume=state, on_trace=on_trace)
    _write(traces_path, "\n".join(lines) + "\n")
    _write(out / "metrics.csv", final_metrics_csv(result))
    _write(out / "detections.json", detections_json(result))
    final = result.final
    return {"out": str(out), "mode": cfg.mode, "iterations": final.iteration,
            "test_map": final.test_map, "corloc": final.corloc}


def compare_rows(cfg: engine.RunConfig, seeds, on_seed=None, data=None) -> list[dict]:
    """mAP of every single model, the ensemble and MSPLD for each seed.

    Without ``data`` every seed draws its own dataset and initial labels; with
    it, the seed only changes model initialization.
    """
    rows = []
    for seed in seeds:
        scfg = replace(cfg, seed=seed, mode="mspld")
        data_s = make_dataset(scfg, seed) if data is None else data
        data_s = engine.prepare_split(data_s, scfg)
        t0 = time.perf_counter()
        singles = [engine.run(scfg.single(j), data_s) for j in range(scfg.m)]
        ens = engine.run_ensemble_baseline(replace(scfg, mode="spl_ensemble"), data_s, singles)
        ms = engine.run(scfg, data_s)
        row = {"seed": seed}
        for j, s in enumerate(singles):
            row[f"spl_single_{j}"] = s.final.test_map
        row["spl_ensemble"] = ens.final.test_map
        row["mspld"] = ms.final.test_map
        row["seconds"] = time.perf_counter() - t0
        rows.append(row)
        if on_seed:
            on_seed(row, singles, ens, ms)
    return rows


def summarize(rows: list[dict]) -> list[tuple[str, float, float]]:
    methods = [k for k in rows[0] if k not in ("seed", "seconds")]
    out = []
    for k in methods:
        vals = np.array([r[k] for r in rows])
        out.append((k, float(vals.mean()), float(vals.std())))
    best = max((s for s in out if s[0].startswith("spl_single")), key=lambda s: s[1])
    out.append(("best_single", best[1], best[2]))
    return out


def cmd_compare(config_path: str, out_dir: str, seeds=None, overrides=None, data_path: str | None = None) -> dict:
    cfg, cfg_seeds = load_config(config_path)
    data = load_dataset(data_path) if data_path else None
    if overrides is not None:
        cfg = _override(replace(cfg, mode="mspld"), overrides)
    seeds = cfg_seeds if seeds is None else seeds
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    def on_seed(row, singles, ens, ms):
        d = out / f"seed_{row['seed']}"
        for name, res in [(f"spl_single_{j}", s) for j, s in enumerate(singles)] + [("spl_ensemble", ens),
                                                                                     ("mspld", ms)]:
            _write(d / f"{name}.trace.jsonl", "".join(_trace_line(t) + "\n" for t in res.traces))

    rows = compare_rows(cfg, seeds, on_seed, data)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "mean_map", "std_map"] + [f"seed_{r['seed']}" for r in rows])
    summary = summarize(rows)
    per_seed = {k: [r[k] for r in rows] for k in rows[0]}
    for name, mean, std in summary:
        vals = per_seed.get(name, [""] * len(rows))
        w.writerow([name, f"{mean:.6f}", f"{std:.6f}"] + [f"{v:.6f}" if v != "" else "" for v in vals])
    _write(out / "compare.csv", buf.getvalue())
    table = {name: {"mean": mean, "std": std} for name, mean, std in summary}
    return {"out": str(out), "seeds": list(seeds), "table": table}


def cmd_oracle_check(n_instances: int, seed: int) -> dict:
    records = check_equivalence(n_instances, seed)
    exact = sum(r["exact"] for r in records)
    return {"exact": exact, "total": n_instances, "summary": f"{exact}/{n_instances} exact",
            "failures": [r for r in records if not r["exact"]]}


def read_detections(path: str | Path) -> dict[int, list[ScoredBox]]:
    """Detections file: ``{"detections": [{"image_id", "box", "class_id", "score"}, ...]}``."""
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"detections {path}: {e.msg}", e.lineno, e.colno) from None
    dets: dict[int, list[ScoredBox]] = {}
    for n, d in enumerate(obj.get("detections", [])):
        try:
            sb = ScoredBox(BBox.from_seq(d["box"]), int(d["class_id"]), float(d["score"]))
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"detection #{n}: {e}", None, None) from None
        dets.setdefault(int(d["image_id"]), []).append(sb)
    return dets


def cmd_eval(dets_path: str, data_path: str, split: str = "test", mode: str = "eleven_point") -> str:
    data = load_dataset(data_path)
    ids = {"test": data.test_ids, "trainval": data.trainval_ids, "all": [i.image_id for i in data.images]}[split]
    gts: dict[int, list[Annotation]] = {i: data[i].objects for i in sorted(ids)}
    dets = read_detections(dets_path)
    ap = average_precision(dets, gts, data.num_classes, mode=mode)
    tops = {}
    for i, ds in dets.items():
        best: dict[int, ScoredBox] = {}
        for d in ds:
            if d.class_id not in best or d.score > best[d.class_id].score:
                best[d.class_id] = d
        tops[i] = {c: d.box for c, d in best.items()}
    cl = corloc(tops, {i: a for i, a in gts.items() if a}, data.num_classes)
    return metrics_csv(data.num_classes, ap, cl)


# -- argument parsing ------------------------------------------------------------------

def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mspld", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)

    r = sub.add_parser("run", help="run one configuration")
    r.add_argument("--config", required=True)
    r.add_argument("--data", help="dataset JSON; generated from the config when omitted")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--mode", choices=engine.MODES)
    r.add_argument("--max-iters", type=int)
    r.add_argument("--workers", type=int, default=_default_workers())
    r.add_argument("--resume", action="store_true", help="continue from the newest checkpoint")

    c = sub.add_parser("compare", help="single vs ensemble vs mspld over seeds")
    c.add_argument("--config", required=True)
    c.add_argument("--data", help="fixed dataset for every seed; by default each seed generates its own")
    c.add_argument("--out", required=True)
    c.add_argument("--seeds", help="comma-separated; defaults to the config's seeds")
    c.add_argument("--max-iters", type=int)
    c.add_argument("--workers", type=int, default=_default_workers())

    o = sub.add_parser("oracle-check", help="closed-form selection vs brute force")
    o.add_argument("--n", type=int, default=200)
    o.add_argument("--seed", type=int, default=1)

    e = sub.add_parser("eval", help="score a detections file")
    e.add_argument("--dets", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("test", "trainval", "all"), default="test")
    e.add_argument("--ap-mode", choices=("eleven_point", "all_points"), default="eleven_point")
    e.add_argument("--out", help="write the CSV here instead of stdout")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "gen-data":
            print(json.dumps(cmd_gen_data(args.config, args.out, args.seed)))
        elif args.command == "run":
            print(json.dumps(cmd_run(args.config, args.data, args.out, args, args.resume)))
        elif args.command == "compare":
            seeds = None if args.seeds is None else [int(s) for s in args.seeds.split(",") if s.strip()]
            res = cmd_compare(args.config, args.out, seeds, args, args.data)
            for name, row in res["table"].items():
                print(f"{name:16s} {100 * row['mean']:6.2f} +- {100 * row['std']:5.2f}")
        elif args.command == "oracle-check":
            res = cmd_oracle_check(args.n, args.seed)
            print(res["summary"])
            if res["exact"] != res["total"]:
                raise CLIError(f"oracle mismatch on {res['total'] - res['exact']} instances")
        elif args.command == "eval":
            text = cmd_eval(args.dets, args.data, args.split, args.ap_mode)
            if args.out:
                _write(Path(args.out), text)
            else:
                sys.stdout.write(text)
    except Exception as e:  # noqa: BLE001 - every failure becomes a JSON report
        report = {"error": type(e).__name__, "message": str(e)}
        if isinstance(e, DatasetFormatError):
            report.update(line=e.line, column=e.column)
        print(json.dumps(report), file=sys.stderr)
        log.debug("failure", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
