"""Command-line entry point: ``lndet <subcommand>`` / ``python -m lndet``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical fault.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .detmini.train import StudyStream, load_checkpoint, predict, save_checkpoint, train, val_samples
from .errors import ConfigError, DataError, LndetError, MissingFileError, StageError
from .evalkit import (MetricReport, aggregate_folds, evaluate, froc_svg, make_folds, match_detections,
                      report_csv, table_header)
from .phantom import generate_dataset
from .preprocess import preprocess_study
from .volcore import find_studies, load_detections, load_study, save_detections, save_study
from .wbf import fuse_detections, fuse_study

log = logging.getLogger("lndet")

DETS_FILE = "detections.json"


# ---------------------------------------------------------------- helpers


def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)
    return path


def _write_json(path, obj):
    return _write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def run_seed(seed, run):
    """Independent training seed for run ``run`` of an experiment seeded ``seed``."""
    return int(np.random.SeedSequence([int(seed), int(run)]).generate_state(1)[0])


def load_splits(root, preprocess_cfg=None):
    """Studies under ``root`` grouped by their split; optionally preprocessed."""
    out = {"train": [], "val": [], "test": []}
    for p in find_studies(root):
        s = load_study(p)
        if preprocess_cfg is not None:
            s = preprocess_study(s, preprocess_cfg)
        out[s.split].append(s)
    return out


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except LndetError as exc:
        raise StageError(name, exc) from exc
    except (OSError, ValueError, KeyError) as exc:
        raise StageError(name, DataError(str(exc))) from exc


def evaluate_studies(studies, dets_by_study, ecfg: cfgmod.EvalConfig):
    """Metric report over ``studies`` (every study counts as a volume, with or
    without detections); folds over study ids when ``cv_folds > 1``."""
    matches = {s.study_id: match_detections(dets_by_study.get(s.study_id, []), s.annotations, ecfg.iou_thr)
               for s in studies}
    ids = sorted(matches)
    if ecfg.cv_folds <= 1:
        return evaluate([matches[i] for i in ids], ecfg.fp_thresholds)
    folds = [f for f in make_folds(ids, ecfg.cv_folds) if f]
    reports = [evaluate([matches[i] for i in f], ecfg.fp_thresholds) for f in folds]
    agg = aggregate_folds(reports)
    pooled = evaluate([matches[i] for i in ids], ecfg.fp_thresholds)
    agg.froc_points = pooled.froc_points
    return agg


# ---------------------------------------------------------------- experiment


def _train_one(args):
    """One training run (module-level so it can run in a worker process)."""
    cfg, r, studies, out_dir = args
    seed = run_seed(cfg.seed, r)
    stream = StudyStream(studies["train"], cfg.mode, cfg.ill, cfg.aug, seed=seed)
    val = val_samples(studies["val"], cfg.mode)
    tcfg = replace(cfg.train, seed=seed)
    res = _stage("train", train, stream, val, tcfg, cfg.detector, source_prefix=f"run{r}")
    h = cfg.sha256()
    run_dir = Path(out_dir) / "runs" / f"run{r}"
    dets = {}
    for k, ck in enumerate(res.checkpoints):
        _stage("checkpoint", save_checkpoint, ck, run_dir / f"ck{k}", cfg.detector,
               {"config_sha256": h, "run": r, "seed": seed})
        for s in studies["test"]:
            d = _stage("predict", predict, ck.params, s, cfg.mode, cfg.detector, ck.source_id,
                       test_stride=cfg.eval.test_stride)
            _stage("predict", save_detections, run_dir / f"ck{k}" / "dets" / s.study_id / DETS_FILE,
                   s.study_id, ck.source_id, d, {"config_sha256": h})
            dets.setdefault(s.study_id, []).append(d)
    info = {"run": r, "seed": seed, "diverged": res.diverged, "history": res.history,
            "checkpoints": [{"source_id": c.source_id, "epoch": c.epoch, "val_loss": c.val_loss,
                             "train_loss": c.train_loss} for c in res.checkpoints]}
    return info, dets


def cmd_experiment(cfg: cfgmod.ExperimentConfig, out_dir, jobs=1):
    """Train ``n_runs`` models, fuse all kept checkpoints with WBF, evaluate and
    write report.csv, froc.svg, report.json and provenance.json to ``out_dir``."""
    t0 = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h = cfg.sha256()
    _write_text(out_dir / "config.json", cfg.to_json())
    if cfg.paths.data:
        studies = _stage("load", load_splits, cfg.paths.data, cfg.preprocess)
    else:
        raw = _stage("phantom", generate_dataset, cfg.phantom, cfg.paths.splits)
        studies = {k: [_stage("preprocess", preprocess_study, s, cfg.preprocess) for s in v]
                   for k, v in raw.items()}
    for split in ("train", "val", "test"):
        if not studies[split]:
            raise StageError("load", DataError(f"dataset has no {split} studies", field=split))

    tasks = [(cfg, r, studies, str(out_dir)) for r in range(cfg.n_runs)]
    if jobs > 1 and cfg.n_runs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, cfg.n_runs)) as ex:
            results = list(ex.map(_train_one, tasks))
    else:
        results = [_train_one(t) for t in tasks]

    per_study = {s.study_id: [] for s in studies["test"]}
    for _, dets in results:
        for sid, lists in dets.items():
            per_study[sid].extend(lists)
    fused = {}
    for sid in sorted(per_study):
        fused[sid] = _stage("fuse", fuse_detections, per_study[sid], cfg.wbf)
        _stage("fuse", save_detections, out_dir / "fused" / sid / DETS_FILE, sid, "wbf", fused[sid],
               {"config_sha256": h, "num_sources": cfg.wbf.num_sources or len(per_study[sid])})

    report = _stage("eval", evaluate_studies, studies["test"], fused, cfg.eval)
    write_report(report, out_dir, h, cfg.name)
    prov = {"config_sha256": h, "config": cfg.to_dict(), "runs": [info for info, _ in results],
            "n_test_studies": len(studies["test"]), "n_sources": len(results) * cfg.train.checkpoint_keep,
            "elapsed_s": round(time.perf_counter() - t0, 1)}
    _write_json(out_dir / "provenance.json", prov)
    log.info("%s: %s", cfg.name, " ".join(f"{v:.3f}" for v in report.row()))
    return report


def write_report(report: MetricReport, out_dir, config_hash, label="report"):
    out_dir = Path(out_dir)
    _write_text(out_dir / "report.csv", report_csv([report.row()], report.thresholds, config_hash))
    _write_text(out_dir / "froc.svg", froc_svg([report], [label], config_hash, title=f"FROC: {label}"))
    doc = report.to_json()
    doc["config_sha256"] = config_hash
    doc["label"] = label
    _write_json(out_dir / "report.json", doc)


# ---------------------------------------------------------------- compare


def _load_report(path):
    """A report from report.json / report.csv or a directory holding them."""
    path = Path(path)
    if path.is_dir():
        js = path / "report.json"
        path = js if js.is_file() else path / "report.csv"
    if not path.is_file():
        raise MissingFileError(f"no report at {path}", field="report")
    if path.suffix == ".json":
        with open(path) as fh:
            d = json.load(fh)
        th = tuple(float(f) for f in d["thresholds"])
        sens = [float(d["sens_at_fp"][f"S@{f:g}"]) for f in th]
        r = MetricReport(d["map"], [tuple(p) for p in d.get("froc_points", [])], sens, th,
                         n_volumes=d.get("n_volumes", 0), n_gt=d.get("n_gt", 0))
        return r, d.get("label", path.parent.name)
    lines = [ln for ln in path.read_text().splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    if header[0] != "mAP" or not all(h.startswith("S@") for h in header[1:]):
        raise DataError(f"{path}: unexpected columns {lines[0]!r}", field="columns")
    th = tuple(float(h[2:]) for h in header[1:])
    vals = [float(v) if v else None for v in lines[1].split(",")]
    return MetricReport(vals[0], [], vals[1:], th), path.parent.name


def cmd_compare(paths, out_dir, labels=None, baseline=0):
    """Table of reports (mAP then sensitivities), deltas against ``baseline`` and an overlay SVG."""
    if len(paths) < 2:
        raise ConfigError("compare needs at least two reports")
    loaded = [_load_report(p) for p in paths]
    reports = [r for r, _ in loaded]
    labels = list(labels) if labels else [lab for _, lab in loaded]
    if len(labels) != len(reports):
        raise ConfigError("need one label per report")
    th = reports[0].thresholds
    for p, r in zip(paths, reports):
        if tuple(r.thresholds) != tuple(th):
            raise DataError(f"column mismatch: {p} has {table_header(r.thresholds)!r}, "
                            f"expected {table_header(th)!r}", field="columns")
    if not 0 <= baseline < len(reports):
        raise ConfigError(f"baseline index {baseline} out of range")
    rows = [r.row() for r in reports]
    base = rows[baseline]
    deltas = [[None if a is None or b is None else a - b for a, b in zip(row, base)] for row in rows]
    tag = "rows=" + ";".join(labels)
    out_dir = Path(out_dir)
    _write_text(out_dir / "compare.csv", report_csv(rows, th) + f"# {tag}\n")
    _write_text(out_dir / "compare_delta.csv",
                report_csv(deltas, th) + f"# {tag}\n# baseline={labels[baseline]}\n")
    _write_text(out_dir / "compare.svg", froc_svg(reports, labels, title="FROC comparison"))
    _write_json(out_dir / "compare.json", {"labels": labels, "header": table_header(th), "rows": rows,
                                           "baseline": labels[baseline], "deltas": deltas})
    return rows, deltas


# ---------------------------------------------------------------- single-stage commands


def cmd_phantom(cfg, out_dir):
    data = generate_dataset(cfg.phantom, cfg.paths.splits, out_dir)
    return {k: len(v) for k, v in data.items()}


def cmd_preprocess(cfg, in_dir, out_dir):
    n = 0
    for p in find_studies(in_dir):
        s = preprocess_study(load_study(p), cfg.preprocess)
        save_study(s, Path(out_dir) / s.study_id)
        n += 1
    return n


def cmd_train(cfg, data_dir, out_dir, preprocessed=False):
    studies = load_splits(data_dir, None if preprocessed else cfg.preprocess)
    if not studies["train"] or not studies["val"]:
        raise DataError(f"{data_dir} needs train and val studies", field="split")
    seed = int(cfg.seed)
    stream = StudyStream(studies["train"], cfg.mode, cfg.ill, cfg.aug, seed=seed)
    res = train(stream, val_samples(studies["val"], cfg.mode), replace(cfg.train, seed=seed),
                cfg.detector, source_prefix=cfg.name)
    h = cfg.sha256()
    for k, ck in enumerate(res.checkpoints):
        save_checkpoint(ck, Path(out_dir) / f"ck{k}", cfg.detector,
                        {"config_sha256": h, "mode": cfg.mode.value, "seed": seed})
    _write_json(Path(out_dir) / "history.json", {"config_sha256": h, "history": res.history,
                                                "diverged": res.diverged})
    return res


def cmd_predict(cfg, checkpoints, data_dir, out_dir, split="test", preprocessed=False):
    studies = load_splits(data_dir, None if preprocessed else cfg.preprocess)[split]
    if not studies:
        raise DataError(f"no {split} studies under {data_dir}", field="split")
    n = 0
    for path in checkpoints:
        ck, dcfg = load_checkpoint(path)
        meta = json.loads((Path(path) / "params.json").read_text())
        mode = meta.get("mode", cfg.mode.value)
        for s in studies:
            d = predict(ck.params, s, mode, dcfg, ck.source_id, test_stride=cfg.eval.test_stride)
            save_detections(Path(out_dir) / ck.source_id / s.study_id / DETS_FILE, s.study_id, ck.source_id, d,
                            {"config_sha256": cfg.sha256()})
            n += 1
    return n


def _detection_files(paths):
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(p.rglob(DETS_FILE))
        elif p.is_file():
            files.append(p)
        else:
            raise MissingFileError(f"no such detections path: {p}", field="detections")
    if not files:
        raise MissingFileError("no detection files found", field="detections")
    return files


def cmd_fuse(cfg, paths, out_dir):
    """Fuse detection files per study; writes ``<out>/<study_id>/detections.json``."""
    by_study = {}
    for f in _detection_files(paths):
        by_study.setdefault(load_detections(f)[0], []).append(f)
    for sid, files in sorted(by_study.items()):
        _, fused, sources = fuse_study(files, cfg.wbf)
        save_detections(Path(out_dir) / sid / DETS_FILE, sid, "wbf", fused,
                        {"sources": sources, "config_sha256": cfg.sha256()})
    return len(by_study)


def cmd_eval(cfg, gt_dir, det_paths, out_dir, split="test"):
    studies = load_splits(gt_dir)[split]
    if not studies:
        raise DataError(f"no {split} studies under {gt_dir}", field="split")
    dets = {}
    for f in _detection_files(det_paths):
        sid, src, d, _ = load_detections(f)
        if sid in dets:
            raise DataError(f"several detection files for study {sid}; fuse them first", field="study_id")
        dets[sid] = d
    known = {s.study_id for s in studies}
    stray = sorted(set(dets) - known)
    if stray:
        raise DataError(f"detections for unknown studies: {', '.join(stray)}", field="study_id")
    report = evaluate_studies(studies, dets, cfg.eval)
    write_report(report, out_dir, cfg.sha256(), cfg.name)
    return report


# ---------------------------------------------------------------- argument parsing


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS), help="start from a named preset")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config value, e.g. train.epochs=5 (repeatable)")
    p.add_argument("--seed", type=int, help="experiment seed")
    p.add_argument("--out", help="output directory (or file for single outputs)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser():
    common = _common()
    ap = argparse.ArgumentParser(prog="lndet", description="Lymph-node detection pipeline (desk scale).")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("phantom", parents=[common], help="generate a synthetic dataset")

    p = sub.add_parser("preprocess", parents=[common], help="normalize and equalize studies")
    p.add_argument("--in", dest="input", required=True, help="dataset root")

    p = sub.add_parser("train", parents=[common], help="train one model, keep the best checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--preprocessed", action="store_true", help="input studies are already preprocessed")

    p = sub.add_parser("predict", parents=[common], help="dense detections per checkpoint")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--preprocessed", action="store_true")

    p = sub.add_parser("fuse", parents=[common], help="weighted boxes fusion per study")
    p.add_argument("dets", nargs="+", help="detection files or directories")
    p.add_argument("--iou-thr", type=float)
    p.add_argument("--num-sources", type=int)

    p = sub.add_parser("eval", parents=[common], help="FROC / mAP against ground truth")
    p.add_argument("--gt", required=True, help="dataset root with study.json files")
    p.add_argument("--dets", nargs="+", required=True, help="one detection file per study (files or dirs)")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--iou", type=float)
    p.add_argument("--fp", type=float, nargs="+", help="FP/vol thresholds")

    sub.add_parser("experiment", parents=[common], help="train n_runs, fuse, evaluate, report")

    p = sub.add_parser("compare", parents=[common], help="table and FROC overlay of several reports")
    p.add_argument("reports", nargs="+", help="report.json/report.csv files or experiment directories")
    p.add_argument("--labels", nargs="+")
    p.add_argument("--baseline", type=int, default=0, help="row index the deltas are taken against")
    return ap


def _resolve(args):
    sets = list(args.set)
    if getattr(args, "iou_thr", None) is not None:
        sets.append(f"wbf.iou_thr={args.iou_thr}")
    if getattr(args, "num_sources", None) is not None:
        sets.append(f"wbf.num_sources={args.num_sources}")
    if getattr(args, "iou", None) is not None:
        sets.append(f"eval.iou_thr={args.iou}")
    if getattr(args, "fp", None):
        sets.append("eval.fp_thresholds=" + json.dumps(args.fp))
    return cfgmod.load_config(args.config, args.preset, sets, args.seed)


def _need_out(args):
    if not args.out:
        raise ConfigError(f"'{args.command}' needs --out")
    return Path(args.out)


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = _resolve(args)
    if args.print_config:
        sys.stdout.write(cfg.to_json())
        return 0
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    cmd = args.command
    if cmd == "phantom":
        counts = cmd_phantom(cfg, _need_out(args))
        print(json.dumps(counts, sort_keys=True))
    elif cmd == "preprocess":
        print(cmd_preprocess(cfg, args.input, _need_out(args)), "studies")
    elif cmd == "train":
        res = cmd_train(cfg, args.data, _need_out(args), args.preprocessed)
        for ck in res.checkpoints:
            print(f"{ck.source_id} epoch={ck.epoch} val_loss={ck.val_loss:.6f}")
    elif cmd == "predict":
        print(cmd_predict(cfg, args.checkpoint, args.data, _need_out(args), args.split, args.preprocessed),
              "detection files")
    elif cmd == "fuse":
        print(cmd_fuse(cfg, args.dets, _need_out(args)), "studies fused")
    elif cmd == "eval":
        r = cmd_eval(cfg, args.gt, args.dets, _need_out(args), args.split)
        sys.stdout.write(report_csv([r.row()], r.thresholds))
    elif cmd == "experiment":
        r = cmd_experiment(cfg, _need_out(args), args.jobs)
        sys.stdout.write(report_csv([r.row()], r.thresholds))
    elif cmd == "compare":
        rows, _ = cmd_compare(args.reports, _need_out(args), args.labels, args.baseline)
        sys.stdout.write(report_csv(rows, cfg.eval.fp_thresholds))
    return 0


def main(argv=None):
    try:
        return run(argv)
    except LndetError as exc:
        stage = f"[{exc.stage}] " if isinstance(exc, StageError) else ""
        print(f"lndet: error: {stage}{exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
