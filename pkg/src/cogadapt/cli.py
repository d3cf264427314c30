"""Command-line front end: ``cogadapt <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as C
from . import lead_math
from . import signal_pipeline as sp
from .dataio import (
    Manifest,
    ManifestEntry,
    emit_csv,
    ingest_csv,
    load_checkpoint_into,
    read_manifest,
    read_window,
    synth_generate,
    write_checkpoint,
    write_manifest,
    write_window,
)
from .errors import CogAdaptError, ConfigError
from .evalkit import kfold_split, loso_split
from .evalkit.metrics import pearson_cc_per_lead, rmse_per_lead
from .evalkit.reporting import (
    DIST_COLUMNS,
    REPORT_COLUMNS,
    distribution_rows,
    fold_report,
    write_csv,
)
from .leadbridge import (
    Adapter,
    apply_fixed_transform,
    dower_transform,
    least_squares_fit,
    predict_adapter,
    pretrain_adapter,
    reconstruction_pairs,
)
from .profine import CogAdaptModel, evaluate, train

log = logging.getLogger("cogadapt")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
CONFIG_NAME = "config.resolved.yaml"
PRED_COLUMNS = ("window_id", "subject_id", "true_class", "predicted_class", "positive_prob")
RECON_COLUMNS = ("lead", "method", "rmse", "cc")


class RunError(CogAdaptError):
    """A command cannot proceed (missing inputs, refused overwrite, ...)."""


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _prepare_out(out: Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise RunError(f"output directory {out} exists and is not empty (use --force)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(tree: dict, out: Path) -> None:
    (out / CONFIG_NAME).write_text(C.dump(tree), encoding="utf-8")
    log.info("resolved config written to %s", out / CONFIG_NAME)


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _threads() -> int:
    raw = os.environ.get("COGADAPT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"COGADAPT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("COGADAPT_THREADS must be >= 1")
    return n


def _require_manifest(data: Path | None) -> tuple[Path, Manifest]:
    if data is None:
        raise ConfigError("--data is required")
    path = Path(data) / "manifest.json"
    if not path.exists():
        raise RunError(f"no manifest.json in {data}")
    return Path(data), read_manifest(path)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args, tree) -> None:
    cfg = C.synth_config(tree)
    out = _prepare_out(args.out, args.force)
    _echo_config(tree, out)
    recs, truth = synth_generate(cfg)
    (out / "recordings").mkdir()
    (out / "reference12").mkdir()
    entries = []
    notes = {"mixing": truth.mixing.tolist(), "subjects": {}}
    for rec, st in zip(recs, truth.subjects):
        emit_csv(out / "recordings" / f"{rec.subject_id}.csv", rec)
        np.save(out / "reference12" / f"{rec.subject_id}.npy", st.recording12.samples)
        entries.append(ManifestEntry(f"recordings/{rec.subject_id}.csv", rec.subject_id, 0.0,
                                     splits=["wearable"]))
        entries.append(ManifestEntry(f"reference12/{rec.subject_id}.npy", rec.subject_id, 0.0,
                                     splits=["reference12"]))
        notes["subjects"][st.subject_id] = {
            "heart_rate": list(st.heart_rate),
            "label_states": st.label_states.tolist(),
            "beat_times": st.beat_times.tolist(),
        }
    extra = {"fs": cfg.fs, "label_period": cfg.label_period, "chest_pick": cfg.chest_pick}
    write_manifest(out / "manifest.json",
                   Manifest("synthetic", [r.subject_id for r in recs], entries, extra))
    (out / "truth.json").write_text(json.dumps(notes, sort_keys=True) + "\n", encoding="utf-8")
    print(f"synthesized {len(recs)} subjects into {out}")


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------


def cmd_preprocess(args, tree) -> None:
    wcfg = C.windowing_config(tree)
    data, manifest = _require_manifest(args.data)
    sources = [e for e in manifest.entries if "wearable" in e.splits]
    if not sources:
        raise RunError(f"manifest in {data} lists no wearable recordings")
    out = _prepare_out(args.out, args.force)
    _echo_config(tree, out)
    fs = manifest.extra.get("fs")
    period = manifest.extra.get("label_period", 10.0)
    entries = []
    for mode in ("train", "eval"):
        (out / "windows" / mode).mkdir(parents=True)
        stats = sp.PreprocessStats()
        for e in sources:
            rec = ingest_csv(data / e.path, subject_id=e.subject_id, fs=fs, label_period=period)
            windows = sp.preprocess_recording(rec, wcfg, mode, stats)
            if not windows:
                log.warning("%s: no complete %s windows (recording shorter than one window?)",
                            e.subject_id, mode)
            for k, w in enumerate(windows):
                rel = f"windows/{mode}/{w.subject_id}_{k:05d}.cgaw"
                write_window(out / rel, w)
                entries.append(ManifestEntry(rel, w.subject_id, float(w.t_start), w.label,
                                             [mode], w.raw_label))
        counts = ", ".join(f"label {k}: {v}" for k, v in sorted(stats.labels.items()))
        print(f"{mode}: {stats.windows} windows ({counts or 'none'}); "
              f"{stats.discarded_unlabelled} discarded without a label")
    write_manifest(out / "manifest.json",
                   Manifest(f"{manifest.dataset}-windows", manifest.subjects, entries,
                            {"target_fs": wcfg.target_fs, "source": str(manifest.dataset)}))


# ---------------------------------------------------------------------------
# pretrain-adapter / reconstruct-eval
# ---------------------------------------------------------------------------


def _reconstruction_dataset(data: Path, manifest: Manifest, tree: dict):
    """(train_x, train_y, val_x, val_y) from the 12-lead references, split by window."""
    wcfg = C.windowing_config(tree)
    p = C._section(tree, "pretrain")
    fs = manifest.extra.get("fs")
    chest = manifest.extra.get("chest_pick", "V2")
    refs = [e for e in manifest.entries if "reference12" in e.splits]
    if not refs or fs is None:
        raise RunError(f"{data} holds no 12-lead reference recordings")
    xs, ys = [], []
    for e in refs:
        rec = sp.Recording(e.subject_id, float(fs), list(lead_math.LEADS_12),
                           np.load(data / e.path), reference="WCT")
        x, y = reconstruction_pairs(rec, wcfg, "eval", chest, bool(p.get("normalize_inputs", False)))
        xs.append(x)
        ys.append(y)
    x, y = np.concatenate(xs), np.concatenate(ys)
    if len(x) < 2:
        raise RunError("need at least two windows for a train/validation split")
    order = np.random.default_rng([int(tree.get("seed", 0)), 3]).permutation(len(x))
    n_val = min(max(1, int(round(float(p.get("val_fraction", 0.2)) * len(x)))), len(x) - 1)
    val, tr = np.sort(order[:n_val]), np.sort(order[n_val:])
    return x[tr], y[tr], x[val], y[val]


def _pretrain_config(tree):
    cfg = C.pretrain_config(tree)
    m = C.model_config(tree)
    cfg.hidden, cfg.dropout = m.adapter_hidden, m.adapter_dropout
    return cfg


def _recon_rows(method: str, pred, target) -> list[dict]:
    rmse = rmse_per_lead(pred, target)
    try:
        cc = pearson_cc_per_lead(pred, target)
    except (ValueError, FloatingPointError):
        cc = np.full(12, math.nan)
    return [{"lead": lead, "method": method, "rmse": float(rmse[i]), "cc": float(cc[i])}
            for i, lead in enumerate(lead_math.LEADS_12)]


def cmd_pretrain_adapter(args, tree) -> None:
    if args.epochs is not None:
        tree["pretrain"]["epochs"] = args.epochs
    cfg = _pretrain_config(tree)
    data, manifest = _require_manifest(args.data)
    out = _prepare_out(args.out, args.force)
    _echo_config(tree, out)
    tx, ty, vx, vy = _reconstruction_dataset(data, manifest, tree)
    seed = int(tree.get("seed", 0))
    res = pretrain_adapter(tx, ty, vx, vy, cfg, np.random.default_rng([seed, 4]))
    meta = {"kind": "adapter", "best_epoch": res.best_epoch, "best_val_loss": res.best_val_loss,
            "hidden": cfg.hidden, "dropout": cfg.dropout,
            "chest_pick": manifest.extra.get("chest_pick", "V2")}
    write_checkpoint(out / "adapter.cgak", res.adapter.state_dict(), meta)
    _write_jsonl(out / "pretrain_log.jsonl", res.log)
    rows = _recon_rows("adapter", predict_adapter(res.adapter, vx), vy)
    write_csv(out / "reconstruction.csv", RECON_COLUMNS, rows)
    print(f"adapter: best epoch {res.best_epoch}, validation loss {res.best_val_loss!r}")
    for r in rows:
        print(f"  {r['lead']:>4}  rmse {r['rmse']:.6f}  cc {r['cc']:.6f}")


def cmd_reconstruct_eval(args, tree) -> None:
    data, manifest = _require_manifest(args.data)
    if args.adapter is None:
        raise ConfigError("--adapter is required")
    tx, ty, vx, vy = _reconstruction_dataset(data, manifest, tree)
    cfg = _pretrain_config(tree)
    adapter = Adapter(np.random.default_rng(0), hidden=cfg.hidden, dropout=cfg.dropout)
    load_checkpoint_into(adapter, args.adapter)
    out = _prepare_out(args.out, args.force)
    _echo_config(tree, out)
    ls = least_squares_fit(tx, ty)
    rows = (_recon_rows("fixed", apply_fixed_transform(dower_transform(), vx), vy)
            + _recon_rows("least_squares", apply_fixed_transform(ls, vx), vy)
            + _recon_rows("adapter", predict_adapter(adapter, vx), vy))
    write_csv(out / "reconstruct_eval.csv", RECON_COLUMNS, rows)
    print(f"{'lead':>4}  " + "  ".join(f"{m:>26}" for m in ("fixed", "least_squares", "adapter")))
    for i, lead in enumerate(lead_math.LEADS_12):
        cells = [rows[i + 12 * j] for j in range(3)]
        print(f"{lead:>4}  " + "  ".join(f"rmse {c['rmse']:9.4g} cc {c['cc']:7.4f}" for c in cells))


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_windows(data: Path, manifest: Manifest, mode: str):
    es = [e for e in manifest.entries if mode in e.splits and e.label is not None]
    if not es:
        raise RunError(f"no labelled {mode} windows in {data}")
    x = np.stack([read_window(data / e.path)[0] for e in es]).astype(np.float64)
    y = np.array([e.label for e in es], dtype=np.int64)
    subjects = np.array([e.subject_id for e in es])
    ids = [Path(e.path).stem for e in es]
    return x, y, subjects, ids


def _run_fold(job: dict) -> dict:
    """Train and test one fold; pure function of ``job`` so folds can run in parallel."""
    tree = job["tree"]
    seed = int(tree.get("seed", 0))
    mcfg = C.model_config(tree)
    scfg = C.scenario_config(tree, job["scenario"], job["split"])
    model = CogAdaptModel(mcfg, np.random.default_rng([seed, 1]))
    if job["adapter"] is not None:
        load_checkpoint_into(model.adapter, job["adapter"])
    res = train(model, job["train_x"], job["train_y"], job["val_x"], job["val_y"], scfg,
                np.random.default_rng([seed, 2, job["index"]]), job["val_subjects"])
    _, preds = evaluate(model, job["test_x"], job["test_y"], scfg.metric,
                        job["test_subjects"], job["test_ids"])
    return {"fold_id": job["fold_id"], "result": res, "preds": preds,
            "state": model.state_dict(),
            "meta": {"kind": "model", "scenario": scfg.scenario, "split": job["split"],
                     "fold": job["fold_id"], "best_epoch": res.best_epoch,
                     "val_metric": res.best_metric, "metric": scfg.metric}}


def cmd_train(args, tree) -> None:
    t = C.train_section(tree)
    scenario = args.scenario or t["scenario"]
    split = args.split or t["split"]
    if args.epochs is not None:
        ov = tree["train"].setdefault("scenario_overrides", {})
        ov.setdefault(scenario, {})["epochs"] = args.epochs
    tree["train"]["scenario"], tree["train"]["split"] = scenario, split
    C.validate(tree)
    data, manifest = _require_manifest(args.data)
    seed = int(tree.get("seed", 0))
    if split == "kfold":
        x, y, subj, ids = _load_windows(data, manifest, "eval")
        plan = kfold_split(y, int(t.get("k", 10)), seed, float(t.get("val_fraction", 0.1)))
        tr_x, tr_y = x, y
    else:
        x, y, subj, ids = _load_windows(data, manifest, "eval")
        tr_x, tr_y, tr_subj, _ = _load_windows(data, manifest, "train")
        plan = loso_split(subj)
    out = _prepare_out(args.out, args.force)
    _echo_config(tree, out)
    jobs = []
    for i, fold in enumerate(plan.folds):
        if split == "kfold":
            tr_idx = fold.train
        else:
            keep = {str(s) for s in np.unique(subj[fold.train])}
            tr_idx = np.flatnonzero(np.isin(tr_subj, list(keep)))
        jobs.append({
            "tree": tree, "scenario": scenario, "split": split, "index": i,
            "fold_id": fold.fold_id, "adapter": args.adapter,
            "train_x": tr_x[tr_idx], "train_y": tr_y[tr_idx],
            "val_x": x[fold.val], "val_y": y[fold.val], "val_subjects": subj[fold.val],
            "test_x": x[fold.test], "test_y": y[fold.test],
            "test_subjects": subj[fold.test], "test_ids": [ids[j] for j in fold.test],
        })
    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = []
        for job in jobs:
            try:
                results.append(_run_fold(job))
            except CogAdaptError as exc:
                raise type(exc)(f"fold {job['fold_id']}: {exc}") from exc
            log.info("fold %s done", job["fold_id"])
    fold_preds = {}
    for r in results:
        fdir = out / "folds" / r["fold_id"]
        fdir.mkdir(parents=True)
        write_checkpoint(fdir / "model.cgak", r["state"], r["meta"])
        _write_jsonl(fdir / "epochs.jsonl", r["result"].log)
        fold_preds[r["fold_id"]] = r["preds"]
    rows = fold_report(fold_preds)
    write_csv(out / "folds.csv", REPORT_COLUMNS, rows[:-2])
    write_csv(out / "summary.csv", REPORT_COLUMNS, rows[-2:])
    write_csv(out / "distribution.csv", DIST_COLUMNS, distribution_rows(rows))
    write_csv(out / "predictions.csv", PRED_COLUMNS,
              [vars(p) for preds in fold_preds.values() for p in preds])
    mean = rows[-2]
    print(f"scenario {scenario} / {split}: {len(results)} folds, mean accuracy "
          f"{mean['accuracy']:.4f}, macro-F1 {mean['macro_f1']:.4f}, AUROC {mean['auroc']:.4f}")


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _read_rows(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args, tree) -> None:
    run = Path(args.run_dir or args.out or ".")
    if not run.is_dir():
        raise RunError(f"run directory {run} does not exist")
    summaries = sorted(run.glob("**/summary.csv"))
    if not summaries:
        raise RunError(f"no results in {run}; run 'cogadapt train --out DIR' first "
                       "and point report at DIR or its parent")
    grid: dict[tuple[str, str], dict] = {}
    dists = {}
    for s in summaries:
        cfg_path = s.parent / CONFIG_NAME
        if not cfg_path.exists():
            raise RunError(f"missing {CONFIG_NAME} next to {s}")
        t = C.load_config(str(cfg_path))["train"]
        key = (t["scenario"], t["split"])
        mean = [r for r in _read_rows(s) if r["id"] == "mean"]
        if not mean:
            raise RunError(f"{s} has no mean row")
        grid[key] = mean[0]
        dpath = s.parent / "distribution.csv"
        if not dpath.exists():
            raise RunError(f"missing {dpath}")
        dists[key] = _read_rows(dpath)
    splits = [sp_ for sp_ in ("kfold", "loso") if any(k[1] == sp_ for k in grid)]
    for scen in sorted({k[0] for k in grid}):
        print(f"Scenario {scen}")
        print(f"  {'split':<6} {'Acc':>22} {'F1':>22} {'AUC':>22}")
        for split in splits:
            r = grid.get((scen, split))
            if r is None:
                continue
            print(f"  {split:<6} {r['accuracy']:>22} {r['macro_f1']:>22} {r['auroc']:>22}")
    for (scen, split), rows in sorted(dists.items()):
        print(f"Per-fold distribution, scenario {scen} / {split}")
        for r in rows:
            print("  " + ", ".join(f"{c}={r[c]}" for c in DIST_COLUMNS))


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "pretrain-adapter": cmd_pretrain_adapter,
    "reconstruct-eval": cmd_reconstruct_eval,
    "train": cmd_train,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cogadapt", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help="config file, or a builtin name: default, desk")
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("--force", action="store_true", help="replace a non-empty --out")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config value (dotted key)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p = sub.add_parser("preprocess", parents=[common], help="window a recording dataset")
    p.add_argument("--data", type=Path)
    p = sub.add_parser("pretrain-adapter", parents=[common], help="pretrain the 3->12 adapter")
    p.add_argument("--data", type=Path)
    p.add_argument("--epochs", type=int, default=None)
    p = sub.add_parser("reconstruct-eval", parents=[common], help="compare reconstruction methods")
    p.add_argument("--data", type=Path)
    p.add_argument("--adapter", type=Path)
    p = sub.add_parser("train", parents=[common], help="fine-tune under K-fold or LOSO")
    p.add_argument("--data", type=Path)
    p.add_argument("--scenario", choices=("A", "B", "C"))
    p.add_argument("--split", choices=("kfold", "loso"))
    p.add_argument("--adapter", type=Path, default=None, help="pretrained adapter checkpoint")
    p.add_argument("--epochs", type=int, default=None)
    p = sub.add_parser("report", parents=[common], help="summarize training runs")
    p.add_argument("run_dir", nargs="?", type=Path)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    needs_out = args.command != "report"
    try:
        if needs_out and args.out is None:
            raise ConfigError("--out is required")
        tree = C.load_config(args.config)
        if args.seed is not None:
            tree["seed"] = args.seed
        for o in args.overrides:
            C.apply_override(tree, o)
        C.validate(tree)
        COMMANDS[args.command](args, tree)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CogAdaptError, OSError, ValueError, FloatingPointError, AssertionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
