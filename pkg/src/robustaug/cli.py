"""Command-line harness: train, eval, augment, diag, repro.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
4 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path

import numpy as np
import yaml

from . import diagnostics as D
from . import svg
from .attacks import PerturbationBall, cascade
from .augment import describe_magnitudes
from .config import RunConfig, parse_number
from .errors import ConfigError, FormatError, NumericalError, RobustAugError, ValidationError
from .models import Classifier, load_checkpoint, save_checkpoint
from .parallel import worker_count
from .trainer import TrainingAborted, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
DIAG_KINDS = ("landscape", "eps-sweep", "steps-sweep", "diff", "ensemble", "wa-sweep")
FIGURES = ("fig2a", "fig3", "fig5", "fig6", "fig9")


# ---------------------------------------------------------------- file helpers


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def csv_text(schema: str, header, rows) -> str:
    """CSV with a leading ``# schema: name/version`` line."""
    buf = io.StringIO()
    buf.write(f"# schema: {schema}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return v


def read_csv(path) -> tuple:
    """(schema, header, rows as lists of strings)."""
    lines = Path(path).read_text().splitlines()
    schema = lines[0][len("# schema: "):] if lines and lines[0].startswith("# schema: ") else ""
    body = [l for l in lines if not l.startswith("#")]
    reader = list(csv.reader(body))
    return schema, reader[0], reader[1:]


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig.from_dict(
        {"trainer": {"beta": 6.0}})
    changes = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}", item)
        key, value = item.split("=", 1)
        changes[key] = yaml.safe_load(value)
    for attr, key in (("seed", "seed"), ("name", "name"), ("output_dir", "output_dir"), ("data_dir", "data.data_dir")):
        v = getattr(args, attr, None)
        if v is not None:
            changes[key] = v
    if changes:
        try:
            cfg = cfg.replace(**changes)
        except KeyError as exc:
            raise ConfigError(f"unknown key {exc.args[0]!r}", str(exc.args[0])) from None
    return cfg


def _load_model(path, cfg: RunConfig | None = None):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    spec, params, meta = load_checkpoint(path)
    if cfg is not None:
        want = cfg.arch_spec()
        if (spec.input_shape, spec.num_classes) != (want.input_shape, want.num_classes):
            raise ValidationError(f"checkpoint {path} expects inputs {spec.input_shape} with {spec.num_classes} "
                                  f"classes; the data gives {want.input_shape} with {want.num_classes}")
    return Classifier(spec, params), meta


def _eval_data(cfg: RunConfig, split_name: str = "val", limit: int | None = None) -> tuple:
    ds, split = cfg.dataset()
    idx = split.test if split_name == "test" else split.val
    if len(idx) == 0:
        raise ValidationError(f"the {split_name} split is empty")
    if limit:
        idx = idx[:limit]
    return ds.images[idx], ds.labels[idx], idx


# ---------------------------------------------------------------- train


def run_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / f"{cfg.name}-{cfg.seed}"


def run_training(cfg: RunConfig) -> Path:
    """Train one configured run and write its directory; returns the directory."""
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.yaml", cfg.dump())
    ds, split = cfg.dataset()
    spec = cfg.arch_spec()
    t0 = time.perf_counter()
    try:
        result = train(cfg.train_config(), spec, ds, split)
    except TrainingAborted as exc:
        atomic_write(out / "abort.json", json.dumps(exc.record, indent=1, sort_keys=True) + "\n")
        raise
    log = result.log
    atomic_write(out / "train_log.csv", "# schema: train_log/1\n" + log.to_csv())
    meta = {"run": cfg.name, "seed": cfg.seed}
    for step, (live, ema) in sorted(log.snapshots.items()):
        save_checkpoint(out / f"{step}.ckpt", spec, live, {**meta, "step": step, "weights": "live"})
        if ema is not None:
            save_checkpoint(out / f"{step}.ema.ckpt", spec, ema, {**meta, "step": step, "weights": "ema",
                                                                  "decay": cfg.trainer.ema_decay})
    if log.best_params is not None:
        save_checkpoint(out / "best.ckpt", spec, log.best_params, {**meta, "step": log.best_step, "weights": "live"})
    if log.best_params_ema is not None:
        save_checkpoint(out / "best.ema.ckpt", spec, log.best_params_ema,
                        {**meta, "step": log.best_step_ema, "weights": "ema"})
    final = log.records[-1] if log.records else None
    rows = [("best_step", log.best_step), ("best_step_ema", log.best_step_ema),
            ("final_step", final.step if final else 0),
            ("final_robust", final.robust_val_pgd40 if final else ""),
            ("final_robust_ema", final.robust_val_ema if final else ""),
            ("best_robust", float(log.column("robust_val_pgd40").max()) if final else ""),
            ("best_robust_ema", float(log.column("robust_val_ema").max()) if final else "")]
    atomic_write(out / "summary.csv", csv_text("summary/1", ["key", "value"], rows))
    # wall-clock lives outside the CSVs so reruns stay byte-identical
    (out / "timing.log").write_text(f"train_seconds {time.perf_counter() - t0:.3f}\n")
    return out


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = run_training(cfg)
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    cfg = load_config(args)
    model, _ = _load_model(args.checkpoint, cfg)
    if args.eps is not None:
        cfg = cfg.replace(**{"eval.eps": parse_number(args.eps, "--eps")})
    names = args.cascade.split(",") if args.cascade else list(cfg.eval.cascade)
    stages = [cfg.stage(n.strip()) for n in names]
    images, labels, idx = _eval_data(cfg, args.split, args.limit)
    res = cascade(model, images, labels, stages)
    rows = [(i, name, cfg.eval.eps, cfg.eval.norm, len(labels), res.clean_accuracy, acc)
            for i, (name, acc) in enumerate(zip(res.stage_names, res.stage_robust_accuracy))]
    text = csv_text("eval/1", ["stage_index", "stage", "eps", "norm", "n", "clean_acc", "robust_acc"], rows)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".eval.csv")
    atomic_write(out, text)
    if args.per_example:
        per = [(int(i), int(y), bool(c), bool(r)) for i, y, c, r in zip(idx, labels, res.clean_correct, res.robust)]
        atomic_write(out.with_name(out.stem + ".per_example.csv"),
                     csv_text("per_example/1", ["example", "label", "clean_correct", "robust"], per))
    print(f"clean {res.clean_accuracy:.4f} robust {res.robust_accuracy:.4f} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- augment


def cmd_augment(args) -> int:
    if not args.describe:
        print("augment: nothing to do (use --describe)", file=sys.stderr)
        return EXIT_CONFIG
    print(describe_magnitudes())
    return EXIT_OK


# ---------------------------------------------------------------- diag


def _diag_out(args, default: str) -> Path:
    return Path(args.out) if args.out else Path(args.checkpoints[0] if getattr(args, "checkpoints", None)
                                                else ".").parent / default


def _plot_from_csv(csv_path: Path, kind: str) -> Path:
    """Render the SVG purely from the CSV just written."""
    schema, header, rows = read_csv(csv_path)
    if kind == "landscape":
        n = max(int(r[0]) for r in rows) + 1
        m = max(int(r[1]) for r in rows) + 1
        vals = np.zeros((n, m))
        inside = np.zeros((n, m), bool)
        for r in rows:
            vals[int(r[0]), int(r[1])] = float(r[4])
            inside[int(r[0]), int(r[1])] = r[5] == "1"
        text = svg.heatmap(vals, "margin landscape", inside)
    elif kind == "diff":
        snaps = header[2:]
        mat = np.array([[r[2 + k] == "1" for r in rows] for k in range(len(snaps))])
        text = svg.bar_strip(mat, snaps, "errors per snapshot (reordered)")
    elif kind == "wa-sweep":
        series = {}
        for r in rows:
            series.setdefault(r[0], ([], []))
            series[r[0]][0].append(float(r[1]))
            series[r[0]][1].append(float(r[3]))
        text = svg.line_chart(series, "robust accuracy vs decay", "tau", "robust accuracy")
    elif kind == "ensemble":
        text = svg.line_chart({"robust": (list(range(len(rows))), [float(r[3]) for r in rows])},
                              "ensemble robust accuracy", "row", "robust accuracy")
    else:
        xs = [float(r[0]) for r in rows]
        ys = [float(r[1]) for r in rows]
        text = svg.line_chart({kind: (xs, ys)}, kind, header[0], header[1])
    out = csv_path.with_suffix(".svg")
    atomic_write(out, text)
    return out


def cmd_diag(args) -> int:
    cfg = load_config(args)
    kind = args.kind
    if kind != "wa-sweep" and not args.checkpoints:
        raise ConfigError(f"diag {kind} needs at least one checkpoint", "checkpoints")
    dg = cfg.diagnostics
    if kind == "landscape":
        model, _ = _load_model(args.checkpoints[0], cfg)
        images, labels, idx = _eval_data(cfg, args.split, None)
        i = args.index
        grid = args.grid or dg.grid
        g = D.landscape(model, images[i], int(labels[i]), PerturbationBall(cfg.eval.norm, cfg.eval.eps), n=grid,
                        extent=dg.extent, seed=cfg.seed)
        text = csv_text("landscape/1", ["i", "j", "a", "b", "margin", "inside"], g.rows())
    elif kind == "eps-sweep":
        model, _ = _load_model(args.checkpoints[0], cfg)
        images, labels, _ = _eval_data(cfg, args.split, args.limit or dg.examples)
        radii = [parse_number(r, "--radii") for r in args.radii.split(",")] if args.radii else dg.radii
        rows = D.eps_sweep(model, images, labels, radii, steps=dg.sweep_steps, norm=cfg.eval.norm, seed=cfg.seed)
        text = csv_text("eps_sweep/1", ["eps", "robust_acc"], rows)
    elif kind == "steps-sweep":
        model, _ = _load_model(args.checkpoints[0], cfg)
        images, labels, _ = _eval_data(cfg, args.split, args.limit or dg.examples)
        counts = [int(c) for c in args.counts.split(",")] if args.counts else dg.step_counts
        rows = D.steps_sweep(model, images, labels, counts, eps=cfg.eval.eps, norm=cfg.eval.norm, seed=cfg.seed)
        text = csv_text("steps_sweep/1", ["steps", "robust_acc"], rows)
    elif kind == "diff":
        images, labels, idx = _eval_data(cfg, args.split, args.limit or dg.examples)
        vectors = []
        for path in args.checkpoints:
            model, _ = _load_model(path, cfg)
            _, _, pv = D.robust_accuracy(model, images, labels, cfg.eval_attack(), snapshot=Path(path).name)
            vectors.append(pv)
        rep = D.prediction_diff(vectors)
        names = [v.snapshot for v in vectors]
        rows = [(rank, int(idx[e]), *[bool(v.errors[e]) for v in vectors]) for rank, e in enumerate(rep.order)]
        text = csv_text("diff/1", ["rank", "example", *names], rows)
        summary = [(n, int(rep.errors[k]), int(rep.unique[k]), *rep.agreement[k]) for k, n in enumerate(names)]
        out = _diag_out(args, "diff.csv")
        atomic_write(out.with_name(out.stem + ".summary.csv"),
                     csv_text("diff_summary/1", ["snapshot", "errors", "unique_errors",
                                                 *[f"agree_{n}" for n in names]], summary))
    elif kind == "ensemble":
        images, labels, _ = _eval_data(cfg, args.split, args.limit or dg.examples)
        models = [_load_model(p, cfg)[0] for p in args.checkpoints]
        names = [Path(p).name for p in args.checkpoints]
        attack = cfg.eval_attack()
        rows = []
        for k, mdl in enumerate(models):
            rob, clean, _ = D.robust_accuracy(mdl, images, labels, attack)
            rows.append((names[k], 1, clean, rob))
        for a in range(len(models)):
            for b in range(a + 1, len(models)):
                rob, clean, _ = D.ensemble_robust_accuracy([models[a], models[b]], images, labels, attack)
                rows.append((f"{names[a]}+{names[b]}", 2, clean, rob))
        text = csv_text("ensemble/1", ["models", "size", "clean_acc", "robust_acc"], rows)
    else:
        ds, split = cfg.dataset()
        taus = [parse_number(t, "--taus") for t in args.taus.split(",")] if args.taus else dg.taus
        augs = args.augmentations.split(",") if args.augmentations else dg.augmentations
        rows = D.wa_decay_sweep(cfg.train_config(), cfg.arch_spec(), ds, split, taus, augs)
        text = csv_text("wa_sweep/1", ["augmentation", "tau", "clean_acc", "robust_acc"], rows)
    out = _diag_out(args, f"{kind}.csv")
    atomic_write(out, text)
    print(out)
    if args.plot:
        print(_plot_from_csv(out, kind))
    return EXIT_OK


# ---------------------------------------------------------------- repro


def desk_config() -> RunConfig:
    """The desk-scale base configuration used by ``repro`` when no config is given."""
    path = Path(__file__).with_name("desk.yaml")
    return RunConfig.load(path)


def figure_matrix(fig: str, base: RunConfig, seeds) -> list:
    """[(run name, override dict)] for a figure id."""
    if fig not in FIGURES:
        raise ConfigError(f"unknown figure {fig!r}; expected one of {FIGURES}", "figure")
    tau = base.trainer.ema_decay if base.trainer.ema_decay is not None else 0.999
    runs = []
    if fig == "fig2a":
        runs = [("pad_crop-nowa", {"augment": ["pad_crop"], "trainer.ema_decay": None})]
    elif fig == "fig3":
        for aug in ("pad_crop", "mixup", "cutmix"):
            runs.append((f"{aug}-nowa", {"augment": [aug], "trainer.ema_decay": None}))
            runs.append((f"{aug}-wa", {"augment": [aug], "trainer.ema_decay": tau}))
    elif fig == "fig5":
        for alpha in (0.2, 0.4, 1.0):
            runs.append((f"mixup-a{alpha}", {"augment": [{"kind": "mixup", "alpha": alpha}], "trainer.ema_decay": tau}))
    elif fig == "fig6":
        for alpha in (0.2, 0.4, 1.0):
            runs.append((f"mixup-a{alpha}", {"augment": [{"kind": "mixup", "alpha": alpha}], "trainer.ema_decay": tau}))
        for w in (4, 8, 12):
            runs.append((f"cutout-w{w}", {"augment": [{"kind": "cutout", "window": w}], "trainer.ema_decay": tau}))
        for w in (4, 8, 12):
            runs.append((f"cutmix-l{w}", {"augment": [{"kind": "cutmix", "length": w}], "trainer.ema_decay": tau}))
    else:
        for aug in ("pad_crop", "cutmix"):
            for t in base.diagnostics.taus:
                runs.append((f"{aug}-tau{t}", {"augment": [aug], "trainer.ema_decay": t}))
    return [(f"{fig}-{name}", {**over, "seed": s}) for s in seeds for name, over in runs]


def _run_one(doc: dict) -> str:
    cfg = RunConfig.from_dict(doc)
    return str(run_training(cfg))


def cmd_repro(args) -> int:
    base = RunConfig.load(args.config) if args.config else desk_config()
    root = Path(args.output_dir or base.output_dir) / f"repro-{args.figure}"
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    matrix = figure_matrix(args.figure, base, seeds)
    manifest_path = root / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {"figure": args.figure, "runs": {}}
    jobs = []
    for name, over in matrix:
        cfg = base.replace(**over, name=name, output_dir=str(root))
        key = f"{name}-{cfg.seed}"
        done = manifest["runs"].get(key, {}).get("status") == "done" and (run_dir(cfg) / "summary.csv").exists()
        manifest["runs"][key] = {"dir": str(run_dir(cfg)), "status": "done" if done else "pending"}
        if not done:
            jobs.append((key, cfg.to_dict()))
    atomic_write(manifest_path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    workers = worker_count(args.workers)
    if workers == 1:
        for key, doc in jobs:
            _run_one(doc)
            manifest["runs"][key]["status"] = "done"
            atomic_write(manifest_path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_run_one, doc): key for key, doc in jobs}
            for fut in as_completed(futures):
                fut.result()
                manifest["runs"][futures[fut]]["status"] = "done"
                atomic_write(manifest_path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    combined = _combine(args.figure, root, manifest)
    print(combined)
    return EXIT_OK


def _combine(fig: str, root: Path, manifest: dict) -> Path:
    rows, series = [], {}
    for key in sorted(manifest["runs"]):
        _, header, body = read_csv(Path(manifest["runs"][key]["dir"]) / "train_log.csv")
        col = {h: i for i, h in enumerate(header)}
        for r in body:
            rows.append((key, r[col["step"]], r[col["robust_val_pgd40"]], r[col["robust_val_ema"]]))
        steps = [float(r[col["step"]]) for r in body]
        series[key] = (steps, [float(r[col["robust_val_pgd40"]]) for r in body])
        if "-wa" in key or "tau" in key or fig in ("fig5", "fig6"):
            series[key + " (WA)"] = (steps, [float(r[col["robust_val_ema"]]) for r in body])
    out = root / f"{fig}.csv"
    atomic_write(out, csv_text(f"{fig}/1", ["run", "step", "robust_val_pgd40", "robust_val_ema"], rows))
    atomic_write(out.with_suffix(".svg"), svg.line_chart(series, fig, "step", "robust accuracy (PGD-40)"))
    return out


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robustaug", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="YAML run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted path)")
        sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--data-dir", help="CIFAR-10 directory (else $ROBUSTAUG_DATA_DIR)")

    t = sub.add_parser("train", help="train one run into runs/{name}-{seed}/")
    t.add_argument("config", help="YAML run configuration")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted path)")
    t.add_argument("--seed", type=int, help="override the run seed")
    t.add_argument("--name", help="override the run name")
    t.add_argument("--output-dir", help="override the output root")
    t.add_argument("--data-dir", help="CIFAR-10 directory (else $ROBUSTAUG_DATA_DIR)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="clean and cascade robust accuracy of a checkpoint")
    e.add_argument("checkpoint")
    common(e)
    e.add_argument("--cascade", help="comma-separated stages (pgd, pgd_adam, apgd_ce, apgd_margin, mt)")
    e.add_argument("--eps", help="radius, e.g. 8/255")
    e.add_argument("--split", choices=("val", "test"), default="val")
    e.add_argument("--limit", type=int, help="evaluate only the first N examples of the split")
    e.add_argument("--per-example", action="store_true", help="also write per-example correctness")
    e.add_argument("--out", help="output CSV path")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("augment", help="augmentation utilities")
    a.add_argument("--describe", action="store_true", help="print the RandAugment magnitude table")
    a.set_defaults(func=cmd_augment)

    d = sub.add_parser("diag", help="diagnostics: " + ", ".join(DIAG_KINDS))
    d.add_argument("kind", choices=DIAG_KINDS)
    d.add_argument("checkpoints", nargs="*")
    common(d)
    d.add_argument("--split", choices=("val", "test"), default="val")
    d.add_argument("--limit", type=int, help="number of examples")
    d.add_argument("--index", type=int, default=0, help="landscape: example index within the split")
    d.add_argument("--grid", type=int, help="landscape: odd grid size")
    d.add_argument("--radii", help="eps-sweep: comma-separated radii")
    d.add_argument("--counts", help="steps-sweep: comma-separated step counts")
    d.add_argument("--taus", help="wa-sweep: comma-separated decays")
    d.add_argument("--augmentations", help="wa-sweep: comma-separated augmentation kinds")
    d.add_argument("--out", help="output CSV path")
    d.add_argument("--plot", action="store_true", help="also render an SVG from the CSV")
    d.set_defaults(func=cmd_diag)

    r = sub.add_parser("repro", help="desk-scale figure reproductions: " + ", ".join(FIGURES))
    r.add_argument("figure", choices=FIGURES)
    r.add_argument("--config", help="base configuration (default: the packaged desk config)")
    r.add_argument("--seeds", help="comma-separated seeds")
    r.add_argument("--output-dir", help="output root")
    r.add_argument("--workers", type=int, help="parallel runs (default $ROBUSTAUG_THREADS or 1)")
    r.set_defaults(func=cmd_repro)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RobustAugError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
