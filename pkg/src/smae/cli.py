"""Command-line entry point: ``smae <command> [flags]``.

Exit codes: 0 success, 1 invalid arguments or config, 2 runtime or numeric failure.

Run configs are JSON with optional sections ``model``, ``pretrain`` and
``task`` plus a top-level ``seed``; flags override the file. The seed falls
back to ``$SMAE_SEED`` and then to 0.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import geodesy, ssl, synthcortex, tasks
from .checkpoint import CheckpointFormatError, load_checkpoint
from .sit import SitConfig

log = logging.getLogger("smae")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

_MODEL_KEYS = {"hiddenDim": "hidden_dim", "layers": "layers", "heads": "heads", "ffnMult": "ffn_mult"}
_PRETRAIN_KEYS = {"method": "method", "ratio": "ratio", "epochs": "epochs", "batch": "batch", "lr": "lr",
                  "momentum": "momentum", "dtype": "dtype", "usePosenc": "use_posenc", "dumpEvery": "dump_every"}
_TASK_KEYS = {"maxEpochs": "max_epochs", "patience": "patience", "lr": "lr", "momentum": "momentum",
              "batch": "batch", "bins": "bins", "dtype": "dtype", "stopAtConvergence": "stop_at_convergence"}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


# --------------------------------------------------------------------------
# config resolution


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc.strerror}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config {path} is not valid JSON: {exc}"]) from None
    if not isinstance(cfg, dict):
        raise ConfigError([f"config {path} must hold a JSON object"])
    return cfg


def resolve_seed(flag: int | None, cfg: dict) -> int:
    if flag is not None:
        return flag
    if "seed" in cfg:
        return int(cfg["seed"])
    env = os.environ.get("SMAE_SEED")
    if env:
        return int(env)
    return 0


def _section(cfg: dict, name: str, keys: dict, problems: list[str]) -> dict:
    sec = cfg.get(name, {}) or {}
    if not isinstance(sec, dict):
        problems.append(f"config section {name!r} must be an object")
        return {}
    unknown = sorted(set(sec) - set(keys))
    if unknown:
        problems.append(f"unknown keys in {name!r}: {', '.join(unknown)}")
    return {keys[k]: v for k, v in sec.items() if k in keys}


def model_config(cfg: dict, ds: synthcortex.SurfaceDataset, problems: list[str]) -> SitConfig | None:
    """Geometry comes from the dataset; width and depth from the config."""
    kw = _section(cfg, "model", {**_MODEL_KEYS, "patchLevel": "patch_level", "dataLevel": "data_level",
                                 "channels": "channels"}, problems)
    for key, have in (("patch_level", ds.patch_level), ("data_level", ds.data_level), ("channels", ds.channels)):
        if key in kw and kw[key] != have:
            problems.append(f"model.{key} = {kw[key]} but the dataset has {have}")
        kw[key] = have
    try:
        return SitConfig(**kw)
    except (TypeError, ValueError) as exc:
        problems.append(str(exc))
        return None


def _read_data(path: str, problems: list[str]) -> synthcortex.SurfaceDataset | None:
    if not path:
        problems.append("--data is required")
        return None
    try:
        return synthcortex.read_dataset(path)
    except OSError as exc:
        problems.append(f"cannot read dataset {path}: {exc.strerror}")
    except synthcortex.DatasetFormatError as exc:
        problems.append(str(exc))
    return None


def _given(**kw) -> dict:
    return {k: v for k, v in kw.items() if v is not None}


def pretrain_config(cfg: dict, ds, problems: list[str], seed: int, overrides: dict) -> ssl.PretrainConfig | None:
    kw = _section(cfg, "pretrain", _PRETRAIN_KEYS, problems) | overrides
    model = model_config(cfg, ds, problems) if ds is not None else None
    if model is None:
        return None
    try:
        pc = ssl.PretrainConfig(**kw, seed=seed, model=model)
    except TypeError as exc:
        problems.append(str(exc))
        return None
    problems.extend(pc.validate())
    return pc


def train_run(cfg: dict, ds, problems: list[str], seed: int, init: str | None, mode: str,
              fraction: float, overrides: dict) -> tasks.TrainRun | None:
    kw = _section(cfg, "task", _TASK_KEYS, problems) | overrides
    model = model_config(cfg, ds, problems) if ds is not None else None
    if model is None:
        return None
    if init:
        try:
            ck_cfg, _ = load_checkpoint(init)
        except OSError as exc:
            problems.append(f"cannot read checkpoint {init}: {exc.strerror}")
            return None
        except CheckpointFormatError as exc:
            problems.append(str(exc))
            return None
        ck_model = SitConfig.from_json(ck_cfg["model"])
        if ck_model != model:
            problems.append(f"checkpoint model {ck_model.to_json()} does not match {model.to_json()}")
    try:
        run = tasks.TrainRun(mode=mode, init_checkpoint=init, data_fraction=fraction, seed=seed, model=model, **kw)
    except TypeError as exc:
        problems.append(str(exc))
        return None
    problems.extend(run.validate())
    return run


# --------------------------------------------------------------------------
# commands


def cmd_geom_check(args) -> int:
    patch = args.patch_level if args.patch_level is not None else args.level - 3
    if patch < 0 or args.level - patch < 1:
        raise ConfigError([f"--level {args.level} with --patch-level {patch}: need 0 <= patch level < level"])
    h = geodesy.build_hierarchy(patch, args.level - patch)
    table = geodesy.patch_table(h)
    fine = h.meshes[-1]
    problems = geodesy.check_hierarchy(h, table)
    for m in h.meshes:
        problems += geodesy.check_mesh(m)
    print(f"{fine.n_vertices} vertices, {fine.n_faces} faces, {table.n_patches} patches × {table.patch_size}")
    if problems:
        print("failed invariants:", file=sys.stderr)
        for p in problems:
            print(f"  - {p}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_gen_data(args) -> int:
    problems = []
    if args.n < 10:
        problems.append(f"--n {args.n}: need at least 10 subjects")
    if args.level < 2:
        problems.append(f"--level {args.level}: need at least 2")
    if args.channels < 1:
        problems.append("--channels must be >= 1")
    if not args.snr > 0:
        problems.append("--snr must be > 0")
    if problems:
        raise ConfigError(problems)
    seed = resolve_seed(args.seed, {})
    ds = synthcortex.generate(args.n, args.level, args.channels, seed=seed, snr=args.snr,
                              patch_level=args.patch_level)
    ds = synthcortex.split(ds, seed=seed)
    ds.provenance["splitSeed"] = seed
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    synthcortex.write_dataset(ds, out)
    counts = ds.split_counts()
    print(f"wrote {out}: {len(ds)} subjects on ico{ds.data_level} ({ds.n_vertices} vertices, "
          f"{ds.channels} channels), train/val/test {counts['train']}/{counts['val']}/{counts['test']}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    problems = []
    ds = _read_data(args.data, problems)
    over = _given(method=args.method, ratio=args.ratio, epochs=args.epochs, lr=args.lr, batch=args.batch)
    pc = pretrain_config(cfg, ds, problems, resolve_seed(args.seed, cfg), over)
    if problems:
        raise ConfigError(problems)
    if pc.method == "mpp" and args.ratio is not None:
        log.warning("--ratio is ignored for MPP, which always corrupts 40% masked / 5% swapped / 5% kept")
    res = ssl.pretrain(ds, pc, args.out)
    print(f"best val MSE {res.best_val:.4f} at epoch {res.best_epoch}; checkpoint {Path(args.out) / 'checkpoint.smck'}")
    return EXIT_OK


def _run_label(mode: str, init: str | None, fraction: float) -> str:
    kind = load_checkpoint(init)[0].get("kind", "ckpt") if init else "none"
    label = "scratch" if mode == "scratch" else f"{mode}:{kind}"
    return label if fraction >= 1.0 else f"{label}@{fraction:g}"


def cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    problems = []
    init = None if args.init in (None, "", "none") else args.init
    if args.mode == "full":
        mode = "finetune" if init else "scratch"
    else:
        mode = "probe"
    ds = _read_data(args.data, problems)
    over = _given(max_epochs=args.epochs, lr=args.lr, batch=args.batch, patience=args.patience)
    run = train_run(cfg, ds, problems, resolve_seed(args.seed, cfg), init, mode, args.fraction, over)
    if problems:
        raise ConfigError(problems)
    res = tasks.train(run, ds)
    summary = tasks.write_run(res, ds, args.out)
    summary["label"] = args.label or _run_label(mode, init, args.fraction)
    (Path(args.out) / "summary.json").write_text(json.dumps(summary, indent=2, default=str))
    m = res.metrics
    print(f"{summary['label']}: val MAE {m.mae:.4f}, R² {m.r2:.3f}, epochs to converge {m.epochs_to_converge}"
          + (f", test MAE {summary['testMAE']:.4f}" if "testMAE" in summary else ""))
    return EXIT_OK


# --- sweep


def _ratio_dir(out: Path, ratio: float) -> Path:
    return out / f"ratio{round(ratio * 100):02d}"


def _valid_sweep_summary(path: Path, ratio: float) -> dict | None:
    try:
        s = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return None
    need = {"ratio", "valMaskedMSE", "mae", "epochsToConverge"}
    if not need <= set(s) or abs(float(s["ratio"]) - ratio) > 1e-12:
        return None
    return s


def sweep_one(ratio: float, pc: ssl.PretrainConfig, run: tasks.TrainRun, data: str, out: str) -> dict:
    """Pretrain at one ratio, finetune, write ``summary.json`` into the ratio directory."""
    ds = synthcortex.read_dataset(data)
    rdir = _ratio_dir(Path(out), ratio)
    pre = ssl.pretrain(ds, replace(pc, ratio=ratio), rdir / "pretrain")
    ft_run = replace(run, mode="finetune", init_checkpoint=str(rdir / "pretrain" / "checkpoint.smck"))
    res = tasks.train(ft_run, ds)
    tasks.write_run(res, ds, rdir / "finetune")
    summary = {
        "ratio": ratio,
        "valMaskedMSE": pre.best_val,
        "mae": res.metrics.mae,
        "r2": res.metrics.r2,
        "epochsToConverge": res.metrics.epochs_to_converge,
        "seed": run.seed,
        "pretrain": pc.to_json() | {"ratio": ratio},
        "task": ft_run.to_json(),
    }
    (rdir / "summary.json").write_text(json.dumps(summary, indent=2, default=str))
    return summary


def rank_sweep(rows: list[dict]) -> list[dict]:
    ranked = sorted(rows, key=lambda r: (r["mae"], r["valMaskedMSE"]))
    return [dict(r, rank=i + 1) for i, r in enumerate(ranked)]


def format_sweep(rows: list[dict]) -> str:
    head = f"{'rank':>4} {'ratio':>6} {'masked MSE':>11} {'MAE':>8} {'epochs':>7}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['rank']:>4} {r['ratio'] * 100:>5.0f}% {r['valMaskedMSE']:>11.4f} {r['mae']:>8.4f} "
                     f"{r['epochsToConverge']:>7}")
    return "\n".join(lines)


def parse_ratios(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError([f"--ratios {text!r}: expected comma-separated numbers"]) from None
    bad = [v for v in vals if not 0.0 < v < 1.0]
    if bad or not vals:
        raise ConfigError([f"masking ratios must lie in (0, 1), got {bad or vals}"])
    return vals


def run_sweep(ratios, pc, run, data: str, out: str, jobs: int = 1) -> list[dict]:
    outp = Path(out)
    outp.mkdir(parents=True, exist_ok=True)
    done, todo = {}, []
    for r in ratios:
        s = _valid_sweep_summary(_ratio_dir(outp, r) / "summary.json", r)
        if s is not None:
            log.info("ratio %.2f already done, skipping", r)
            done[r] = s
        else:
            todo.append(r)
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {r: pool.submit(sweep_one, r, pc, run, data, out) for r in todo}
            done.update({r: f.result() for r, f in futures.items()})
    else:
        for r in todo:
            done[r] = sweep_one(r, pc, run, data, out)
    rows = rank_sweep([done[r] for r in ratios])
    cols = ["rank", "ratio", "valMaskedMSE", "mae", "r2", "epochsToConverge", "seed"]
    tasks.write_comparison_csv(outp / "sweep.csv", [{k: r[k] for k in cols} for r in rows])
    (outp / "sweep.txt").write_text(format_sweep(rows) + "\n")
    return rows


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    problems = []
    try:
        ratios = parse_ratios(args.ratios)
    except ConfigError as exc:
        problems += exc.problems
        ratios = []
    ds = _read_data(args.data, problems)
    seed = resolve_seed(args.seed, cfg)
    over = _given(epochs=args.pretrain_epochs, lr=args.pretrain_lr, batch=args.batch)
    pc = pretrain_config(cfg, ds, problems, seed, {"method": "smae"} | over)
    over = _given(max_epochs=args.epochs, lr=args.lr, batch=args.batch, patience=args.patience)
    run = train_run(cfg, ds, problems, seed, None, "scratch", 1.0, over)
    if args.jobs < 1:
        problems.append("--jobs must be >= 1")
    if problems:
        raise ConfigError(problems)
    rows = run_sweep(ratios, pc, run, args.data, args.out, args.jobs)
    print(format_sweep(rows))
    return EXIT_OK


# --- report


def collect_runs(root: str | Path) -> list[dict]:
    runs = []
    for path in sorted(Path(root).rglob("summary.json")):
        try:
            s = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError):
            log.warning("skipping unreadable %s", path)
            continue
        if "mode" not in s or "mae" not in s:
            continue
        label = s.get("label") or ("scratch" if s["mode"] == "scratch" else s["mode"])
        runs.append({"label": label, "seed": s.get("seed"), "mae": s["mae"],
                     "epochsToConverge": s.get("epochsToConverge"), "dataset": s.get("dataset"),
                     "path": str(path.parent)})
    return runs


def cmd_report(args) -> int:
    root = Path(args.runs)
    if not root.is_dir():
        raise ConfigError([f"--runs {root}: not a directory"])
    runs = collect_runs(root)
    if not runs:
        raise ConfigError([f"no runs found under {root}"])
    labels = {r["label"] for r in runs}
    baseline = args.baseline or ("scratch" if "scratch" in labels else None)
    try:
        rows = tasks.compare_runs(runs, baseline)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from None
    tasks.write_comparison_csv(root / "comparison.csv", rows)
    text = tasks.format_comparison(rows)
    (root / "comparison.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smae", description="Masked autoencoder pretraining for surface vision transformers.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("geom-check", help="build the icosphere hierarchy and verify its invariants")
    g.add_argument("--level", type=int, required=True, help="data icosphere level")
    g.add_argument("--patch-level", type=int, help="patch icosphere level (default: level - 3)")
    g.set_defaults(func=cmd_geom_check)

    d = sub.add_parser("gen-data", help="write a synthetic SSRF dataset")
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--level", type=int, default=4)
    d.add_argument("--patch-level", type=int)
    d.add_argument("--channels", type=int, default=4)
    d.add_argument("--snr", type=float, default=5.0)
    d.add_argument("--seed", type=int)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_gen_data)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--data", required=True, help="SSRF dataset")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--lr", type=float, help="learning rate (finetuning lr for sweep)")
        sp.add_argument("--batch", type=int)

    pt = sub.add_parser("pretrain", help="sMAE or MPP self-supervised pretraining")
    common(pt)
    pt.add_argument("--method", choices=("smae", "mpp"))
    pt.add_argument("--ratio", type=float)
    pt.add_argument("--epochs", type=int)
    pt.set_defaults(func=cmd_pretrain)

    ft = sub.add_parser("finetune", help="supervised phenotype regression (full finetune or linear probe)")
    common(ft)
    ft.add_argument("--init", default="none", help="pretrained checkpoint, or 'none'")
    ft.add_argument("--mode", choices=("full", "probe"), default="full")
    ft.add_argument("--fraction", type=float, default=1.0)
    ft.add_argument("--epochs", type=int)
    ft.add_argument("--patience", type=int)
    ft.add_argument("--label", help="run label used by 'report'")
    ft.set_defaults(func=cmd_finetune)

    sw = sub.add_parser("sweep", help="pretrain + finetune over masking ratios")
    common(sw)
    sw.add_argument("--ratios", default=",".join(str(r) for r in ssl.MASK_RATIOS))
    sw.add_argument("--pretrain-epochs", type=int)
    sw.add_argument("--pretrain-lr", type=float)
    sw.add_argument("--epochs", type=int, help="finetuning epochs")
    sw.add_argument("--patience", type=int)
    sw.add_argument("--jobs", type=int, default=1)
    sw.set_defaults(func=cmd_sweep)

    rp = sub.add_parser("report", help="aggregate run summaries into a comparison table")
    rp.add_argument("--runs", required=True)
    rp.add_argument("--baseline", help="label to compare against (default: scratch)")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FloatingPointError, tasks.FreezeViolation, tasks.ConfigMismatch,
            synthcortex.DatasetFormatError, CheckpointFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
