"""Supervised phenotype regression: from scratch, end-to-end finetuning and linear probing."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .sit import SitConfig, SitModel, build_table, tokenize
from .ssl import write_metrics_csv
from .synthcortex import SurfaceDataset, phenotype_bins, round_half_away

log = logging.getLogger(__name__)

MODES = ("scratch", "finetune", "probe")
DEFAULT_EPOCHS = {"scratch": 1000, "finetune": 200, "probe": 200}
DEFAULT_LR = {"scratch": 1e-4, "finetune": 1e-4, "probe": 1e-5}
DATA_FRACTIONS = (0.10, 0.20, 0.50, 1.0)
IMPROVEMENT_TOL = 1e-6


class ConfigMismatch(ValueError):
    """Checkpoint model configuration differs from the requested one."""


class FreezeViolation(RuntimeError):
    """A frozen encoder parameter changed during linear probing."""


@dataclass
class TrainRun:
    mode: str = "scratch"
    init_checkpoint: str | None = None
    data_fraction: float = 1.0
    max_epochs: int | None = None
    patience: int = 20
    lr: float | None = None
    momentum: float = 0.9
    seed: int = 0
    batch: int = 16
    bins: int = 10
    stop_at_convergence: bool = True
    dtype: str = "float32"
    model: SitConfig | None = None

    @property
    def epochs(self) -> int:
        return self.max_epochs if self.max_epochs is not None else DEFAULT_EPOCHS[self.mode]

    @property
    def learning_rate(self) -> float:
        return self.lr if self.lr is not None else DEFAULT_LR[self.mode]

    def validate(self) -> list[str]:
        out = []
        if self.mode not in MODES:
            out.append(f"unknown mode {self.mode!r} ({'|'.join(MODES)})")
        if self.mode == "finetune" and not self.init_checkpoint:
            out.append("finetune mode needs an init checkpoint")
        if not 0.0 < self.data_fraction <= 1.0:
            out.append(f"data fraction {self.data_fraction} outside (0, 1]")
        if self.patience < 1:
            out.append("patience must be >= 1")
        if self.epochs < 0:
            out.append("max epochs must be >= 0")
        if self.learning_rate <= 0:
            out.append("lr must be > 0")
        if self.batch < 1:
            out.append("batch must be >= 1")
        if self.bins < 1:
            out.append("bins must be >= 1")
        return out

    def to_json(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_json() if self.model is not None else None
        d["maxEpochs"] = self.epochs
        d["lr"] = self.learning_rate
        return d


@dataclass
class Metrics:
    mae: float
    r2: float
    epochs_to_converge: int | None = None
    converged: bool = False
    per_epoch: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {"mae": self.mae, "r2": self.r2, "epochsToConverge": self.epochs_to_converge,
                "converged": self.converged}


@dataclass
class TrainResult:
    model: SitModel
    run: TrainRun
    metrics: Metrics
    target_mean: float
    target_std: float
    n_train: int
    trainable: int

    def checkpoint_config(self) -> dict:
        return {
            "kind": "sit",
            "model": self.model.cfg.to_json(),
            "usePosenc": self.model.encoder.use_posenc,
            "targetMean": self.target_mean,
            "targetStd": self.target_std,
            "run": self.run.to_json(),
        }


# --------------------------------------------------------------------------
# data subsetting


def stratified_subset(dataset: SurfaceDataset, fraction: float, bins: int = 10, seed: int = 0) -> SurfaceDataset:
    """Draw round(fraction * n) subjects, spread over equal-width phenotype bins.

    Each bin gets floor(fraction * |bin|) subjects and the leftover quota goes
    to the bins with the largest remainders, so every bin is within one
    subject of its proportional share.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if fraction == 1.0:
        return dataset.subset(dataset.subjects)
    rng = np.random.default_rng(seed)
    y = np.array([s.y for s in dataset.subjects])
    b = phenotype_bins(y, bins)
    sizes = np.bincount(b, minlength=bins)
    exact = fraction * sizes
    take = np.floor(exact).astype(np.int64)
    total = max(1, round_half_away(fraction * len(y)))
    extra = total - int(take.sum())
    if extra > 0:
        order = np.argsort(-(exact - take), kind="stable")
        take[order[:extra]] += 1
    keep = []
    for k in range(bins):
        members = np.flatnonzero(b == k)
        keep.extend(rng.choice(members, size=int(take[k]), replace=False).tolist())
    return dataset.subset([dataset.subjects[i] for i in sorted(keep)])


# --------------------------------------------------------------------------
# convergence


class ConvergenceDetector:
    """Fires once neither validation loss nor validation MAE has improved for ``patience`` epochs.

    An epoch improves a metric when it beats the best value so far by more
    than ``tol``. ``epochs_to_converge`` is the last improving epoch at the
    moment the detector fires.
    """

    def __init__(self, patience: int = 20, tol: float = IMPROVEMENT_TOL):
        self.patience = patience
        self.tol = tol
        self.best_loss = math.inf
        self.best_mae = math.inf
        self.last_improved: int | None = None
        self.fired_at: int | None = None
        self.epochs_to_converge: int | None = None

    def update(self, epoch: int, val_loss: float, val_mae: float) -> bool:
        improved = False
        if val_loss < self.best_loss - self.tol:
            self.best_loss = val_loss
            improved = True
        if val_mae < self.best_mae - self.tol:
            self.best_mae = val_mae
            improved = True
        if improved or self.last_improved is None:
            self.last_improved = epoch
        if self.fired_at is None and epoch - self.last_improved >= self.patience:
            self.fired_at = epoch
            self.epochs_to_converge = self.last_improved
        return self.fired_at is not None


# --------------------------------------------------------------------------
# metrics


def regression_metrics(pred: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """(MAE, R^2); R^2 is NaN when the targets have zero variance."""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(y) == 0:
        raise ValueError("metrics over an empty split")
    mae = float(np.mean(np.abs(pred - y)))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        log.warning("zero-variance targets: R^2 undefined")
        return mae, float("nan")
    return mae, 1.0 - float(np.sum((pred - y) ** 2)) / ss_tot


def _predict_tokens(model: SitModel, tokens: np.ndarray, batch: int = 32) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(tokens), batch):
            out.append(model(tokens[i : i + batch]).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(result: TrainResult, dataset: SurfaceDataset, split: str = "test") -> Metrics:
    X, y = dataset.arrays(split)
    if len(y) == 0:
        raise ValueError(f"split {split!r} is empty")
    tokens = tokenize(X, build_table(result.model.cfg), result.model.encoder.dtype)
    pred = _predict_tokens(result.model, tokens) * result.target_std + result.target_mean
    mae, r2 = regression_metrics(pred, y)
    return Metrics(mae, r2)


# --------------------------------------------------------------------------
# training


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def model_from_checkpoint(path: str | Path, run: TrainRun, rng: np.random.Generator) -> SitModel:
    config, params = load_checkpoint(path)
    ckpt_cfg = SitConfig.from_json(config["model"])
    if run.model is not None and run.model != ckpt_cfg:
        raise ConfigMismatch(f"checkpoint model {ckpt_cfg} != requested {run.model}")
    model = SitModel(ckpt_cfg, rng, np.dtype(run.dtype), bool(config.get("usePosenc", True)))
    enc = {k: v for k, v in params.items() if k.startswith("encoder.")}
    loaded = model.load_state_dict(enc, strict=False)
    expected = [k for k, _ in model.named_parameters() if k.startswith("encoder.")]
    if sorted(loaded) != sorted(expected):
        raise ConfigMismatch(f"checkpoint {path} lacks encoder parameters: {sorted(set(expected) - set(loaded))}")
    return model


def _encoder_bytes(model: SitModel) -> dict[str, bytes]:
    return {k: p.data.tobytes() for k, p in model.encoder.named_parameters()}


def train(run: TrainRun, dataset: SurfaceDataset, out_dir: str | Path | None = None) -> TrainResult:
    """Supervised MSE regression on the (standardised) phenotype.

    Epoch 0 of the history evaluates the initial model. The model with the
    lowest validation MAE is kept. In probe mode only the head is trained
    and the encoder is verified bitwise unchanged at the end.
    """
    problems = run.validate()
    if problems:
        raise ValueError("invalid train run: " + "; ".join(problems))
    init_rng, subset_rng, order_rng = _streams(run.seed, 3)
    if run.init_checkpoint:
        model = model_from_checkpoint(run.init_checkpoint, run, init_rng)
    else:
        model = SitModel(run.model or SitConfig(), init_rng, np.dtype(run.dtype))
    cfg = model.cfg
    table = build_table(cfg)

    train_ds = dataset.subset(dataset.select("train"))
    if run.data_fraction < 1.0:
        train_ds = stratified_subset(train_ds, run.data_fraction, run.bins, int(subset_rng.integers(2**31)))
    Xtr, ytr = train_ds.arrays()
    Xva, yva = dataset.arrays("val")
    if len(ytr) == 0 or len(yva) == 0:
        raise ValueError("training needs non-empty train and val splits")
    dtype = np.dtype(run.dtype)
    tok_tr = tokenize(Xtr, table, dtype)
    tok_va = tokenize(Xva, table, dtype)
    mu, sd = float(ytr.mean()), float(ytr.std()) or 1.0
    ztr = ((ytr - mu) / sd).astype(dtype)
    zva = ((yva - mu) / sd).astype(dtype)

    probe = run.mode == "probe"
    params = model.head.parameters() if probe else model.parameters()
    opt = T.SGD(params, lr=run.learning_rate, momentum=run.momentum)
    frozen = _encoder_bytes(model) if probe else None
    if probe:
        # frozen encoder: regression-token features are fixed, compute them once
        with T.no_grad():
            feat_tr = np.concatenate([model.encoder(tok_tr[i : i + 32]).data[:, 0] for i in range(0, len(tok_tr), 32)])
            feat_va = np.concatenate([model.encoder(tok_va[i : i + 32]).data[:, 0] for i in range(0, len(tok_va), 32)])

    def forward(idx, data, feats):
        if probe:
            return T.reshape(model.head(T.Tensor(feats[idx])), (len(idx),))
        return model(data[idx])

    def validate():
        with T.no_grad():
            pred = np.concatenate([
                forward(np.arange(i, min(i + 32, len(zva))), tok_va, feat_va if probe else None).data
                for i in range(0, len(zva), 32)
            ]).astype(np.float64)
        loss = float(np.mean((pred - zva) ** 2))
        mae = float(np.mean(np.abs(pred * sd + mu - yva)))
        return loss, mae

    detector = ConvergenceDetector(run.patience)
    t0 = time.perf_counter()
    val_loss, val_mae = validate()
    detector.update(0, val_loss, val_mae)
    history = [{"epoch": 0, "trainLoss": float("nan"), "valLoss": val_loss, "valMAE": val_mae,
                "wallClockSec": time.perf_counter() - t0}]
    best_mae, best_state = val_mae, model.state_dict()

    for epoch in range(1, run.epochs + 1):
        order = order_rng.permutation(len(ztr))
        total = 0.0
        for i in range(0, len(order), run.batch):
            idx = order[i : i + run.batch]
            opt.zero_grad()
            pred = forward(idx, tok_tr, feat_tr if probe else None)
            diff = T.sub(pred, ztr[idx])
            loss = T.mean_all(T.mul(diff, diff))
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            T.backward(loss)
            opt.step()
            total += value * len(idx)
        val_loss, val_mae = validate()
        history.append({"epoch": epoch, "trainLoss": total / len(ztr), "valLoss": val_loss, "valMAE": val_mae,
                        "wallClockSec": time.perf_counter() - t0})
        log.info("%s epoch %d train %.4f val loss %.4f mae %.4f", run.mode, epoch, total / len(ztr), val_loss, val_mae)
        if val_mae < best_mae:
            best_mae, best_state = val_mae, model.state_dict()
        if detector.update(epoch, val_loss, val_mae) and run.stop_at_convergence:
            break

    if probe and _encoder_bytes(model) != frozen:
        raise FreezeViolation("encoder parameters changed during linear probing")
    model.load_state_dict(best_state)

    last = history[-1]["epoch"]
    etc = detector.epochs_to_converge if detector.fired_at is not None else last
    trainable = sum(p.size for p in params)
    result = TrainResult(model, run, Metrics(best_mae, float("nan"), etc, detector.fired_at is not None, history),
                         mu, sd, len(ztr), trainable)
    result.metrics.r2 = evaluate(result, dataset, "val").r2
    if out_dir is not None:
        write_run(result, dataset, out_dir)
    return result


def write_run(result: TrainResult, dataset: SurfaceDataset, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.smck", result.checkpoint_config(), result.model.state_dict())
    write_metrics_csv(out / "metrics.csv", result.metrics.per_epoch)
    summary = {
        **result.metrics.summary(),
        "valMAE": result.metrics.mae,
        "seed": result.run.seed,
        "mode": result.run.mode,
        "initCheckpoint": result.run.init_checkpoint,
        "dataFraction": result.run.data_fraction,
        "nTrain": result.n_train,
        "trainableParameters": result.trainable,
        "dataset": dataset_fingerprint(dataset),
        "config": result.checkpoint_config(),
    }
    if dataset.select("test"):
        test = evaluate(result, dataset, "test")
        summary["testMAE"], summary["testR2"] = test.mae, test.r2
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=_json_default))
    return summary


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def dataset_fingerprint(ds: SurfaceDataset) -> dict:
    return {"n": len(ds), "dataLevel": ds.data_level, "channels": ds.channels,
            "seed": ds.provenance.get("seed"), "snr": ds.provenance.get("snr")}


# --------------------------------------------------------------------------
# comparisons


def speedup_percent(epochs_baseline: float, epochs_other: float) -> float:
    return (epochs_baseline - epochs_other) / epochs_baseline * 100.0


def improvement_percent(mae_baseline: float, mae_other: float) -> float:
    return (mae_baseline - mae_other) / mae_baseline * 100.0


def compare_runs(runs: Sequence[dict], baseline: str | None = None) -> list[dict]:
    """Aggregate run summaries by label: mean/std MAE, convergence, gains over ``baseline``.

    Each run is a dict with at least ``label``, ``seed``, ``mae`` and
    ``epochsToConverge``; an optional ``dataset`` entry must agree across runs.
    """
    runs = list(runs)
    if len(runs) < 2:
        raise ValueError("need at least two runs to compare")
    fps = {json.dumps(r.get("dataset"), sort_keys=True) for r in runs}
    if len(fps) > 1:
        raise ValueError("runs were trained on different datasets")
    labels = list(dict.fromkeys(r["label"] for r in runs))
    baseline = baseline if baseline is not None else labels[0]
    rows = []
    for label in labels:
        group = [r for r in runs if r["label"] == label]
        mae = np.array([r["mae"] for r in group], dtype=np.float64)
        ep = np.array([r["epochsToConverge"] for r in group], dtype=np.float64)
        rows.append({
            "label": label,
            "n": len(group),
            "maeMean": float(mae.mean()),
            "maeStd": float(mae.std()),
            "epochsMean": float(ep.mean()),
            "epochsMedian": float(np.median(ep)),
        })
    base = next((r for r in rows if r["label"] == baseline), None)
    if base is None:
        raise ValueError(f"baseline label {baseline!r} not among runs")
    for r in rows:
        r["maeImprovementPct"] = improvement_percent(base["maeMean"], r["maeMean"])
        r["convergenceSpeedupPct"] = speedup_percent(base["epochsMean"], r["epochsMean"]) if base["epochsMean"] else 0.0
    return rows


def format_comparison(rows: Sequence[dict]) -> str:
    head = f"{'run':<24} {'n':>3} {'MAE (mean ± std)':>20} {'epochs':>8} {'MAE gain %':>11} {'speedup %':>10}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['label']:<24} {r['n']:>3} {r['maeMean']:>11.4f} ± {r['maeStd']:<6.4f} "
            f"{r['epochsMean']:>8.1f} {r['maeImprovementPct']:>11.1f} {r['convergenceSpeedupPct']:>10.1f}"
        )
    return "\n".join(lines)


def write_comparison_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
