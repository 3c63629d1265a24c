"""Self-supervised pretraining: the masked autoencoder (sMAE) and the masked patch prediction (MPP) baseline.

Patch indices here are 0-based rows of the patch-token array; encoder
sequence row ``i + 1`` holds patch ``i`` and row 0 is the regression token,
which is never masked.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .layers import Block, LayerNorm, Linear, Module
from .sit import SitConfig, SitEncoder, build_table, sincos_posenc, tokenize, unpatchify
from .synthcortex import SurfaceDataset, SurfaceSubject, round_half_away, write_dataset
from .tensor import Tensor

log = logging.getLogger(__name__)

MASK_RATIOS = (0.25, 0.50, 0.75, 0.90)
MPP_FRACTIONS = (0.40, 0.05, 0.05)  # masked, swapped, kept


# --------------------------------------------------------------------------
# masking


@dataclass(frozen=True)
class MaskPlan:
    n: int
    ratio: float
    masked: np.ndarray  # sorted patch indices
    unmasked: np.ndarray  # sorted patch indices
    perm: np.ndarray  # unmasked first, then masked
    inverse: np.ndarray  # perm[inverse] == arange(n)

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.n, dtype=bool)
        m[self.masked] = True
        return m


def n_masked(n: int, ratio: float) -> int:
    return round_half_away(ratio * n)


def sample_mask(n: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"masking ratio must lie in (0, 1), got {ratio}")
    k = n_masked(n, ratio)
    if k < 1 or k >= n:
        raise ValueError(f"ratio {ratio} masks {k} of {n} patches; need at least one masked and one visible")
    order = rng.permutation(n)
    masked = np.sort(order[:k])
    unmasked = np.sort(order[k:])
    perm = np.concatenate([unmasked, masked])
    return MaskPlan(n, float(ratio), masked, unmasked, perm, np.argsort(perm))


def unshuffle(visible: Tensor, mask_token: Tensor, plans: Sequence[MaskPlan]) -> Tensor:
    """Append mask tokens after the visible rows and restore patch order.

    ``visible`` is (B, K, D) in each plan's unmasked order; the result is
    (B, N, D) with row i holding patch i.
    """
    B, Kv, D = visible.shape
    n = plans[0].n
    fill = T.broadcast_to(T.reshape(mask_token, (1, 1, D)), (B, n - Kv, D))
    shuffled = T.concat([visible, fill], axis=1)
    return T.gather(shuffled, np.stack([p.inverse for p in plans]))


# --------------------------------------------------------------------------
# models


class SmaeModel(Module):
    """Asymmetric encoder-decoder: the encoder sees only visible patches."""

    def __init__(self, cfg: SitConfig, rng: np.random.Generator, dtype=np.float64, use_posenc: bool = True):
        self.cfg = cfg
        self.encoder = SitEncoder(cfg, rng, dtype, use_posenc)
        self.mask_token = T.parameter(np.zeros(cfg.hidden_dim), dtype=dtype)
        depth = max(1, cfg.layers // 4)
        self.decoder = [Block(cfg.hidden_dim, cfg.heads, cfg.ffn_mult, rng, dtype) for _ in range(depth)]
        self.decoder_norm = LayerNorm(cfg.hidden_dim, dtype)
        self.output_proj = Linear(cfg.hidden_dim, cfg.token_dim, rng, dtype)
        self.use_posenc = use_posenc
        self.pos_dec = sincos_posenc(cfg.n_patches + 1, cfg.hidden_dim).astype(dtype)
        self.last_encoder_len: int | None = None

    def decode(self, seq: Tensor) -> Tensor:
        """(B, N+1, D) decoder input -> (B, N, P*C) patch reconstructions."""
        if self.use_posenc:
            seq = T.add(seq, self.pos_dec)
        for blk in self.decoder:
            seq = blk(seq)
        out = self.output_proj(self.decoder_norm(seq))
        return T.take_slice(out, (slice(None), slice(1, None)))


class MppModel(Module):
    """Full-sequence encoder followed by a linear projection back to patch space."""

    def __init__(self, cfg: SitConfig, rng: np.random.Generator, dtype=np.float64, use_posenc: bool = True):
        self.cfg = cfg
        self.encoder = SitEncoder(cfg, rng, dtype, use_posenc)
        self.mask_token = T.parameter(np.zeros(cfg.hidden_dim), dtype=dtype)
        self.output_proj = Linear(cfg.hidden_dim, cfg.token_dim, rng, dtype)


def smae_forward(model: SmaeModel, tokens: np.ndarray, plans: Sequence[MaskPlan], target=None) -> tuple[Tensor, Tensor]:
    """Reconstruct every patch from the visible ones; loss on masked patches only.

    ``tokens`` are normalised patch tokens (B, N, P*C). They double as the
    reconstruction target unless ``target`` is given.
    """
    tokens = np.asarray(tokens, dtype=model.encoder.dtype)
    B, N, _ = tokens.shape
    if len(plans) != B or any(p.n != N for p in plans):
        raise ValueError(f"mask plans do not match a batch of {B} x {N} patches")
    enc = model.encoder
    emb, reg = enc.add_posenc(enc.patch_embeddings(tokens))
    visible = T.gather(emb, np.stack([p.unmasked for p in plans]))
    seq = T.concat([reg, visible], axis=1)
    model.last_encoder_len = seq.shape[1]
    out = enc.encode(seq)
    head, rest = T.split(out, [1, seq.shape[1] - 1], axis=1)
    dec_in = T.concat([head, unshuffle(rest, model.mask_token, plans)], axis=1)
    recon = model.decode(dec_in)
    mask = np.stack([p.mask for p in plans])
    return recon, T.masked_mse(recon, tokens if target is None else target, mask)


@dataclass(frozen=True)
class CorruptionRecord:
    n: int
    masked: np.ndarray
    swapped: np.ndarray
    swap_source: np.ndarray  # same length as swapped
    kept: np.ndarray
    untouched: np.ndarray

    def source_index(self) -> np.ndarray:
        src = np.arange(self.n)
        src[self.swapped] = self.swap_source
        return src


def sample_corruption(n: int, rng: np.random.Generator) -> CorruptionRecord:
    if n < 20:
        raise ValueError(f"MPP corruption needs at least 20 patches, got {n}")
    counts = [round_half_away(f * n) for f in MPP_FRACTIONS]
    order = rng.permutation(n)
    a, b, c = np.cumsum(counts)
    masked, swapped, kept = np.sort(order[:a]), np.sort(order[a:b]), np.sort(order[b:c])
    untouched = np.sort(order[c:])
    src = rng.integers(0, n - 1, size=len(swapped))
    src = src + (src >= swapped)  # never the destination itself
    return CorruptionRecord(n, masked, swapped, src, kept, untouched)


def apply_corruption(emb: Tensor, mask_token: Tensor, records: Sequence[CorruptionRecord]) -> Tensor:
    """Corrupt (B, N, D) patch embeddings: swap, then overwrite masked rows with the mask token."""
    B, N, D = emb.shape
    swapped = T.gather(emb, np.stack([r.source_index() for r in records]))
    m = np.zeros((B, N, 1), dtype=emb.dtype)
    for i, r in enumerate(records):
        m[i, r.masked] = 1.0
    keep = T.mul(swapped, 1.0 - m)
    fill = T.mul(T.reshape(mask_token, (1, 1, D)), m)
    return T.add(keep, fill)


def mpp_corrupt(emb: Tensor, mask_token: Tensor, rng: np.random.Generator) -> tuple[Tensor, list[CorruptionRecord]]:
    records = [sample_corruption(emb.shape[1], rng) for _ in range(emb.shape[0])]
    return apply_corruption(emb, mask_token, records), records


def mpp_forward(model: MppModel, tokens: np.ndarray, records: Sequence[CorruptionRecord], target=None) -> tuple[Tensor, Tensor]:
    """Encode the full corrupted sequence and project it back; loss over all patches."""
    tokens = np.asarray(tokens, dtype=model.encoder.dtype)
    enc = model.encoder
    emb = apply_corruption(enc.patch_embeddings(tokens), model.mask_token, records)
    emb, reg = enc.add_posenc(emb)
    out = enc.encode(T.concat([reg, emb], axis=1))
    recon = T.take_slice(model.output_proj(out), (slice(None), slice(1, None)))
    return recon, T.masked_mse(recon, tokens if target is None else target, None)


# --------------------------------------------------------------------------
# pretraining loop


@dataclass
class PretrainConfig:
    method: str = "smae"
    ratio: float = 0.5
    epochs: int = 100
    batch: int = 16
    seed: int = 0
    lr: float = 1e-4
    momentum: float = 0.9
    dtype: str = "float32"
    use_posenc: bool = True
    dump_every: int = 10
    model: SitConfig = field(default_factory=SitConfig)

    def validate(self) -> list[str]:
        out = []
        if self.method not in ("smae", "mpp"):
            out.append(f"unknown method {self.method!r} (smae|mpp)")
        if self.method == "smae" and not 0.0 < self.ratio < 1.0:
            out.append(f"masking ratio {self.ratio} outside (0, 1)")
        if self.epochs < 0:
            out.append("epochs must be >= 0")
        if self.batch < 1:
            out.append("batch must be >= 1")
        if self.lr <= 0:
            out.append("lr must be > 0")
        out += self.model.problems()
        return out

    def to_json(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_json()
        return d


@dataclass
class PretrainResult:
    model: Module
    config: PretrainConfig
    history: list[dict]
    best_epoch: int
    best_val: float

    def checkpoint_config(self) -> dict:
        return {
            "kind": self.config.method,
            "model": self.config.model.to_json(),
            "usePosenc": self.config.use_posenc,
            "pretrain": self.config.to_json(),
            "bestEpoch": self.best_epoch,
            "bestValMSE": self.best_val,
        }


def build_ssl_model(cfg: PretrainConfig, rng: np.random.Generator) -> Module:
    cls = SmaeModel if cfg.method == "smae" else MppModel
    return cls(cfg.model, rng, np.dtype(cfg.dtype), cfg.use_posenc)


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _loss(model, method, tokens, ratio, rng):
    if method == "smae":
        plans = [sample_mask(tokens.shape[1], ratio, rng) for _ in range(len(tokens))]
        return smae_forward(model, tokens, plans)
    records = [sample_corruption(tokens.shape[1], rng) for _ in range(len(tokens))]
    return mpp_forward(model, tokens, records)


def reconstruction_mse(model, method: str, tokens: np.ndarray, ratio: float, seed: int, batch: int = 32) -> float:
    """Validation MSE: masked patches (sMAE) or all patches (MPP), fixed masks from ``seed``."""
    rng = np.random.default_rng(seed)
    total = 0.0
    count = 0
    with T.no_grad():
        for i in range(0, len(tokens), batch):
            chunk = tokens[i : i + batch]
            _, loss = _loss(model, method, chunk, ratio, rng)
            total += loss.item() * len(chunk)
            count += len(chunk)
    return total / max(count, 1)


def _dump_reconstruction(path: Path, model, method, subject: SurfaceSubject, tokens, ratio, seed, table, ds):
    rng = np.random.default_rng(seed)
    with T.no_grad():
        if method == "smae":
            plan = sample_mask(tokens.shape[0], ratio, rng)
            recon, _ = smae_forward(model, tokens[None], [plan])
            hidden = plan.masked
        else:
            rec = sample_corruption(tokens.shape[0], rng)
            recon, _ = mpp_forward(model, tokens[None], [rec])
            hidden = rec.masked
    masked_in = tokens.copy()
    masked_in[hidden] = 0.0
    maps = [
        ("input", unpatchify(tokens, table)),
        ("masked_input", unpatchify(masked_in, table)),
        ("reconstruction", unpatchify(recon.data[0], table)),
    ]
    subs = [SurfaceSubject(f"{subject.id}:{tag}", m.astype(np.float32), subject.y, 1) for tag, m in maps]
    write_dataset(
        SurfaceDataset(ds.data_level, ds.patch_level, ds.channels, subs, {"reconstructionOf": subject.id}),
        path,
    )


def pretrain(dataset: SurfaceDataset, cfg: PretrainConfig, out_dir: str | Path | None = None) -> PretrainResult:
    """SGD pretraining on the train split, best-validation model retained.

    Epoch 0 in the history is the untrained model. Writes ``checkpoint.smck``,
    ``metrics.csv``, ``summary.json`` and reconstruction dumps when
    ``out_dir`` is given.
    """
    problems = cfg.validate()
    if problems:
        raise ValueError("invalid pretraining config: " + "; ".join(problems))
    table = build_table(cfg.model)
    train_X, _ = dataset.arrays("train")
    val_subjects = dataset.select("val")
    val_X, _ = dataset.arrays("val")
    if len(train_X) == 0:
        raise ValueError("pretraining needs a non-empty train split")
    if len(val_X) == 0:
        raise ValueError("pretraining needs a non-empty val split")
    dtype = np.dtype(cfg.dtype)
    train_tok = tokenize(train_X, table, dtype)
    val_tok = tokenize(val_X, table, dtype)

    init_rng, order_rng, mask_rng = _streams(cfg.seed, 3)
    val_seed = int(np.random.SeedSequence(cfg.seed).generate_state(1)[0])
    model = build_ssl_model(cfg, init_rng)
    opt = T.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "recon").mkdir(exist_ok=True)

    t0 = time.perf_counter()
    history = []
    init_train = reconstruction_mse(model, cfg.method, train_tok, cfg.ratio, val_seed + 1)
    best_val = reconstruction_mse(model, cfg.method, val_tok, cfg.ratio, val_seed)
    best_state = model.state_dict()
    best_epoch = 0
    history.append({"epoch": 0, "trainLoss": init_train, "valMaskedMSE": best_val, "wallClockSec": time.perf_counter() - t0})

    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(train_tok))
        total = 0.0
        for i in range(0, len(order), cfg.batch):
            batch = train_tok[order[i : i + cfg.batch]]
            opt.zero_grad()
            _, loss = _loss(model, cfg.method, batch, cfg.ratio, mask_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite pretraining loss at epoch {epoch}, batch {i // cfg.batch}")
            T.backward(loss)
            opt.step()
            total += value * len(batch)
        val = reconstruction_mse(model, cfg.method, val_tok, cfg.ratio, val_seed)
        row = {"epoch": epoch, "trainLoss": total / len(train_tok), "valMaskedMSE": val, "wallClockSec": time.perf_counter() - t0}
        history.append(row)
        log.info("pretrain %s epoch %d train %.4f val %.4f", cfg.method, epoch, row["trainLoss"], val)
        if val < best_val:
            best_val, best_epoch, best_state = val, epoch, model.state_dict()
        if out is not None and cfg.dump_every and epoch % cfg.dump_every == 0:
            _dump_reconstruction(out / "recon" / f"epoch{epoch:04d}.ssrf", model, cfg.method,
                                 val_subjects[0], val_tok[0], cfg.ratio, val_seed, table, dataset)

    model.load_state_dict(best_state)
    result = PretrainResult(model, cfg, history, best_epoch, best_val)
    if out is not None:
        save_checkpoint(out / "checkpoint.smck", result.checkpoint_config(), model.state_dict())
        write_metrics_csv(out / "metrics.csv", history)
        _dump_reconstruction(out / "recon" / "best.ssrf", model, cfg.method,
                             val_subjects[0], val_tok[0], cfg.ratio, val_seed, table, dataset)
        summary = {"config": cfg.to_json(), "bestEpoch": best_epoch, "bestValMSE": best_val,
                   "initialValMSE": history[0]["valMaskedMSE"]}
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return result


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
