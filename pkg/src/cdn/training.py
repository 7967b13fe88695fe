"""Feature caching and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from . import nn_core as nc
from .cdn_model import CdnConfig, CdnModel, SideBatch, SideFeatures, compute_losses, edge_labels, random_perm
from .corpus import Corpus, DatasetRecord
from .evaluation import average_precision, regime_auroc
from .local_discovery import local_estimates_from_corr, read_features, write_features
from .stats import summary_stats

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "L_G", "L_I", "val_mAP", "val_AUC", "seconds"]


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(1e-4, gt=0)
    weight_decay: float = Field(1e-5, ge=0)
    batch_size: int = Field(16, ge=1)
    max_epochs: int = Field(1000, ge=1)
    patience: int = Field(50, ge=1)
    val_fraction: float = Field(0.05, ge=0, lt=1)
    # "sample": one random regime per training dataset per epoch; "all": every regime
    epoch_mode: Literal["sample", "all"] = "sample"
    max_seconds: float | None = None


class FeaturesMissing(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Featurization cache
# ---------------------------------------------------------------------------


def side_seed(seed: int, dataset_seed: int, side: int) -> int:
    """Seed for one dataset side; ``side`` is -1 for observational, else the regime index."""
    ss = np.random.SeedSequence([seed, dataset_seed, side + 1])
    return int(ss.generate_state(1, np.uint64)[0])


def _featurize_matrix(D: np.ndarray, cfg: CdnConfig, seed: int, path: Path) -> None:
    st = summary_stats(D)
    rho = st.rho.copy()
    const = st.var == 0
    rho[const, const] = 0.0  # marks constant columns as isolated for the CI oracle
    est = local_estimates_from_corr(rho, st.m, min(cfg.k, D.shape[1]), cfg.T, cfg.alpha, seed)
    write_features(path, st.rho, est)


def _featurize_dataset(job: tuple) -> int:
    root, entry, cfg_json, seed, overwrite = job
    ds = DatasetRecord(entry, Path(root) / entry["id"])
    cfg = CdnConfig(**cfg_json)
    done = 0
    if overwrite or not ds.features_path.exists():
        _featurize_matrix(ds.load_obs(), cfg, side_seed(seed, entry["seed"], -1), ds.features_path)
        done += 1
    for reg in ds.regimes:
        if overwrite or not reg.features_path.exists():
            _featurize_matrix(reg.load_int(), cfg, side_seed(seed, entry["seed"], reg.index), reg.features_path)
            done += 1
    return done


def featurize_corpus(corpus: Corpus, cfg: CdnConfig, seed: int = 0, workers: int = 1, overwrite: bool = False) -> int:
    """Write features_obs.bin / features_int.bin for every side; returns the count written."""
    jobs = [(str(corpus.root), d.entry, cfg.model_dump(), seed, overwrite) for d in corpus.datasets]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            counts = list(pool.map(_featurize_dataset, jobs, chunksize=2))
    else:
        counts = [_featurize_dataset(j) for j in jobs]
    total = sum(counts)
    logger.info("featurized %d dataset sides under %s", total, corpus.root)
    return total


def load_side(features_path: Path, D: np.ndarray) -> SideFeatures:
    if not features_path.exists():
        raise FeaturesMissing(f"missing features file {features_path}; run featurize first")
    rho, local = read_features(features_path)
    st = summary_stats(D)
    return SideFeatures(rho, np.column_stack([st.mean, st.var]), local)


# ---------------------------------------------------------------------------
# In-memory training set
# ---------------------------------------------------------------------------


@dataclass
class PackedSide:
    rho: np.ndarray  # float32 (N, N)
    counts: np.ndarray  # uint16 (N, N, C)
    moments: np.ndarray  # float64 (N, 2)

    @classmethod
    def from_side(cls, s: SideFeatures) -> PackedSide:
        return cls(s.rho.astype(np.float32), s.local.code_counts().astype(np.uint16), s.moments)


@dataclass
class PairItem:
    dataset: str
    regime: int
    n: int
    obs: PackedSide
    int: PackedSide
    labels_obs: np.ndarray
    labels_int: np.ndarray
    targets: np.ndarray


def load_pairs(ds: DatasetRecord) -> list[PairItem]:
    obs = PackedSide.from_side(load_side(ds.features_path, ds.load_obs()))
    lab_obs = edge_labels(ds.g_obs().adjacency())
    items = []
    for reg in ds.regimes:
        side = PackedSide.from_side(load_side(reg.features_path, reg.load_int()))
        items.append(PairItem(ds.id, reg.index, ds.n, obs, side, lab_obs,
                              edge_labels(reg.g_int().adjacency()), reg.target_mask()))
    return items


def collate(items: list[PairItem], perms: np.ndarray) -> tuple[SideBatch, SideBatch, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    def side(get) -> SideBatch:
        return SideBatch(
            torch.from_numpy(np.stack([get(it).rho for it in items])),
            torch.from_numpy(np.stack([get(it).counts for it in items]).astype(np.float32)),
            torch.from_numpy(np.stack([get(it).moments for it in items]).astype(np.float32)),
        )

    return (
        side(lambda it: it.obs),
        side(lambda it: it.int),
        torch.from_numpy(perms),
        torch.from_numpy(np.stack([it.labels_obs for it in items])),
        torch.from_numpy(np.stack([it.labels_int for it in items])),
        torch.from_numpy(np.stack([it.targets for it in items])),
    )


def split_datasets(datasets: list[DatasetRecord], val_fraction: float, seed: int) -> tuple[list, list]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    order = rng.permutation(len(datasets))
    n_val = max(1, int(round(val_fraction * len(datasets)))) if val_fraction > 0 and len(datasets) > 1 else 0
    val = sorted(order[:n_val].tolist())
    train = sorted(order[n_val:].tolist())
    return [datasets[i] for i in train], [datasets[i] for i in val]


def batches_by_size(items: list[PairItem], batch_size: int, rng: np.random.Generator) -> list[list[PairItem]]:
    """Shuffled batches, each holding pairs with a single node count."""
    by_n: dict[int, list[PairItem]] = {}
    for i in rng.permutation(len(items)):
        by_n.setdefault(items[i].n, []).append(items[i])
    out = []
    for n in sorted(by_n):
        group = by_n[n]
        out.extend(group[i:i + batch_size] for i in range(0, len(group), batch_size))
    return [out[i] for i in rng.permutation(len(out))]


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


@torch.no_grad()
def validate(model: CdnModel, items: list[PairItem], seed: int, batch_size: int = 32) -> tuple[float, float]:
    if not items:
        return float("nan"), float("nan")
    model.eval()
    rng = np.random.default_rng(seed)
    aps, aucs = [], []
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        for n in sorted({it.n for it in chunk}):
            sub = [it for it in chunk if it.n == n]
            perms = np.stack([random_perm(n, model.cfg.n_max, rng) for _ in sub])
            obs, int_, perm, *_ = collate(sub, perms)
            probs = torch.sigmoid(model(obs, int_, perm).target_logits).numpy()
            for it, p in zip(sub, probs):
                aps.append(average_precision(p, it.targets))
                aucs.append(regime_auroc(p, it.targets))
    aucs = [a for a in aucs if not np.isnan(a)]
    return float(np.mean(aps)), float(np.mean(aucs)) if aucs else float("nan")


def save_model(path: Path, model: CdnModel, opt: nc.OptimizerState | None, extra: dict) -> None:
    params = nc.param_store(model)
    nc.save_checkpoint(path, params, optimizer=opt, extra={"cdn_config": model.cfg.model_dump(), **extra})


def train(corpus: Corpus, cfg: CdnConfig, tcfg: TrainConfig, out_dir: str | Path, seed: int = 0) -> dict:
    """Train from random initialization; writes ``model.ckpt`` (best validation
    mAP), ``train_log.csv`` and ``summary.json`` under ``out_dir``; returns the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(4)
    init_seed = int(seeds[0].generate_state(1)[0])
    rng = np.random.default_rng(seeds[1])
    drop_gen = torch.Generator().manual_seed(int(seeds[2].generate_state(1)[0]))
    val_seed = int(seeds[3].generate_state(1)[0])

    train_ds, val_ds = split_datasets(corpus.datasets, tcfg.val_fraction, seed)
    for ds in train_ds + val_ds:
        if ds.n > cfg.n_max:
            raise ValueError(f"{ds.id}: N={ds.n} exceeds n_max={cfg.n_max}")
    train_sets = [load_pairs(ds) for ds in train_ds]
    val_items = [it for ds in val_ds for it in load_pairs(ds)]
    logger.info("training on %d datasets, validating on %d pairs", len(train_sets), len(val_items))

    model = CdnModel(cfg, init_seed)
    params = nc.param_store(model)
    opt = nc.OptimizerState(lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    best, best_epoch, since = -1.0, -1, 0
    t0 = time.perf_counter()
    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for epoch in range(1, tcfg.max_epochs + 1):
            if tcfg.epoch_mode == "sample":
                items = [pairs[rng.integers(len(pairs))] for pairs in train_sets]
            elif tcfg.epoch_mode == "all":
                items = [it for pairs in train_sets for it in pairs]
            else:
                raise ValueError(f"unknown epoch_mode {tcfg.epoch_mode!r}")
            model.train()
            lg_sum = li_sum = 0.0
            n_batches = 0
            for batch in batches_by_size(items, tcfg.batch_size, rng):
                perms = np.stack([random_perm(it.n, cfg.n_max, rng) for it in batch])
                obs, int_, perm, lab_o, lab_i, tgt = collate(batch, perms)
                res = model(obs, int_, perm, train=True, gen=drop_gen)
                L_G, L_I, L = compute_losses(res, lab_o, lab_i, tgt)
                for p in params.values():
                    p.grad = None
                L.backward()
                with torch.no_grad():
                    nc.adamw_step(params, {k: p.grad for k, p in params.items()}, opt)
                lg_sum += L_G.item()
                li_sum += L_I.item()
                n_batches += 1
            v_map, v_auc = validate(model, val_items, val_seed)
            elapsed = time.perf_counter() - t0
            writer.writerow([epoch, f"{lg_sum / max(n_batches, 1):.6f}", f"{li_sum / max(n_batches, 1):.6f}",
                             f"{v_map:.6f}", f"{v_auc:.6f}", f"{elapsed:.1f}"])
            fh.flush()
            logger.info("epoch %d L_G %.4f L_I %.4f val mAP %.4f AUC %.4f", epoch,
                        lg_sum / max(n_batches, 1), li_sum / max(n_batches, 1), v_map, v_auc)
            score = v_map if val_items else -li_sum
            if score > best:
                best, best_epoch, since = score, epoch, 0
                save_model(out / "model.ckpt", model, opt, {"epoch": epoch, "val_mAP": v_map, "val_AUC": v_auc,
                                                              "seed": seed, "train_config": tcfg.model_dump()})
            else:
                since += 1
            if since >= tcfg.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
            if tcfg.max_seconds is not None and elapsed > tcfg.max_seconds:
                logger.info("time budget reached at epoch %d", epoch)
                break
    summary = {"best_epoch": best_epoch, "best_val_mAP": best, "epochs": epoch, "log": log_path.name,
               "checkpoint": "model.ckpt", "train_datasets": len(train_ds), "val_datasets": len(val_ds),
               "val_pairs": len(val_items)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
