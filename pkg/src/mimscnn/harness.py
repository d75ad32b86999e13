"""Training, evaluation and the comparison experiments."""

from __future__ import annotations

import json
import logging
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig
from .metrics import auroc, pearson
from .model import Bag, MIMSModel, build_model, save_checkpoint
from .nn import bce_with_logits, bilinear_resize, resize_to
from .optim import SGD, Adam
from .synth import SCALE_BINS, load_dataset, scale_bin
from .tensor import Tensor, backward, no_grad, sigmoid

log = logging.getLogger(__name__)

# published reference values, shown next to measured ones and never asserted
REFERENCE_POOL_AUROC = {"mean": 0.829, "max": 0.960, "max-inst": 0.975,
                    "k=2": 0.980, "k=3": 0.980, "k=4": 0.986, "k=5": 0.986}
REFERENCE_FEATURE_CORR = {2.0: 0.261, 0.75: 0.451, 0.5: 0.257}


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MIMS_THREADS", "1")))
    except ValueError:
        return 1


def _chunks(seq: Sequence, size: int) -> list:
    return [seq[i:i + size] for i in range(0, len(seq), size)]


def predict(model: MIMSModel, bags: Sequence[Bag], batch: int = 8) -> np.ndarray:
    """Bag-level positive-class probabilities (eval mode, no graph)."""
    model.eval()

    def run(chunk):
        with no_grad():
            return sigmoid(model.bag_logits(chunk)).data.astype(np.float64)

    chunks = _chunks(list(bags), batch)
    threads = min(worker_count(), len(chunks)) or 1
    if threads == 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(run, chunks))
    return np.concatenate(parts) if parts else np.zeros(0)


def load_split(cfg: ExperimentConfig, split: str) -> tuple[list[Bag], dict]:
    if not cfg.data:
        raise ConfigError("config has no dataset root (data)")
    root = Path(cfg.data)
    if not (root / split / "manifest.csv").exists():
        raise FileNotFoundError(f"dataset split {root / split} not found")
    return load_dataset(root / split)


def per_bin_auroc(scores: Sequence[float], bags: Sequence[Bag], truth: dict) -> list:
    """AUROC of positives whose first ROI falls in each scale bin, against all negatives."""
    labels = np.array([b.label for b in bags])
    scores = np.asarray(scores)
    out = []
    for i, (lo, hi) in enumerate(SCALE_BINS):
        keep = [j for j, b in enumerate(bags)
                if b.label == 0 or (truth.get(b.id, {}).get("rois") and
                                    scale_bin(truth[b.id]["rois"][0]["scale"]) == i)]
        sel = labels[keep]
        value = auroc(scores[keep], sel) if 0 < sel.sum() < len(sel) else None
        out.append({"bin": [lo, hi], "auroc": value, "n_pos": int(sel.sum())})
    return out


def parameter_count(model: MIMSModel) -> int:
    return int(sum(p.size for p in model.parameters()))


def train(cfg: ExperimentConfig, train_bags: Sequence[Bag] | None = None,
          test_bags: Sequence[Bag] | None = None, test_truth: dict | None = None,
          out_dir=None) -> tuple[MIMSModel, dict]:
    """Fit one model on bag labels and report test AUROC.

    Stem parameters train at ``lr * backbone_lr_factor``. Bags are
    reshuffled each epoch by a generator seeded from ``cfg.seed``.
    """
    cfg.validate()
    if train_bags is None:
        train_bags, _ = load_split(cfg, "train")
    if test_bags is None and cfg.data:
        test_bags, test_truth = load_split(cfg, "test")
    model = build_model(cfg)
    params = model.parameters()
    opt = Adam(params, cfg.lr) if cfg.optimizer == "adam" else SGD(params, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    t0 = time.perf_counter()
    losses = []
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(train_bags))
        total = 0.0
        for idx in _chunks(order, cfg.batch_bags):
            batch = [train_bags[i] for i in idx]
            logits = model.bag_logits(batch)
            y = np.array([[b.label] for b in batch], dtype=np.float32)
            loss = bce_with_logits(logits.reshape(-1, 1), y)
            backward(loss)
            opt.step()
            total += loss.item() * len(batch)
        losses.append(total / max(1, len(train_bags)))
        log.info("epoch %d loss %.4f", epoch + 1, losses[-1])
    report = {
        "variant": cfg.variant, "pool": cfg.pool, "k": cfg.k, "seed": cfg.seed,
        "parameters": parameter_count(model), "train_loss": losses,
        "train_seconds": round(time.perf_counter() - t0, 3),
    }
    model.eval()
    if test_bags:
        scores = predict(model, test_bags)
        report["auroc"] = auroc(scores, [b.label for b in test_bags])
        if test_truth:
            report["per_scale_auroc"] = per_bin_auroc(scores, test_bags, test_truth)
    if out_dir is not None:
        d = save_checkpoint(model, cfg, out_dir)
        timing = report.pop("train_seconds")
        (d / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        report["train_seconds"] = timing
    return model, report


def evaluate(model: MIMSModel, bags: Sequence[Bag], truth: dict | None = None) -> dict:
    scores = predict(model, bags)
    out = {"auroc": auroc(scores, [b.label for b in bags]), "n_bags": len(bags),
           "parameters": parameter_count(model)}
    if truth:
        out["per_scale_auroc"] = per_bin_auroc(scores, bags, truth)
    return out


def scheme_config(cfg: ExperimentConfig, scheme: str) -> ExperimentConfig:
    """Config for a scheme name: mean, max, max-inst, patchcls-mean, topk, or k=<n>."""
    if scheme.startswith("k="):
        try:
            k = int(scheme[2:])
        except ValueError:
            raise ConfigError(f"unknown scheme {scheme!r}") from None
        return cfg.replace(pool="topk", k=k)
    if scheme in ("mean", "max", "max-inst", "patchcls-mean", "topk"):
        return cfg.replace(pool=scheme)
    raise ConfigError(f"unknown scheme {scheme!r}")


def compare_pools(cfg: ExperimentConfig, schemes: Sequence[str], seeds: Sequence[int] = (0,),
                  train_bags=None, test_bags=None) -> list[dict]:
    """Train one model per (scheme, seed) on identical data and tabulate AUROC."""
    configs = [scheme_config(cfg, s) for s in schemes]
    if train_bags is None:
        train_bags, _ = load_split(cfg, "train")
        test_bags, _ = load_split(cfg, "test")
    rows = []
    for scheme, c in zip(schemes, configs):
        scores = [train(c.replace(seed=s), train_bags, test_bags)[1]["auroc"] for s in seeds]
        rows.append({"scheme": scheme, "auroc": scores, "median": statistics.median(scores),
                     "reference": REFERENCE_POOL_AUROC.get(scheme if scheme != "topk" else f"k={cfg.k}")})
    return rows


def stem_features(model: MIMSModel, image: np.ndarray, scale: float = 1.0) -> np.ndarray:
    model.eval()
    with no_grad():
        x = Tensor(image[None])
        if scale != 1.0:
            x = bilinear_resize(x, scale)
        return model.stem(x)


def feature_corr(model: MIMSModel, bags: Sequence[Bag], scales: Sequence[float],
                 n_images: int = 100) -> dict:
    """Mean Pearson r between stem features of each image and of its rescaled copy.

    Features of the rescaled input are resized back onto the original
    feature grid before correlating. Images whose features have zero
    variance are skipped and counted.
    """
    images = [inst for b in bags for inst in b.instances][:n_images]
    out = {}
    for s in scales:
        rs, skipped = [], 0
        for img in images:
            ref = stem_features(model, img)
            feat = stem_features(model, img, s)
            if feat.shape != ref.shape:
                with no_grad():
                    feat = resize_to(feat, ref.shape[2], ref.shape[3])
            r = pearson(ref.data, feat.data)
            if np.isnan(r):
                skipped += 1
                log.warning("feature_corr: zero-variance features at scale %s, image skipped", s)
                continue
            rs.append(r)
        out[float(s)] = {"r": float(np.mean(rs)) if rs else float("nan"), "n": len(rs),
                         "skipped": skipped, "reference": REFERENCE_FEATURE_CORR.get(float(s))}
    return out
