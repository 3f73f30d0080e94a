"""Training loop, learning-rate schedule and evaluation metrics."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers
from .config import ModelConfig, TrainConfig, format_run_config
from .errors import EmptySplit
from .losses import pixelwise_correlation_map
from .model import (
    LossTerms,
    ModelParams,
    TrainState,
    build_model,
    compute_losses,
    load_checkpoint,
    mine_triplets,
    model_backward,
    model_forward,
    save_checkpoint,
)
from .selection import to_pixel
from .synth import Dataset, SplitData, load_dataset
from .tensor import Rng

log = logging.getLogger(__name__)

CSV_HEADER = "epoch,lr,l_cls,l_aux,l_vi,l_c,total,val_mca,kp_hit_rate"
EVAL_BATCH = 128


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Step decay: ``lr0 * decay ** floor(epoch / decay_epochs)`` (epochs count from 0)."""
    return config.lr * config.lr_decay ** (epoch // config.decay_epochs)


def effective_model_config(model_config: ModelConfig, train_config: TrainConfig) -> ModelConfig:
    if not train_config.use_local and model_config.dlfs is not None:
        return dataclasses.replace(model_config, dlfs=None)
    return model_config


def loss_terms(tc: TrainConfig) -> LossTerms:
    return LossTerms(
        lambda1=tc.lambda1,
        lambda2=tc.lambda2,
        lambda3=tc.lambda3,
        use_aux=tc.use_aux,
        use_vi=tc.use_vi,
        use_corr=tc.use_corr,
    )


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    per_class_recall: list[float]
    mean_class_accuracy: float
    overall_accuracy: float
    loss_means: dict[str, float] = field(default_factory=dict)
    keypoint_hit_rate: float = float("nan")
    predictions: np.ndarray | None = field(default=None, repr=False)

    def format(self) -> str:
        lines = [
            f"mean_class_accuracy={self.mean_class_accuracy:.6f}",
            f"overall_accuracy={self.overall_accuracy:.6f}",
            f"keypoint_hit_rate={self.keypoint_hit_rate:.6f}",
        ]
        lines += [f"recall[{i}]={r:.6f}" for i, r in enumerate(self.per_class_recall) if not np.isnan(r)]
        return "\n".join(lines)


def class_recalls(predictions, labels, num_classes: int) -> list[float]:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    out = []
    for c in range(num_classes):
        sel = labels == c
        out.append(float(np.mean(predictions[sel] == c)) if sel.any() else float("nan"))
    return out


def mean_class_accuracy(predictions, labels, num_classes: int) -> float:
    """Mean of per-class recalls over classes present in ``labels``."""
    if len(labels) == 0:
        raise EmptySplit("no samples to score")
    r = np.array(class_recalls(predictions, labels, num_classes))
    return float(np.nanmean(r))


def keypoint_pixels(coords, map_hw, stages, total_stride: int) -> np.ndarray:
    """Map normalized keypoints on a pyramid scale to input-image (row, col).

    ``stages`` are the (kernel, stride) pyramid convs leading to this scale.
    Pixel centers are mapped back through each stage, then through the
    backbone's total stride.
    """
    coords = np.asarray(coords, dtype=np.float64)
    col = to_pixel(coords[..., 0], map_hw[1])
    row = to_pixel(coords[..., 1], map_hw[0])
    for kernel, stride in reversed(stages):
        col = col * stride + (kernel - 1) / 2.0
        row = row * stride + (kernel - 1) / 2.0
    off = (total_stride - 1) / 2.0
    return np.stack([row * total_stride + off, col * total_stride + off], axis=-1)


def keypoint_localization_metric(keypoints_px, object_centers, radius_px: float) -> float:
    """Fraction of keypoints (input-pixel (row, col)) within ``radius_px`` of any object center."""
    kp = np.asarray(keypoints_px, dtype=np.float64).reshape(-1, 2)
    centers = np.asarray(object_centers, dtype=np.float64).reshape(-1, 2)
    if len(kp) == 0:
        return 0.0
    if len(centers) == 0:
        raise ValueError("need at least one object center")
    d = np.linalg.norm(kp[:, None, :] - centers[None, :, :], axis=-1)
    return float(np.mean(d.min(axis=1) <= radius_px))


def scene_keypoints_px(config: ModelConfig, keypoints, index: int) -> np.ndarray:
    """All keypoints of one batch element across scales, in input pixels."""
    pts = []
    for s, kp in enumerate(keypoints):
        hw = kp.attn.shape[-2:]
        pts.append(keypoint_pixels(kp.coords[index], hw, config.dlfs.stages[:s], config.total_stride))
    return np.concatenate(pts, axis=0)


@dataclass
class Predictions:
    logits: np.ndarray
    keypoints_px: list[np.ndarray]  # per sample, (sum K, 2); empty without local branch
    corr_maps: np.ndarray | None = None  # (n, h, w)


def predict(params: ModelParams, split: SplitData, with_corr: bool = False) -> Predictions:
    config = params.config
    logits, kps, corr = [], [], []
    for idx in split.batches(EVAL_BATCH):
        out = model_forward(params, split.x_rgb[idx], split.x_d[idx])
        logits.append(out.logits)
        for i in range(len(idx)):
            if config.dlfs is not None:
                kps.append(scene_keypoints_px(config, out.keypoints, i))
            else:
                kps.append(np.zeros((0, 2)))
        if with_corr:
            corr.append(pixelwise_correlation_map(out.f_rgb, out.f_d))
    logits = np.concatenate(logits) if logits else np.zeros((0, config.num_classes))
    return Predictions(logits, kps, np.concatenate(corr) if corr else None)


def hit_radius(config: ModelConfig, object_radius: float) -> float:
    return object_radius + config.total_stride


def evaluate_split(params: ModelParams, split: SplitData, with_corr: bool = False) -> tuple[MetricsReport, Predictions]:
    if len(split) == 0:
        raise EmptySplit("split has no samples")
    config = params.config
    pred = predict(params, split, with_corr)
    yhat = pred.logits.argmax(axis=1)
    recalls = class_recalls(yhat, split.labels, config.num_classes)
    radius = hit_radius(config, split.radius)
    if config.dlfs is not None:
        hits = [keypoint_localization_metric(k, c, radius) for k, c in zip(pred.keypoints_px, split.centers)]
        hit_rate = float(np.mean(hits))
    else:
        hit_rate = 0.0
    report = MetricsReport(
        per_class_recall=recalls,
        mean_class_accuracy=float(np.nanmean(recalls)),
        overall_accuracy=float(np.mean(yhat == split.labels)),
        keypoint_hit_rate=hit_rate,
        predictions=yhat,
    )
    return report, pred


def evaluate(checkpoint, data, split: str = "test") -> MetricsReport:
    """Score a saved checkpoint on one split of a dataset (manifest path or loaded)."""
    params, _ = load_checkpoint(checkpoint)
    dataset = data if isinstance(data, Dataset) else load_dataset(data)
    report, _ = evaluate_split(params, dataset[split])
    return report


# ---------------------------------------------------------------------------
# training


def _fmt(v: float) -> str:
    return f"{v:.9g}"


@dataclass
class TrainResult:
    params: ModelParams
    state: TrainState
    rows: list[dict]
    out_dir: Path

    @property
    def best_checkpoint(self) -> Path:
        return self.out_dir / "best.ckpt"

    @property
    def last_checkpoint(self) -> Path:
        return self.out_dir / "last.ckpt"


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    data,
    out_dir,
    resume: bool = False,
) -> TrainResult:
    """Train with Adam and the step-decay schedule; keep the best-validation checkpoint.

    Writes ``metrics.csv``, ``last.ckpt`` (every epoch) and ``best.ckpt``
    (highest validation mean-class accuracy, earlier epoch on ties) into
    ``out_dir``. With ``resume=True`` training continues from ``last.ckpt``;
    because every epoch's randomness is keyed by (seed, epoch), the result is
    identical to an uninterrupted run.
    """
    dataset = data if isinstance(data, Dataset) else load_dataset(data)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mconf = effective_model_config(model_config, train_config)
    csv_path = out / "metrics.csv"
    rows: list[dict] = []
    if resume:
        params, state = load_checkpoint(out / "last.ckpt", mconf)
        if csv_path.exists():
            rows = _read_csv(csv_path)[: state.epoch + 1]
    else:
        params = build_model(mconf, train_config.seed)
        state = TrainState()
    (out / "run.cfg").write_text(format_run_config(mconf, train_config), encoding="utf-8")
    _write_csv(csv_path, rows)
    train_split = dataset["train"]
    val_split = dataset["val"]
    terms = loss_terms(train_config)
    use_triplets = mconf.dlfs is not None and train_config.use_corr
    epoch_rng = Rng(train_config.seed, stream=2)
    for epoch in range(state.epoch + 1, train_config.epochs):
        lr = lr_at(train_config, epoch)
        rng = epoch_rng.substream(epoch)
        sums = np.zeros(5)
        seen = 0
        for b, idx in enumerate(train_split.batches(train_config.batch_size, rng)):
            labels = train_split.labels[idx]
            trip = mine_triplets(labels, rng.substream(b)) if use_triplets else None
            params.zero_grad()
            fwd = model_forward(params, train_split.x_rgb[idx], train_split.x_d[idx])
            bundle, grads = compute_losses(params, fwd, labels, terms, trip)
            model_backward(params, fwd.cache, grads)
            for p in params.tensors.values():
                layers.adam_step(p, lr)
            params.version += 1
            state.step += 1
            n = len(idx)
            sums += n * np.array([bundle.l_cls, bundle.l_aux, bundle.l_vi, bundle.l_c, bundle.total])
            seen += n
        means = sums / max(seen, 1)
        report, _ = evaluate_split(params, val_split)
        state.epoch = epoch
        if report.mean_class_accuracy > state.best_mca:
            state.best_mca = report.mean_class_accuracy
            state.best_epoch = epoch
            save_checkpoint(out / "best.ckpt", params, state)
        save_checkpoint(out / "last.ckpt", params, state)
        row = {
            "epoch": str(epoch),
            "lr": _fmt(lr),
            "l_cls": _fmt(means[0]),
            "l_aux": _fmt(means[1]),
            "l_vi": _fmt(means[2]),
            "l_c": _fmt(means[3]),
            "total": _fmt(means[4]),
            "val_mca": _fmt(report.mean_class_accuracy),
            "kp_hit_rate": _fmt(report.keypoint_hit_rate),
        }
        rows.append(row)
        with csv_path.open("a", encoding="utf-8", newline="") as fh:
            fh.write(",".join(row[k] for k in CSV_HEADER.split(",")) + "\n")
        log.info("epoch %d lr %s total %s val_mca %s", epoch, row["lr"], row["total"], row["val_mca"])
    return TrainResult(params, state, rows, out)


def _write_csv(path: Path, rows: list[dict]) -> None:
    lines = [CSV_HEADER] + [",".join(r[k] for k in CSV_HEADER.split(",")) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_csv(path: Path) -> list[dict]:
    lines = path.read_text(encoding="utf-8").splitlines()
    keys = lines[0].split(",")
    return [dict(zip(keys, line.split(","))) for line in lines[1:] if line]
