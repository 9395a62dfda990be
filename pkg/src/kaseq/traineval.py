"""Optimization, training loops, evaluation, and checkpoint persistence.

Teachers train with the standard set-prediction ground-truth loss on their
task-filtered annotations. Amalgamation trains the student against frozen
teachers with any combination of sequence-level, task-level, aggregation
baseline, and ground-truth supervision. Teachers never change during
amalgamation, so their per-image outputs are cached once (float32) and
reused across epochs and runs.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import amalgamation as ka
from . import matching
from . import tensor as T
from .data import Annotation, Dataset, TaskPartition, apply_task
from .detector import (BatchOutput, DetectorConfig, DetectorParams, forward_batch)
from .errors import ConfigError, ContractError, DataFormatError, NumericError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"KASQ"
CHECKPOINT_VERSION = 1
IOU_THRESHOLDS = np.linspace(0.50, 0.95, 10)
METRICS_COLUMNS = ["epoch", "mode", "seed", "L_seq", "L_task", "L_d",
                   "AP", "AP50", "AP75", "wall_seconds"]
AMALGAMATION_MODES = ("sa", "ta", "sa+ta", "sag")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimSettings:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimSettings":
        return cls(**d)


class AdamW:
    """Decoupled-weight-decay adaptive moments with bias correction."""

    def __init__(self, params: dict[str, Tensor], settings: OptimSettings):
        self.params = dict(params)
        self.settings = settings
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, lr_scale: float = 1.0) -> None:
        s = self.settings
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - s.beta1 ** t
        bias2 = 1.0 - s.beta2 ** t
        lr = s.lr * lr_scale
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self._m[name]
            v = self._v[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            p.data -= lr * s.weight_decay * p.data
            p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + s.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def lr_scale_for_epoch(epoch: int, total_epochs: int) -> float:
    """Constant schedule with a single x0.1 decay at two thirds of training."""
    if total_epochs >= 3 and epoch >= (2 * total_epochs) // 3:
        return 0.1
    return 1.0


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: DetectorConfig
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)


def make_checkpoint(params: DetectorParams, cfg: DetectorConfig,
                    metadata: Optional[dict] = None) -> Checkpoint:
    tensors = {name: p.data.copy() for name, p in params.named_parameters().items()}
    return Checkpoint(config=cfg, tensors=tensors, metadata=dict(metadata or {}))


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    names = list(ckpt.tensors)
    header = json.dumps({
        "config": ckpt.config.to_dict(),
        "metadata": ckpt.metadata,
        "tensors": [{"name": n, "shape": list(ckpt.tensors[n].shape)} for n in names],
    }).encode()
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(header))
    blob += header
    for n in names:
        blob += np.ascontiguousarray(ckpt.tensors[n], dtype="<f8").tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack_from("<I", raw, 8)
    try:
        header = json.loads(raw[12:12 + header_len])
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: corrupt header at byte {12 + e.pos}") from None
    offset = 12 + header_len
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = 8 * int(np.prod(shape)) if shape else 8
        if offset + nbytes > len(raw):
            raise DataFormatError(
                f"{path}: truncated payload for tensor {entry['name']!r} at byte {offset}")
        tensors[entry["name"]] = np.frombuffer(
            raw, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(config=DetectorConfig.from_dict(header["config"]),
                      tensors=tensors, metadata=header.get("metadata", {}))


def detector_from_checkpoint(ckpt: Checkpoint) -> tuple[DetectorParams, DetectorConfig]:
    params = DetectorParams.init(ckpt.config, np.random.default_rng(0))
    named = params.named_parameters()
    if set(named) != set(ckpt.tensors):
        missing = set(named) ^ set(ckpt.tensors)
        raise DataFormatError(f"checkpoint tensor names disagree with config: {sorted(missing)}")
    for name, p in named.items():
        stored = ckpt.tensors[name]
        if stored.shape != p.data.shape:
            raise DataFormatError(f"tensor {name} has shape {stored.shape}, expected {p.data.shape}")
        p.data[:] = stored
    return params, ckpt.config


# ---------------------------------------------------------------------------
# ground-truth detection loss


def _local_targets(annotations: Sequence[Annotation],
                   category_to_local: dict[int, int]) -> tuple[np.ndarray, np.ndarray]:
    boxes, labels = [], []
    for ann in annotations:
        local = category_to_local.get(ann.category)
        if local is not None:
            boxes.append(ann.box)
            labels.append(local)
    if not boxes:
        return np.zeros((0, 4)), np.zeros((0,), dtype=int)
    return np.asarray(boxes, dtype=np.float64), np.asarray(labels, dtype=int)


def detection_loss(out: BatchOutput, targets: Sequence[tuple[np.ndarray, np.ndarray]],
                   num_classes: int, weights: ka.KAWeights,
                   eos_coef: float = 0.1) -> Tensor:
    """Set-prediction ground-truth loss: matched class NLL with no-object
    down-weighting plus l1 + GIoU box terms on matched slots."""
    m = out.dists.shape[0] // out.batch
    background = num_classes
    slot_class = np.full(out.batch * m, background, dtype=int)
    matched_slots: list[int] = []
    matched_boxes: list[np.ndarray] = []
    dists_np = out.dists.data
    boxes_np = out.boxes.data
    for b, (gt_boxes, gt_labels) in enumerate(targets):
        g = gt_boxes.shape[0]
        if g == 0:
            continue
        rows = slice(b * m, (b + 1) * m)
        prob = dists_np[rows]
        cost_class = -prob[:, gt_labels].T  # (g, m)
        l1 = np.abs(gt_boxes[:, None, :] - boxes_np[rows][None, :, :]).sum(-1)
        giou = matching._pairwise_giou(gt_boxes, boxes_np[rows])
        cost = cost_class + weights.l1_weight * l1 + weights.giou_weight * (1.0 - giou)
        assign = matching.hungarian(cost)
        for gi, slot in enumerate(assign):
            slot_class[b * m + slot] = gt_labels[gi]
            matched_slots.append(b * m + slot)
            matched_boxes.append(gt_boxes[gi])

    weight_vec = np.where(slot_class == background, eos_coef, 1.0)
    onehot = np.zeros((out.batch * m, num_classes + 1))
    onehot[np.arange(out.batch * m), slot_class] = weight_vec
    log_probs = T.log(T.clamp_min(out.dists))
    cls_loss = T.scale(T.tsum(T.mul(log_probs, Tensor(onehot))),
                       -1.0 / float(weight_vec.sum()))

    if matched_slots:
        num_boxes = float(len(matched_slots))
        pred = T.gather_rows(out.boxes, np.asarray(matched_slots, dtype=np.intp))
        box_terms = ka.box_loss_rows(pred, np.asarray(matched_boxes),
                                     weights.l1_weight, weights.giou_weight)
        return T.add(cls_loss, T.scale(T.tsum(box_terms), 1.0 / num_boxes))
    return cls_loss


# ---------------------------------------------------------------------------
# teacher output cache


class TeacherCache:
    """Frozen-teacher outputs per image: supervision layers (float32),
    padded soft targets, and predicted boxes."""

    def __init__(self, params: DetectorParams, cfg: DetectorConfig,
                 dataset: Dataset, partition: TaskPartition, task_index: int,
                 batch_size: int = 32):
        self.cfg = cfg
        n_layers = (1 if cfg.supervise_projection else 0) + cfg.enc_layers
        count = len(dataset)
        self.layers = [np.empty((count * cfg.tokens, cfg.d_model), dtype=np.float32)
                       for _ in range(n_layers)]
        self.dists = np.empty((count, cfg.queries, partition.num_categories + 1),
                              dtype=np.float32)
        self.boxes = np.empty((count, cfg.queries, 4), dtype=np.float32)
        n = cfg.tokens
        for start in range(0, count, batch_size):
            idx = list(range(start, min(start + batch_size, count)))
            out = forward_batch([dataset.image(i) for i in idx], params, cfg)
            for j, seq in enumerate(out.layer_seqs):
                self.layers[j][start * n:(start + len(idx)) * n] = seq.data
            padded = ka.pad_predictions(
                out.dists.data, partition, task_index).reshape(len(idx), cfg.queries, -1)
            self.dists[start:start + len(idx)] = padded
            self.boxes[start:start + len(idx)] = out.boxes.data.reshape(len(idx),
                                                                        cfg.queries, 4)

    def layer_rows(self, layer: int, image_ids: np.ndarray) -> np.ndarray:
        n = self.cfg.tokens
        gather = (image_ids[:, None] * n + np.arange(n)[None, :]).reshape(-1)
        return self.layers[layer][gather].astype(np.float64)


class LiveTeacher:
    """Uncached teacher forwards with the TeacherCache access interface."""

    def __init__(self, params: DetectorParams, cfg: DetectorConfig,
                 dataset: Dataset, partition: TaskPartition, task_index: int):
        self.params = params
        self.cfg = cfg
        self.dataset = dataset
        self.partition = partition
        self.task_index = task_index
        self._batch_ids: Optional[tuple[int, ...]] = None
        self._out: Optional[BatchOutput] = None

    def _ensure(self, image_ids: np.ndarray) -> BatchOutput:
        key = tuple(int(i) for i in image_ids)
        if self._batch_ids != key:
            self._out = forward_batch([self.dataset.image(i) for i in image_ids],
                                      self.params, self.cfg)
            self._batch_ids = key
        return self._out

    def layer_rows(self, layer: int, image_ids: np.ndarray) -> np.ndarray:
        return self._ensure(image_ids).layer_seqs[layer].data

    @property
    def dists(self):
        return _LiveView(self, "dists")

    @property
    def boxes(self):
        return _LiveView(self, "boxes")


class _LiveView:
    def __init__(self, teacher: LiveTeacher, kind: str):
        self.teacher = teacher
        self.kind = kind

    def __getitem__(self, image_ids):
        image_ids = np.atleast_1d(np.asarray(image_ids))
        out = self.teacher._ensure(image_ids)
        m = self.teacher.cfg.queries
        raw = (out.dists if self.kind == "dists" else out.boxes).data
        raw = raw.reshape(len(image_ids), m, -1)
        if self.kind == "dists":
            flat = raw.reshape(len(image_ids) * m, -1)
            padded = ka.pad_predictions(flat, self.teacher.partition,
                                        self.teacher.task_index)
            return padded.reshape(len(image_ids), m, -1)
        return raw


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    per_category: dict[int, float]
    per_subset: dict[str, float]

    def to_dict(self) -> dict:
        return {"AP": self.ap, "AP50": self.ap50, "AP75": self.ap75,
                "per_category": {str(k): v for k, v in self.per_category.items()},
                "per_subset": self.per_subset}


def _corner(box: np.ndarray) -> np.ndarray:
    cx, cy, w, h = box
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def _iou_corners(a: np.ndarray, b: np.ndarray) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    return inter / union


def _ap_101(scored_flags: list[tuple[float, int, int, bool]], total_gt: int) -> float:
    """101-point interpolated AP from (score-sorted) true/false positive flags."""
    if total_gt == 0:
        return 0.0
    tp = np.cumsum([1.0 if f else 0.0 for (_, _, _, f) in scored_flags])
    fp = np.cumsum([0.0 if f else 1.0 for (_, _, _, f) in scored_flags])
    recall = tp / total_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / 101.0


def category_ap(predictions, gt_boxes_by_image, threshold: float) -> Optional[float]:
    """AP for one category at one IoU threshold; None when the category has
    no ground truth. Greedy matching by descending score, best unmatched IoU."""
    total_gt = sum(len(v) for v in gt_boxes_by_image.values())
    if total_gt == 0:
        return None
    preds = sorted(predictions, key=lambda p: (-p[0], p[1], p[2]))
    taken: dict[int, np.ndarray] = {img: np.zeros(len(boxes), dtype=bool)
                                    for img, boxes in gt_boxes_by_image.items()}
    flags = []
    for score, img, slot, box in preds:
        candidates = gt_boxes_by_image.get(img, [])
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(candidates):
            if taken[img][j]:
                continue
            iou = _iou_corners(box, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= threshold:
            taken[img][best_j] = True
            flags.append((score, img, slot, True))
        else:
            flags.append((score, img, slot, False))
    return _ap_101(flags, total_gt)


def collect_predictions(params: DetectorParams, cfg: DetectorConfig, dataset: Dataset,
                        category_ids: Sequence[int], batch_size: int = 32,
                        rng: Optional[np.random.Generator] = None):
    """One prediction per decoder slot whose argmax is a real category."""
    preds: dict[int, list] = {c: [] for c in category_ids}
    m = cfg.queries
    for start in range(0, len(dataset), batch_size):
        idx = list(range(start, min(start + batch_size, len(dataset))))
        out = forward_batch([dataset.image(i) for i in idx], params, cfg,
                            rng=rng or np.random.default_rng(0))
        dists = out.dists.data
        boxes = out.boxes.data
        for row in range(dists.shape[0]):
            img = idx[row // m]
            slot = row % m
            best = int(np.argmax(dists[row]))
            if best == dists.shape[1] - 1:
                continue  # no-object slot
            preds[category_ids[best]].append(
                (float(dists[row, best]), img, slot, _corner(boxes[row])))
    return preds


def evaluate(ckpt: Checkpoint, dataset: Dataset,
             category_ids: Optional[Sequence[int]] = None,
             partition: Optional[TaskPartition] = None,
             batch_size: int = 32) -> EvalReport:
    """COCO-style AP over IoU 0.50:0.05:0.95 with 101-point interpolation."""
    params, cfg = detector_from_checkpoint(ckpt)
    params.set_requires_grad(False)
    if category_ids is None:
        category_ids = list(range(1, cfg.num_categories + 1))
    if len(category_ids) != cfg.num_categories:
        raise ContractError("model class arity disagrees with the category id map")
    preds = collect_predictions(params, cfg, dataset, category_ids, batch_size)

    gt: dict[int, dict[int, list]] = {c: {} for c in category_ids}
    wanted = set(category_ids)
    for i in range(len(dataset)):
        for ann in dataset.annotations_for(i):
            if ann.category in wanted:
                gt[ann.category].setdefault(i, []).append(_corner(ann.box_array()))

    ap_table: dict[int, np.ndarray] = {}
    for c in category_ids:
        row = [category_ap(preds[c], gt[c], thr) for thr in IOU_THRESHOLDS]
        if row[0] is None:
            continue
        ap_table[c] = np.asarray(row, dtype=np.float64)

    if not ap_table:
        return EvalReport(0.0, 0.0, 0.0, {}, {})
    all_rows = np.stack(list(ap_table.values()))
    mean_per_threshold = all_rows.mean(axis=0)
    per_category = {c: float(v.mean()) for c, v in ap_table.items()}
    per_subset: dict[str, float] = {}
    if partition is not None:
        for t in range(partition.num_tasks):
            vals = [per_category[c] for c in partition.subset(t) if c in per_category]
            if vals:
                per_subset[f"task{t + 1}"] = float(np.mean(vals))
    return EvalReport(ap=float(mean_per_threshold.mean()),
                      ap50=float(mean_per_threshold[0]),
                      ap75=float(mean_per_threshold[5]),
                      per_category=per_category,
                      per_subset=per_subset)


# ---------------------------------------------------------------------------
# metrics logging


class MetricsLogger:
    def __init__(self, path: Optional[str], mode: str, seed: int):
        self.path = path
        self.mode = mode
        self.seed = seed
        if path and not os.path.exists(path):
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_COLUMNS)

    def log(self, epoch: int, losses: dict[str, float], report: Optional[EvalReport],
            wall: float) -> None:
        if not self.path:
            return
        row = [epoch, self.mode, self.seed,
               f"{losses.get('seq', 0.0):.6f}", f"{losses.get('task', 0.0):.6f}",
               f"{losses.get('direct', 0.0):.6f}",
               f"{report.ap:.6f}" if report else "",
               f"{report.ap50:.6f}" if report else "",
               f"{report.ap75:.6f}" if report else "",
               f"{wall:.3f}"]
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(row)


def _check_finite(value: float, last_good: Checkpoint,
                  dump_path: Optional[str]) -> None:
    if np.isfinite(value):
        return
    if dump_path:
        save_checkpoint(last_good, dump_path)
    raise NumericError(f"non-finite loss {value};"
                       + (f" last good checkpoint at {dump_path}" if dump_path else ""))


def _guard_outputs(out: BatchOutput, last_good: Checkpoint,
                   dump_path: Optional[str]) -> None:
    """Abort before matching when the forward pass has already exploded."""
    if not (np.isfinite(out.dists.data).all() and np.isfinite(out.boxes.data).all()):
        _check_finite(float("nan"), last_good, dump_path)


# ---------------------------------------------------------------------------
# teacher / baseline training


def train_detector_gt(train_ds: Dataset, cfg: DetectorConfig, epochs: int, seed: int,
                      category_ids: Sequence[int],
                      eval_ds: Optional[Dataset] = None,
                      opt_settings: Optional[OptimSettings] = None,
                      weights: Optional[ka.KAWeights] = None,
                      batch_size: int = 16,
                      csv_path: Optional[str] = None,
                      mode_label: str = "raw",
                      partition: Optional[TaskPartition] = None,
                      crash_dump: Optional[str] = None) -> tuple[Checkpoint, list[float]]:
    """Train a detector on ground truth only; backbone of teachers and the
    raw/raw_ext baselines. Returns the checkpoint and per-epoch mean losses."""
    opt_settings = opt_settings or OptimSettings()
    weights = weights or ka.KAWeights()
    rng = np.random.default_rng(seed)
    params = DetectorParams.init(cfg, rng)
    optimizer = AdamW(params.named_parameters(), opt_settings)
    cat_to_local = {c: i for i, c in enumerate(category_ids)}
    logger = MetricsLogger(csv_path, mode_label, seed)
    start_time = time.time()
    epoch_losses: list[float] = []
    metadata = {"mode": mode_label, "seed": seed, "epochs": epochs,
                "category_ids": list(category_ids)}
    if partition is not None:
        metadata["partition"] = partition.to_jsonable()
    last_good = make_checkpoint(params, cfg, metadata)

    for epoch in range(epochs):
        order = rng.permutation(len(train_ds))
        scale = lr_scale_for_epoch(epoch, epochs)
        total, steps = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            images = [train_ds.image(i) for i in idx]
            targets = [_local_targets(train_ds.annotations_for(i), cat_to_local)
                       for i in idx]
            out = forward_batch(images, params, cfg, rng=rng)
            _guard_outputs(out, last_good, crash_dump)
            loss = detection_loss(out, targets, cfg.num_categories, weights)
            value = loss.item()
            _check_finite(value, last_good, crash_dump)
            loss.backward()
            optimizer.step(lr_scale=scale)
            optimizer.zero_grad()
            total += value
            steps += 1
        epoch_losses.append(total / max(steps, 1))
        last_good = make_checkpoint(params, cfg, metadata)
        report = None
        if eval_ds is not None:
            report = evaluate(make_checkpoint(params, cfg, metadata), eval_ds,
                              category_ids=category_ids, partition=partition)
        logger.log(epoch, {"direct": epoch_losses[-1]}, report,
                   time.time() - start_time)

    metadata["final_epoch"] = epochs - 1
    return make_checkpoint(params, cfg, metadata), epoch_losses


def train_teacher(train_ds: Dataset, partition: TaskPartition, task_index: int,
                  cfg: DetectorConfig, epochs: int, seed: int,
                  **kwargs) -> tuple[Checkpoint, list[float]]:
    """Train teacher t on its task-filtered annotations over |C^t| classes."""
    subset = sorted(partition.subset(task_index))
    teacher_cfg = replace(cfg, num_parts=1, compression="none",
                          num_categories=len(subset))
    ckpt, losses = train_detector_gt(
        train_ds, teacher_cfg, epochs, seed, category_ids=subset,
        mode_label=kwargs.pop("mode_label", f"teacher{task_index + 1}"), **kwargs)
    ckpt.metadata["task_subset"] = list(subset)
    ckpt.metadata["task_index"] = task_index
    return ckpt, losses


# ---------------------------------------------------------------------------
# amalgamation


def _normalize_np(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=0, keepdims=True)
    sd = x.std(axis=0, keepdims=True)
    return (x - mu) / (sd + 1e-6)


def _teacher_extended_rows(teachers, layer: int, image_ids: np.ndarray,
                           tokens: int) -> np.ndarray:
    """Image-major concatenation of every teacher's layer-l rows."""
    batch = len(image_ids)
    parts = [t.layer_rows(layer, image_ids).reshape(batch, tokens, -1)
             for t in teachers]
    stacked = np.stack(parts, axis=1)  # (B, N, n, d)
    return stacked.reshape(batch * len(teachers) * tokens, -1)


def amalgamate(teacher_ckpts: Sequence[Checkpoint], train_ds: Dataset,
               cfg: DetectorConfig, mode: str, epochs: int, seed: int,
               eval_ds: Optional[Dataset] = None,
               label_free: bool = False,
               weights: Optional[ka.KAWeights] = None,
               opt_settings: Optional[OptimSettings] = None,
               batch_size: int = 16,
               csv_path: Optional[str] = None,
               use_cache: bool = True,
               crash_dump: Optional[str] = None,
               teachers_by_id: Optional[dict] = None) -> Checkpoint:
    """Train the student against frozen teachers with the selected losses.

    ``mode`` is one of sa | ta | sa+ta | sag; ``label_free`` removes the
    ground-truth term entirely (its lambda is forced to zero and annotations
    are never read during updates). ``teachers_by_id`` is an optional memo
    reusing built teacher caches across runs on the same dataset.
    """
    if mode not in AMALGAMATION_MODES:
        raise ConfigError(f"unknown amalgamation mode {mode!r}")
    weights = replace(weights or ka.KAWeights())
    if label_free:
        weights.lambda_direct = 0.0
    opt_settings = opt_settings or OptimSettings()

    subsets = []
    teacher_models = []
    for ckpt in teacher_ckpts:
        params_t, cfg_t = detector_from_checkpoint(ckpt)
        params_t.set_requires_grad(False)
        if "task_subset" not in ckpt.metadata:
            raise ContractError("teacher checkpoint lacks its task subset")
        subsets.append(tuple(sorted(ckpt.metadata["task_subset"])))
        teacher_models.append((params_t, cfg_t))
    partition = TaskPartition(tuple(subsets), cfg.num_categories)
    n_teachers = len(teacher_models)

    for _, cfg_t in teacher_models:
        if (cfg_t.d_model, cfg_t.tokens, cfg_t.queries) != (cfg.d_model, cfg.tokens, cfg.queries):
            raise ConfigError("teacher and student geometry must agree")
    if mode == "sag":
        if cfg.num_parts != 1 or cfg.compression != "none":
            raise ConfigError("the aggregation baseline runs on the unextended student")
    elif cfg.num_parts != n_teachers:
        raise ConfigError(f"student needs num_parts == {n_teachers} for mode {mode!r}")

    teachers = []
    for t, (params_t, cfg_t) in enumerate(teacher_models):
        if use_cache:
            key = (subsets[t], len(train_ds))
            if teachers_by_id is not None and key in teachers_by_id:
                teachers.append(teachers_by_id[key])
                continue
            cache = TeacherCache(params_t, cfg_t, train_ds, partition, t)
            if teachers_by_id is not None:
                teachers_by_id[key] = cache
            teachers.append(cache)
        else:
            teachers.append(LiveTeacher(params_t, cfg_t, train_ds, partition, t))

    rng = np.random.default_rng(seed)
    params = DetectorParams.init(cfg, rng)
    trainable = params.named_parameters()

    n_layers = (1 if cfg.supervise_projection else 0) + cfg.enc_layers
    w_a: list[list[Tensor]] = []
    if mode == "sag":
        for t in range(n_teachers):
            w_a.append([Tensor(rng.normal(0.0, (1.0 / cfg.d_model) ** 0.5,
                                          size=(cfg.d_model, cfg.d_model)),
                               requires_grad=True) for _ in range(n_layers)])
            for l, w in enumerate(w_a[-1]):
                trainable[f"wa.t{t}.l{l}"] = w

    optimizer = AdamW(trainable, opt_settings)
    use_sa = mode in ("sa", "sa+ta")
    use_ta = mode in ("ta", "sa+ta")
    use_sag = mode == "sag"
    cat_to_local = {c: c - 1 for c in range(1, cfg.num_categories + 1)}
    mode_label = mode + ("_lf" if label_free else "")
    logger = MetricsLogger(csv_path, mode_label, seed)
    metadata = {"mode": mode_label, "seed": seed, "epochs": epochs,
                "label_free": label_free, "partition": partition.to_jsonable(),
                "compression": cfg.compression,
                "category_ids": list(range(1, cfg.num_categories + 1))}
    start_time = time.time()
    n = cfg.tokens
    m = cfg.queries
    last_good = make_checkpoint(params, cfg, metadata)

    for epoch in range(epochs):
        order = rng.permutation(len(train_ds))
        scale = lr_scale_for_epoch(epoch, epochs)
        sums = {"seq": 0.0, "task": 0.0, "direct": 0.0}
        steps = 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            batch = len(idx)
            images = [train_ds.image(i) for i in idx]

            p_slims = None
            if cfg.compression != "none" and cfg.num_parts > 1:
                # Training-time rule: compression is guided by the teachers'
                # concatenated projection sequences.
                xt = _teacher_extended_rows(teachers, 0, idx, n)
                p_slims = []
                for b in range(batch):
                    block = xt[b * n_teachers * n:(b + 1) * n_teachers * n]
                    if cfg.compression == "redundancy":
                        p_slims.append(ka.compress_redundancy(block, n_teachers, n))
                    elif cfg.compression == "isometric":
                        p_slims.append(ka.compress_isometric(n_teachers, n))
                    else:
                        p_slims.append(ka.compress_random(n_teachers, n, rng))

            out = forward_batch(images, params, cfg, p_slims=p_slims, rng=rng)
            _guard_outputs(out, last_good, crash_dump)

            l_seq = None
            if use_sa:
                student_norm = [T.channel_norm(seq) for seq in out.layer_seqs]
                teacher_norm = []
                for j in range(n_layers):
                    target = _teacher_extended_rows(teachers, j, idx, n)
                    if p_slims is not None:
                        gather = np.concatenate(
                            [b * n_teachers * n + p for b, p in enumerate(p_slims)])
                        target = target[gather]
                    teacher_norm.append(Tensor(_normalize_np(target)))
                l_seq = T.scale(ka.sa_loss(student_norm, teacher_norm, n_teachers),
                                1.0 / batch)
            elif use_sag:
                per_layer = []
                teacher_norms_by_layer = []
                for j in range(n_layers):
                    teacher_norms_by_layer.append(
                        [Tensor(_normalize_np(t.layer_rows(j, idx))) for t in teachers])
                for j, seq in enumerate(out.layer_seqs):
                    per_layer.append(ka.sag_loss(
                        T.channel_norm(seq), teacher_norms_by_layer[j],
                        [w_a[t][j] for t in range(n_teachers)]))
                total_sag = per_layer[0]
                for piece in per_layer[1:]:
                    total_sag = T.add(total_sag, piece)
                l_seq = T.scale(total_sag, 1.0 / batch)

            l_task = None
            if use_ta:
                pool_dists = np.concatenate([t.dists[idx] for t in teachers], axis=1)
                pool_boxes = np.concatenate([t.boxes[idx] for t in teachers], axis=1)
                per_image = []
                for b in range(batch):
                    sd = T.slice_rows(out.dists, b * m, (b + 1) * m)
                    sb = T.slice_rows(out.boxes, b * m, (b + 1) * m)
                    per_image.append(ka.ta_loss(
                        sd, sb, pool_dists[b].astype(np.float64),
                        pool_boxes[b].astype(np.float64), weights))
                total_ta = per_image[0]
                for piece in per_image[1:]:
                    total_ta = T.add(total_ta, piece)
                l_task = T.scale(total_ta, 1.0 / batch)

            l_direct = None
            if weights.lambda_direct > 0.0:
                targets = [_local_targets(train_ds.annotations_for(i), cat_to_local)
                           for i in idx]
                l_direct = detection_loss(out, targets, cfg.num_categories, weights)

            loss = ka.final_loss(l_seq, l_task, l_direct, weights)
            value = loss.item()
            _check_finite(value, last_good, crash_dump)
            loss.backward()
            optimizer.step(lr_scale=scale)
            optimizer.zero_grad()

            sums["seq"] += l_seq.item() if l_seq is not None else 0.0
            sums["task"] += l_task.item() if l_task is not None else 0.0
            sums["direct"] += l_direct.item() if l_direct is not None else 0.0
            steps += 1

        last_good = make_checkpoint(params, cfg, metadata)
        report = None
        if eval_ds is not None:
            report = evaluate(make_checkpoint(params, cfg, metadata), eval_ds,
                              partition=partition)
        logger.log(epoch, {k: v / max(steps, 1) for k, v in sums.items()},
                   report, time.time() - start_time)

    metadata["final_epoch"] = epochs - 1
    return make_checkpoint(params, cfg, metadata)


# ---------------------------------------------------------------------------
# redundancy analysis


REDUNDANCY_BIN_WIDTH = 0.05
REDUNDANCY_BINS = 41  # bin lows -1.00, -0.95, ..., +1.00


@dataclass
class RedundancyReport:
    bin_lows: np.ndarray
    counts: np.ndarray
    fraction_above_half: float
    token_count: int

    def rows(self):
        return [(float(lo), int(c)) for lo, c in zip(self.bin_lows, self.counts)]


def analyze_redundancy(ckpt: Checkpoint, dataset: Dataset,
                       batch_size: int = 64) -> RedundancyReport:
    """Histogram of extended projection-output token redundancies (Fig.-5a
    style, 0.05-wide bins spanning [-1, 1])."""
    from .detector import normalized_patches

    params, cfg = detector_from_checkpoint(ckpt)
    params.set_requires_grad(False)
    if cfg.num_parts < 2:
        raise ContractError("redundancy analysis requires an extended (N >= 2) student")
    n = cfg.tokens
    counts = np.zeros(REDUNDANCY_BINS, dtype=np.int64)
    above, total = 0, 0
    # Projection outputs only: the analysis never needs the full forward pass.
    for start in range(0, len(dataset), batch_size):
        idx = list(range(start, min(start + batch_size, len(dataset))))
        patches = np.concatenate([normalized_patches(dataset.image(i), cfg.patch_size)
                                  for i in idx], axis=0)
        parts = [patches @ params.proj_w[t].data + params.proj_b[t].data
                 for t in range(cfg.num_parts)]
        for b in range(len(idx)):
            block = np.concatenate([p[b * n:(b + 1) * n] for p in parts], axis=0)
            r = ka.redundancy_all(block)
            bins = np.clip(((r + 1.0) / REDUNDANCY_BIN_WIDTH).astype(int), 0,
                           REDUNDANCY_BINS - 1)
            counts += np.bincount(bins, minlength=REDUNDANCY_BINS)
            above += int((r > 0.5).sum())
            total += r.size
    lows = -1.0 + REDUNDANCY_BIN_WIDTH * np.arange(REDUNDANCY_BINS)
    return RedundancyReport(bin_lows=lows, counts=counts,
                            fraction_above_half=above / max(total, 1),
                            token_count=total)
