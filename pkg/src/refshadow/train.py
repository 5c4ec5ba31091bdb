"""Training and evaluation loops for the toy segmenter.

One optimization step per (video, expression) sample: forward the whole
video, average the per-frame referring losses on the matched query plus a
query-score supervision term, backprop, Adam update with decoupled weight
decay. A step-decay schedule multiplies the learning rate by a fixed
factor after configured epochs.
"""
from __future__ import annotations

import json
import numpy as np
from dataclasses import dataclass, field
from pathlib import Path

from . import imageio
from . import losses as L
from . import metrics as ME
from . import model as MOD
from . import msa as MSA
from . import tensor as T
from .data import DatasetManifest, gt_box_from_mask
from .errors import ConfigError, TrainingDiverged
from .tensor import Tensor


@dataclass
class TrainConfig:
    epochs: int = 6
    lr: float = 3e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_epochs: tuple = ()       # epochs after which lr *= decay_factor
    decay_factor: float = 0.1
    clip_norm: float = 0.0         # global gradient-norm ceiling; 0 disables
    score_loss_weight: float = 1.0
    msa_on: bool = True
    memory_mode: str = "intra+hier"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.lr < 0:
            raise ConfigError("epochs must be >= 1 and lr nonnegative")
        if self.memory_mode not in MOD.MEMORY_MODES:
            raise ConfigError(f"memory_mode must be one of {MOD.MEMORY_MODES}")


class AdamW:
    """Adam with decoupled weight decay over a named-parameter dict."""

    def __init__(self, params: dict, lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            if self.weight_decay:
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def clip_gradients(named: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(p.grad * p.grad))
                        for p in named.values()))
    if total > max_norm:
        scale = max_norm / total
        for p in named.values():
            p.grad = p.grad * scale
    return total


# --- sample loading -------------------------------------------------------------

@dataclass
class VideoSample:
    video_id: str
    expression: str
    frames: list[np.ndarray]
    masks: list[np.ndarray]
    boxes: list[np.ndarray]  # normalized cxcywh per frame


def load_samples(manifest: DatasetManifest, split: str) -> list[VideoSample]:
    samples = []
    for rec in manifest.records_for(split):
        frames, masks, boxes = [], [], []
        for fr in rec.frames:
            frames.append(imageio.read_frame(manifest.frame_path(fr["frame"])))
            bits = imageio.read_mask(manifest.frame_path(fr["mask"]))
            masks.append(bits)
            boxes.append(gt_box_from_mask(bits))
        samples.append(VideoSample(rec.video_id, rec.expression,
                                   frames, masks, boxes))
    return samples


# --- matching --------------------------------------------------------------------

def _giou_loss_np(pred: np.ndarray, gt: np.ndarray) -> float:
    px1, py1 = pred[0] - pred[2] / 2, pred[1] - pred[3] / 2
    px2, py2 = pred[0] + pred[2] / 2, pred[1] + pred[3] / 2
    gx1, gy1 = gt[0] - gt[2] / 2, gt[1] - gt[3] / 2
    gx2, gy2 = gt[0] + gt[2] / 2, gt[1] + gt[3] / 2
    area_p = (px2 - px1) * (py2 - py1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    if area_p == 0.0 and area_g == 0.0:
        return 1.0
    iw = max(0.0, min(px2, gx2) - max(px1, gx1))
    ih = max(0.0, min(py2, gy2) - max(py1, gy1))
    inter = iw * ih
    union = area_p + area_g - inter
    c = (max(px2, gx2) - min(px1, gx1)) * (max(py2, gy2) - min(py1, gy1))
    return 1.0 - (inter / union - (c - union) / c)


def match_query(out: MOD.FrameOutput, gt_box: np.ndarray,
                gt_mask: np.ndarray) -> int:
    """Index of the query with minimal box-L1 + GIoU + dice cost."""
    logits = out.masks_full()
    probs = 1.0 / (1.0 + np.exp(-np.clip(logits, -60.0, 60.0)))
    g = gt_mask.astype(np.float64)
    best, best_cost = 0, np.inf
    for q in range(logits.shape[0]):
        p = probs[q]
        dice = 1.0 - (2.0 * (p * g).sum() + 1.0) / (p.sum() + g.sum() + 1.0)
        l1 = float(np.abs(out.boxes.data[q] - gt_box).mean())
        cost = l1 + _giou_loss_np(out.boxes.data[q], gt_box) + dice
        if cost < best_cost:
            best, best_cost = q, cost
    return best


def frame_loss(out: MOD.FrameOutput, gt_box: np.ndarray, gt_mask: np.ndarray,
               loss_cfg: L.LossConfig, score_weight: float) -> Tensor:
    q = match_query(out, gt_box, gt_mask)
    pred_box = T.reshape(T.narrow(out.boxes, 0, q, 1), (4,))
    refer = L.refer_loss(pred_box, gt_box, out.mask_logit(q), gt_mask, loss_cfg)
    # matched query supervised toward score 1, the rest toward 0
    target = np.zeros((out.query_scores.data.shape[0], 1))
    target[q, 0] = 1.0
    s = T.clip(out.query_scores, 1e-7, 1.0 - 1e-7)
    bce = T.mean(-(T.log(s) * target) - T.log(1.0 - s) * (1.0 - target))
    return refer + score_weight * bce


# --- training loop -----------------------------------------------------------------

@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(e) for e in self.epochs) + "\n"


def train(samples: list["VideoSample"], cfg: MOD.ModelConfig,
          params: MOD.ModelParams, vocab: MOD.Vocabulary,
          train_cfg: TrainConfig, loss_cfg: L.LossConfig | None = None,
          msa_cfg: MSA.MsaConfig | None = None) -> TrainReport:
    if not samples:
        raise ConfigError("empty training set")
    loss_cfg = loss_cfg or L.LossConfig()
    msa_cfg = msa_cfg or MSA.MsaConfig()
    named = dict(params.named_tensors())
    opt = AdamW(named, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay,
                beta1=train_cfg.beta1, beta2=train_cfg.beta2,
                eps=train_cfg.adam_eps)
    order_rng = np.random.default_rng(train_cfg.seed)
    report = TrainReport()
    lr = train_cfg.lr
    for epoch in range(1, train_cfg.epochs + 1):
        idx = order_rng.permutation(len(samples))
        epoch_losses = []
        for i in idx:
            s = samples[i]
            outputs = MOD.forward_video(
                s.frames, s.expression, vocab, cfg, params,
                msa_cfg=msa_cfg, msa_on=train_cfg.msa_on,
                memory_mode=train_cfg.memory_mode)
            total = None
            for out, gt_box, gt_mask in zip(outputs, s.boxes, s.masks):
                fl = frame_loss(out, gt_box, gt_mask, loss_cfg,
                                train_cfg.score_loss_weight)
                total = fl if total is None else total + fl
            total = total * (1.0 / len(outputs))
            value = total.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} sample {s.video_id}; "
                    f"partial report retained", report)
            opt.zero_grad()
            total.backward()
            if train_cfg.clip_norm > 0.0:
                clip_gradients(named, train_cfg.clip_norm)
            opt.step()
            epoch_losses.append(value)
        report.epochs.append({"epoch": epoch,
                              "mean_loss": float(np.mean(epoch_losses)),
                              "lr": lr})
        if epoch in train_cfg.decay_epochs:
            lr *= train_cfg.decay_factor
            opt.lr = lr
    return report


# --- evaluation --------------------------------------------------------------------

def evaluate(samples: list["VideoSample"], cfg: MOD.ModelConfig,
             params: MOD.ModelParams, vocab: MOD.Vocabulary,
             msa_cfg: MSA.MsaConfig | None = None, msa_on: bool = True,
             memory_mode: str = "intra+hier", oracle: bool = False,
             trace: list | None = None) -> ME.MetricReport:
    """Per-(expression, frame) metrics; oracle mode scores ground truth
    against itself as a pass-through check."""
    eval_samples = []
    for s in samples:
        if oracle:
            for t, gt in enumerate(s.masks):
                eval_samples.append(ME.EvalSample(
                    f"{s.video_id}:{t}", gt, gt, confidence=1.0))
            continue
        outputs = MOD.forward_video(
            s.frames, s.expression, vocab, cfg, params,
            msa_cfg=msa_cfg, msa_on=msa_on, memory_mode=memory_mode,
            trace=trace)
        for t, (out, gt) in enumerate(zip(outputs, s.masks)):
            q = MOD.select_referred_query(out)
            pred = out.masks_full()[q] >= 0.0  # sigmoid >= 0.5
            eval_samples.append(ME.EvalSample(
                f"{s.video_id}:{t}", pred, gt,
                confidence=float(out.scores()[q])))
    return ME.MetricReport.from_samples(eval_samples)
