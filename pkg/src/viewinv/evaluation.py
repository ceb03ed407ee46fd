"""Downstream measurement: linear probe, finetune, multi-crop inference and
embedding export."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import checkpoint as ckpt
from .augment import AugmentProfile, augment_frames, center_window
from .dataset import load_split
from .encoder import EncoderConfig, VideoEncoder
from .trainer import derive_seed


@dataclass
class EvalConfig:
    probe_epochs: int = 30
    finetune_epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    seed: int = 0
    multicrop: bool = False
    crop_size: int = 28


@dataclass
class ProbeResult:
    protocol: str
    mode: str
    top1_accuracy: float
    per_class_accuracy: list[float]
    n_test: int
    seed: int
    predictions: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ProbeResult":
        return cls(**json.loads(text))


def load_encoder(checkpoint_path) -> tuple[VideoEncoder, EncoderConfig, dict]:
    """Rebuild the main encoder f from a training checkpoint."""
    arrays, meta = ckpt.load_checkpoint(checkpoint_path)
    raw = dict(meta["encoder_config"])
    for key in ("channels_per_block", "input_shape"):
        raw[key] = tuple(raw[key])
    for key in ("pools", "kernels"):
        raw[key] = tuple(tuple(v) for v in raw[key])
    cfg = EncoderConfig(**raw)
    encoder = VideoEncoder(cfg)
    ckpt.load_module("encoder", arrays, encoder)
    encoder.eval()
    return encoder, cfg, meta


def _clips_to_batch(clips: list[np.ndarray], t_frames: int) -> Tensor:
    stacked = np.stack([center_window(c, t_frames) for c in clips])
    return torch.from_numpy(stacked).permute(0, 4, 1, 2, 3).contiguous().float()


@torch.no_grad()
def extract_embeddings(encoder: VideoEncoder, clips: list[np.ndarray], batch_size: int = 64) -> np.ndarray:
    """Deterministic eval-mode embeddings (center temporal window, full frame)."""
    encoder.eval()
    t_frames = encoder.config.input_shape[0]
    out = []
    for start in range(0, len(clips), batch_size):
        batch = _clips_to_batch(clips[start : start + batch_size], t_frames)
        out.append(encoder(batch).cpu().numpy())
    return np.concatenate(out, axis=0)


def _accuracy(predictions: np.ndarray, labels: np.ndarray, num_classes: int):
    top1 = float((predictions == labels).mean())
    per_class = []
    for c in range(num_classes):
        mask = labels == c
        per_class.append(float((predictions[mask] == c).mean()) if mask.any() else 0.0)
    return top1, per_class


def _check_labels(train_labels: np.ndarray, test_labels: np.ndarray) -> int:
    train_set, test_set = set(train_labels.tolist()), set(test_labels.tolist())
    if not test_set <= train_set:
        raise ValueError(f"label set mismatch: test classes {test_set - train_set} unseen in train")
    return max(train_set) + 1


def _train_linear_head(
    features: Tensor, labels: Tensor, num_classes: int, cfg: EvalConfig
) -> nn.Linear:
    torch.manual_seed(derive_seed(cfg.seed, 71))
    head = nn.Linear(features.shape[1], num_classes)
    opt = torch.optim.Adam(head.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    order = np.random.default_rng(derive_seed(cfg.seed, 72))
    n = features.shape[0]
    for _ in range(cfg.probe_epochs):
        perm = order.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(head(features[idx]), labels[idx])
            loss.backward()
            opt.step()
    return head


def linear_probe(
    checkpoint_path, data_root, train_split: str, test_split: str, cfg: EvalConfig, protocol: str | None = None
) -> ProbeResult:
    """Freeze the encoder, fit a linear softmax head, report top-1 accuracy."""
    encoder, _, _ = load_encoder(checkpoint_path)
    train_rows, train_clips = load_split(data_root, train_split)
    test_rows, test_clips = load_split(data_root, test_split)
    train_labels = np.array([r["class_id"] for r in train_rows])
    test_labels = np.array([r["class_id"] for r in test_rows])
    num_classes = _check_labels(train_labels, test_labels)

    train_x = torch.from_numpy(extract_embeddings(encoder, train_clips, cfg.batch_size))
    test_x = torch.from_numpy(extract_embeddings(encoder, test_clips, cfg.batch_size))
    head = _train_linear_head(train_x, torch.from_numpy(train_labels), num_classes, cfg)
    with torch.no_grad():
        predictions = head(test_x).argmax(dim=1).numpy()
    top1, per_class = _accuracy(predictions, test_labels, num_classes)
    return ProbeResult(
        protocol=protocol or test_split,
        mode="linear",
        top1_accuracy=top1,
        per_class_accuracy=per_class,
        n_test=len(test_rows),
        seed=cfg.seed,
        predictions=[int(p) for p in predictions],
    )


def finetune(
    checkpoint_path, data_root, train_split: str, test_split: str, cfg: EvalConfig, protocol: str | None = None
) -> ProbeResult:
    """Train the whole encoder plus a linear head with cross-entropy."""
    encoder, enc_cfg, _ = load_encoder(checkpoint_path)
    train_rows, train_clips = load_split(data_root, train_split)
    test_rows, test_clips = load_split(data_root, test_split)
    train_labels = np.array([r["class_id"] for r in train_rows])
    test_labels = np.array([r["class_id"] for r in test_rows])
    num_classes = _check_labels(train_labels, test_labels)

    torch.manual_seed(derive_seed(cfg.seed, 73))
    head = nn.Linear(enc_cfg.embedding_dim, num_classes)
    params = list(encoder.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    order = np.random.default_rng(derive_seed(cfg.seed, 74))
    # pretraining augmentations minus the blur
    profile = AugmentProfile(out_frames=enc_cfg.input_shape[0], blur_p=0.0)

    n = len(train_clips)
    labels_t = torch.from_numpy(train_labels)
    for epoch in range(cfg.finetune_epochs):
        encoder.train()
        perm = order.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            views = [
                augment_frames(
                    train_clips[i], derive_seed(cfg.seed, 75, epoch, int(i)), profile
                )
                for i in idx
            ]
            batch = torch.from_numpy(np.stack(views)).permute(0, 4, 1, 2, 3).contiguous().float()
            opt.zero_grad()
            loss = F.cross_entropy(head(encoder(batch)), labels_t[idx])
            loss.backward()
            opt.step()

    encoder.eval()
    test_x = torch.from_numpy(extract_embeddings(encoder, test_clips, cfg.batch_size))
    with torch.no_grad():
        predictions = head(test_x).argmax(dim=1).numpy()
    top1, per_class = _accuracy(predictions, test_labels, num_classes)
    return ProbeResult(
        protocol=protocol or test_split,
        mode="finetune",
        top1_accuracy=top1,
        per_class_accuracy=per_class,
        n_test=len(test_rows),
        seed=cfg.seed,
        predictions=[int(p) for p in predictions],
    )


class ClassifierModel(nn.Module):
    """Frozen-or-finetuned encoder plus trained linear head, as one scorer."""

    def __init__(self, encoder: VideoEncoder, head: nn.Linear):
        super().__init__()
        self.encoder = encoder
        self.head = head

    @torch.no_grad()
    def scores(self, clips: Tensor) -> Tensor:
        self.eval()
        return F.softmax(self.head(self.encoder(clips)), dim=-1)


def _spatial_crops(frames: np.ndarray, crop: int) -> list[np.ndarray]:
    h, w = frames.shape[1:3]
    positions = [
        ((h - crop) // 2, (w - crop) // 2),
        (0, 0),
        (0, w - crop),
        (h - crop, 0),
        (h - crop, w - crop),
    ]
    out = []
    for top, left in positions:
        patch = frames[:, top : top + crop, left : left + crop]
        out.append(patch)
        out.append(patch[:, :, ::-1])
    return out


def multicrop_inference(clip_frames: np.ndarray, model: ClassifierModel, crop_size: int | None = 28) -> np.ndarray:
    """Average softmax scores over ten spatial crops and overlapping windows.

    Ten crops: center plus four corners, each with its horizontal flip.
    Temporal windows of the model's input length slide at 50% overlap; clips
    no longer than one window contribute a single centered window.
    """
    from .augment import resize_bilinear

    t_model, h, w, _ = model.encoder.config.input_shape
    t_clip = clip_frames.shape[0]
    if crop_size is None or crop_size >= min(h, w):
        crop_size = min(h, w)
    if clip_frames.shape[1] < crop_size or clip_frames.shape[2] < crop_size:
        raise ValueError("clip smaller than the requested crop")

    if t_clip <= t_model:
        base = center_window(clip_frames, t_model)
        if base.shape[0] < t_model:  # repeat-pad very short clips
            pad = np.repeat(base[-1:], t_model - base.shape[0], axis=0)
            base = np.concatenate([base, pad], axis=0)
        windows = [base]
    else:
        stride = max(1, t_model // 2)
        starts = list(range(0, t_clip - t_model + 1, stride))
        if starts[-1] != t_clip - t_model:
            starts.append(t_clip - t_model)
        windows = [clip_frames[s : s + t_model] for s in starts]

    batches = []
    for window in windows:
        for patch in _spatial_crops(window, crop_size):
            patch = resize_bilinear(np.ascontiguousarray(patch), h, w)
            batches.append(patch)
    tensor = torch.from_numpy(np.stack(batches)).permute(0, 4, 1, 2, 3).contiguous().float()
    scores = model.scores(tensor)
    return scores.mean(dim=0).cpu().numpy()


def export_embeddings(checkpoint_path, data_root, split: str, out_path) -> Path:
    """Write one CSV row per clip: metadata plus the unit-norm embedding."""
    encoder, enc_cfg, _ = load_encoder(checkpoint_path)
    rows, clips = load_split(data_root, split)
    emb = extract_embeddings(encoder, clips)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    d = enc_cfg.embedding_dim
    header = "clip_path,class_id,viewpoint_deg," + ",".join(f"e_{i}" for i in range(d))
    try:
        with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(header + "\n")
            for row, vec in zip(rows, emb):
                values = ",".join(repr(float(v)) for v in vec)
                fh.write(f"{row['clip_path']},{row['class_id']},{row['viewpoint_deg']},{values}\n")
    except OSError as exc:
        raise OSError(f"failed writing embeddings to {out_path}: {exc}") from exc
    return out_path
