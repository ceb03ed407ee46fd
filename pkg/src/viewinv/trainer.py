"""Two-stage training orchestration.

Stage 1 is plain momentum-contrast pretraining of the encoder f. Stage 2
adds the generator branch (f1^g, f2^g initialized from f) and the viewpoint
generator, training everything with the composite of mixup contrastive loss,
3D world-code consistency, adversarial viewpoint diversification and the
autoencoder reconstruction.

All stochasticity is derived from (seed, stage, epoch, step, clip, role), so
resuming from a checkpoint reproduces the uninterrupted run exactly without
serializing RNG state.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import checkpoint as ckpt
from . import losses
from .augment import AugmentProfile, augment_frames
from .dataset import load_split
from .encoder import EncoderConfig, VideoEncoder, clone_encoder
from .generator import ViewpointGenerator, generator_for_encoder
from .memory import QueueState, momentum_update

log = logging.getLogger(__name__)

METRIC_KEYS = (
    "step", "epoch", "stage", "info_nce", "mix_cl", "loss_3d", "adv", "recon",
    "total", "pretext_acc", "lr", "wall_ms",
)

# fraction of queue capacity that must be filled before the 3D loss engages
QUEUE_WARMUP_FRACTION = 0.25


class StepRejected(RuntimeError):
    """A non-finite loss component aborted the step; state was not touched."""

    def __init__(self, component: str):
        super().__init__(f"training step rejected: non-finite component {component!r}")
        self.component = component


@dataclass
class TrainConfig:
    tau: float = 0.07
    momentum: float = 0.999
    queue_capacity: int = 2048
    alpha: float = 1.0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    stage1_epochs: int = 30  # paper-scale value: 300
    stage2_epochs: int = 20  # paper-scale value: 200
    batch_size: int = 32
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    mix_mode: str = losses.SAME_INSTANCE
    grl_scale: float = 1.0
    seed: int = 0
    fixed_lambda: float | None = None
    generator_enabled: bool = True
    queue_prefill: bool = True
    checkpoint_every: int = 1
    single_threaded: bool = False

    def __post_init__(self):
        if self.mix_mode not in (losses.SAME_INSTANCE, losses.CROSS_INSTANCE):
            raise ValueError(f"invalid mix_mode {self.mix_mode!r}")
        for name in ("tau", "momentum", "queue_capacity", "alpha", "learning_rate", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if len(tuple(self.loss_weights)) != 4:
            raise ValueError("loss_weights must have 4 entries")
        if self.grl_scale < 0:
            raise ValueError("grl_scale must be >= 0")


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0x7FFFFFFF for p in parts]).generate_state(1)[0])


class ClipDataset:
    """Training split held fully in memory."""

    def __init__(self, root, split: str = "pretrain"):
        rows, clips = load_split(root, split)
        self.clips = clips
        self.class_ids = np.array([r["class_id"] for r in rows], dtype=np.int64)
        self.scene_ids = np.array([r["scene_id"] for r in rows], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.clips)


# role tags for seed derivation
_ROLE_VIEW = {"t": 0, "t_prime": 1, "t_second": 2}


class Trainer:
    def __init__(
        self,
        encoder_config: EncoderConfig,
        config: TrainConfig,
        data: ClipDataset,
        run_dir=None,
        generator_overrides: dict | None = None,
    ):
        if config.single_threaded:
            torch.set_num_threads(1)
        self.enc_cfg = encoder_config
        self.cfg = config
        self.data = data
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.gen_overrides = dict(generator_overrides or {})
        self.code_dim = int(self.gen_overrides.get("code_dim", 128))

        torch.manual_seed(derive_seed(config.seed, 11))
        self.encoder = VideoEncoder(encoder_config)
        self.key_encoder = clone_encoder(self.encoder)
        for p in self.key_encoder.parameters():
            p.requires_grad_(False)
        self.branch: VideoEncoder | None = None
        self.generator: ViewpointGenerator | None = None
        self.queue = self._fresh_queue()
        self.optimizer = torch.optim.Adam(
            self.encoder.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
        )
        self.stage = 1
        self.epoch = 0  # completed epochs
        self.global_step = 0
        self.profile = AugmentProfile(out_frames=encoder_config.input_shape[0])
        self._metrics_fh = None

    # ------------------------------------------------------------------ setup

    def _fresh_queue(self) -> QueueState:
        return QueueState(self.cfg.queue_capacity, self.enc_cfg.embedding_dim, self.code_dim)

    def start_stage2(self) -> None:
        """Clone the generator branch from f and rebuild optimizer and queues."""
        if self.stage == 2:
            return
        self.branch = clone_encoder(self.encoder)
        torch.manual_seed(derive_seed(self.cfg.seed, 13))
        self.generator = generator_for_encoder(self.enc_cfg, **self.gen_overrides)
        self.queue = self._fresh_queue()  # queues restart empty for stage 2
        self.optimizer = torch.optim.Adam(
            self._stage2_params(), lr=self.cfg.learning_rate, weight_decay=self.cfg.weight_decay
        )
        self.stage = 2

    def _stage2_params(self):
        params = list(self.encoder.parameters()) + list(self.branch.parameters())
        params += list(self.generator.parameters())
        return params

    # ------------------------------------------------------------------ data

    def steps_per_epoch(self) -> int:
        return len(self.data) // self.cfg.batch_size

    def _view_tensor(self, indices, stage: int, epoch: int, step: int, role: str) -> Tensor:
        frames = []
        for idx in indices:
            seed = derive_seed(
                self.cfg.seed, 31, stage, epoch, step, int(idx), _ROLE_VIEW[role]
            )
            frames.append(augment_frames(self.data.clips[idx], seed, self.profile))
        arr = np.stack(frames)  # (B, T, H, W, C)
        return torch.from_numpy(arr).permute(0, 4, 1, 2, 3).contiguous()

    def make_batch(self, stage: int, epoch: int, step: int) -> dict:
        if not (0 <= step < self.steps_per_epoch()):
            raise ValueError(f"step {step} outside epoch range [0, {self.steps_per_epoch()})")
        order_rng = np.random.default_rng(derive_seed(self.cfg.seed, 21, stage, epoch))
        perm = order_rng.permutation(len(self.data))
        b = self.cfg.batch_size
        indices = perm[step * b : (step + 1) * b]
        batch = {
            "x_t": self._view_tensor(indices, stage, epoch, step, "t"),
            "x_t_prime": self._view_tensor(indices, stage, epoch, step, "t_prime"),
            "source_ids": self.data.scene_ids[indices],
        }
        if stage == 2:
            batch["x_t_second"] = self._view_tensor(indices, stage, epoch, step, "t_second")
            batch["mix"] = self._sample_mix(epoch, step)
        return batch

    def _sample_mix(self, epoch: int, step: int) -> losses.MixSample:
        rng = np.random.default_rng(derive_seed(self.cfg.seed, 41, 2, epoch, step))
        mix = losses.sample_mix(self.cfg.alpha, self.cfg.batch_size, rng, self.cfg.mix_mode)
        if self.cfg.fixed_lambda is not None:
            mix.lam = np.full(self.cfg.batch_size, float(self.cfg.fixed_lambda))
        return mix

    # ------------------------------------------------------------------ steps

    def _check_finite(self, value: Tensor, component: str) -> None:
        if not bool(torch.isfinite(value.detach()).all()):
            raise StepRejected(component)

    def _buffer_snapshot(self) -> list[tuple[Tensor, Tensor]]:
        modules = [self.encoder, self.key_encoder]
        if self.branch is not None:
            modules += [self.branch, self.generator]
        return [(buf, buf.clone()) for m in modules for buf in m.buffers()]

    @staticmethod
    @torch.no_grad()
    def _restore_buffers(snapshot: list[tuple[Tensor, Tensor]]) -> None:
        for buf, saved in snapshot:
            buf.copy_(saved)

    def stage1_step(self, batch: dict) -> losses.LossReport:
        """MoCo step: InfoNCE against Queue1, then EMA update, then enqueue.

        A non-finite loss aborts the step with every piece of state (including
        normalization buffers touched by the forward passes) rolled back.
        """
        snapshot = self._buffer_snapshot()
        try:
            return self._stage1_step(batch)
        except StepRejected:
            self._restore_buffers(snapshot)
            raise

    def _stage1_step(self, batch: dict) -> losses.LossReport:
        self.encoder.train()
        self.key_encoder.train()
        query = self.encoder(batch["x_t"])
        with torch.no_grad():
            key = self.key_encoder(batch["x_t_prime"])
        logits = losses.contrastive_logits(query, key, self.queue.embeddings(), self.cfg.tau)
        loss = losses.nce_from_logits(logits)
        self._check_finite(loss, "info_nce")
        accuracy = losses.pretext_accuracy(logits.detach(), 0)

        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        momentum_update(self.encoder, self.key_encoder, self.cfg.momentum)
        for i, sid in enumerate(batch["source_ids"]):
            self.queue.enqueue(key[i], int(sid))
        value = float(loss.detach())
        return losses.LossReport(info_nce=value, total=value, pretext_accuracy=accuracy)

    def stage2_step(self, batch: dict) -> losses.LossReport:
        """Composite step across the three augmented streams (rollback on
        non-finite components, as in stage 1)."""
        if self.stage != 2:
            raise RuntimeError("stage2_step called before start_stage2")
        snapshot = self._buffer_snapshot()
        try:
            return self._stage2_step(batch)
        except StepRejected:
            self._restore_buffers(snapshot)
            raise

    def _stage2_step(self, batch: dict) -> losses.LossReport:
        cfg = self.cfg
        w_mix, w_3d, w_adv, w_recon = cfg.loss_weights
        self.encoder.train()
        self.key_encoder.train()
        self.branch.train()
        self.generator.train()

        feat1 = self.encoder.forward_first(batch["x_t"])
        with torch.no_grad():
            key = self.key_encoder(batch["x_t_prime"])

        need_anchor = w_3d != 0.0 or w_adv != 0.0
        if need_anchor:
            with torch.no_grad():
                anchor = self.encoder.forward_second(feat1)

        branch_feat = self.branch.forward_first(batch["x_t_second"])
        zero = feat1.new_zeros(())
        code = None
        recon = zero
        if cfg.generator_enabled:
            g_out, world = self.generator.generate(branch_feat)
            if w_3d != 0.0 or w_recon != 0.0:
                code, recon = self.generator.compress_world(world)
        else:
            g_out = branch_feat  # ablation: the third stream feeds mixup directly

        mix = batch["mix"]
        lam = torch.as_tensor(mix.lam, dtype=feat1.dtype)
        mixed = losses.mix_features(feat1, g_out, lam)
        q_mix = self.encoder.forward_second(mixed)
        if cfg.mix_mode == losses.SAME_INSTANCE:
            logits = losses.contrastive_logits(q_mix, key, self.queue.embeddings(), cfg.tau)
            mix_loss = losses.nce_from_logits(logits)
            accuracy = losses.pretext_accuracy(logits.detach(), 0)
        else:
            logits = losses.batch_contrastive_logits(q_mix, key, self.queue.embeddings(), cfg.tau)
            target = mix.mixed_target(logits.shape[1], dtype=logits.dtype)
            mix_loss = losses.soft_ce_from_logits(logits, target)
            accuracy = losses.pretext_accuracy(logits.detach(), np.arange(cfg.batch_size))

        loss_3d = zero
        n_3d = 0
        if w_3d != 0.0 and code is not None and self._queue_warm():
            picked_codes, picked_refs = [], []
            for i, sid in enumerate(batch["source_ids"]):
                idx = self.queue.top1_neighbor(anchor[i], exclude_source_id=int(sid))
                if idx is not None:
                    picked_codes.append(code[i])
                    picked_refs.append(self.queue.queue2[idx])
            if picked_codes:
                loss_3d = losses.three_d_loss(torch.stack(picked_codes), torch.stack(picked_refs))
                n_3d = len(picked_codes)

        adv = zero
        if w_adv != 0.0:
            reversed_out = losses.gradient_reversal(g_out, cfg.grl_scale)
            branch_emb = self.branch.forward_second(reversed_out)
            adv = losses.adversarial_loss(branch_emb, anchor)

        try:
            total = losses.composite_stage2_loss(mix_loss, loss_3d, adv, recon, cfg.loss_weights)
        except ValueError as exc:
            raise StepRejected(str(exc).rsplit(" ", 1)[-1]) from exc
        self._check_finite(total, "total")

        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        momentum_update(self.encoder, self.key_encoder, cfg.momentum)
        for i, sid in enumerate(batch["source_ids"]):
            if code is not None:
                self.queue.enqueue_pair(key[i], code[i], int(sid))
            else:
                self.queue.enqueue(key[i], int(sid))

        return losses.LossReport(
            mix_cl=float(mix_loss.detach()),
            loss_3d=float(loss_3d.detach()) if n_3d else 0.0,
            adv=float(adv.detach()),
            recon=float(recon.detach()),
            total=float(total.detach()),
            pretext_accuracy=accuracy,
        )

    def _queue_warm(self) -> bool:
        return self.queue.filled >= QUEUE_WARMUP_FRACTION * self.cfg.queue_capacity

    @torch.no_grad()
    def _prefill_queue(self, stage: int) -> None:
        """Fill the queue with momentum-encoder keys (and, in stage 2, world
        codes) before the first step, so the (N+1)-way task has its full
        negative set from step 0 instead of hardening over the first epochs.

        Prefill batches use reserved negative epoch numbers in the seed
        derivation, keeping training-step randomness untouched.
        """
        self.key_encoder.train()
        if stage == 2:
            self.branch.train()
            self.generator.train()
        spe = self.steps_per_epoch()
        pass_idx = 0
        while self.queue.filled < self.cfg.queue_capacity:
            for step in range(spe):
                batch = self.make_batch(stage, -(pass_idx + 1), step)
                key = self.key_encoder(batch["x_t_prime"])
                code = None
                if stage == 2 and self.cfg.generator_enabled:
                    branch_feat = self.branch.forward_first(batch["x_t_second"])
                    _, world = self.generator.generate(branch_feat)
                    code, _ = self.generator.compress_world(world)
                for i, sid in enumerate(batch["source_ids"]):
                    if code is not None:
                        self.queue.enqueue_pair(key[i], code[i], int(sid))
                    else:
                        self.queue.enqueue(key[i], int(sid))
                if self.queue.filled >= self.cfg.queue_capacity:
                    break
            pass_idx += 1

    # ------------------------------------------------------------------ run

    def total_epochs(self) -> int:
        return self.cfg.stage1_epochs + self.cfg.stage2_epochs

    def run_training(self, resume_from=None) -> Path | None:
        """Execute the full schedule, checkpointing per epoch.

        Returns the final checkpoint path when a run directory is set.
        """
        if resume_from is not None:
            self.load_state(resume_from)
        if self._metrics_fh is None and self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            self._metrics_fh = open(self.run_dir / "metrics.jsonl", "a", encoding="utf-8")

        spe = self.steps_per_epoch()
        while self.epoch < self.total_epochs():
            epoch = self.epoch + 1
            stage = 1 if epoch <= self.cfg.stage1_epochs else 2
            if stage == 2:
                entering = self.stage == 1
                self.start_stage2()
                if entering and self.cfg.queue_prefill and self.queue.filled == 0:
                    self._prefill_queue(2)
            elif epoch == 1 and self.cfg.queue_prefill and self.queue.filled == 0:
                self._prefill_queue(1)
            for step in range(spe):
                batch = self.make_batch(stage, epoch, step)
                started = time.perf_counter()
                try:
                    report = self.stage1_step(batch) if stage == 1 else self.stage2_step(batch)
                except StepRejected as exc:
                    log.warning("epoch %d step %d: %s", epoch, step, exc)
                    continue
                wall_ms = (time.perf_counter() - started) * 1000.0
                self._write_metrics(epoch, stage, report, wall_ms)
                self.global_step += 1
            self.epoch = epoch
            last = self.epoch == self.total_epochs()
            if self.run_dir is not None and (last or epoch % self.cfg.checkpoint_every == 0):
                self.save_state(self.run_dir / "checkpoints" / f"epoch_{epoch:04d}.npz")
        final = None
        if self.run_dir is not None:
            final = self.run_dir / "checkpoints" / "final.npz"
            self.save_state(final)
            if self._metrics_fh is not None:
                self._metrics_fh.close()
                self._metrics_fh = None
        return final

    def _write_metrics(self, epoch: int, stage: int, report: losses.LossReport, wall_ms: float) -> None:
        if self._metrics_fh is None:
            return
        record = {
            "step": self.global_step,
            "epoch": epoch,
            "stage": stage,
            **report.as_dict(),
            "lr": self.cfg.learning_rate,
            "wall_ms": round(wall_ms, 3),
        }
        self._metrics_fh.write(json.dumps({k: record[k] for k in METRIC_KEYS}) + "\n")
        self._metrics_fh.flush()

    # ------------------------------------------------------------------ state

    def save_state(self, path) -> Path:
        arrays: dict[str, np.ndarray] = {}
        arrays.update(ckpt.module_arrays("encoder", self.encoder))
        arrays.update(ckpt.module_arrays("ema", self.key_encoder))
        if self.branch is not None:
            arrays.update(ckpt.module_arrays("branch", self.branch))
            arrays.update(ckpt.module_arrays("generator", self.generator))
        opt_arrays, opt_structure = ckpt.optimizer_arrays("optimizer", self.optimizer)
        arrays.update(opt_arrays)
        qstate = self.queue.state_dict()
        arrays["queue.queue1"] = qstate["queue1"].numpy()
        arrays["queue.queue2"] = qstate["queue2"].numpy()
        arrays["queue.source_ids"] = qstate["source_ids"]
        meta = {
            "epoch": self.epoch,
            "stage": self.stage,
            "global_step": self.global_step,
            "queue_cursor": qstate["cursor"],
            "queue_filled": qstate["filled"],
            "optimizer": opt_structure,
            "train_config": _config_meta(self.cfg),
            "encoder_config": asdict(self.enc_cfg),
            "generator_overrides": self.gen_overrides,
        }
        path = Path(path)
        ckpt.save_checkpoint(path, arrays, meta)
        return path

    def load_state(self, path) -> None:
        arrays, meta = ckpt.load_checkpoint(path)
        self.stage = int(meta["stage"])
        self.epoch = int(meta["epoch"])
        self.global_step = int(meta["global_step"])
        ckpt.load_module("encoder", arrays, self.encoder)
        ckpt.load_module("ema", arrays, self.key_encoder)
        for p in self.key_encoder.parameters():
            p.requires_grad_(False)
        if self.stage == 2:
            if self.branch is None:
                self.branch = clone_encoder(self.encoder)
                self.generator = generator_for_encoder(self.enc_cfg, **self.gen_overrides)
            ckpt.load_module("branch", arrays, self.branch)
            ckpt.load_module("generator", arrays, self.generator)
            params = self._stage2_params()
        else:
            params = list(self.encoder.parameters())
        self.optimizer = torch.optim.Adam(
            params, lr=self.cfg.learning_rate, weight_decay=self.cfg.weight_decay
        )
        ckpt.load_optimizer("optimizer", arrays, meta["optimizer"], self.optimizer)
        self.queue = self._fresh_queue()
        self.queue.load_state_dict(
            {
                "queue1": torch.from_numpy(arrays["queue.queue1"].copy()),
                "queue2": torch.from_numpy(arrays["queue.queue2"].copy()),
                "source_ids": arrays["queue.source_ids"].copy(),
                "cursor": meta["queue_cursor"],
                "filled": meta["queue_filled"],
                "capacity": self.cfg.queue_capacity,
            }
        )


def _config_meta(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["loss_weights"] = list(cfg.loss_weights)
    return out


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
