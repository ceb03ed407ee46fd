import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from viewinv import losses
from viewinv.memory import QueueState
from viewinv.trainer import ClipDataset, StepRejected, TrainConfig, Trainer, read_metrics


def make_trainer(tiny_world, run_dir=None, **cfg_overrides):
    cfg = replace(tiny_world["train_cfg"], **cfg_overrides)
    return Trainer(
        tiny_world["enc_cfg"],
        cfg,
        tiny_world["data"],
        run_dir=run_dir,
        generator_overrides=tiny_world["gen_overrides"],
    )


# ---------------------------------------------------------------------------
# stage 1


def test_stage1_step_zero_loss_near_log_filled_plus_one(tiny_world):
    tr = make_trainer(tiny_world)
    batch = tr.make_batch(1, 1, 0)
    report = tr.stage1_step(batch)
    # empty queue: one positive, no negatives
    assert abs(report.info_nce - math.log(0 + 1)) <= 0.5
    assert 0.0 <= report.pretext_accuracy <= 1.0
    # after one step the queue holds one batch of keys
    assert tr.queue.filled == tr.cfg.batch_size
    second = tr.stage1_step(tr.make_batch(1, 1, 1))
    assert abs(second.info_nce - math.log(tr.cfg.batch_size + 1)) <= 1.0


def test_stage1_ema_follows_defining_rule(tiny_world):
    tr = make_trainer(tiny_world)
    key_before = {k: v.clone() for k, v in tr.key_encoder.state_dict().items()}
    tr.stage1_step(tr.make_batch(1, 1, 0))
    m = tr.cfg.momentum
    q_after = tr.encoder.state_dict()
    for name in ("blocks.0.0.weight", "head.2.bias"):
        expected = m * key_before[name] + (1 - m) * q_after[name]
        assert torch.allclose(tr.key_encoder.state_dict()[name], expected, atol=1e-7)


def test_identical_seeds_identical_curves(tiny_world):
    losses_a, losses_b = [], []
    for bucket in (losses_a, losses_b):
        tr = make_trainer(tiny_world)
        for step in range(4):
            report = tr.stage1_step(tr.make_batch(1, 1, step))
            bucket.append(report.info_nce)
    assert losses_a == losses_b


# ---------------------------------------------------------------------------
# stage 2


def test_stage2_reduces_to_moco_with_unit_lambda(tiny_world):
    # criterion: weights (1,0,0,0) and lambda forced to 1 reproduce stage 1
    tr1 = make_trainer(tiny_world)
    tr2 = make_trainer(tiny_world, loss_weights=(1.0, 0.0, 0.0, 0.0), fixed_lambda=1.0)
    for step in range(2):  # put identical real content into both queues
        tr1.stage1_step(tr1.make_batch(1, 1, step))
        tr2.stage1_step(tr2.make_batch(1, 1, step))
    tr2.start_stage2()
    tr2.queue.load_state_dict(tr1.queue.state_dict())  # identical queue state
    batch = tr2.make_batch(2, 3, 0)
    loss1 = tr1.stage1_step(batch).info_nce
    loss2 = tr2.stage2_step(batch).total
    assert abs(loss1 - loss2) <= 1e-6


def test_stage2_lockstep_counts_and_components(tiny_world):
    tr = make_trainer(tiny_world)
    tr.start_stage2()
    report = tr.stage2_step(tr.make_batch(2, 3, 0))
    assert tr.queue.filled == tr.cfg.batch_size
    assert np.isfinite([report.mix_cl, report.adv, report.recon, report.total]).all()
    # queue1 and queue2 were written in lockstep with unit-norm rows
    for i in range(tr.queue.filled):
        assert abs(float(torch.linalg.vector_norm(tr.queue.queue1[i])) - 1) < 1e-5
        assert abs(float(torch.linalg.vector_norm(tr.queue.queue2[i])) - 1) < 1e-5


def _warm_queue(tr, rng):
    d_emb = tr.enc_cfg.embedding_dim
    d_code = tr.code_dim
    for i in range(tr.cfg.queue_capacity // 2):
        e = rng.normal(size=d_emb)
        c = rng.normal(size=d_code)
        tr.queue.enqueue_pair(
            torch.tensor(e / np.linalg.norm(e), dtype=torch.float32),
            torch.tensor(c / np.linalg.norm(c), dtype=torch.float32),
            1_000_000 + i,
        )


def test_stage2_full_composite_gradient_flow(prod_world):
    # production widths: the 99% dead-parameter bar is statistically fair
    tr = Trainer(prod_world["enc_cfg"], prod_world["train_cfg"], prod_world["data"])
    tr.start_stage2()
    # randomize the zero-initialized final head layers so gradients can reach
    # the layers behind them, then check every parameter participates
    g = torch.Generator().manual_seed(0)
    for layer in (
        tr.generator.coord_head.conv2,
        tr.generator.transform_head.fc2,
        tr.generator.camera_head.fc2,
    ):
        with torch.no_grad():
            layer.weight.normal_(0, 0.1, generator=g)
            layer.bias.normal_(0, 0.01, generator=g)
    _warm_queue(tr, np.random.default_rng(0))

    touched: dict[int, torch.Tensor] = {}
    report = None
    for epoch in (2, 3, 4):  # union over a few random batches
        report = tr.stage2_step(tr.make_batch(2, epoch, 0))
        for module in (tr.generator, tr.branch, tr.encoder):
            for p in module.parameters():
                mask = (p.grad != 0) if p.grad is not None else torch.zeros_like(p, dtype=torch.bool)
                key = id(p)
                touched[key] = touched.get(key, torch.zeros_like(mask)) | mask
    assert report.loss_3d > 0.0
    # every parameter tensor participates in the gradient
    live_tensors = sum(int(bool(v.any())) for v in touched.values())
    assert live_tensors / len(touched) >= 0.99
    # and entry-level coverage stays high (ReLU-dead hidden units aside)
    total = sum(v.numel() for v in touched.values())
    nonzero = sum(int(v.sum()) for v in touched.values())
    assert nonzero / total >= 0.95
    for name, p in tr.generator.named_parameters():
        assert p.grad is not None and bool((p.grad != 0).any()), name


def test_no_gradient_leaks_into_ema_or_anchor(tiny_world):
    tr = make_trainer(tiny_world, loss_weights=(0.0, 0.0, 1.0, 0.0))
    tr.start_stage2()
    _warm_queue(tr, np.random.default_rng(1))
    tr.optimizer.zero_grad(set_to_none=True)
    tr.stage2_step(tr.make_batch(2, 3, 0))
    for p in tr.key_encoder.parameters():
        assert p.grad is None
    # with only the adversarial term active, the anchor f(x) is detached and
    # the mix path is weighted zero, so f receives no gradient at all
    for p in tr.encoder.parameters():
        assert p.grad is None or not bool((p.grad != 0).any())


def test_zero_learning_rate_leaves_parameters_bitwise(tiny_world):
    tr = make_trainer(tiny_world)
    tr.stage1_step(tr.make_batch(1, 1, 0))  # diverge EMA from f first
    for group in tr.optimizer.param_groups:
        group["lr"] = 0.0
    params_before = {k: v.clone() for k, v in tr.encoder.state_dict().items() if v.is_floating_point()}
    ema_before = {k: v.clone() for k, v in tr.key_encoder.state_dict().items() if v.is_floating_point()}
    tr.stage1_step(tr.make_batch(1, 1, 1))
    for name, p in tr.encoder.named_parameters():
        assert torch.equal(p.detach(), params_before[name]), name
    assert any(
        not torch.equal(v, ema_before[k])
        for k, v in tr.key_encoder.state_dict().items()
        if v.is_floating_point()
    )


def test_nan_component_rejects_step_and_rolls_back(tiny_world, monkeypatch):
    tr = make_trainer(tiny_world)
    tr.start_stage2()
    params_before = {k: v.clone() for k, v in tr.encoder.state_dict().items()}
    filled_before = tr.queue.filled

    real = losses.adversarial_loss
    monkeypatch.setattr(
        "viewinv.trainer.losses.adversarial_loss",
        lambda a, b: real(a, b) * float("nan"),
    )
    with pytest.raises(StepRejected) as err:
        tr.stage2_step(tr.make_batch(2, 3, 0))
    assert "adv" in str(err.value)
    monkeypatch.undo()
    assert tr.queue.filled == filled_before
    for k, v in tr.encoder.state_dict().items():
        assert torch.equal(v, params_before[k])


# ---------------------------------------------------------------------------
# run_training


def test_run_training_metrics_and_checkpoints(tiny_world, tmp_path):
    run_dir = tmp_path / "run"
    tr = make_trainer(tiny_world, run_dir=run_dir)
    final = tr.run_training()
    spe = tr.steps_per_epoch()
    records = read_metrics(run_dir / "metrics.jsonl")
    assert len(records) == spe * tr.total_epochs()
    assert all(0.0 <= r["pretext_acc"] <= 1.0 and np.isfinite(r["total"]) for r in records)
    stages = {r["epoch"]: r["stage"] for r in records}
    assert stages[1] == 1 and stages[tr.total_epochs()] == 2
    for epoch in range(1, tr.total_epochs() + 1):
        assert (run_dir / "checkpoints" / f"epoch_{epoch:04d}.npz").exists()
    assert final.exists()


def test_stage1_only_checkpoint_has_no_generator_branch(tiny_world, tmp_path):
    from viewinv.checkpoint import has_prefix, load_checkpoint

    run_dir = tmp_path / "s1only"
    tr = make_trainer(tiny_world, run_dir=run_dir, stage1_epochs=1, stage2_epochs=0)
    final = tr.run_training()
    arrays, meta = load_checkpoint(final)
    assert meta["stage"] == 1
    assert has_prefix(arrays, "encoder") and has_prefix(arrays, "ema")
    assert not has_prefix(arrays, "branch")
    assert not has_prefix(arrays, "generator")


def test_resume_reproduces_uninterrupted_run(tiny_world, tmp_path):
    full_dir = tmp_path / "full"
    tr_full = make_trainer(tiny_world, run_dir=full_dir)
    tr_full.run_training()
    full_records = read_metrics(full_dir / "metrics.jsonl")

    resumed_dir = tmp_path / "resumed"
    tr_resumed = make_trainer(tiny_world, run_dir=resumed_dir)
    tr_resumed.run_training(resume_from=full_dir / "checkpoints" / "epoch_0002.npz")
    resumed_records = read_metrics(resumed_dir / "metrics.jsonl")

    spe = tr_full.steps_per_epoch()
    tail_full = full_records[2 * spe :]
    assert len(resumed_records) == len(tail_full)
    for a, b in zip(tail_full, resumed_records):
        assert a["epoch"] == b["epoch"] and a["stage"] == b["stage"]
        assert abs(a["total"] - b["total"]) <= 1e-6
        assert abs(a["pretext_acc"] - b["pretext_acc"]) <= 1e-6


def test_state_round_trip_preserves_step_behavior(tiny_world, tmp_path):
    tr = make_trainer(tiny_world)
    for step in range(2):
        tr.stage1_step(tr.make_batch(1, 1, step))
    tr.start_stage2()
    tr.stage2_step(tr.make_batch(2, 3, 0))
    path = tr.save_state(tmp_path / "state.npz")

    tr2 = make_trainer(tiny_world)
    tr2.load_state(path)
    batch = tr.make_batch(2, 3, 1)
    r1 = tr.stage2_step(batch)
    r2 = tr2.stage2_step(batch)
    assert r1.total == pytest.approx(r2.total, abs=1e-7)
    assert r1.mix_cl == pytest.approx(r2.mix_cl, abs=1e-7)
