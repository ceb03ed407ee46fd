import numpy as np
import pytest
import torch

from viewinv.dataset import DataConfig, build_protocol
from viewinv.encoder import EncoderConfig
from viewinv.trainer import ClipDataset, TrainConfig


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    # bit-reproducibility across the whole suite
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_world(tmp_path_factory):
    """A miniature dataset plus matching encoder/train configs."""
    root = tmp_path_factory.mktemp("tiny") / "data"
    data_cfg = DataConfig(
        root=str(root),
        seed=3,
        num_classes=5,
        train_scenes_per_class=4,
        test_scenes_per_class=2,
        frames=6,
        height=8,
        width=8,
    )
    build_protocol(data_cfg)
    enc_cfg = EncoderConfig(
        num_blocks=3,
        split_index=1,
        channels_per_block=(4, 6, 8),
        embedding_dim=8,
        input_shape=(4, 8, 8, 3),
        pools=((1, 2, 2), (2, 2, 2), (1, 1, 1)),
        kernels=((1, 3, 3), (3, 3, 3), (3, 3, 3)),
    )
    train_cfg = TrainConfig(
        stage1_epochs=2,
        stage2_epochs=2,
        batch_size=4,
        queue_capacity=16,
        checkpoint_every=1,
        single_threaded=True,
    )
    gen_overrides = {"world_depth": 4, "code_dim": 8}
    data = ClipDataset(root, "pretrain")
    return {
        "root": root,
        "data_cfg": data_cfg,
        "enc_cfg": enc_cfg,
        "train_cfg": train_cfg,
        "gen_overrides": gen_overrides,
        "data": data,
    }


@pytest.fixture(scope="session")
def prod_world(tmp_path_factory):
    """Small dataset at production clip geometry with the default encoder."""
    root = tmp_path_factory.mktemp("prod") / "data"
    data_cfg = DataConfig(
        root=str(root), seed=5, train_scenes_per_class=3, test_scenes_per_class=1
    )
    build_protocol(data_cfg)
    return {
        "root": root,
        "data_cfg": data_cfg,
        "enc_cfg": EncoderConfig(),
        "train_cfg": TrainConfig(
            stage1_epochs=1, stage2_epochs=1, batch_size=8, queue_capacity=64, single_threaded=True
        ),
        "data": ClipDataset(root, "pretrain"),
    }
