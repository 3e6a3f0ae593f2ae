import json
import zipfile

import numpy as np
import pytest
import torch
from torch import nn

from taskmorph.checkpoint import (
    Checkpoint,
    load_checkpoint,
    load_into_system,
    save_checkpoint,
    save_system,
    system_parameters,
)
from taskmorph.errors import CheckpointError
from taskmorph.models import ClassificationHead, MetamorphConfig, TaskKind, build_metamorph
from taskmorph.models import parameter_vector
from taskmorph.privacy import DPConfig, PrivacyLedger
from taskmorph.training import MultiTaskSystem, TaskBranch, TaskSpec


def small_system(seed=0):
    torch.manual_seed(seed)
    encoder = nn.Sequential(nn.Conv2d(3, 8, 3, padding=1), nn.ReLU())
    system = MultiTaskSystem(encoder=encoder)
    for i, task_id in enumerate(("shape", "color")):
        torch.manual_seed(seed + 10 + i)
        system.branches[task_id] = TaskBranch(
            TaskSpec(task_id, TaskKind.CLASSIFICATION, 2),
            build_metamorph(MetamorphConfig(), 8),
            ClassificationHead(8, 2),
        )
    return system


def make_ledger():
    ledger = PrivacyLedger(
        config=DPConfig(
            clip_threshold=1.2,
            noise_multiplier=1.1,
            sample_rate=0.05,
            target_epsilon=4.0,
            target_delta=1e-5,
        )
    )
    ledger.record_step(17)
    return ledger


def test_round_trip_is_bit_identical(tmp_path):
    system = small_system(seed=1)
    ledger = make_ledger()
    config = {"experiment": "unit", "batch_size": 16}
    path = tmp_path / "run.ckpt"
    save_system(path, system, ledger=ledger, config=config)

    restored = small_system(seed=2)
    assert not torch.equal(
        parameter_vector(restored.encoder), parameter_vector(system.encoder)
    )
    checkpoint = load_into_system(path, restored)
    assert torch.equal(
        parameter_vector(restored.encoder), parameter_vector(system.encoder)
    )
    for task_id in ("shape", "color"):
        assert torch.equal(
            parameter_vector(restored.branches[task_id].metamorph),
            parameter_vector(system.branches[task_id].metamorph),
        )
    assert checkpoint.config == config
    revived = PrivacyLedger.from_state(checkpoint.ledger_state)
    assert revived.steps == 17
    assert revived.epsilon() == ledger.epsilon()


def test_arrays_stored_as_little_endian_f32(tmp_path):
    system = small_system()
    path = tmp_path / "run.ckpt"
    save_system(path, system)
    with zipfile.ZipFile(path) as archive:
        meta = json.loads(archive.read("meta.json"))
        assert meta["format"] == 1
        assert meta["entries"], "archive must index its arrays"
        entry = meta["entries"][0]
        array = np.load(__import__("io").BytesIO(archive.read(entry["path"])))
        assert array.dtype == np.dtype("<f4")
        assert list(array.shape) == entry["shape"]


def test_corrupted_archive_is_rejected(tmp_path):
    path = tmp_path / "run.ckpt"
    save_system(path, small_system())
    blob = bytearray(path.read_bytes())
    # flip a byte inside some stored array, past the local headers
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncated_archive_is_rejected(tmp_path):
    path = tmp_path / "run.ckpt"
    save_system(path, small_system())
    path.write_bytes(path.read_bytes()[: len(path.read_bytes()) // 3])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_metadata_is_rejected(tmp_path):
    path = tmp_path / "bare.zip"
    with zipfile.ZipFile(path, "w") as archive:
        archive.writestr("params/encoder/_shared/w.npy", b"not-an-array")
    with pytest.raises(CheckpointError, match="meta.json"):
        load_checkpoint(path)


def test_component_mismatch_names_the_key(tmp_path):
    system = small_system()
    path = tmp_path / "run.ckpt"
    save_system(path, system)
    grown = small_system()
    torch.manual_seed(99)
    grown.branches["depth"] = TaskBranch(
        TaskSpec("depth", TaskKind.CLASSIFICATION, 2),
        build_metamorph(MetamorphConfig(), 8),
        ClassificationHead(8, 2),
    )
    with pytest.raises(CheckpointError, match="depth"):
        load_into_system(path, grown)


def test_shape_mismatch_is_rejected(tmp_path):
    path = tmp_path / "run.ckpt"
    params = {("encoder", "_shared"): {"fc.weight": np.zeros((3, 4), dtype=np.float32)}}
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert loaded.params[("encoder", "_shared")]["fc.weight"].shape == (3, 4)

    class Linear(nn.Module):
        def __init__(self):
            super().__init__()
            self.fc = nn.Linear(5, 3, bias=False)

    system = MultiTaskSystem(encoder=Linear())
    with pytest.raises(CheckpointError, match="shape"):
        load_into_system(path, system)


def test_unserializable_config_is_rejected(tmp_path):
    with pytest.raises(CheckpointError, match="serializable"):
        save_checkpoint(
            tmp_path / "run.ckpt",
            {},
            config={"callback": object()},
        )


def test_checkpoint_without_ledger_or_config(tmp_path):
    path = tmp_path / "run.ckpt"
    save_system(path, small_system())
    checkpoint = load_checkpoint(path)
    assert isinstance(checkpoint, Checkpoint)
    assert checkpoint.ledger_state is None
    assert checkpoint.config is None
    assert ("encoder", "_shared") in checkpoint.params


def test_system_parameters_key_layout():
    params = system_parameters(small_system())
    components = {key[0] for key in params}
    assert components == {"encoder", "metamorph", "head"}
    assert ("metamorph", "shape") in params
    assert ("head", "color") in params
