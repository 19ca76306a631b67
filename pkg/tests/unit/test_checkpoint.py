import json

import numpy as np
import pytest
import torch

from app.core.errors import CheckpointError
from app.models.training import Stage
from app.services.checkpoint import (
    MANIFEST,
    average_checkpoints,
    load_checkpoint,
    read_manifest,
    read_tensors,
    save_checkpoint,
)
from app.services.network import build_model
from tests.integration.common import create_model_config, create_test_corpus


@pytest.fixture(scope="module")
def config():
    return create_model_config(create_test_corpus().vocab)


def _same_weights(a, b) -> bool:
    state = b.state_dict()
    return all(torch.equal(t, state[name]) for name, t in a.state_dict().items())


def test_saved_model_loads_identically(tmp_path, config):
    model = build_model(Stage.ST, config, seed=5)
    save_checkpoint(model, tmp_path / "ckpt", seed=5)
    restored, manifest = load_checkpoint(tmp_path / "ckpt")
    assert manifest.stage == Stage.ST
    assert manifest.model_config == config
    assert _same_weights(model, restored)


def test_manifest_describes_a_contiguous_payload(tmp_path, config):
    model = build_model(Stage.ASR, config, seed=1)
    manifest = save_checkpoint(model, tmp_path, seed=1)
    on_disk = json.loads((tmp_path / MANIFEST).read_text())
    assert [t["name"] for t in on_disk["tensors"]] == [name for name, _ in model.named_parameters()]
    offsets = [t.offset for t in manifest.tensors]
    assert offsets[0] == 0 and offsets == sorted(offsets)
    last = manifest.tensors[-1]
    assert (tmp_path / "payload.bin").stat().st_size == last.offset + 4 * int(np.prod(last.shape))


def test_average_of_identical_checkpoints_is_the_checkpoint(tmp_path, config):
    model = build_model(Stage.MT, config, seed=2)
    save_checkpoint(model, tmp_path / "a", seed=2)
    save_checkpoint(model, tmp_path / "b", seed=2)
    average_checkpoints([tmp_path / "a", tmp_path / "b"], tmp_path / "avg")
    averaged, _ = load_checkpoint(tmp_path / "avg")
    assert _same_weights(model, averaged)


def test_average_is_the_element_wise_mean(tmp_path, config):
    first, second = build_model(Stage.MT, config, seed=2), build_model(Stage.MT, config, seed=3)
    save_checkpoint(first, tmp_path / "a", seed=2)
    save_checkpoint(second, tmp_path / "b", seed=3)
    average_checkpoints([tmp_path / "a", tmp_path / "b"], tmp_path / "avg")
    _, tensors = read_tensors(tmp_path / "avg")
    expected = (first.shared.output.weight.detach().numpy() + second.shared.output.weight.detach().numpy()) / 2
    assert np.allclose(tensors["shared.output.weight"], expected, atol=1e-7)

    # averaging an average with itself changes nothing
    average_checkpoints([tmp_path / "avg", tmp_path / "avg"], tmp_path / "again")
    _, again = read_tensors(tmp_path / "again")
    assert all(np.array_equal(again[name], tensors[name]) for name in tensors)


def test_average_refuses_mismatched_layouts(tmp_path, config):
    save_checkpoint(build_model(Stage.MT, config, seed=2), tmp_path / "mt", seed=2)
    save_checkpoint(build_model(Stage.ASR, config, seed=2), tmp_path / "asr", seed=2)
    with pytest.raises(CheckpointError):
        average_checkpoints([tmp_path / "mt", tmp_path / "asr"], tmp_path / "avg")
    with pytest.raises(CheckpointError):
        average_checkpoints([], tmp_path / "avg")


def test_missing_or_truncated_checkpoints_are_reported(tmp_path, config):
    with pytest.raises(CheckpointError):
        read_manifest(tmp_path / "nowhere")
    save_checkpoint(build_model(Stage.ASR, config, seed=1), tmp_path / "ckpt", seed=1)
    payload = tmp_path / "ckpt" / "payload.bin"
    payload.write_bytes(payload.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        read_tensors(tmp_path / "ckpt")
