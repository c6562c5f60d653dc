import numpy as np
import pytest

from swishbert.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from swishbert.errors import CheckpointError
from swishbert.gradcheck import tiny_config
from swishbert.model import EncoderModel, ModelConfig, count_params, encoder_forward
from swishbert.training import AdamState, TrainHyper, train_loop
from test_training import toy_batches


@pytest.fixture
def trained(tmp_path):
    model = EncoderModel(tiny_config(), seed=3)
    state = AdamState()
    list(train_loop(model, toy_batches(), TrainHyper(warmup_steps=1, total_steps=3, batch_size=4), state))
    path = save_checkpoint(model, state, tmp_path / "c.swrn")
    return model, state, path


def test_round_trip_bitwise(trained, rng):
    model, state, path = trained
    m2, s2 = load_checkpoint(path)
    for name, t in model.named_parameters().items():
        assert np.array_equal(t.data, m2.named_parameters()[name].data), name
    assert s2.step == state.step == 3
    for name in state.m:
        assert np.array_equal(state.m[name], s2.m[name]) and np.array_equal(state.v[name], s2.v[name])
    ids = rng.integers(0, 11, (2, 5))
    assert np.array_equal(encoder_forward(model, ids).data, encoder_forward(m2, ids).data)


def test_without_optimizer(tmp_path):
    model = EncoderModel(tiny_config(variant="orig"))
    m2, s2 = load_checkpoint(save_checkpoint(model, None, tmp_path / "x.swrn"))
    assert s2 is None and m2.config == model.config


def test_config_echo(trained):
    _, _, path = trained
    load_checkpoint(path, expect_config=tiny_config())
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect_config=tiny_config(num_layers=3))


@pytest.mark.parametrize("cut", [3, 10, 50, -1, -17])
def test_truncated(trained, cut):
    _, _, path = trained
    raw = path.read_bytes()
    path.write_bytes(raw[:cut])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_bad_magic_and_version(trained):
    _, _, path = trained
    raw = bytearray(path.read_bytes())
    assert raw[:4] == MAGIC
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_trailing_garbage(trained):
    _, _, path = trained
    path.write_bytes(path.read_bytes() + b"\x01\x02")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.swrn")
    assert issubclass(CheckpointError, OSError)


def test_size_is_params_times_four(tmp_path):
    cfg = ModelConfig()
    path = save_checkpoint(EncoderModel(cfg), None, tmp_path / "desk.swrn")
    n = count_params(cfg)
    overhead = path.stat().st_size - 4 * n
    assert 0 < overhead < 8192
