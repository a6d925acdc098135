import struct

import numpy as np
import pytest

from flowmix import checkpoint, experiment
from flowmix.config import parse_config
from flowmix.errors import ContractError, FormatError
from flowmix.mixture import responsibilities

FLOW = [{"type": "coupling", "hidden": [4], "repeat": 2}, {"type": "plu"}, {"type": "prelu"},
        {"type": "batchnorm"}, {"type": "maf", "hidden": [4]}]


def config(**training):
    return parse_config({
        "seed": 3,
        "dataset": {"name": "pinwheel", "n_per_class": 16, "classes": 3},
        "model": {"components": 3, "posterior_hidden": [4], "flow": FLOW},
        "training": {"mode": "unsupervised", "epochs": 2, "batch_size": 16,
                     "learning_rate": 0.01, **training},
    })


@pytest.fixture(scope="module")
def trained():
    return experiment.train(config())


def probe(model):
    x = np.random.default_rng(99).normal(size=(32, 2)) * 1.5
    lp = model.component_log_probs(x).value
    return lp, responsibilities(model, x)


def test_round_trip_is_bitwise(trained, tmp_path):
    path = tmp_path / "m.vmnf"
    checkpoint.save(path, config(), trained.model, trained.optimizer, epoch=2, rng=trained.rng)
    model, ckpt = checkpoint.load(path)
    for a, b in zip(probe(trained.model), probe(model)):
        assert a.tobytes() == b.tobytes()
    assert ckpt.meta["epoch"] == 2 and ckpt.dim == 2
    assert ckpt.config == config()
    names = set(ckpt.tensors)
    assert {p.name for p in trained.model.params} <= names
    assert any(n.startswith("buffer.") for n in names)
    assert "adam.t" in names


def test_rng_state_restored(trained, tmp_path):
    path = tmp_path / "m.vmnf"
    state = trained.rng.bit_generator.state
    checkpoint.save(path, config(), trained.model, rng=trained.rng)
    rng = checkpoint.restore_rng(checkpoint.read_checkpoint(path))
    ref = np.random.default_rng()
    ref.bit_generator.state = state
    assert rng.random() == ref.random()


def test_header_layout(trained, tmp_path):
    path = tmp_path / "m.vmnf"
    checkpoint.save(path, config(), trained.model)
    raw = path.read_bytes()
    assert raw[:4] == b"VMNF"
    assert struct.unpack("<I", raw[4:8])[0] == 1


def test_rewrite_is_byte_identical(trained, tmp_path):
    checkpoint.save(tmp_path / "a", config(), trained.model, trained.optimizer, 2, trained.rng)
    ckpt = checkpoint.read_checkpoint(tmp_path / "a")
    checkpoint.write_checkpoint(tmp_path / "b", ckpt)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + struct.pack("<I", 2) + b[8:],
    lambda b: b[:-3],
    lambda b: b + b"\0",
    lambda b: b[:12] + b"\xff" * 8 + b[20:],
])
def test_corruption_detected(trained, tmp_path, mutate):
    path = tmp_path / "m.vmnf"
    checkpoint.save(path, config(), trained.model)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError):
        checkpoint.read_checkpoint(path)


def test_missing_file():
    with pytest.raises(FormatError):
        checkpoint.read_checkpoint("/nonexistent/model.vmnf")


def test_missing_tensor(trained, tmp_path):
    checkpoint.save(tmp_path / "m", config(), trained.model)
    ckpt = checkpoint.read_checkpoint(tmp_path / "m")
    ckpt.tensors.pop(next(iter(ckpt.tensors)))
    with pytest.raises(ContractError):
        checkpoint.restore_model(ckpt)


def test_untrained_checkpoint_matches_initialisation(tmp_path):
    cfg = config(epochs=0)
    result = experiment.run(cfg, tmp_path)
    model, _ = checkpoint.load(tmp_path / "model.vmnf")
    for a, b in zip(probe(result.model), probe(model)):
        assert a.tobytes() == b.tobytes()
    assert (tmp_path / "metrics.csv").read_text().splitlines() == [",".join(experiment.METRIC_COLUMNS)]
