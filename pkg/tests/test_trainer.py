import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gdip.checkpoint import load_checkpoint, save_checkpoint
from gdip.datagen import load_dataset, write_dataset
from gdip.model import ModelConfig, predict, strip_regularizer
from gdip.trainer import (LOG_FIELDS, NonFiniteGradient, TrainConfig, condition_split,
                          cosine_lr, load_model, load_training_data, sgd_step, train, validate)

TINY = dict(image_size=32, base_channels=2, embedding_dim=8, batch_size=8, lr_max=0.01,
            momentum=0.9)


@pytest.fixture(scope="module")
def data_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    write_dataset(root / "train", 32, "fog", seed=1, size=32)
    write_dataset(root / "val", 8, "fog", seed=2, size=32)
    return root


def tiny(data_dirs, tmp_path, **kw):
    cfg = dict(TINY, train_data=str(data_dirs / "train"), val_data=str(data_dirs / "val"),
               run_dir=str(tmp_path / "run"), epochs=2)
    cfg.update(kw)
    return TrainConfig(**cfg)


class TestCosine:
    def test_endpoints(self):
        assert cosine_lr(0, 100) == pytest.approx(1e-4)
        assert cosine_lr(100, 100) == pytest.approx(1e-6)
        assert cosine_lr(50, 100) == pytest.approx(5.05e-5)

    def test_errors(self):
        with pytest.raises(ValueError):
            cosine_lr(0, 0)
        with pytest.raises(ValueError):
            cosine_lr(11, 10)

    @given(st.integers(1, 500), st.data())
    def test_non_increasing(self, total, data):
        s = data.draw(st.integers(0, total - 1))
        assert cosine_lr(s + 1, total) <= cosine_lr(s, total)


class TestSgd:
    def test_zero_gradient(self):
        p = {"a.w": np.array([1.0, -2.0])}
        assert np.array_equal(sgd_step(p, {"a.w": np.zeros(2)}, 0.1)["a.w"], p["a.w"])

    def test_weight_decay(self):
        out = sgd_step({"a.w": np.array(1.0)}, {"a.w": np.array(0.0)}, 0.1, 0.5)
        assert out["a.w"] == pytest.approx(0.95)

    def test_bias_not_decayed(self):
        out = sgd_step({"a.b": np.array(1.0)}, {"a.b": np.array(0.0)}, 0.1, 0.5)
        assert out["a.b"] == 1.0

    def test_quadratic_bowl(self):
        p = {"x.w": np.array(3.0)}
        for _ in range(100):
            p = sgd_step(p, {"x.w": 2 * p["x.w"]}, 0.1)
        assert abs(p["x.w"]) < 1e-4
        assert p["x.w"] == pytest.approx(3.0 * 0.8 ** 100)

    def test_rejects_nonfinite(self):
        with pytest.raises(NonFiniteGradient):
            sgd_step({"a.w": np.ones(2)}, {"a.w": np.array([1.0, np.nan])}, 0.1)

    def test_inputs_untouched(self):
        p = {"a.w": np.ones(2)}
        sgd_step(p, {"a.w": np.ones(2)}, 0.1, momentum=0.9, velocity={})
        assert np.array_equal(p["a.w"], np.ones(2))


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.batch_size, c.epochs, c.lr_min, c.lr_max, c.weight_decay) == \
            (6, 80, 1e-6, 1e-4, 5e-4)
        assert c.momentum == 0.0 and c.alpha == 1e-4

    def test_invalid(self):
        for bad in (dict(lr_min=1.0, lr_max=0.1), dict(batch_size=0), dict(epochs=0),
                    dict(variant="yolo"), dict(mode="Softmax"), dict(momentum=1.0)):
            with pytest.raises(ValueError):
                TrainConfig(**bad)
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"epoch": 3})

    def test_reconstruction_flags(self):
        assert TrainConfig(variant="regularizer").uses_reconstruction
        assert not TrainConfig(variant="regularizer", alpha=0.0).uses_reconstruction
        assert not TrainConfig(variant="baseline").uses_reconstruction
        assert not TrainConfig(variant="gdip").uses_reconstruction
        assert TrainConfig(variant="gdip", aux_reconstruction=True).uses_reconstruction


@pytest.mark.parametrize("variant", ["baseline", "gdip", "mgdip", "regularizer"])
def test_two_epoch_contract(variant, data_dirs, tmp_path):
    tcfg = tiny(data_dirs, tmp_path, variant=variant)
    result = train(tcfg)
    run = result.run_dir
    with open(run / "log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and tuple(rows[0]) == LOG_FIELDS
    cfg, params, meta = load_model(run / "final.ckpt")
    assert cfg == tcfg.model
    again = validate(tcfg, params, load_dataset(data_dirs / "val", 32))
    assert again.loss == float(rows[-1]["val_loss"])
    assert again.map50 == float(rows[-1]["val_map"])
    assert math.isfinite(float(rows[-1]["l_total"]))
    meta_file = json.loads((run / "metadata.json").read_text())
    assert meta_file["seed"] == 0 and meta_file["config"]["variant"] == variant
    assert (run / "best.ckpt").exists() and (run / "steps.csv").exists()
    # lr trace follows the schedule exactly, one entry per optimizer step
    total = meta_file["total_steps"]
    assert result.lr_trace == [cosine_lr(s, total, tcfg.lr_min, tcfg.lr_max)
                               for s in range(total)]


def test_baseline_ignores_alpha(data_dirs, tmp_path):
    a = train(tiny(data_dirs, tmp_path / "a", variant="baseline", epochs=1, alpha=0.5))
    b = train(tiny(data_dirs, tmp_path / "b", variant="baseline", epochs=1, alpha=0.0))
    assert (a.run_dir / "log.csv").read_bytes() == (b.run_dir / "log.csv").read_bytes()
    assert a.final["l_reg"] == 0.0


def test_bit_identical_logs(data_dirs, tmp_path):
    a = train(tiny(data_dirs, tmp_path / "a", variant="gdip", epochs=1))
    b = train(tiny(data_dirs, tmp_path / "b", variant="gdip", epochs=1))
    assert (a.run_dir / "log.csv").read_bytes() == (b.run_dir / "log.csv").read_bytes()
    assert (a.run_dir / "steps.csv").read_bytes() == (b.run_dir / "steps.csv").read_bytes()


def test_regularizer_needs_pairs(data_dirs, tmp_path):
    root = tmp_path / "nopairs"
    write_dataset(root, 4, "fog", seed=0, size=32)
    for f in (root / "clear").iterdir():
        f.unlink()
    tcfg = tiny(data_dirs, tmp_path, variant="regularizer", train_data=str(root))
    with pytest.raises(FileNotFoundError):
        load_training_data(tcfg)


def test_stripped_regularizer_checkpoint(data_dirs, tmp_path, rng):
    result = train(tiny(data_dirs, tmp_path, variant="regularizer", epochs=1))
    cfg, params, _ = load_model(result.run_dir / "final.ckpt")
    plain = strip_regularizer(params)
    assert not any(k.startswith("reg") for k in plain)
    base_cfg = ModelConfig(**{**cfg.to_dict(), "variant": "baseline"})
    imgs = rng.uniform(size=(2, 32, 32, 3))
    np.testing.assert_array_equal(predict(base_cfg, plain, imgs), predict(cfg, params, imgs))


def test_checkpoint_roundtrip(tmp_path, rng):
    params = {"a.w": rng.normal(size=(3, 2)), "b": np.array(2.5)}
    save_checkpoint(tmp_path / "x.ckpt", params, {"k": 1}, {"m": "v"})
    assert (tmp_path / "x.ckpt").read_bytes().startswith(b"GDIP1\n")
    back, config, meta = load_checkpoint(tmp_path / "x.ckpt")
    assert config == {"k": 1} and meta == {"m": "v"}
    for k in params:
        assert np.array_equal(back[k], params[k])
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")


def test_condition_split(data_dirs):
    data = load_dataset(data_dirs / "val")
    assert condition_split(data) == {"fog": list(range(8))}
