import math
from dataclasses import replace

import numpy as np
import pytest

from connalign import reference as ref
from connalign.autodiff import Tensor
from connalign.data import stack_batch
from connalign.errors import CheckpointError, ConfigError, ShapeError
from connalign.text import build_vocab
from connalign.training import (
    OptimizerState,
    TrainConfig,
    adamw_step,
    decays,
    load_checkpoint,
    save_checkpoint,
    tokenize_records,
    train,
)

TINY = dict(learning_rate=1e-3, epochs=2, dim=8, layers=1, heads=2, m_max=40, seed=0)


def params_of(**arrays):
    return {k: Tensor(np.array(v, dtype=float), requires_grad=True) for k, v in arrays.items()}


def test_zero_gradient_no_decay_is_identity():
    p = params_of(w=[[1.0, -2.0]])
    st = OptimizerState.zeros_like(p)
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.0)
    for _ in range(3):
        adamw_step(p, {"w": np.zeros((1, 2))}, st, cfg)
    np.testing.assert_array_equal(p["w"].data, [[1.0, -2.0]])


def test_decay_is_decoupled():
    p = params_of(w=[2.0, -4.0])
    st = OptimizerState.zeros_like(p)
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.5)
    adamw_step(p, {"w": np.zeros(2)}, st, cfg)
    np.testing.assert_array_equal(p["w"].data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.5))


def test_first_step_is_minus_lr():
    p = params_of(w=[0.0])
    st = OptimizerState.zeros_like(p)
    cfg = TrainConfig(learning_rate=1e-3, weight_decay=0.0)
    adamw_step(p, {"w": np.ones(1)}, st, cfg)
    assert p["w"].data[0] == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-18)


def test_matches_reference_trajectory(rng):
    theta = rng.standard_normal(3)
    grads = rng.standard_normal((6, 3))
    cfg = TrainConfig(learning_rate=0.05, weight_decay=0.1, betas=(0.8, 0.95), adam_eps=1e-6)
    want = np.array([ref.adamw(float(theta[i]), [float(g) for g in grads[:, i]], 0.05, (0.8, 0.95), 1e-6, 0.1)
                     for i in range(3)]).T
    p = params_of(w=theta)
    st = OptimizerState.zeros_like(p)
    for k, g in enumerate(grads):
        adamw_step(p, {"w": g}, st, cfg)
        assert np.abs(p["w"].data - want[k]).max() < 1e-14


def test_no_decay_names():
    assert not decays("text.layers.0.ln1.gamma") and not decays("connectome.class_token")
    assert decays("head.fc1.weight")


def test_adamw_shape_mismatch():
    p = params_of(w=[1.0, 2.0])
    with pytest.raises(ShapeError):
        adamw_step(p, {"w": np.zeros(3)}, OptimizerState.zeros_like(p), TrainConfig())


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(train_fraction=1.0)
    cfg = TrainConfig(**TINY)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_smoke_two_subjects(small_records):
    pair = [next(r for r in small_records if r.label == lab) for lab in ("NC", "MCI")]
    _, hist = train(replace(TrainConfig(**TINY), epochs=1), pair)
    assert len(hist) == 1
    assert all(math.isfinite(hist[0][k]) for k in ("L", "L_cl", "L_sl", "L_cls"))
    assert hist[0]["eval_acc"] is None


def test_history_bit_identical(small_records):
    _, a = train(TrainConfig(**TINY), small_records[:16], small_records[16:24])
    _, b = train(TrainConfig(**TINY), small_records[:16], small_records[16:24])
    assert a == b
    assert [h["epoch"] for h in a] == [1, 2]


def test_no_cl_history(small_records):
    _, hist = train(replace(TrainConfig(**TINY), use_cl=False), small_records[:16])
    assert all(h["L_cl"] == 0.0 for h in hist)
    assert all(h["L"] == pytest.approx(h["L_sl"] + h["L_cls"], abs=1e-12) for h in hist)


@pytest.mark.parametrize("flag", ["use_image", "use_text"])
def test_single_modality(small_records, flag):
    ckpt, hist = train(replace(TrainConfig(**TINY), **{flag: False}), small_records[:16])
    assert all(h["L_cl"] == 0.0 and h["L_sl"] == 0.0 and h["L"] == h["L_cls"] for h in hist)
    model = ckpt.build_model()
    assert (model.connectome is None) == (flag == "use_image")
    assert (model.text is None) == (flag == "use_text")


def test_vocab_from_train_only(small_records):
    ckpt, _ = train(TrainConfig(**TINY), small_records[:16], small_records[16:])
    assert ckpt.vocab.tokens == build_vocab([r.report.raw_text for r in small_records[:16]]).tokens


def test_n_mismatch_config(small_records):
    with pytest.raises(ConfigError):
        train(replace(TrainConfig(**TINY), n_regions=12), small_records[:4])


@pytest.fixture(scope="module")
def checkpoint(small_records):
    return train(TrainConfig(**TINY), small_records[:16])[0]


def test_checkpoint_round_trip(checkpoint, small_records, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(checkpoint, path)
    back = load_checkpoint(path, n_regions=16)
    assert back.config == checkpoint.config and back.vocab.tokens == checkpoint.vocab.tokens
    for name, arr in checkpoint.params.items():
        assert back.params[name].tobytes() == arr.tobytes()
    assert back.optimizer.step == checkpoint.optimizer.step
    batch = stack_batch(tokenize_records(small_records[16:24], back.vocab, back.config.m_max))
    a = checkpoint.build_model().forward(batch).logits.data
    b = back.build_model().forward(batch).logits.data
    assert a.tobytes() == b.tobytes()
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_truncated(checkpoint, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(checkpoint, path)
    raw = path.read_bytes()
    for cut in (10, len(raw) // 2, len(raw) - 1):
        (tmp_path / "t.ckpt").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")


def test_checkpoint_corrupt_and_version(checkpoint, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(checkpoint, path)
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    (tmp_path / "c.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "c.ckpt")
    (tmp_path / "v.ckpt").write_bytes(path.read_bytes().replace(b"CHECKPOINT 1\n", b"CHECKPOINT 9\n", 1))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "x.ckpt").write_bytes(b"hello\nworld\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_checkpoint_n_mismatch(checkpoint, tmp_path):
    save_checkpoint(checkpoint, tmp_path / "m.ckpt")
    with pytest.raises(ShapeError, match="N=16"):
        load_checkpoint(tmp_path / "m.ckpt", n_regions=12)
