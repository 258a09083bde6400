"""Losses, Adam, the training loop, and cross-validation."""

import json

import numpy as np
import pytest

import cardioseg.train as train_mod
from _gradcheck import check_grads
from cardioseg.model import EdgeAttentionUNet, NetworkConfig
from cardioseg.phantom import generate_dataset, generate_phantom
from cardioseg.serialize import load_checkpoint
from cardioseg.tensor import NumericError, Tape, Tensor
from cardioseg.train import (
    Adam,
    TrainConfig,
    ce_loss,
    cross_validate,
    dice_loss,
    mean_foreground_dsc,
    train,
)


def tiny_config(**overrides):
    base = dict(height=32, width=32, depth=2, base_channels=2,
                vit_layers=1, embed_dim=8, heads=2, patch_size=2)
    base.update(overrides)
    return NetworkConfig(**base)


def tiny_model(seed=0, **overrides):
    return EdgeAttentionUNet(tiny_config(**overrides), np.random.default_rng(seed))


def phantoms(n, seed=0):
    return generate_dataset(n, seed=seed, extents=(32, 32))


# -- config ------------------------------------------------------------------


def test_config_roundtrip_and_unknown_key():
    cfg = TrainConfig(epochs=3, batch_size=2)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="momentum"):
        TrainConfig.from_dict({"epochs": 1, "momentum": 0.9})


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(folds=1).validate()
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(loss_mode="focal").validate()


# -- Adam ---------------------------------------------------------------------


def test_adam_first_step_magnitude():
    p = Tensor([1.0, 2.0])
    p.grad = np.array([0.5, -0.25])
    Adam([("p", p)], lr=0.01).step()
    # First step: m_hat = g, v_hat = g*g, so the move is lr*sign(g).
    np.testing.assert_allclose(p.data, [1.0 - 0.01, 2.0 + 0.01], atol=1e-8)


def test_adam_zero_grad_is_noop():
    p = Tensor([3.0, -4.0])
    p.grad = np.zeros(2)
    Adam([("p", p)]).step()
    np.testing.assert_array_equal(p.data, [3.0, -4.0])


def test_adam_missing_grad_names_param():
    p = Tensor([1.0])
    with pytest.raises(ValueError, match="head.bias"):
        Adam([("head.bias", p)]).step()


def test_adam_identical_params_move_identically():
    a, b = Tensor([1.0, -2.0]), Tensor([1.0, -2.0])
    g = np.array([0.3, 0.7])
    opt = Adam([("a", a), ("b", b)], lr=0.05)
    for _ in range(5):
        a.grad = g.copy()
        b.grad = g.copy()
        opt.step()
    np.testing.assert_array_equal(a.data, b.data)


def test_adam_optimizes_quadratic():
    x = Tensor([5.0], requires_grad=True)
    opt = Adam([("x", x)], lr=0.1)
    first = (x.data[0] - 3.0) ** 2
    for _ in range(150):
        with Tape():
            loss = ((x - 3.0) * (x - 3.0)).sum()
            loss.backward()
        opt.step()
        opt.zero_grad()
    assert (x.data[0] - 3.0) ** 2 < 1e-3 < first


# -- losses --------------------------------------------------------------------


def test_ce_uniform_logits_is_log_k():
    logits = Tensor(np.zeros((4, 3, 3)))
    labels = np.random.default_rng(0).integers(0, 4, (3, 3))
    assert abs(ce_loss(logits, labels).item() - np.log(4.0)) < 1e-12


def test_ce_confident_correct_is_near_zero():
    labels = np.array([[0, 1], [2, 3]])
    logits_np = np.full((4, 2, 2), -50.0)
    for y in range(2):
        for x in range(2):
            logits_np[labels[y, x], y, x] = 50.0
    assert ce_loss(Tensor(logits_np), labels).item() < 1e-12


def test_ce_rejects_bad_labels():
    logits = Tensor(np.zeros((3, 2, 2)))
    with pytest.raises(ValueError, match="outside"):
        ce_loss(logits, np.full((2, 2), 5))
    with pytest.raises(ValueError, match="extents"):
        ce_loss(logits, np.zeros((3, 3), dtype=int))


def test_ce_gradient_matches_softmax_minus_onehot():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.normal(0, 2, (3, 2, 2)), requires_grad=True)
    labels = rng.integers(0, 3, (2, 2))
    with Tape():
        ce_loss(logits, labels).backward()
    z = logits.data
    p = np.exp(z - z.max(axis=0)) / np.exp(z - z.max(axis=0)).sum(axis=0)
    onehot = (labels[None] == np.arange(3)[:, None, None]).astype(float)
    np.testing.assert_allclose(logits.grad, (p - onehot) / 4.0, atol=1e-12)


def test_ce_gradient_finite_difference():
    rng = np.random.default_rng(4)
    logits = Tensor(rng.normal(0, 1, (2, 2, 2)), requires_grad=True)
    labels = rng.integers(0, 2, (2, 2))
    check_grads(lambda t: ce_loss(t, labels), [logits], tol=1e-6)


def test_dice_perfect_prediction_is_zero():
    labels = np.array([[0, 1], [2, 3]])
    onehot = (labels[None] == np.arange(4)[:, None, None]).astype(float)
    assert dice_loss(Tensor(onehot), labels).item() == 0.0


def test_dice_uniform_probs_oracle():
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 4, (6, 6))
    probs = Tensor(np.full((4, 6, 6), 0.25))
    # Hand-computed soft ratio per foreground class.
    want = 0.0
    for cls in (1, 2, 3):
        t = float((labels == cls).sum())
        ratio = (2 * 0.25 * t + 1.0) / (0.25 * 36 + t + 1.0)
        want += ratio / 3.0
    assert abs(dice_loss(probs, labels).item() - (1.0 - want)) < 1e-12


def test_dice_gradient_finite_difference():
    rng = np.random.default_rng(6)
    raw = Tensor(rng.normal(0, 1, (3, 2, 2)), requires_grad=True)
    labels = rng.integers(0, 3, (2, 2))
    from cardioseg.layers import softmax
    check_grads(lambda t: dice_loss(softmax(t, axis=0), labels), [raw], tol=1e-5)


def test_batch_gradient_is_mean_of_sample_gradients():
    model = tiny_model(seed=1)
    samples = phantoms(2, seed=3)
    cache = train_mod._prepare_cache(samples, 2, 4)

    per_sample = []
    for s, c in zip(samples, cache):
        for _, p in model.named_params():
            p.grad = None
        with Tape():
            train_mod._sample_loss(model, s, c, "ce").backward()
        per_sample.append({n: p.grad.copy() for n, p in model.named_params()})

    for _, p in model.named_params():
        p.grad = None
    with Tape():
        total = (train_mod._sample_loss(model, samples[0], cache[0], "ce")
                 + train_mod._sample_loss(model, samples[1], cache[1], "ce"))
        (total / 2.0).backward()

    for name, p in model.named_params():
        want = 0.5 * (per_sample[0][name] + per_sample[1][name])
        np.testing.assert_allclose(p.grad, want, atol=1e-10)


# -- training loop ---------------------------------------------------------------


def small_cfg(**overrides):
    base = dict(epochs=2, batch_size=2, learning_rate=0.003, folds=2, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def test_train_log_structure():
    model = tiny_model(seed=2)
    data = phantoms(4, seed=1)
    result = train(model, data[:3], data[3:], small_cfg())
    assert [e["epoch"] for e in result.log] == [0, 1, 2]
    assert result.log[0]["train_loss"] is None
    assert isinstance(result.log[0]["val_dsc"], float)
    assert all(isinstance(e["train_loss"], float) for e in result.log[1:])

    vals = [e["val_dsc"] for e in result.log]
    assert result.best_val_dsc == max(vals)
    assert result.best_epoch == vals.index(max(vals))


def test_train_deterministic(tmp_path):
    data = phantoms(4, seed=2)
    logs = []
    ckpts = []
    for run in range(2):
        model = tiny_model(seed=7)
        log_path = tmp_path / f"run{run}.jsonl"
        result = train(model, data[:3], data[3:], small_cfg(),
                       log_path=str(log_path))
        logs.append(log_path.read_bytes())
        ckpts.append(result.best_checkpoint)
    assert logs[0] == logs[1]
    assert ckpts[0] == ckpts[1]


def test_train_writes_checkpoint_and_log(tmp_path):
    model = tiny_model(seed=3)
    data = phantoms(4, seed=4)
    ckpt = tmp_path / "best.ckpt"
    log = tmp_path / "log.jsonl"
    result = train(model, data[:3], data[3:], small_cfg(epochs=1),
                   checkpoint_path=str(ckpt), log_path=str(log))
    assert ckpt.read_bytes() == result.best_checkpoint
    lines = [json.loads(l) for l in log.read_text().splitlines()]
    assert lines == result.log


def test_checkpoint_restores_identical_val_dsc():
    model = tiny_model(seed=4)
    data = phantoms(4, seed=5)
    result = train(model, data[:3], data[3:], small_cfg(epochs=1))
    restored = load_checkpoint(result.best_checkpoint)
    assert mean_foreground_dsc(restored, data[3:]) == result.best_val_dsc


def test_train_without_validation_set():
    model = tiny_model(seed=5)
    result = train(model, phantoms(2, seed=6), [], small_cfg(epochs=1))
    assert result.best_epoch == 0
    assert result.best_val_dsc is None
    assert result.log[0]["val_dsc"] is None


def test_train_argument_errors():
    model = tiny_model()
    with pytest.raises(ValueError, match="empty"):
        train(model, [], [], small_cfg())
    with pytest.raises(ValueError, match="exceeds"):
        train(model, phantoms(2), [], small_cfg(batch_size=5))


def test_non_finite_loss_names_location(monkeypatch):
    model = tiny_model(seed=6)
    data = phantoms(2, seed=7)

    def poisoned(model, sample, cache, loss_mode):
        return Tensor(np.nan).sum()

    monkeypatch.setattr(train_mod, "_sample_loss", poisoned)
    with pytest.raises(NumericError, match=r"epoch 1, batch 0"):
        train(model, data, [], small_cfg())


def test_nan_parameter_names_stage():
    model = tiny_model(seed=8)
    model.head.bias.data[:] = np.nan
    data = phantoms(1, seed=8)
    with pytest.raises(NumericError, match="output head"):
        train(model, data, [], small_cfg(batch_size=1))


# -- cross-validation --------------------------------------------------------------


def test_cross_validate_summary(tmp_path):
    data = phantoms(4, seed=9)
    cfg = small_cfg(epochs=1, folds=2)
    results, summary = cross_validate(tiny_config(), data, cfg,
                                      out_dir=str(tmp_path))
    assert len(results) == 2
    assert summary["fold_dsc"] == [r.best_val_dsc for r in results]
    assert summary["mean_dsc"] == pytest.approx(np.mean(summary["fold_dsc"]))
    assert summary["min_dsc"] == min(summary["fold_dsc"])
    assert summary["max_dsc"] == max(summary["fold_dsc"])
    for i in range(2):
        assert (tmp_path / f"fold{i}.ckpt").exists()
        assert (tmp_path / f"fold{i}_log.jsonl").exists()


def test_cross_validate_fresh_init_per_fold(tmp_path):
    # Folds must not share weights: their initial checkpoints differ.
    data = phantoms(4, seed=10)
    cfg = small_cfg(epochs=1, folds=2)
    results, _ = cross_validate(tiny_config(), data, cfg)
    a = load_checkpoint(results[0].best_checkpoint)
    b = load_checkpoint(results[1].best_checkpoint)
    pa = dict(a.named_params())
    pb = dict(b.named_params())
    assert any(not np.array_equal(pa[n].data, pb[n].data) for n in pa)
