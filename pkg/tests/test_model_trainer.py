from __future__ import annotations

import numpy as np
import pytest

from shoring.diffcore import Tensor
from shoring.encode import EntityLayout, encode_dataset
from shoring.errors import ConfigError, ContractViolation, VersionError
from shoring.model import ARCHITECTURES, Model, ModelSpec, orthogonal_init
from shoring.symbolic import label_dataset, task_catalog
from shoring.trainer import (AdamState, Checkpoint, TrainConfig, adam_step, evaluate, grid_search, load_checkpoint,
                             model_checkpoint, model_from_checkpoint, save_checkpoint, train)

SMALL = dict(k=4, n_terms=4, emb_dim=2, d_s=4, heads=2, entity_width=3, field_width=3, cond_width=4, hidden=8)


def _model(arch, encoder, seed=0, **kw):
    return Model(ModelSpec(arch, **{**SMALL, **kw}), encoder, seed=seed)


@pytest.fixture(scope="module")
def targets(tiny_dataset):
    return label_dataset(task_catalog()["sum"], tiny_dataset, np.arange(30)).standardized


# ---------------------------------------------------------------- init and Adam


def test_orthogonal_square_and_wide():
    q = orthogonal_init((4, 4), 3)
    np.testing.assert_allclose(q.T @ q, np.eye(4), atol=1e-8)
    w = orthogonal_init((2, 6), 3)
    np.testing.assert_allclose(w @ w.T, np.eye(2), atol=1e-8)
    np.testing.assert_array_equal(orthogonal_init((5, 3), 1), orthogonal_init((5, 3), 1))
    with pytest.raises(ContractViolation):
        orthogonal_init((2, 2, 2, 2), 0)


def test_adam_zero_gradient_keeps_params():
    p = {"w": Tensor(np.array([1.0, -2.0]), True)}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), 1, TrainConfig(learning_rate=0.1))
    assert p["w"].data.tolist() == [1.0, -2.0]


def test_adam_first_step_is_lr_sign():
    p = {"w": Tensor(np.array([1.0, 1.0, 1.0]), True)}
    adam_step(p, {"w": np.array([3.0, -0.5, 1e-3])}, AdamState(), 1, TrainConfig(learning_rate=0.01))
    np.testing.assert_allclose(p["w"].data, [0.99, 1.01, 0.99], rtol=1e-5)


def test_adam_rejects_bad_step_and_shape():
    p = {"w": Tensor(np.zeros(2), True)}
    with pytest.raises(ContractViolation):
        adam_step(p, {"w": np.zeros(2)}, AdamState(), 0, TrainConfig())
    with pytest.raises(ContractViolation):
        adam_step(p, {"w": np.zeros(3)}, AdamState(), 1, TrainConfig())


def test_train_config_validation():
    for bad in (dict(learning_rate=-1), dict(batch_size=0), dict(loss="l1"), dict(patience=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


# ---------------------------------------------------------------- model


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_forward_shapes(arch, tiny_encoder, tiny_encoded):
    model = _model(arch, tiny_encoder)
    out = model.forward(tiny_encoded.subset(slice(0, 5)))
    assert out.shape == (5,) and np.all(np.isfinite(out.data))


def test_ssa_stacks_two_layers(tiny_encoder):
    assert len(_model("SSA", tiny_encoder).attn_cfgs) == 2
    assert len(_model("SA", tiny_encoder).attn_cfgs) == 1


def test_unknown_architecture():
    with pytest.raises(ConfigError):
        ModelSpec("LSTM")


def test_tracked_fields_remap(tiny_encoder, tiny_encoded):
    """A model tracking fields (0, 3) reads full-layout data through the narrowed layout."""
    model = _model("SHORING", tiny_encoder, tracked_fields=(0, 3))
    rows = model.entity_rows(tiny_encoded, 0)
    layout = EntityLayout.from_stats(tiny_encoder.stats, (0, 3))
    full = EntityLayout.from_stats(tiny_encoder.stats)
    ent = tiny_encoded.entities[:, 0]
    valid = ent[..., 0] >= 0
    np.testing.assert_array_equal(rows[..., 0][valid], ent[..., 0][valid])
    np.testing.assert_array_equal(rows[..., 1][valid], ent[..., 3][valid] - full.offsets[3] + layout.offsets[1])
    assert np.all(rows[~valid] == -1) and rows.max() < layout.d_p
    assert np.all(np.isfinite(model.forward(tiny_encoded.subset(slice(0, 4))).data))


def test_head_gradients(tiny_encoder, tiny_encoded):
    from shoring import diffcore as dc
    from shoring.diffcore import gradient_check
    model = _model("SA", tiny_encoder, hidden=3)
    f = Tensor(np.random.default_rng(0).normal(size=(2, model.seq_width)))
    head = [model.params[n] for n in model.params if n.startswith("head.")]
    rep = gradient_check(lambda: dc.sum_(model.head(f)), head)
    assert rep.passed, rep.max_rel_error


# ---------------------------------------------------------------- training


def test_lr_zero_keeps_losses_constant(tiny_encoder, tiny_encoded, targets):
    model = _model("SA", tiny_encoder)
    before = model.state()
    res = train(model, tiny_encoded, targets, TrainConfig(learning_rate=0.0, batch_size=8, max_epochs=3))
    assert len({e.val_loss for e in res.log}) == 1
    for n, v in before.items():
        np.testing.assert_array_equal(model.state()[n], v)


def test_one_epoch_changes_checkpoint(tiny_encoder, tiny_encoded, targets):
    a, b = _model("SHORIN", tiny_encoder), _model("SHORIN", tiny_encoder)
    train(a, tiny_encoded, targets, TrainConfig(learning_rate=1e-2, batch_size=8, max_epochs=0))
    res = train(b, tiny_encoded, targets, TrainConfig(learning_rate=1e-2, batch_size=8, max_epochs=1, patience=5))
    assert res.best_epoch == 1
    assert model_checkpoint(a).digest() != model_checkpoint(b).digest()


def test_training_is_deterministic(tiny_encoder, tiny_encoded, targets):
    cfg = TrainConfig(learning_rate=1e-2, batch_size=8, max_epochs=3, seed=4)
    runs = []
    for _ in range(2):
        model = _model("SHORING", tiny_encoder, seed=1)
        res = train(model, tiny_encoded, targets, cfg)
        runs.append(([e.train_loss for e in res.log], model_checkpoint(model).digest()))
    assert runs[0] == runs[1]


def test_training_reduces_loss(tiny_encoder, tiny_encoded, targets):
    model = _model("SA", tiny_encoder)
    res = train(model, tiny_encoded, targets, TrainConfig(learning_rate=1e-2, batch_size=8, max_epochs=15,
                                                          patience=15))
    assert res.log[-1].train_loss < res.log[0].train_loss


def test_train_target_count_mismatch(tiny_encoder, tiny_encoded):
    with pytest.raises(ContractViolation):
        train(_model("SA", tiny_encoder), tiny_encoded, np.zeros(3), TrainConfig(max_epochs=1))


# ---------------------------------------------------------------- evaluation and checkpoints


def test_evaluate_perfect_predictions(tiny_encoder, tiny_encoded):
    model = _model("SA", tiny_encoder)
    pred = model.predict(tiny_encoded)
    rep = evaluate(model, tiny_encoded, pred, raw_targets=pred * 2 + 1, target_mean=1.0, target_std=2.0,
                   n_permutations=99)
    assert rep.metrics.r2 == 1.0 and rep.metrics.loss == 0.0
    assert rep.raw_metrics.ptb_at_1pct == 0.0
    assert rep.two_sample.p_value == 1.0
    assert set(rep.row()) == {"model", "task", "loss", "std_r", "ptb@1%", "ptb_r@1%", "R2", "pearson", "p_value"}


def test_evaluate_encoder_mismatch(tiny_encoder, tiny_encoded, tiny_dataset, targets):
    from shoring.encode import Encoder, fit_encoder
    other = Encoder(*fit_encoder(tiny_dataset[5:], lowfreq_cutoff=1))
    with pytest.raises(VersionError):
        evaluate(_model("SA", tiny_encoder), tiny_encoded, targets, encoder=other)


def test_checkpoint_roundtrip(tmp_path, tiny_encoder, tiny_encoded):
    model = _model("SHORING", tiny_encoder, seed=2)
    ckpt = model_checkpoint(model, {"note": "x"})
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    assert back.digest() == ckpt.digest() and back.meta == {"note": "x"}
    restored = model_from_checkpoint(back)
    np.testing.assert_array_equal(restored.predict(tiny_encoded), model.predict(tiny_encoded))


def test_checkpoint_bad_magic_and_version(tmp_path, tiny_encoder):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(VersionError):
        load_checkpoint(path)
    ckpt = model_checkpoint(_model("SA", tiny_encoder))
    save_checkpoint(path, ckpt)
    buf = path.read_bytes().replace(b'"version": 1', b'"version": 7')
    path.write_bytes(buf)
    with pytest.raises(VersionError):
        load_checkpoint(path)


def test_load_state_shape_mismatch(tiny_encoder):
    model = _model("SA", tiny_encoder)
    state = model.state()
    state["head.b3"] = np.zeros(5)
    with pytest.raises(ContractViolation):
        model.load_state(state)


# ---------------------------------------------------------------- grid search


def test_grid_of_one(tiny_encoder, tiny_encoded, targets):
    spec = ModelSpec("SA", **SMALL)
    best, board = grid_search(spec, {"learning_rate": [1e-3]}, tiny_encoder, tiny_encoded, targets,
                              TrainConfig(batch_size=8, max_epochs=1))
    assert best == {"learning_rate": 1e-3} and len(board) == 1


def test_grid_budget_and_errors(tiny_encoder, tiny_encoded, targets):
    spec = ModelSpec("SA", **SMALL)
    cfg = TrainConfig(batch_size=8, max_epochs=1)
    grid = {"learning_rate": [1e-3, 1e-2], "batch_size": [8, 16]}
    _, board = grid_search(spec, grid, tiny_encoder, tiny_encoded, targets, cfg, budget=2)
    assert len(board) == 2
    assert [e.val_loss for e in board] == sorted(e.val_loss for e in board)
    with pytest.raises(ConfigError):
        grid_search(spec, grid, tiny_encoder, tiny_encoded, targets, cfg, budget=0)
    with pytest.raises(ConfigError):
        grid_search(spec, {"wobble": [1]}, tiny_encoder, tiny_encoded, targets, cfg)
