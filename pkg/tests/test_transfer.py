import json

import numpy as np
import pytest

from pitl.asm1 import TARGET_FEATURES, PlantConfig, emit_plant_dataset, load_defaults
from pitl.cells import LayerSpec, Model, ModelSpec
from pitl.data import Dataset
from pitl.numgrad import Tensor2D
from pitl.training import PhysicsConfigError, PhysicsLossConfig, TrainConfig, asm1_rate, evaluate
from pitl.transfer import (
    FINE_TUNE_LR,
    CompositionError,
    CustomModel,
    TransferPlan,
    compose_custom,
    fine_tune,
    prepare_windows,
    pretrain_source,
    run_pitl,
    run_transfer,
    save_model,
    train_custom,
)


def source_model(input_width=4, depth=3, width=6, kind="lstm", seed=0):
    return Model.init(ModelSpec.stack(input_width, kind, depth, width), seed)


@pytest.fixture(scope="module")
def target():
    cfg = PlantConfig()
    ds = emit_plant_dataset(9, 160, config=cfg).select(TARGET_FEATURES)
    stats, splits = prepare_windows(ds, 0.9, 40)
    phys = PhysicsLossConfig(
        alpha=0.1,
        rate_fn=asm1_rate(load_defaults().with_aeration(cfg.kla, cfg.so_sat)),
        feature_map=cfg.feature_map,
        stats=stats,
    )
    return splits["train"].tail(30), splits["validation"], phys


def features_after(model: CustomModel, x):
    """Last-step output of the final hidden layer, i.e. what the head sees."""
    seq = [Tensor2D(x[:, t, :]) for t in range(x.shape[1])]
    for layer in model.layers:
        seq = layer.run(seq)
    return seq[-1].data


# -- composition ----------------------------------------------------------------


def test_open_source_layout():
    src = source_model(8, 5, 25)
    m = compose_custom(src, TransferPlan.uniform(3, 6, 30, "lstm"), 10)
    assert [l.kind for l in m.layers] == ["dense"] + ["lstm"] * 9
    assert m.adapter.spec.activation == "identity" and m.adapter.width == 8 and m.adapter.input_width == 10
    assert [l.width for l in m.transferred] == [25, 25, 25]
    assert [l.width for l in m.new_layers] == [30] * 6
    assert m.head.width == 1 and m.head.spec.activation == "identity"
    assert all(l.frozen for l in m.transferred)
    assert not any(p.frozen for l in [m.adapter, *m.new_layers, m.head] for p in l.params.values())
    for got, ref in zip(m.transferred, src.layers):
        assert all(np.array_equal(got.params[n].data, ref.params[n].data) for n in ref.params)
    assert m.predict(np.zeros((2, 5, 10))).shape == (2,)


def test_transferred_layers_are_copies():
    src = source_model()
    m = compose_custom(src, TransferPlan.uniform(2, 1, 5), 10)
    m.transferred[0].params["W_i"].data[0, 0] += 1.0
    assert src.layers[0].params["W_i"].data[0, 0] != m.transferred[0].params["W_i"].data[0, 0]
    assert not src.layers[0].frozen


def test_industrial_layout_and_mismatched_adapter_width():
    src = source_model(4, 6, 12)
    m = compose_custom(src, TransferPlan.uniform(3, 3, 30), 10)
    assert m.adapter.width == 4 and len(m.new_layers) == 3
    with pytest.raises(CompositionError, match="junction adapter -> transferred layer 1"):
        compose_custom(src, TransferPlan.uniform(3, 3, 30, adapter_width=5), 10)


def test_zero_transfer_degenerates_to_adapter_and_head():
    m = compose_custom(source_model(), TransferPlan(k_transfer=0), 10)
    assert len(m.layers) == 1 and m.transferred == [] and m.new_layers == []
    x = np.random.default_rng(0).normal(size=(3, 5, 10))
    A, b = m.adapter.params["W"].data, m.adapter.params["b"].data
    H, c = m.head.params["W"].data, m.head.params["b"].data
    np.testing.assert_allclose(m.predict(x), ((x[:, -1] @ A + b) @ H + c)[:, 0], rtol=1e-13)


def test_composition_errors():
    with pytest.raises(CompositionError):
        compose_custom(source_model(depth=2), TransferPlan(k_transfer=3), 10)
    with pytest.raises(ValueError):
        TransferPlan(k_transfer=-1)
    with pytest.raises(ValueError):
        TransferPlan(fine_tune_lr=0.0)
    assert TransferPlan().fine_tune_lr == FINE_TUNE_LR == 1e-5
    assert TransferPlan.uniform(3, 3, 30, "simple_rnn").new_cell_kind == "simple_rnn"


# -- Step 3 -----------------------------------------------------------------------


def test_frozen_parameters_bit_identical_through_step3(target):
    train_w, _, _ = target
    src = source_model()
    m = compose_custom(src, TransferPlan.uniform(3, 1, 6), 10)
    digest = m.param_digest(frozen_only=True)
    for _ in range(4):
        train_custom(m, train_w, TrainConfig(epochs=50, learning_rate=1e-2))
        assert m.param_digest(frozen_only=True) == digest
    for got, ref in zip(m.transferred, src.layers):
        assert all(np.array_equal(got.params[n].data, ref.params[n].data) for n in ref.params)


def test_step3_objective_decreases(target):
    train_w, _, _ = target
    m = compose_custom(source_model(), TransferPlan.uniform(3, 2, 6), 10)
    start = evaluate(m, train_w)["mse"]
    train_custom(m, train_w, TrainConfig(epochs=60, learning_rate=1e-2))
    assert evaluate(m, train_w)["mse"] <= start


def test_head_only_training_matches_least_squares(target):
    train_w, _, _ = target
    m = compose_custom(source_model(width=4, seed=3), TransferPlan(k_transfer=3), 10)
    m.adapter.set_frozen(True)
    feats = features_after(m, train_w.x)
    design = np.hstack([feats, np.ones((len(feats), 1))])
    coef, *_ = np.linalg.lstsq(design, train_w.y, rcond=None)
    ls_mse = np.mean((design @ coef - train_w.y) ** 2)
    train_custom(m, train_w, TrainConfig(epochs=4000, learning_rate=0.05))
    got = evaluate(m, train_w)["mse"]
    assert got == pytest.approx(ls_mse, rel=1e-4)
    np.testing.assert_allclose(m.predict(train_w.x), design @ coef, atol=1e-3)


# -- Step 4 ---------------------------------------------------------------------------


def test_fine_tune_unfreezes_and_moves_transferred_weights(target):
    train_w, _, _ = target
    src = source_model()
    m = compose_custom(src, TransferPlan.uniform(3, 1, 6), 10)
    train_custom(m, train_w, TrainConfig(epochs=20, learning_rate=1e-2))
    before = evaluate(m, train_w)["mse"]
    fine_tune(m, train_w, TrainConfig(epochs=20))
    assert not any(p.frozen for p in m.parameters())
    moved = [not np.array_equal(got.params[n].data, ref.params[n].data) for got, ref in zip(m.transferred, src.layers) for n in ref.params]
    assert any(moved)
    assert evaluate(m, train_w)["mse"] <= before


def test_fine_tune_step_size_is_the_low_rate(target):
    # Adam's first step moves each parameter by about lr
    train_w, _, _ = target
    m = compose_custom(source_model(), TransferPlan.uniform(3, 1, 6), 10)
    w0 = m.transferred[0].params["W_i"].data.copy()
    fine_tune(m, train_w, TrainConfig(epochs=1), lr=1e-5)
    step = np.abs(m.transferred[0].params["W_i"].data - w0)
    assert step.max() <= 1e-5 * (1 + 1e-6) and step.max() > 5e-6


def test_fine_tune_rejects_non_positive_rate(target):
    m = compose_custom(source_model(), TransferPlan(), 10)
    with pytest.raises(ValueError):
        fine_tune(m, target[0], TrainConfig(epochs=1), lr=0.0)


# -- serialization ----------------------------------------------------------------------


def test_custom_model_roundtrip(tmp_path, target):
    m = compose_custom(source_model(), TransferPlan.uniform(3, 2, 5, "simple_rnn"), 10)
    train_custom(m, target[0], TrainConfig(epochs=3))
    path = tmp_path / "custom.json"
    save_model(m, path)
    back = CustomModel.load(path)
    assert back.k_transfer == 3 and back.source_digest == m.source_digest
    assert [p.frozen for p in back.parameters()] == [p.frozen for p in m.parameters()]
    assert back.param_digest() == m.param_digest()
    assert np.array_equal(back.predict(target[0].x), m.predict(target[0].x))
    save_model(back, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()
    assert json.loads(path.read_text())["transfer"]["k_transfer"] == 3


# -- pretraining and full workflow ---------------------------------------------------------


def small_source_data(n=60):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(n, 4))
    return Dataset("src", np.arange(n, dtype=float), x, ["Q_OWS", "pH", "COD", "NH4_N"], np.tanh(x @ [0.5, -0.2, 0.3, 0.1]))


def test_pretrain_zero_epochs_returns_initial_model():
    spec = ModelSpec.stack(4, "lstm", 2, 5)
    res = pretrain_source(spec, small_source_data(), TrainConfig(epochs=0), seed=4)
    assert res.model.param_digest() == Model.init(spec, 4).param_digest()
    assert set(res.metrics) == {"train", "test"} and len(res.history) == 0


def test_pretrain_checks_widths():
    with pytest.raises(ValueError):
        pretrain_source(ModelSpec.stack(3, "lstm", 2, 5), small_source_data(), TrainConfig(epochs=0))


def workflow(target, alpha, seed=0, kind="simple_rnn"):
    train_w, val_w, phys = target
    res = pretrain_source(ModelSpec.stack(4, "lstm", 3, 6), small_source_data(), TrainConfig(epochs=5), seed=seed, train_ratio=0.8)
    physics = None if alpha is None else PhysicsLossConfig(alpha, phys.rate_fn, phys.feature_map, phys.dt, phys.stats)
    plan = TransferPlan.uniform(3, 2, 6, kind, physics=physics, seed=seed)
    step3, step4 = TrainConfig(epochs=15, learning_rate=1e-2), TrainConfig(epochs=5)
    runner = run_pitl if physics is not None else run_transfer
    return runner(res.model, plan, train_w, step3, step4, val_w)


def test_workflow_is_deterministic(target):
    a, b = workflow(target, 0.1), workflow(target, 0.1)
    assert a.model.param_digest() == b.model.param_digest()
    assert a.step3.rows == b.step3.rows and a.step4.rows == b.step4.rows


def test_zero_alpha_matches_plain_transfer(target):
    plain, zero = workflow(target, None), workflow(target, 0.0)
    assert zero.model.param_digest() == plain.model.param_digest()


def test_alpha_continuity(target):
    # the gap to plain TL shrinks linearly with alpha; its slope depends on
    # the physical scale of p_r, so the 1e-9 bound is checked at alpha=1e-12
    plain = workflow(target, None)

    def gap(alpha):
        run = workflow(target, alpha)
        return max(np.abs(p.data - q.data).max() for p, q in zip(plain.model.parameters(), run.model.parameters()))

    g8, g10, g12 = gap(1e-8), gap(1e-10), gap(1e-12)
    assert g12 < 1e-9
    assert g8 / g10 == pytest.approx(100.0, rel=0.01)
    assert g10 / g12 == pytest.approx(100.0, rel=0.01)


def test_pitl_requires_physics(target):
    res = source_model()
    with pytest.raises(PhysicsConfigError):
        run_pitl(res, TransferPlan.uniform(3, 1, 4), target[0], TrainConfig(epochs=1), TrainConfig(epochs=1))


def test_pitl_rejects_unmappable_inputs(target):
    train_w, _, phys = target
    bad = PhysicsLossConfig(0.1, phys.rate_fn, {**phys.feature_map, "S_S": ("BOD", 1.0)}, 1.0, phys.stats)
    with pytest.raises(PhysicsConfigError):
        run_pitl(source_model(), TransferPlan.uniform(3, 1, 4, physics=bad), train_w, TrainConfig(epochs=1), TrainConfig(epochs=1))


def test_physics_objective_lowers_final_residual(target):
    # paired seeds: PITL against the same workflow without the physics term
    train_w, _, phys = target
    strong = PhysicsLossConfig(1.0, phys.rate_fn, phys.feature_map, phys.dt, phys.stats)
    diffs = []
    for seed in range(5):
        with_p = workflow(target, 1.0, seed)
        without = workflow(target, None, seed)
        diffs.append(evaluate(with_p.model, train_w, strong)["physics"] - evaluate(without.model, train_w, strong)["physics"])
    assert np.median(diffs) <= 0
