"""Parameter-based transfer: pretrain a source model, compose a custom model
around its frozen leading layers, train it, then fine-tune everything at a
low learning rate.  Passing a physics config turns the same workflow into
physics-informed transfer learning (PITL)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cells import Layer, LayerSpec, Model, ModelSpec, dumps
from .data import Dataset, NormStats, WindowBatch, fit_stats, make_windows, normalize, split_sequential
from .training import AdamState, History, PhysicsConfigError, PhysicsLossConfig, TrainConfig, evaluate, train

FINE_TUNE_LR = 1e-5


class CompositionError(ValueError):
    pass


@dataclass
class TransferPlan:
    k_transfer: int = 3
    new_layers: list[LayerSpec] = field(default_factory=list)
    adapter_width: int | None = None  # None: whatever the first transferred layer consumes
    fine_tune_lr: float = FINE_TUNE_LR
    physics: PhysicsLossConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.k_transfer < 0:
            raise ValueError("k_transfer must be >= 0")
        if not self.fine_tune_lr > 0:
            raise ValueError("fine_tune_lr must be > 0")
        if self.adapter_width is not None and self.adapter_width < 1:
            raise ValueError("adapter_width must be >= 1")

    @classmethod
    def uniform(cls, k_transfer: int, depth: int, width: int, kind: str = "lstm", **kw) -> TransferPlan:
        return cls(k_transfer, [LayerSpec(kind, width) for _ in range(depth)], **kw)

    @property
    def new_cell_kind(self) -> str | None:
        kinds = {l.kind for l in self.new_layers}
        return kinds.pop() if len(kinds) == 1 else None

    def to_dict(self) -> dict:
        return {
            "k_transfer": self.k_transfer,
            "adapter_width": self.adapter_width,
            "new_layers": [{"kind": l.kind, "width": l.width, "activation": l.activation} for l in self.new_layers],
            "fine_tune_lr": self.fine_tune_lr,
            "physics_alpha": None if self.physics is None else self.physics.alpha,
            "seed": self.seed,
        }


class CustomModel(Model):
    """Adapter, transferred layers, new layers, head; one model, known slices."""

    def __init__(self, spec: ModelSpec, layers: list[Layer], head: Layer, k_transfer: int, source_digest: str = ""):
        super().__init__(spec, layers, head)
        self.k_transfer = k_transfer
        self.source_digest = source_digest

    @property
    def adapter(self) -> Layer:
        return self.layers[0]

    @property
    def transferred(self) -> list[Layer]:
        return self.layers[1 : 1 + self.k_transfer]

    @property
    def new_layers(self) -> list[Layer]:
        return self.layers[1 + self.k_transfer :]

    def transferred_params(self):
        return [p for l in self.transferred for p in l.params.values()]

    def copy(self) -> CustomModel:
        base = Model.copy(self)
        return CustomModel(base.spec, base.layers, base.head, self.k_transfer, self.source_digest)

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["transfer"] = {"k_transfer": self.k_transfer, "source_digest": self.source_digest}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CustomModel:
        base = Model.from_dict(d)
        meta = d.get("transfer", {})
        return cls(base.spec, base.layers, base.head, int(meta.get("k_transfer", 0)), meta.get("source_digest", ""))

    @classmethod
    def load(cls, path) -> CustomModel:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def compose_custom(source: Model, plan: TransferPlan, n_target_features: int) -> CustomModel:
    """Identity adapter -> copies of the first k source layers (frozen) -> new
    trainable layers -> identity head of width 1."""
    k = plan.k_transfer
    if k > len(source.layers):
        raise CompositionError(f"k_transfer={k} exceeds the {len(source.layers)} hidden layers of the source")
    transferred = [l.copy() for l in source.layers[:k]]
    for l in transferred:
        l.set_frozen(True)
    consumed = transferred[0].input_width if transferred else source.input_width
    adapter_width = plan.adapter_width or consumed
    if transferred and adapter_width != consumed:
        raise CompositionError(
            f"junction adapter -> transferred layer 1: adapter emits {adapter_width} values "
            f"but the transferred {transferred[0].kind} layer consumes {consumed}"
        )
    rng = np.random.default_rng(plan.seed)
    adapter = Layer.init(LayerSpec("dense", adapter_width, "identity"), n_target_features, rng)
    layers = [adapter, *transferred]
    width = layers[-1].width
    for ls in plan.new_layers:
        spec = LayerSpec(ls.kind, ls.width, ls.activation, False)
        layers.append(Layer.init(spec, width, rng))
        width = ls.width
    head = Layer.init(LayerSpec("dense", 1, "identity"), width, rng)
    spec = ModelSpec(n_target_features, [l.spec for l in layers], 1)
    return CustomModel(spec, layers, head, k, source.param_digest())


@dataclass
class PretrainResult:
    model: Model
    stats: NormStats
    history: History
    metrics: dict[str, dict[str, float]]


def prepare_windows(
    ds: Dataset, train_ratio: float, validation_len: int, T: int = 5
) -> tuple[NormStats, dict[str, WindowBatch]]:
    """Split, fit stats on training rows only, normalize, window each split."""
    tr, te, va = split_sequential(ds, train_ratio, validation_len)
    stats = fit_stats(tr)
    out = {}
    for name, part in (("train", tr), ("test", te), ("validation", va)):
        if len(part) >= T:
            out[name] = make_windows(normalize(part, stats), T)
    return stats, out


def metrics_for(model: Model, splits: dict[str, WindowBatch]) -> dict[str, dict[str, float]]:
    out = {}
    for name, wb in splits.items():
        ev = evaluate(model, wb)
        out[name] = {"mse": ev["mse"], "mae": ev["mae"]}
    return out


def pretrain_source(
    spec: ModelSpec,
    dataset: Dataset,
    cfg: TrainConfig,
    seed: int = 0,
    train_ratio: float = 0.9,
    validation_len: int = 0,
    T: int = 5,
) -> PretrainResult:
    """Step 1: the pretrained model, fitted on the source split."""
    if spec.input_width != dataset.n_features:
        raise ValueError(f"spec input width {spec.input_width} != {dataset.n_features} source features")
    stats, splits = prepare_windows(dataset, train_ratio, validation_len, T)
    model = Model.init(spec, seed)
    history = train(model, splits["train"], cfg, val=splits.get("test"))
    return PretrainResult(model, stats, history, metrics_for(model, splits))


def train_custom(
    model: CustomModel,
    windows: WindowBatch,
    cfg: TrainConfig,
    physics: PhysicsLossConfig | None = None,
    val: WindowBatch | None = None,
) -> History:
    """Step 3: only the adapter, new layers and head move."""
    return train(model, windows, cfg, physics, val)


def fine_tune(
    model: CustomModel,
    windows: WindowBatch,
    cfg: TrainConfig,
    lr: float = FINE_TUNE_LR,
    physics: PhysicsLossConfig | None = None,
    val: WindowBatch | None = None,
) -> History:
    """Step 4: unfreeze every layer and retrain with fresh Adam moments at ``lr``."""
    if not lr > 0:
        raise ValueError("fine-tuning learning rate must be > 0")
    model.freeze_all(False)
    return train(model, windows, replace(cfg, learning_rate=lr), physics, val, AdamState.for_params(model.parameters()))


@dataclass
class WorkflowResult:
    model: CustomModel
    step3: History
    step4: History
    metrics: dict[str, dict[str, float]] = field(default_factory=dict)


def run_transfer(
    source: Model,
    plan: TransferPlan,
    windows: WindowBatch,
    step3_cfg: TrainConfig,
    step4_cfg: TrainConfig,
    val: WindowBatch | None = None,
) -> WorkflowResult:
    """Steps 2-4 against target training windows."""
    if plan.physics is not None:
        plan.physics.check_features(windows.feature_names)
    model = compose_custom(source, plan, windows.x.shape[2])
    h3 = train_custom(model, windows, step3_cfg, plan.physics, val)
    h4 = fine_tune(model, windows, step4_cfg, plan.fine_tune_lr, plan.physics, val)
    return WorkflowResult(model, h3, h4)


def run_pitl(
    source: Model,
    plan: TransferPlan,
    windows: WindowBatch,
    step3_cfg: TrainConfig,
    step4_cfg: TrainConfig,
    val: WindowBatch | None = None,
) -> WorkflowResult:
    """Transfer with the physics-informed objective in Steps 3 and 4."""
    if plan.physics is None:
        raise PhysicsConfigError("PITL needs a physics configuration in the transfer plan")
    plan.physics.check_features(windows.feature_names)
    return run_transfer(source, plan, windows, step3_cfg, step4_cfg, val)


def save_model(model: Model, path) -> None:
    Path(path).write_text(dumps(model.to_dict()) + "\n", encoding="utf-8")
