"""Dense, simple-RNN, LSTM and GRU layers and many-to-one window unrolling.

Row convention: a batch of B vectors is a B x n matrix, so the column-vector
form ``w x + u h + b`` is computed here as ``x @ W + h @ U + b``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numgrad as ng
from .numgrad import DimensionError, Param, Tensor2D

KINDS = ("dense", "simple_rnn", "lstm", "gru")
RECURRENT = ("simple_rnn", "lstm", "gru")

# (input-matrix, recurrent-matrix, bias) names per kind, in init order
_PARAM_NAMES = {
    "dense": (("W",), (), ("b",)),
    "simple_rnn": (("W",), ("U",), ("b",)),
    "lstm": (("W_i", "W_f", "W_o", "W_c"), ("U_i", "U_f", "U_o", "U_c"), ("b_i", "b_f", "b_o", "b_c")),
    "gru": (("W_z", "W_r", "W_h"), ("U_z", "U_r", "U_h"), ("b_z", "b_r", "b_h")),
}

MODEL_FORMAT = "pitl-model"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass
class LayerSpec:
    kind: str
    width: int
    activation: str = "tanh"
    frozen: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}")
        if int(self.width) < 1:
            raise ValueError(f"layer width must be >= 1, got {self.width}")
        if self.activation not in ng.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.width = int(self.width)


@dataclass
class ModelSpec:
    input_width: int
    layers: list[LayerSpec] = field(default_factory=list)
    output_width: int = 1

    def __post_init__(self):
        if self.input_width < 1 or self.output_width < 1:
            raise ValueError("input and output widths must be >= 1")

    @classmethod
    def stack(cls, input_width: int, kind: str, depth: int, width: int, activation: str = "tanh") -> ModelSpec:
        """``depth`` identical hidden layers, e.g. ``stack(10, "lstm", 5, 30)``."""
        return cls(input_width, [LayerSpec(kind, width, activation) for _ in range(depth)])

    def to_dict(self) -> dict:
        return {
            "input_width": self.input_width,
            "output_width": self.output_width,
            "layers": [
                {"kind": l.kind, "width": l.width, "activation": l.activation, "frozen": l.frozen}
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        return cls(
            int(d["input_width"]),
            [LayerSpec(l["kind"], l["width"], l.get("activation", "tanh"), bool(l.get("frozen", False))) for l in d["layers"]],
            int(d.get("output_width", 1)),
        )


@dataclass
class CellState:
    h: Tensor2D
    c: Tensor2D | None = None

    @classmethod
    def zeros(cls, batch: int, width: int, with_cell: bool) -> CellState:
        z = np.zeros((batch, width))
        return cls(Tensor2D(z), Tensor2D(z) if with_cell else None)


def _affine(x: Tensor2D, W: Param, b: Param, h: Tensor2D | None = None, U: Param | None = None) -> Tensor2D:
    z = ng.matmul(x, W)
    if h is not None:
        z = ng.ew_add(z, ng.matmul(h, U))
    return ng.add_row(z, b)


def _check_width(x: Tensor2D, W: Param, what: str) -> None:
    if x.cols != W.rows:
        raise DimensionError(f"{what}: input width {x.cols} does not match layer input width {W.rows}")


def dense_forward(x: Tensor2D, params: dict[str, Param], activation: str = "tanh") -> Tensor2D:
    _check_width(x, params["W"], "dense")
    return ng.ACTIVATIONS[activation](_affine(x, params["W"], params["b"]))


def rnn_step(x_t: Tensor2D, h_prev: Tensor2D, params: dict[str, Param]) -> Tensor2D:
    _check_width(x_t, params["W"], "simple_rnn")
    return ng.tanh_act(_affine(x_t, params["W"], params["b"], h_prev, params["U"]))


def lstm_step(x_t: Tensor2D, state: CellState, params: dict[str, Param]) -> CellState:
    p = params
    _check_width(x_t, p["W_i"], "lstm")
    if state.c is None:
        raise DimensionError("lstm_step needs a cell state")
    h = state.h
    i = ng.sigmoid(_affine(x_t, p["W_i"], p["b_i"], h, p["U_i"]))
    f = ng.sigmoid(_affine(x_t, p["W_f"], p["b_f"], h, p["U_f"]))
    o = ng.sigmoid(_affine(x_t, p["W_o"], p["b_o"], h, p["U_o"]))
    c_tilde = ng.tanh_act(_affine(x_t, p["W_c"], p["b_c"], h, p["U_c"]))
    c = ng.ew_add(ng.ew_mul(f, state.c), ng.ew_mul(i, c_tilde))
    return CellState(ng.ew_mul(o, ng.tanh_act(c)), c)


def gru_step(x_t: Tensor2D, h_prev: Tensor2D, params: dict[str, Param]) -> Tensor2D:
    p = params
    _check_width(x_t, p["W_z"], "gru")
    z = ng.sigmoid(_affine(x_t, p["W_z"], p["b_z"], h_prev, p["U_z"]))
    r = ng.sigmoid(_affine(x_t, p["W_r"], p["b_r"], h_prev, p["U_r"]))
    h_tilde = ng.tanh_act(_affine(x_t, p["W_h"], p["b_h"], ng.ew_mul(r, h_prev), p["U_h"]))
    # (1 - z) * h_prev + z * h_tilde
    keep = ng.add_const(ng.scale(z, -1.0), 1.0)
    return ng.ew_add(ng.ew_mul(keep, h_prev), ng.ew_mul(z, h_tilde))


class Layer:
    """One hidden layer (or the output head) and its parameters."""

    def __init__(self, spec: LayerSpec, input_width: int, params: dict[str, Param]):
        self.spec = spec
        self.input_width = input_width
        self.params = params
        self.set_frozen(spec.frozen)

    @classmethod
    def init(cls, spec: LayerSpec, input_width: int, rng: np.random.Generator) -> Layer:
        in_names, rec_names, bias_names = _PARAM_NAMES[spec.kind]
        params = {}
        for n in in_names:
            params[n] = Param(ng.glorot_uniform(rng, input_width, spec.width), name=n)
        for n in rec_names:
            params[n] = Param(ng.glorot_uniform(rng, spec.width, spec.width), name=n)
        for n in bias_names:
            params[n] = Param(np.zeros((1, spec.width)), name=n)
        return cls(spec, input_width, params)

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def width(self) -> int:
        return self.spec.width

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.params.values())

    def set_frozen(self, frozen: bool) -> None:
        self.spec.frozen = frozen
        for p in self.params.values():
            p.frozen = frozen

    def run(self, seq: Sequence[Tensor2D]) -> list[Tensor2D]:
        """Map a length-T sequence of B x in matrices to B x width matrices."""
        if self.kind == "dense":
            return [dense_forward(x, self.params, self.spec.activation) for x in seq]
        batch = seq[0].rows
        state = CellState.zeros(batch, self.width, self.kind == "lstm")
        out = []
        for x in seq:
            if self.kind == "lstm":
                state = lstm_step(x, state, self.params)
            elif self.kind == "gru":
                state = CellState(gru_step(x, state.h, self.params))
            else:
                state = CellState(rnn_step(x, state.h, self.params))
            out.append(state.h)
        return out

    def copy(self) -> Layer:
        spec = LayerSpec(self.spec.kind, self.spec.width, self.spec.activation, self.spec.frozen)
        params = {n: Param(p.data.copy(), frozen=p.frozen, name=n) for n, p in self.params.items()}
        return Layer(spec, self.input_width, params)


class Model:
    """A stack of hidden layers followed by a dense identity head."""

    def __init__(self, spec: ModelSpec, layers: list[Layer], head: Layer):
        self.spec = spec
        self.layers = layers
        self.head = head
        self._check_chain()

    @classmethod
    def init(cls, spec: ModelSpec, seed: int = 0) -> Model:
        rng = np.random.default_rng(seed)
        layers = []
        width = spec.input_width
        for ls in spec.layers:
            layers.append(Layer.init(ls, width, rng))
            width = ls.width
        head = Layer.init(LayerSpec("dense", spec.output_width, "identity"), width, rng)
        return cls(spec, layers, head)

    def _check_chain(self) -> None:
        width = self.spec.input_width
        for k, layer in enumerate(self.layers):
            if layer.input_width != width:
                raise DimensionError(
                    f"layer {k} ({layer.kind}) expects input width {layer.input_width} but receives {width}"
                )
            width = layer.width
        if self.head.input_width != width:
            raise DimensionError(f"output head expects input width {self.head.input_width} but receives {width}")

    @property
    def input_width(self) -> int:
        return self.spec.input_width

    def parameters(self) -> list[Param]:
        out = []
        for layer in [*self.layers, self.head]:
            out.extend(layer.params.values())
        return out

    def named_parameters(self) -> list[tuple[str, Param]]:
        out = []
        for k, layer in enumerate(self.layers):
            out.extend((f"layers.{k}.{n}", p) for n, p in layer.params.items())
        out.extend((f"head.{n}", p) for n, p in self.head.params.items())
        return out

    def trainable(self) -> list[Param]:
        return [p for p in self.parameters() if not p.frozen]

    def forward(self, windows) -> Tensor2D:
        """Predict one value per window; ``windows`` is (B, T, F) or (T, F)."""
        x = np.asarray(windows, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3:
            raise DimensionError(f"windows must be (B, T, F) or (T, F), got shape {x.shape}")
        B, T, F = x.shape
        if T < 1:
            raise ValueError("empty window")
        if F != self.input_width:
            raise DimensionError(f"window feature width {F} does not match model input width {self.input_width}")
        seq = [Tensor2D._wrap(np.ascontiguousarray(x[:, t, :]), False) for t in range(T)]
        last_rec = max((k for k, l in enumerate(self.layers) if l.kind in RECURRENT), default=-1)
        for k, layer in enumerate(self.layers):
            if k > last_rec and len(seq) > 1:
                # nothing downstream looks at earlier steps
                seq = seq[-1:]
            seq = layer.run(seq)
        if len(seq) > 1:
            seq = seq[-1:]
        return self.head.run(seq)[0]

    def predict(self, windows) -> np.ndarray:
        return self.forward(windows).data[:, 0].copy()

    def copy(self) -> Model:
        layers = [l.copy() for l in self.layers]
        spec = ModelSpec(self.spec.input_width, [l.spec for l in layers], self.spec.output_width)
        return Model(spec, layers, self.head.copy())

    def freeze_all(self, frozen: bool = True) -> None:
        for layer in [*self.layers, self.head]:
            layer.set_frozen(frozen)

    def param_digest(self, frozen_only: bool = False) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            if frozen_only and not p.frozen:
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "spec": self.spec.to_dict(),
            "parameters": {
                "layers": [_params_dict(l) for l in self.layers],
                "head": _params_dict(self.head),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> Model:
        if d.get("format") != MODEL_FORMAT:
            raise ModelFormatError(f"not a {MODEL_FORMAT} document")
        if d.get("version") != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model version {d.get('version')}")
        spec = ModelSpec.from_dict(d["spec"])
        layer_params = d["parameters"]["layers"]
        if len(layer_params) != len(spec.layers):
            raise ModelFormatError("parameter block count does not match spec layers")
        layers = []
        width = spec.input_width
        for ls, block in zip(spec.layers, layer_params):
            layers.append(Layer(ls, width, _params_from(block, ls)))
            width = ls.width
        head_spec = LayerSpec("dense", spec.output_width, "identity")
        head_block = d["parameters"]["head"]
        head_spec.frozen = bool(head_block.get("frozen", False))
        head = Layer(head_spec, width, _params_from(head_block, head_spec))
        return cls(spec, layers, head)

    def save(self, path) -> None:
        Path(path).write_text(dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> Model:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def forward_window(model: Model, window) -> float | np.ndarray:
    """Predict from one (T, F) window (scalar) or a (B, T, F) batch (vector)."""
    arr = np.asarray(window, dtype=np.float64)
    out = model.predict(arr)
    return float(out[0]) if arr.ndim == 2 else out


def _params_dict(layer: Layer) -> dict:
    return {
        "frozen": layer.frozen,
        "tensors": {
            n: {"shape": list(p.shape), "values": p.data.ravel().tolist()} for n, p in layer.params.items()
        },
    }


def _params_from(block: dict, spec: LayerSpec) -> dict[str, Param]:
    tensors = block["tensors"]
    expected = [n for group in _PARAM_NAMES[spec.kind] for n in group]
    if sorted(tensors) != sorted(expected):
        raise ModelFormatError(f"{spec.kind} layer needs tensors {expected}, got {sorted(tensors)}")
    params = {}
    for n in expected:
        t = tensors[n]
        arr = np.array(t["values"], dtype=np.float64).reshape(t["shape"])
        params[n] = Param(arr, frozen=spec.frozen, name=n)
    return params


def dumps(obj, indent: str = "  ", _level: int = 0) -> str:
    """JSON text with every float rendered to 17 significant digits."""
    pad = indent * (_level + 1)
    end = indent * _level
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(_num(v) for v in obj) + "]"
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, (bool, str)) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, float, np.integer, np.floating)):
        return _num(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _num(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    if not math.isfinite(v):
        raise ValueError("non-finite number in model document")
    return format(v, ".17g")


def layer_params(layers: Iterable[Layer]) -> list[Param]:
    return [p for l in layers for p in l.params.values()]
