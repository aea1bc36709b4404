"""
Model Specification and Forward Maps

Declarative layer lists for the desk-scale classifiers, seeded He-uniform
initialization, the forward maps (logits, log-probabilities, probabilities,
predictions), and the portable text container used to persist parameters.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.autodiff import ops
from src.autodiff.tape import DimensionError, Tape, Tensor
from src.rng import STREAM_INIT, NoiseStream

logger = logging.getLogger(__name__)

LAYER_KINDS = ("affine", "relu", "conv", "global_avg_pool", "flatten")
CONTAINER_HEADER = "dign-model 1"


class ModelSpecError(Exception):
    """Raised when a layer list does not chain into K logits."""

    pass


class ModelFormatError(Exception):
    """Raised when a model container is missing or malformed."""

    pass


@dataclass(frozen=True)
class LayerSpec:
    """
    One layer descriptor.

    Attributes:
        kind: One of affine, relu, conv, global_avg_pool, flatten
        units: Output width of an affine layer
        filters: Output channels of a conv layer
        kernel: (kh, kw) of a conv layer
        padding: 'same' or 'valid' for conv layers
    """

    kind: str
    units: Optional[int] = None
    filters: Optional[int] = None
    kernel: Tuple[int, int] = (3, 3)
    padding: str = "same"

    def to_dict(self) -> Dict[str, Any]:
        if self.kind == "affine":
            return {"kind": "affine", "units": self.units}
        if self.kind == "conv":
            return {
                "kind": "conv",
                "filters": self.filters,
                "kernel": list(self.kernel),
                "padding": self.padding,
            }
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LayerSpec":
        kernel = tuple(data.get("kernel", (3, 3)))
        return cls(
            kind=data["kind"],
            units=data.get("units"),
            filters=data.get("filters"),
            kernel=(int(kernel[0]), int(kernel[1])),
            padding=data.get("padding", "same"),
        )


@dataclass(frozen=True)
class ModelSpec:
    """
    Ordered layers from an input shape to K logits.

    Attributes:
        layers: Layer descriptors applied in order
        input_shape: Per-example shape, e.g. (1, 16, 16)
        num_classes: K >= 2
        name: Architecture label carried into reports
    """

    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, ...]
    num_classes: int
    name: str = "custom"

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def validate(self) -> None:
        """
        Check that layer shapes chain from input_shape to (K,).

        Raises:
            ModelSpecError: Naming the first mismatched layer
        """
        self.parameter_shapes()

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Walk the layers and return the shape of every parameter tensor."""
        if self.num_classes < 2:
            raise ModelSpecError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.input_shape or any(e < 1 for e in self.input_shape):
            raise ModelSpecError(f"Invalid input_shape {self.input_shape}")

        shapes: Dict[str, Tuple[int, ...]] = {}
        current = tuple(self.input_shape)

        for index, layer in enumerate(self.layers):
            where = f"layer {index} ({layer.kind})"
            if layer.kind not in LAYER_KINDS:
                raise ModelSpecError(f"{where}: unknown layer kind")

            if layer.kind == "affine":
                if len(current) != 1:
                    raise ModelSpecError(
                        f"{where}: expects a flat input, got shape {current}"
                    )
                if not layer.units or layer.units < 1:
                    raise ModelSpecError(f"{where}: units must be positive")
                shapes[f"{index}.weight"] = (current[0], layer.units)
                shapes[f"{index}.bias"] = (layer.units,)
                current = (layer.units,)

            elif layer.kind == "conv":
                if len(current) != 3:
                    raise ModelSpecError(
                        f"{where}: expects (C, H, W) input, got shape {current}"
                    )
                if not layer.filters or layer.filters < 1:
                    raise ModelSpecError(f"{where}: filters must be positive")
                kh, kw = layer.kernel
                if kh % 2 == 0 or kw % 2 == 0:
                    raise ModelSpecError(f"{where}: kernel extents must be odd")
                channels, height, width = current
                if layer.padding == "same":
                    out_h, out_w = height, width
                elif layer.padding == "valid":
                    if kh > height or kw > width:
                        raise ModelSpecError(
                            f"{where}: kernel {layer.kernel} larger than input {current}"
                        )
                    out_h, out_w = height - kh + 1, width - kw + 1
                else:
                    raise ModelSpecError(f"{where}: unknown padding '{layer.padding}'")
                shapes[f"{index}.kernel"] = (layer.filters, channels, kh, kw)
                current = (layer.filters, out_h, out_w)

            elif layer.kind == "global_avg_pool":
                if len(current) != 3:
                    raise ModelSpecError(
                        f"{where}: expects (C, H, W) input, got shape {current}"
                    )
                current = (current[0],)

            elif layer.kind == "flatten":
                current = (int(np.prod(current)),)

        if current != (self.num_classes,):
            raise ModelSpecError(
                f"Final layer produces shape {current}, expected ({self.num_classes},)"
            )
        return shapes

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelSpec":
        return cls(
            layers=tuple(LayerSpec.from_dict(layer) for layer in data["layers"]),
            input_shape=tuple(int(e) for e in data["input_shape"]),
            num_classes=int(data["num_classes"]),
            name=data.get("name", "custom"),
        )


def mlp_64_32(input_shape: Sequence[int], num_classes: int) -> ModelSpec:
    """flatten -> affine 64 -> relu -> affine 32 -> relu -> affine K."""
    return ModelSpec(
        layers=(
            LayerSpec("flatten"),
            LayerSpec("affine", units=64),
            LayerSpec("relu"),
            LayerSpec("affine", units=32),
            LayerSpec("relu"),
            LayerSpec("affine", units=num_classes),
        ),
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        name="mlp_64_32",
    )


def tiny_cnn(input_shape: Sequence[int], num_classes: int) -> ModelSpec:
    """conv 8x3x3 -> relu -> conv 8x3x3 -> relu -> global_avg_pool -> affine K."""
    return ModelSpec(
        layers=(
            LayerSpec("conv", filters=8, kernel=(3, 3), padding="same"),
            LayerSpec("relu"),
            LayerSpec("conv", filters=8, kernel=(3, 3), padding="same"),
            LayerSpec("relu"),
            LayerSpec("global_avg_pool"),
            LayerSpec("affine", units=num_classes),
        ),
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        name="tiny_cnn",
    )


def linear(input_shape: Sequence[int], num_classes: int) -> ModelSpec:
    """flatten -> affine K (multinomial logistic regression)."""
    return ModelSpec(
        layers=(LayerSpec("flatten"), LayerSpec("affine", units=num_classes)),
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        name="linear",
    )


MODEL_BUILDERS = {
    "mlp_64_32": mlp_64_32,
    "tiny_cnn": tiny_cnn,
    "linear": linear,
}


def build_model_spec(
    name: str, input_shape: Sequence[int], num_classes: int
) -> ModelSpec:
    """Build a reference architecture by name."""
    if name not in MODEL_BUILDERS:
        raise ModelSpecError(
            f"Unknown model '{name}'. Available: {sorted(MODEL_BUILDERS)}"
        )
    spec = MODEL_BUILDERS[name](input_shape, num_classes)
    spec.validate()
    return spec


@dataclass(frozen=True)
class ParamSet:
    """
    Named parameter tensors of one model.

    Arrays are read-only; updates produce a new ParamSet.
    """

    spec: ModelSpec
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    init_seed: Optional[int] = None

    def __post_init__(self):
        expected = self.spec.parameter_shapes()
        if set(expected) != set(self.tensors):
            raise ModelSpecError(
                f"Parameter names {sorted(self.tensors)} do not match "
                f"spec {sorted(expected)}"
            )
        frozen = {}
        for name in expected:
            array = np.array(self.tensors[name], dtype=np.float64)
            if array.shape != expected[name]:
                raise ModelSpecError(
                    f"Parameter '{name}' has shape {array.shape}, "
                    f"spec expects {expected[name]}"
                )
            array.flags.writeable = False
            frozen[name] = array
        object.__setattr__(self, "tensors", frozen)

    def names(self) -> List[str]:
        return list(self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def replace(self, tensors: Mapping[str, np.ndarray]) -> "ParamSet":
        return ParamSet(self.spec, dict(tensors), self.init_seed)

    def watch(self, tape: Tape) -> Dict[str, Tensor]:
        """Register every parameter as a leaf of ``tape``."""
        return {name: tape.leaf(value, name=name) for name, value in self.tensors.items()}

    def constants(self) -> Dict[str, Tensor]:
        return {name: Tensor(value) for name, value in self.tensors.items()}

    def equals(self, other: "ParamSet") -> bool:
        """Bit-identical comparison of specs and every tensor."""
        if self.spec != other.spec or set(self.tensors) != set(other.tensors):
            return False
        return all(
            np.array_equal(self.tensors[n], other.tensors[n]) for n in self.tensors
        )


def init_params(spec: ModelSpec, seed: int) -> ParamSet:
    """
    He-uniform initialization.

    Weights ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)) per layer, biases zero; a
    deterministic function of (spec, seed).

    Raises:
        ModelSpecError: If the spec is inconsistent
    """
    shapes = spec.parameter_shapes()
    tensors = {}
    for index, layer in enumerate(spec.layers):
        stream = NoiseStream(seed, STREAM_INIT, index)
        if layer.kind == "affine":
            fan_in, units = shapes[f"{index}.weight"]
            bound = np.sqrt(6.0 / fan_in)
            tensors[f"{index}.weight"] = stream.uniform((fan_in, units), -bound, bound)
            tensors[f"{index}.bias"] = np.zeros(units)
        elif layer.kind == "conv":
            kernel_shape = shapes[f"{index}.kernel"]
            fan_in = int(np.prod(kernel_shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            tensors[f"{index}.kernel"] = stream.uniform(kernel_shape, -bound, bound)
    return ParamSet(spec, tensors, seed)


def zero_params(spec: ModelSpec) -> ParamSet:
    """All-zero parameters: constant logits and uniform probabilities."""
    shapes = spec.parameter_shapes()
    return ParamSet(spec, {name: np.zeros(shape) for name, shape in shapes.items()})


def forward(spec: ModelSpec, tensors: Mapping[str, Tensor], x: Tensor) -> Tensor:
    """Apply the layer list to a batch; records on the operands' tape, if any."""
    if tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise DimensionError(
            f"Input shape {x.shape} does not match model input "
            f"(B, {', '.join(str(e) for e in spec.input_shape)})"
        )
    h = x
    for index, layer in enumerate(spec.layers):
        if layer.kind == "affine":
            h = ops.affine(h, tensors[f"{index}.weight"], tensors[f"{index}.bias"])
        elif layer.kind == "relu":
            h = ops.relu(h)
        elif layer.kind == "conv":
            h = ops.conv2d(h, tensors[f"{index}.kernel"], padding=layer.padding)
        elif layer.kind == "global_avg_pool":
            h = ops.global_avg_pool(h)
        elif layer.kind == "flatten":
            h = ops.flatten(h)
    return h


def _as_tensor(x: Union[np.ndarray, Tensor]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def logits(params: ParamSet, x: Union[np.ndarray, Tensor]) -> Tensor:
    """Constant logits f_theta(x) of shape (B, K)."""
    return forward(params.spec, params.constants(), Tensor(_as_tensor(x).data))


def log_probs(params: ParamSet, x: Union[np.ndarray, Tensor]) -> Tensor:
    return ops.log_softmax(logits(params, x))


def probs(params: ParamSet, x: Union[np.ndarray, Tensor]) -> Tensor:
    return Tensor(np.exp(log_probs(params, x).data))


def predict(params: ParamSet, x: Union[np.ndarray, Tensor]) -> np.ndarray:
    """Argmax over classes; ties resolve to the lowest class index."""
    return np.argmax(logits(params, x).data, axis=1)


def save_model(
    path: Union[str, Path],
    params: ParamSet,
    metadata: Optional[Mapping[str, Any]] = None,
) -> Path:
    """
    Write the text container.

    Layout: a header line, a ``spec`` JSON line, a ``meta`` JSON line, then
    for each parameter a ``param <name> <shape>`` line followed by its
    shortest round-trip decimal values. Reloading is bit-exact.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    meta = dict(metadata or {})
    meta.setdefault("init_seed", params.init_seed)
    lines = [
        CONTAINER_HEADER,
        "spec " + json.dumps(params.spec.to_dict(), sort_keys=True),
        "meta " + json.dumps(meta, sort_keys=True),
    ]
    for name, value in params.tensors.items():
        shape = ",".join(str(e) for e in value.shape)
        lines.append(f"param {name} {shape}")
        lines.append(" ".join(repr(v) for v in value.reshape(-1).tolist()))
    lines.append("end")

    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    logger.debug("Saved model %s to %s", params.spec.name, path)
    return path


def load_model(path: Union[str, Path]) -> Tuple[ParamSet, Dict[str, Any]]:
    """
    Read a container written by ``save_model``.

    Returns:
        (ParamSet, metadata dict)

    Raises:
        ModelFormatError: On a missing file or any malformed line
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().split("\n")
    except FileNotFoundError:
        raise ModelFormatError(f"Model file not found: {path}")

    def fail(line_no: int, message: str) -> ModelFormatError:
        return ModelFormatError(f"{path}:{line_no + 1}: {message}")

    if not lines or lines[0] != CONTAINER_HEADER:
        raise fail(0, f"expected header '{CONTAINER_HEADER}'")
    try:
        if not lines[1].startswith("spec ") or not lines[2].startswith("meta "):
            raise fail(1, "expected 'spec' and 'meta' lines")
        spec = ModelSpec.from_dict(json.loads(lines[1][5:]))
        metadata = json.loads(lines[2][5:])
    except (IndexError, KeyError, ValueError) as e:
        raise fail(1, f"unreadable spec or metadata ({e})")

    tensors: Dict[str, np.ndarray] = {}
    line_no = 3
    while line_no < len(lines) and lines[line_no] != "end":
        header = lines[line_no].split(" ")
        if len(header) != 3 or header[0] != "param":
            raise fail(line_no, "expected 'param <name> <shape>'")
        name = header[1]
        try:
            shape = tuple(int(e) for e in header[2].split(","))
            values = [float(v) for v in lines[line_no + 1].split(" ") if v]
        except (IndexError, ValueError) as e:
            raise fail(line_no + 1, f"unreadable values for '{name}' ({e})")
        if len(values) != int(np.prod(shape)):
            raise fail(
                line_no + 1,
                f"'{name}' has {len(values)} values, shape {shape} needs {int(np.prod(shape))}",
            )
        tensors[name] = np.array(values, dtype=np.float64).reshape(shape)
        line_no += 2

    if line_no >= len(lines):
        raise fail(line_no - 1, "missing 'end' marker (truncated file?)")

    try:
        params = ParamSet(spec, tensors, metadata.get("init_seed"))
    except ModelSpecError as e:
        raise ModelFormatError(f"{path}: {e}")
    return params, metadata
