"""The hybrid network: residual CNN per frame, LSTM across frames, affine head.

A patch sequence [W, C, N, N] flows through

    1x1 stem (C -> F) -> residual units (with optional 1x1 mixing layers
    between adjacent units) -> global average pool -> per-frame feature
    vectors [W, F] -> stacked LSTM -> head on the final hidden state,

emitting one scalar (estimation variant) or L scalars (forecast variant,
hours t+1 .. t+L). The CNN processes all W frames of one sequence as a
batch; in train mode the frames of that sequence form the batch-norm
normalization batch. A channel-history baseline (center cell only, no CNN)
shares the LSTM/head code path.

Checkpoints are a JSON manifest plus a little-endian float64 parameter
blob; loading validates the channel-schema hash recorded at save time.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .layers import (
    BatchNormState,
    LstmParams,
    affine,
    batch_norm,
    center_pixel,
    conv1x1,
    conv2d,
    global_avg_pool,
    glorot_uniform,
    lstm_step,
)
from .rng import Rng
from .tensor import Parameter, Tensor, add, relu, row

CHECKPOINT_FORMAT = 1


@dataclass
class AirResConfig:
    """Residual trunk shape; width is constant through the trunk."""

    num_units: int = 4
    convs_per_unit: int = 2
    kernel: int = 3
    feature_width: int = 64
    use_1x1: bool = True

    def validate(self) -> None:
        if self.num_units < 1:
            raise ValueError(f"num_units must be >= 1, got {self.num_units}")
        if self.convs_per_unit < 1:
            raise ValueError(f"convs_per_unit must be >= 1, got {self.convs_per_unit}")
        if self.kernel != 3:
            raise ValueError(f"residual-unit kernel is fixed at 3, got {self.kernel}")
        if self.feature_width < 1:
            raise ValueError(f"feature_width must be >= 1, got {self.feature_width}")


@dataclass
class LstmConfig:
    """Recurrent stack shape. The published sweep uses 1-2 layers and
    hidden sizes {128, 256, 512}; any positive sizes are accepted."""

    num_layers: int = 1
    hidden_size: int = 128
    input_size: int = 64

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden_size < 1 or self.input_size < 1:
            raise ValueError(
                f"hidden_size/input_size must be >= 1, got "
                f"{self.hidden_size}/{self.input_size}"
            )


class _ConvBlock:
    def __init__(self, prefix: str, width: int, rng: Rng):
        self.weight = Parameter(
            f"{prefix}.weight", glorot_uniform(rng, (width, width, 3, 3))
        )
        self.bias = Parameter(f"{prefix}.bias", np.zeros(width))


class _BnBlock:
    def __init__(self, prefix: str, width: int):
        self.prefix = prefix
        self.gamma = Parameter(f"{prefix}.gamma", np.ones(width))
        self.beta = Parameter(f"{prefix}.beta", np.zeros(width))
        self.state = BatchNormState(width)


class ResidualUnit:
    """x + branch(x) followed by ReLU; branch = (conv3x3 -> bn -> relu)* -> conv3x3 -> bn."""

    def __init__(self, prefix: str, width: int, convs: int, rng: Rng):
        self.width = width
        self.convs = [_ConvBlock(f"{prefix}.conv{i + 1}", width, rng)
                      for i in range(convs)]
        self.bns = [_BnBlock(f"{prefix}.bn{i + 1}", width) for i in range(convs)]

    def forward(self, x: Tensor, mode: str) -> Tensor:
        if x.data.shape[-3] != self.width:
            raise ValueError(
                f"residual unit expects {self.width} channels, got shape "
                f"{x.data.shape}"
            )
        h = x
        last = len(self.convs) - 1
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            h = conv2d(h, conv.weight.tensor, conv.bias.tensor, padding=1)
            h = batch_norm(h, bn.gamma.tensor, bn.beta.tensor, bn.state, mode)
            if i < last:
                h = relu(h)
        return relu(add(x, h))

    def parameters(self) -> list[Parameter]:
        out = []
        for conv, bn in zip(self.convs, self.bns):
            out.extend([conv.weight, conv.bias, bn.gamma, bn.beta])
        return out

    def bn_states(self) -> list[tuple[str, BatchNormState]]:
        return [(bn.prefix, bn.state) for bn in self.bns]


def _lstm_over(rows: list[Tensor], layers: list[LstmParams]) -> Tensor:
    """Run the stacked recurrence; layer l>1 consumes layer l-1's hidden
    sequence. Returns the top layer's final hidden state."""
    seq = rows
    for lp in layers:
        h = Tensor(np.zeros(lp.hidden_size))
        c = Tensor(np.zeros(lp.hidden_size))
        outs = []
        for x_t in seq:
            h, c = lstm_step(x_t, h, c, lp)
            outs.append(h)
        seq = outs
    return seq[-1]


class _PredictorBase:
    """LSTM + head shared by the full model and the channel-history baseline."""

    def __init__(self, lstm: LstmConfig, window: int, variant: str, horizon: int,
                 rng: Rng):
        lstm.validate()
        if variant not in ("estimation", "forecast"):
            raise ValueError(f"variant must be 'estimation' or 'forecast', got {variant!r}")
        if variant == "estimation" and horizon != 0:
            raise ValueError("estimation variant requires horizon 0")
        if variant == "forecast" and horizon < 1:
            raise ValueError(f"forecast variant requires horizon >= 1, got {horizon}")
        if window < 1:
            raise ValueError(f"window must be >= 1, got {window}")
        self.lstm_config = lstm
        self.window = window
        self.variant = variant
        self.horizon = horizon
        self.out_dim = 1 if variant == "estimation" else horizon
        self.lstm_layers: list[LstmParams] = []
        for layer in range(lstm.num_layers):
            in_size = lstm.input_size if layer == 0 else lstm.hidden_size
            self.lstm_layers.append(
                LstmParams(f"lstm.layer{layer + 1}", in_size, lstm.hidden_size, rng)
            )
        self.head_weight = Parameter(
            "head.weight", glorot_uniform(rng, (self.out_dim, lstm.hidden_size))
        )
        self.head_bias = Parameter("head.bias", np.zeros(self.out_dim))

    def _check_patch(self, patch) -> Tensor:
        x = patch if isinstance(patch, Tensor) else Tensor(patch)
        if x.data.ndim != 4:
            raise ValueError(f"expected patch sequence [W,C,N,N], got {x.data.shape}")
        if x.data.shape[0] != self.window:
            raise ValueError(
                f"expected {self.window} frames, got {x.data.shape[0]}"
            )
        if x.data.shape[1] != self.channels:
            raise ValueError(
                f"expected {self.channels} channels, got {x.data.shape[1]}"
            )
        return x

    def _lstm_head(self, feats: Tensor) -> Tensor:
        rows = [row(feats, t) for t in range(self.window)]
        h_final = _lstm_over(rows, self.lstm_layers)
        return affine(h_final, self.head_weight.tensor, self.head_bias.tensor)

    def _base_parameters(self) -> list[Parameter]:
        out = []
        for lp in self.lstm_layers:
            out.extend(lp.parameters())
        out.extend([self.head_weight, self.head_bias])
        return out


class DeepAirModel(_PredictorBase):
    """Residual CNN feature extractor composed with the LSTM predictor."""

    kind = "deepair"

    def __init__(self, channels: int, airres: AirResConfig, lstm: LstmConfig,
                 window: int, variant: str, horizon: int, rng: Rng):
        airres.validate()
        if lstm.input_size != airres.feature_width:
            raise ValueError(
                f"lstm input_size {lstm.input_size} != feature_width "
                f"{airres.feature_width}"
            )
        self.channels = channels
        self.airres_config = airres
        f = airres.feature_width
        self.stem_weight = Parameter("stem.weight", glorot_uniform(rng, (f, channels)))
        self.stem_bias = Parameter("stem.bias", np.zeros(f))
        self.units = [
            ResidualUnit(f"airres.unit{i + 1}", f, airres.convs_per_unit, rng)
            for i in range(airres.num_units)
        ]
        self.inter_weights: list[Parameter] = []
        self.inter_biases: list[Parameter] = []
        if airres.use_1x1:
            for i in range(airres.num_units - 1):
                self.inter_weights.append(
                    Parameter(f"airres.inter{i + 1}.weight", glorot_uniform(rng, (f, f)))
                )
                self.inter_biases.append(
                    Parameter(f"airres.inter{i + 1}.bias", np.zeros(f))
                )
        super().__init__(lstm, window, variant, horizon, rng)

    def airres_forward(self, frames, mode: str = "eval") -> Tensor:
        """[C,N,N] -> [F] or [W,C,N,N] -> [W,F] per-frame feature vectors."""
        x = frames if isinstance(frames, Tensor) else Tensor(frames)
        if x.data.shape[-3] != self.channels:
            raise ValueError(
                f"stem expects {self.channels} channels, got shape {x.data.shape}"
            )
        h = conv1x1(x, self.stem_weight.tensor, self.stem_bias.tensor)
        for i, unit in enumerate(self.units):
            h = unit.forward(h, mode)
            if self.airres_config.use_1x1 and i < len(self.units) - 1:
                h = conv1x1(h, self.inter_weights[i].tensor,
                            self.inter_biases[i].tensor)
        return global_avg_pool(h)

    def forward(self, patch, mode: str = "eval") -> Tensor:
        x = self._check_patch(patch)
        feats = self.airres_forward(x, mode)
        return self._lstm_head(feats)

    def parameters(self) -> list[Parameter]:
        out = [self.stem_weight, self.stem_bias]
        for unit in self.units:
            out.extend(unit.parameters())
        for w, b in zip(self.inter_weights, self.inter_biases):
            out.extend([w, b])
        out.extend(self._base_parameters())
        return out

    def bn_states(self) -> list[tuple[str, BatchNormState]]:
        out = []
        for unit in self.units:
            out.extend(unit.bn_states())
        return out

    def config_dict(self) -> dict:
        return {
            "kind": self.kind,
            "channels": self.channels,
            "airres": asdict(self.airres_config),
            "lstm": asdict(self.lstm_config),
            "window": self.window,
            "variant": self.variant,
            "horizon": self.horizon,
        }


class LstmBaselineModel(_PredictorBase):
    """Center-cell channel history through the LSTM, no spatial context."""

    kind = "lstm_baseline"

    def __init__(self, channels: int, lstm: LstmConfig, window: int, variant: str,
                 horizon: int, rng: Rng):
        if lstm.input_size != channels:
            raise ValueError(
                f"baseline lstm input_size {lstm.input_size} != channels {channels}"
            )
        self.channels = channels
        super().__init__(lstm, window, variant, horizon, rng)

    def forward(self, patch, mode: str = "eval") -> Tensor:
        x = self._check_patch(patch)
        feats = center_pixel(x)  # [W, C]
        return self._lstm_head(feats)

    def parameters(self) -> list[Parameter]:
        return self._base_parameters()

    def bn_states(self) -> list[tuple[str, BatchNormState]]:
        return []

    def config_dict(self) -> dict:
        return {
            "kind": self.kind,
            "channels": self.channels,
            "airres": None,
            "lstm": asdict(self.lstm_config),
            "window": self.window,
            "variant": self.variant,
            "horizon": self.horizon,
        }


def build_model(config: dict, rng: Optional[Rng] = None):
    """Construct a model from a config_dict()-shaped mapping."""
    rng = rng or Rng(0)
    lstm = LstmConfig(**config["lstm"])
    if config["kind"] == "deepair":
        return DeepAirModel(
            config["channels"], AirResConfig(**config["airres"]), lstm,
            config["window"], config["variant"], config["horizon"], rng,
        )
    if config["kind"] == "lstm_baseline":
        return LstmBaselineModel(
            config["channels"], lstm, config["window"], config["variant"],
            config["horizon"], rng,
        )
    raise ValueError(f"unknown model kind {config['kind']!r}")


# ---------------------------------------------------------------------------
# checkpoint format: <base>.json manifest + <base>.params blob
# ---------------------------------------------------------------------------

def _buffer_items(model) -> list[tuple[str, np.ndarray]]:
    items = []
    for prefix, state in model.bn_states():
        items.append((f"{prefix}.running_mean", state.running_mean))
        items.append((f"{prefix}.running_var", state.running_var))
        items.append((f"{prefix}.initialized",
                      np.array([1.0 if state.initialized else 0.0])))
    return items


def _write_array(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode()
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(fh) -> tuple[str, np.ndarray]:
    nlen = struct.unpack("<I", fh.read(4))[0]
    name = fh.read(nlen).decode()
    ndim = struct.unpack("<I", fh.read(4))[0]
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
    return name, data.astype(np.float64)


def save_checkpoint(model, base: str | Path, *, schema_hash: str,
                    normalization: dict, seed: int, target_channel: str,
                    extra: Optional[dict] = None) -> None:
    base = Path(base)
    params = model.parameters()
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValueError("duplicate parameter names in model")
    buffers = _buffer_items(model)
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "model": model.config_dict(),
        "schema_hash": schema_hash,
        "normalization": {k: [float(v[0]), float(v[1])]
                          for k, v in normalization.items()},
        "seed": int(seed),
        "target_channel": target_channel,
        "parameters": names,
        "buffers": [n for n, _ in buffers],
    }
    if extra:
        manifest["extra"] = extra
    base.parent.mkdir(parents=True, exist_ok=True)
    with open(base.with_suffix(".json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(base.with_suffix(".params"), "wb") as fh:
        for p in params:
            _write_array(fh, p.name, p.tensor.data)
        for name, arr in buffers:
            _write_array(fh, name, arr)


def load_checkpoint(base: str | Path, *, schema_hash: Optional[str] = None):
    """Rebuild a model from a checkpoint. Returns (model, manifest)."""
    base = Path(base)
    with open(base.with_suffix(".json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(
            f"unsupported checkpoint format {manifest.get('format_version')!r}"
        )
    if schema_hash is not None and manifest["schema_hash"] != schema_hash:
        raise ValueError(
            f"checkpoint schema hash {manifest['schema_hash']} does not match "
            f"the provided schema ({schema_hash})"
        )
    model = build_model(manifest["model"])
    arrays = {}
    with open(base.with_suffix(".params"), "rb") as fh:
        expected = len(manifest["parameters"]) + len(manifest["buffers"])
        for _ in range(expected):
            name, arr = _read_array(fh)
            arrays[name] = arr
    for p in model.parameters():
        if p.name not in arrays:
            raise ValueError(f"checkpoint missing parameter {p.name!r}")
        if arrays[p.name].shape != p.tensor.data.shape:
            raise ValueError(
                f"checkpoint parameter {p.name!r} has shape "
                f"{arrays[p.name].shape}, expected {p.tensor.data.shape}"
            )
        p.tensor.data = arrays[p.name].copy()
    for prefix, state in model.bn_states():
        state.running_mean = arrays[f"{prefix}.running_mean"].copy()
        state.running_var = arrays[f"{prefix}.running_var"].copy()
        state.initialized = bool(arrays[f"{prefix}.initialized"][0])
    return model, manifest
