"""Convolutional regression network for terrain patches.

The default architecture takes a 32 x 32 x 1 normalised terrain patch through
five 128-channel 3x3 convolutions (strides 2, 2, 2, 1, 1), average-pools the
4 x 4 x 128 result to 2 x 2 x 128, flattens to 512 features and finishes with
dense layers of 256 and 128 units and a single linear output. Gaussian noise
is injected ahead of every convolution and dropout follows every hidden layer
during training.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .rng import substream

PARAM_MAGIC = b"TERRACOV-PARAMS\n"
PARAM_FORMAT_VERSION = 1


class ArchError(ValueError):
    """Inconsistent architecture configuration."""


class ParameterFileError(ValueError):
    """Unreadable or incompatible parameter file."""


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    noise_sigma: float = 0.05
    dropout_rate: float = 0.2


@dataclass(frozen=True)
class DenseSpec:
    width: int
    dropout_rate: float = 0.2


@dataclass(frozen=True)
class ArchConfig:
    """Layer recipe. The single linear output unit is always appended after
    ``dense_layers``, which lists hidden layers only."""

    input_size: int = 32
    conv_layers: tuple[ConvSpec, ...] = ()
    pool: int = 1
    dense_layers: tuple[DenseSpec, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_layers", tuple(self.conv_layers))
        object.__setattr__(self, "dense_layers", tuple(self.dense_layers))
        self.shape_trace()  # validates

    def shape_trace(self) -> list[tuple[str, tuple[int, ...]]]:
        """Per-sample output shape of every layer, starting with the input."""
        if self.input_size < 1:
            raise ArchError("input_size must be positive")
        c, s = 1, self.input_size
        trace: list[tuple[str, tuple[int, ...]]] = [("input", (c, s, s))]
        for i, spec in enumerate(self.conv_layers):
            if spec.out_channels < 1 or spec.kernel < 1 or spec.stride < 1 or spec.padding < 0:
                raise ArchError(f"conv{i}: invalid layer {spec}")
            span = s + 2 * spec.padding - spec.kernel
            if span < 0:
                raise ArchError(f"conv{i}: kernel does not fit spatial size {s} under {spec}")
            s = span // spec.stride + 1
            c = spec.out_channels
            trace.append((f"conv{i}", (c, s, s)))
        if self.pool < 1 or s % self.pool:
            raise ArchError(f"pool {self.pool} does not divide spatial size {s}")
        if self.pool > 1:
            s //= self.pool
            trace.append(("pool", (c, s, s)))
        features = c * s * s
        trace.append(("flatten", (features,)))
        for i, spec in enumerate(self.dense_layers):
            if spec.width < 1:
                raise ArchError(f"dense{i}: width must be positive")
            trace.append((f"dense{i}", (spec.width,)))
        trace.append(("output", (1,)))
        return trace

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ArchConfig:
        return cls(
            input_size=int(d.get("input_size", 32)),
            conv_layers=tuple(ConvSpec(**c) for c in d.get("conv_layers", ())),
            pool=int(d.get("pool", 1)),
            dense_layers=tuple(DenseSpec(**c) for c in d.get("dense_layers", ())),
            seed=int(d.get("seed", 0)),
        )

    def fingerprint(self) -> str:
        """Hash of everything except the init seed."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def default_arch(seed: int = 0, noise_sigma: float = 0.05, dropout_rate: float = 0.2) -> ArchConfig:
    strides = (2, 2, 2, 1, 1)
    return ArchConfig(
        input_size=32,
        conv_layers=tuple(
            ConvSpec(128, kernel=3, stride=s, padding=1, noise_sigma=noise_sigma, dropout_rate=dropout_rate)
            for s in strides
        ),
        pool=2,
        dense_layers=(DenseSpec(256, dropout_rate), DenseSpec(128, dropout_rate)),
        seed=seed,
    )



def demo_arch(seed: int = 0, noise_sigma: float = 0.005, dropout_rate: float = 0.1) -> ArchConfig:
    """Desk-scale variant of :func:`default_arch` for the synthetic demo.

    Same layer pattern and shape trace with 32 conv channels and dense
    widths 64/32, so an epoch over 4500 patches takes seconds on one core.
    The input noise is scaled down because neighbouring normalised cells
    on synthetic terrain differ by only a few hundredths.
    """
    strides = (2, 2, 2, 1, 1)
    return ArchConfig(
        input_size=32,
        conv_layers=tuple(
            ConvSpec(32, kernel=3, stride=s, padding=1, noise_sigma=noise_sigma, dropout_rate=dropout_rate)
            for s in strides
        ),
        pool=2,
        dense_layers=(DenseSpec(64, dropout_rate), DenseSpec(32, dropout_rate)),
        seed=seed,
    )

# ---------------------------------------------------------------------------
# flat key/value config text

_LIST_KEYS = ("conv_channels", "conv_kernels", "conv_strides", "conv_padding", "conv_noise", "conv_dropout")


def _split(value: str, cast) -> list:
    value = value.strip()
    return [cast(v) for v in value.split(",") if v.strip()] if value else []


def parse_arch_text(text: str) -> ArchConfig:
    """Parse a flat ``key = value`` architecture description.

    Keys: input_size, pool, seed, conv_channels (comma list, one entry per
    conv layer), conv_kernels, conv_strides, conv_padding, conv_noise,
    conv_dropout, dense_widths, dense_dropout. Per-layer lists may be given
    as a single value that applies to every layer. Blank lines and ``#``
    comments are ignored.
    """
    kv: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ArchError(f"line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        kv[k.strip().lower()] = v.strip()
    known = {"input_size", "pool", "seed", "dense_widths", "dense_dropout", *_LIST_KEYS}
    unknown = sorted(set(kv) - known)
    if unknown:
        raise ArchError(f"unknown architecture keys: {unknown}")

    channels = _split(kv.get("conv_channels", ""), int)
    n_conv = len(channels)

    def per_layer(key, cast, default, n):
        vals = _split(kv[key], cast) if key in kv else [default]
        if len(vals) == 1:
            return vals * n
        if len(vals) != n:
            raise ArchError(f"{key} has {len(vals)} entries for {n} layers")
        return vals

    kernels = per_layer("conv_kernels", int, 3, n_conv)
    strides = per_layer("conv_strides", int, 1, n_conv)
    paddings = per_layer("conv_padding", int, 1, n_conv)
    noise = per_layer("conv_noise", float, 0.05, n_conv)
    cdrop = per_layer("conv_dropout", float, 0.2, n_conv)
    widths = _split(kv.get("dense_widths", ""), int)
    ddrop = per_layer("dense_dropout", float, 0.2, len(widths))
    return ArchConfig(
        input_size=int(kv.get("input_size", 32)),
        conv_layers=tuple(ConvSpec(*spec) for spec in zip(channels, kernels, strides, paddings, noise, cdrop)),
        pool=int(kv.get("pool", 1)),
        dense_layers=tuple(DenseSpec(w, r) for w, r in zip(widths, ddrop)),
        seed=int(kv.get("seed", 0)),
    )


def arch_to_text(arch: ArchConfig) -> str:
    def join(vals):
        return ",".join(str(v) for v in vals)

    convs, denses = arch.conv_layers, arch.dense_layers
    lines = [
        f"input_size = {arch.input_size}",
        f"conv_channels = {join(c.out_channels for c in convs)}",
        f"conv_kernels = {join(c.kernel for c in convs)}",
        f"conv_strides = {join(c.stride for c in convs)}",
        f"conv_padding = {join(c.padding for c in convs)}",
        f"conv_noise = {join(c.noise_sigma for c in convs)}",
        f"conv_dropout = {join(c.dropout_rate for c in convs)}",
        f"pool = {arch.pool}",
        f"dense_widths = {join(d.width for d in denses)}",
        f"dense_dropout = {join(d.dropout_rate for d in denses)}",
        f"seed = {arch.seed}",
    ]
    return "\n".join(lines) + "\n"


def load_arch(path: str | Path) -> ArchConfig:
    """Read an architecture file: JSON if it parses as JSON, else key/value text."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        d = json.loads(text)
    except json.JSONDecodeError:
        return parse_arch_text(text)
    return ArchConfig.from_dict(d)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelParameters:
    """Named trainable tensors plus the affine map from network output to target units."""

    tensors: dict[str, Tensor] = field(default_factory=dict)
    target_mean: float = 0.0
    target_scale: float = 1.0

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def copy(self) -> ModelParameters:
        return ModelParameters(
            {k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k) for k, t in self.tensors.items()},
            self.target_mean,
            self.target_scale,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for k, v in arrays.items():
            self.tensors[k].data = np.array(v, dtype=np.float64, copy=True)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None


def parameter_count(params: ModelParameters | dict | list) -> int:
    if isinstance(params, ModelParameters):
        tensors = params.tensors.values()
    elif isinstance(params, dict):
        tensors = params.values()
    else:
        tensors = params
    return int(sum(np.asarray(t.data if isinstance(t, Tensor) else t).size for t in tensors))


def expected_shapes(arch: ArchConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    c_in = 1
    for i, spec in enumerate(arch.conv_layers):
        shapes.append((f"conv{i}.weight", (spec.out_channels, c_in, spec.kernel, spec.kernel)))
        shapes.append((f"conv{i}.bias", (spec.out_channels,)))
        c_in = spec.out_channels
    f_in = arch.shape_trace()[-2 - len(arch.dense_layers)][1][0]
    for i, spec in enumerate(arch.dense_layers):
        shapes.append((f"dense{i}.weight", (f_in, spec.width)))
        shapes.append((f"dense{i}.bias", (spec.width,)))
        f_in = spec.width
    shapes.append(("output.weight", (f_in, 1)))
    shapes.append(("output.bias", (1,)))
    return shapes


def build_network(arch: ArchConfig, seed: int | None = None) -> ModelParameters:
    """He-uniform weights (bound sqrt(6 / fan_in)) and zero biases."""
    rng = substream(arch.seed if seed is None else seed, "init")
    tensors = {}
    for name, shape in expected_shapes(arch):
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = math.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParameters(tensors)


def check_parameters(params: ModelParameters, arch: ArchConfig):
    want = expected_shapes(arch)
    got = [(k, t.shape) for k, t in params.tensors.items()]
    if got != want:
        raise ArchError(f"parameters do not match architecture: expected {want}, got {got}")


# ---------------------------------------------------------------------------
# forward


def forward(
    params: ModelParameters,
    arch: ArchConfig,
    batch,
    train: bool = False,
    rng_for: Callable[[str], np.random.Generator] | None = None,
    trace: list | None = None,
) -> Tensor:
    """Network output (standardised units) for a batch of shape (N, 1, k, k).

    ``rng_for(layer_name)`` supplies the generator for that layer's noise or
    dropout in training mode. Eval mode is a pure function of params and input.
    If ``trace`` is a list, (layer name, output shape) pairs are appended.
    """
    x = ag.as_tensor(batch)
    k = arch.input_size
    if x.data.ndim != 4 or x.shape[1:] != (1, k, k):
        raise ArchError(f"expected batch of shape (N, 1, {k}, {k}), got {x.shape}")
    if train and rng_for is None:
        raise ValueError("training-mode forward needs rng_for")

    def note(name, t):
        if trace is not None:
            trace.append((name, t.shape))

    note("input", x)
    for i, spec in enumerate(arch.conv_layers):
        if train:
            x = ag.gaussian_noise(x, spec.noise_sigma, True, rng_for(f"conv{i}.noise") if spec.noise_sigma else None)
        x = ag.conv2d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], spec.stride, spec.padding)
        x = ag.relu(x)
        if train and spec.dropout_rate:
            x = ag.dropout(x, spec.dropout_rate, True, rng_for(f"conv{i}.dropout"))
        note(f"conv{i}", x)
    if arch.pool > 1:
        x = ag.avg_pool2d(x, arch.pool)
        note("pool", x)
    x = ag.flatten(x)
    note("flatten", x)
    for i, spec in enumerate(arch.dense_layers):
        x = ag.relu(ag.dense(x, params[f"dense{i}.weight"], params[f"dense{i}.bias"]))
        if train and spec.dropout_rate:
            x = ag.dropout(x, spec.dropout_rate, True, rng_for(f"dense{i}.dropout"))
        note(f"dense{i}", x)
    x = ag.dense(x, params["output.weight"], params["output.bias"])
    note("output", x)
    return x


PREDICT_BATCH = 64


def predict(
    params: ModelParameters, arch: ArchConfig, patches: np.ndarray, batch_size: int = PREDICT_BATCH
) -> np.ndarray:
    """Eval-mode predictions in target units for patches of shape (N, k, k).

    Every forward pass sees exactly ``batch_size`` rows (the last batch is
    zero-padded). BLAS results then do not depend on where a patch sits in
    the input, so the same patch gives bit-identical predictions whether it
    comes from evaluation or from a map sweep.
    """
    patches = np.asarray(patches, dtype=np.float64)
    n = patches.shape[0]
    k = arch.input_size
    if patches.ndim != 3 or patches.shape[1:] != (k, k):
        raise ArchError(f"expected patches of shape (N, {k}, {k}), got {patches.shape}")
    out = np.empty(n)
    buf = np.zeros((batch_size, 1, k, k))
    for start in range(0, n, batch_size):
        m = min(batch_size, n - start)
        buf[:m, 0] = patches[start : start + m]
        buf[m:] = 0.0
        raw = forward(params, arch, buf).data.reshape(-1)[:m]
        out[start : start + m] = raw * params.target_scale + params.target_mean
    return out


# ---------------------------------------------------------------------------
# persistence


def save_parameters(params: ModelParameters, arch: ArchConfig, path: str | Path) -> Path:
    """Write a magic line, a one-line JSON manifest and little-endian float64 payload."""
    check_parameters(params, arch)
    header = {
        "format_version": PARAM_FORMAT_VERSION,
        "arch_fingerprint": arch.fingerprint(),
        "arch": arch.to_dict(),
        "tensors": [{"name": k, "shape": list(t.shape)} for k, t in params.tensors.items()],
        "target_mean": params.target_mean,
        "target_scale": params.target_scale,
    }
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for t in params.tensors.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return path


def load_parameters(path: str | Path, arch: ArchConfig | None = None) -> tuple[ModelParameters, ArchConfig]:
    """Read a parameter file; refuses files whose architecture differs from ``arch``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(PARAM_MAGIC):
        raise ParameterFileError(f"{path}: not a parameter file (bad magic bytes)")
    rest = raw[len(PARAM_MAGIC) :]
    nl = rest.find(b"\n")
    if nl < 0:
        raise ParameterFileError(f"{path}: truncated header")
    try:
        header = json.loads(rest[:nl])
    except json.JSONDecodeError as exc:
        raise ParameterFileError(f"{path}: corrupt header ({exc})") from None
    if header.get("format_version") != PARAM_FORMAT_VERSION:
        raise ParameterFileError(f"{path}: unsupported format version {header.get('format_version')}")
    file_arch = ArchConfig.from_dict(header["arch"])
    if file_arch.fingerprint() != header["arch_fingerprint"]:
        raise ParameterFileError(f"{path}: architecture fingerprint does not match embedded config")
    if arch is not None and arch.fingerprint() != file_arch.fingerprint():
        raise ParameterFileError(
            f"{path}: architecture mismatch (file {file_arch.fingerprint()}, expected {arch.fingerprint()})"
        )
    payload = rest[nl + 1 :]
    tensors = {}
    offset = 0
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(payload):
            raise ParameterFileError(f"{path}: payload truncated at tensor {spec['name']}")
        data = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape)
        tensors[spec["name"]] = Tensor(data.astype(np.float64), requires_grad=True, name=spec["name"])
        offset += nbytes
    if offset != len(payload):
        raise ParameterFileError(f"{path}: {len(payload) - offset} trailing bytes after payload")
    params = ModelParameters(tensors, float(header["target_mean"]), float(header["target_scale"]))
    check_parameters(params, file_arch)
    return params, file_arch
