"""Encoder/decoder architectures as data, plus the VAE model built from them.

An ``ArchSpec`` is an ordered list of layer descriptors; shape
propagation over the descriptors is checked at construction time, so a
bad preset fails before any parameter is allocated.  The encoder trunk
ends in a feature vector consumed by two parallel linear heads (latent
mean and log standard deviation).  The variance head produces log sigma
and is exponentiated on use, which keeps sigma positive by construction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .diffmath import Parameter, RunningStats, ShapeError, Tensor

LOG_SIGMA_CLAMP = 10.0


# ---------------------------------------------------------------------------
# layer descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Conv:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int


@dataclass(frozen=True)
class ConvT:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int


@dataclass(frozen=True)
class BatchNorm:
    num_features: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Sigmoid:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Unflatten:
    shape: tuple  # (C, H, W)


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int


def propagate_shape(shape, layers):
    """Run symbolic shape propagation; returns the shape after each layer."""
    shapes = []
    cur = tuple(shape)
    for layer in layers:
        if isinstance(layer, Conv):
            c, h, w = cur
            if c != layer.in_ch:
                raise ShapeError(f"{layer} applied to {cur}")
            if h < layer.kernel or w < layer.kernel:
                raise ShapeError(f"{layer} kernel larger than input {cur}")
            cur = (
                layer.out_ch,
                (h - layer.kernel) // layer.stride + 1,
                (w - layer.kernel) // layer.stride + 1,
            )
        elif isinstance(layer, ConvT):
            c, h, w = cur
            if c != layer.in_ch:
                raise ShapeError(f"{layer} applied to {cur}")
            cur = (
                layer.out_ch,
                (h - 1) * layer.stride + layer.kernel,
                (w - 1) * layer.stride + layer.kernel,
            )
        elif isinstance(layer, BatchNorm):
            if cur[0] != layer.num_features:
                raise ShapeError(f"{layer} applied to {cur}")
        elif isinstance(layer, Flatten):
            cur = (int(np.prod(cur)),)
        elif isinstance(layer, Unflatten):
            if int(np.prod(layer.shape)) != int(np.prod(cur)):
                raise ShapeError(f"{layer} incompatible with {cur}")
            cur = tuple(layer.shape)
        elif isinstance(layer, Linear):
            if len(cur) != 1 or cur[0] != layer.in_features:
                raise ShapeError(f"{layer} applied to {cur}")
            cur = (layer.out_features,)
        elif isinstance(layer, (Relu, Sigmoid)):
            pass
        else:
            raise TypeError(f"unknown layer descriptor {layer!r}")
        shapes.append(cur)
    return shapes


@dataclass(frozen=True)
class ArchSpec:
    """Full architecture description: trunk layers, twin heads, decoder."""

    name: str
    input_shape: tuple  # (C, H, W)
    encoder_layers: tuple
    decoder_layers: tuple
    latent_dim: int

    def __post_init__(self):
        shapes = propagate_shape(self.input_shape, self.encoder_layers)
        trunk_out = shapes[-1]
        if len(trunk_out) != 1:
            raise ShapeError(f"encoder trunk must end in a feature vector, got {trunk_out}")
        object.__setattr__(self, "_head_in", trunk_out[0])
        dec_shapes = propagate_shape((self.latent_dim,), self.decoder_layers)
        if dec_shapes[-1] != tuple(self.input_shape):
            raise ShapeError(
                f"decoder ends at {dec_shapes[-1]}, expected input shape {tuple(self.input_shape)}"
            )

    @property
    def head_in_features(self) -> int:
        return self._head_in

    @property
    def mu_head(self) -> Linear:
        return Linear(self._head_in, self.latent_dim)

    @property
    def log_sigma_head(self) -> Linear:
        return Linear(self._head_in, self.latent_dim)

    def encoder_shapes(self):
        return propagate_shape(self.input_shape, self.encoder_layers)

    def decoder_shapes(self):
        return propagate_shape((self.latent_dim,), self.decoder_layers)


_LAYER_TYPES = {
    "conv": Conv,
    "conv_t": ConvT,
    "batchnorm": BatchNorm,
    "relu": Relu,
    "sigmoid": Sigmoid,
    "flatten": Flatten,
    "unflatten": Unflatten,
    "linear": Linear,
}


def _layer_to_json(layer) -> dict:
    for tag, cls in _LAYER_TYPES.items():
        if type(layer) is cls:
            d = {"type": tag}
            for f in layer.__dataclass_fields__:
                v = getattr(layer, f)
                d[f] = list(v) if isinstance(v, tuple) else v
            return d
    raise TypeError(f"unknown layer {layer!r}")


def _layer_from_json(d: dict):
    cls = _LAYER_TYPES[d["type"]]
    kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k != "type"}
    return cls(**kwargs)


def arch_to_json(arch: ArchSpec) -> dict:
    return {
        "name": arch.name,
        "input_shape": list(arch.input_shape),
        "encoder_layers": [_layer_to_json(l) for l in arch.encoder_layers],
        "decoder_layers": [_layer_to_json(l) for l in arch.decoder_layers],
        "latent_dim": arch.latent_dim,
    }


def arch_from_json(d: dict) -> ArchSpec:
    return ArchSpec(
        name=d["name"],
        input_shape=tuple(d["input_shape"]),
        encoder_layers=tuple(_layer_from_json(l) for l in d["encoder_layers"]),
        decoder_layers=tuple(_layer_from_json(l) for l in d["decoder_layers"]),
        latent_dim=int(d["latent_dim"]),
    )


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


def preset(name: str, latent_dim: int = 30) -> ArchSpec:
    """Return one of the three stock architectures.

    ``fashion_mnist``: 1x28x28, ``cifar10``: 3x32x32, ``gray244``:
    1x244x244 (serves both the face and the X-ray corpora; pick the
    latent size accordingly).
    """
    if name == "fashion_mnist":
        enc = (
            Conv(1, 16, 3, 1), BatchNorm(16), Relu(),
            Conv(16, 32, 3, 2), BatchNorm(32), Relu(),
            Conv(32, 64, 3, 1), BatchNorm(64), Relu(),
            Conv(64, 128, 3, 2), BatchNorm(128), Relu(),
            Flatten(),
            Linear(2048, 256), BatchNorm(256), Relu(),
        )
        dec = (
            Linear(latent_dim, 256), BatchNorm(256), Relu(),
            Linear(256, 2048), BatchNorm(2048), Relu(),
            Unflatten((128, 4, 4)),
            ConvT(128, 64, 3, 3), BatchNorm(64), Relu(),
            ConvT(64, 32, 3, 2), BatchNorm(32), Relu(),
            ConvT(32, 16, 3, 1), BatchNorm(16), Relu(),
            ConvT(16, 1, 2, 1),
            Sigmoid(),
        )
        return ArchSpec(name, (1, 28, 28), enc, dec, latent_dim)
    if name == "cifar10":
        enc = (
            Conv(3, 32, 3, 1), BatchNorm(32), Relu(),
            Conv(32, 64, 3, 2), BatchNorm(64), Relu(),
            Conv(64, 128, 3, 1), BatchNorm(128), Relu(),
            Conv(128, 256, 3, 2), BatchNorm(256), Relu(),
            Flatten(),
            Linear(6400, 1024), BatchNorm(1024), Relu(),
        )
        dec = (
            Linear(latent_dim, 1024), BatchNorm(1024), Relu(),
            Linear(1024, 6400), BatchNorm(6400), Relu(),
            Unflatten((256, 5, 5)),
            ConvT(256, 128, 3, 2), BatchNorm(128), Relu(),
            ConvT(128, 64, 3, 1), BatchNorm(64), Relu(),
            ConvT(64, 32, 3, 2), BatchNorm(32), Relu(),
            ConvT(32, 16, 3, 1), BatchNorm(16), Relu(),
            ConvT(16, 3, 4, 1),
            Sigmoid(),
        )
        return ArchSpec(name, (3, 32, 32), enc, dec, latent_dim)
    if name == "gray244":
        enc = (
            Conv(1, 32, 3, 3), BatchNorm(32), Relu(),
            Conv(32, 64, 3, 3), BatchNorm(64), Relu(),
            Conv(64, 128, 3, 3), BatchNorm(128), Relu(),
            Flatten(),
            Linear(10368, 256), BatchNorm(256), Relu(),
        )
        dec = (
            Linear(latent_dim, 256), BatchNorm(256), Relu(),
            Linear(256, 10368), BatchNorm(10368), Relu(),
            Unflatten((128, 9, 9)),
            ConvT(128, 64, 3, 3), BatchNorm(64), Relu(),
            ConvT(64, 32, 3, 3), BatchNorm(32), Relu(),
            ConvT(32, 1, 4, 3),
            Sigmoid(),
        )
        return ArchSpec(name, (1, 244, 244), enc, dec, latent_dim)
    raise ValueError(f"unknown preset {name!r}")


PRESET_NAMES = ("fashion_mnist", "cifar10", "gray244")


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class LatentCode:
    """Per-sample encoder output: latent mean and log standard deviation."""

    mu: np.ndarray
    log_sigma: np.ndarray


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _ConvModule:
    def __init__(self, desc: Conv, rng, dtype):
        fan_in = desc.in_ch * desc.kernel * desc.kernel
        self.weight = Parameter(
            _uniform_fan_in(rng, (desc.out_ch, desc.in_ch, desc.kernel, desc.kernel), fan_in, dtype)
        )
        self.bias = Parameter(np.zeros(desc.out_ch, dtype=dtype))
        self.stride = desc.stride

    def __call__(self, x, mode):
        return dm.conv2d_valid(x, self.weight, self.bias, self.stride)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {}


class _ConvTModule:
    def __init__(self, desc: ConvT, rng, dtype):
        fan_in = desc.in_ch * desc.kernel * desc.kernel
        self.weight = Parameter(
            _uniform_fan_in(rng, (desc.in_ch, desc.out_ch, desc.kernel, desc.kernel), fan_in, dtype)
        )
        self.bias = Parameter(np.zeros(desc.out_ch, dtype=dtype))
        self.stride = desc.stride

    def __call__(self, x, mode):
        return dm.conv_transpose2d(x, self.weight, self.bias, self.stride)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {}


class _BatchNormModule:
    def __init__(self, desc: BatchNorm, rng, dtype):
        self.scale = Parameter(np.ones(desc.num_features, dtype=dtype))
        self.shift = Parameter(np.zeros(desc.num_features, dtype=dtype))
        self.stats = RunningStats(desc.num_features, dtype)

    def __call__(self, x, mode):
        return dm.batchnorm(x, self.scale, self.shift, self.stats, mode=mode)

    def params(self):
        return {"scale": self.scale, "shift": self.shift}

    def buffers(self):
        return {"running_mean": self.stats.mean, "running_var": self.stats.var}


class _LinearModule:
    def __init__(self, desc: Linear, rng, dtype):
        self.weight = Parameter(
            _uniform_fan_in(rng, (desc.out_features, desc.in_features), desc.in_features, dtype)
        )
        self.bias = Parameter(np.zeros(desc.out_features, dtype=dtype))

    def __call__(self, x, mode):
        return dm.linear(x, self.weight, self.bias)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {}


class _Stateless:
    def __init__(self, desc):
        self.desc = desc

    def __call__(self, x, mode):
        d = self.desc
        if isinstance(d, Relu):
            return dm.relu(x)
        if isinstance(d, Sigmoid):
            return dm.sigmoid(x)
        if isinstance(d, Flatten):
            return dm.reshape(x, (x.shape[0], -1))
        return dm.reshape(x, (x.shape[0],) + tuple(d.shape))  # Unflatten

    def params(self):
        return {}

    def buffers(self):
        return {}


def _build_modules(layers, rng, dtype):
    mods = []
    for desc in layers:
        if isinstance(desc, Conv):
            mods.append(_ConvModule(desc, rng, dtype))
        elif isinstance(desc, ConvT):
            mods.append(_ConvTModule(desc, rng, dtype))
        elif isinstance(desc, BatchNorm):
            mods.append(_BatchNormModule(desc, rng, dtype))
        elif isinstance(desc, Linear):
            mods.append(_LinearModule(desc, rng, dtype))
        else:
            mods.append(_Stateless(desc))
    return mods


class VaeModel:
    """Encoder + twin heads + decoder with a train/eval switch.

    Eval mode uses running batch-norm statistics, so outputs do not
    depend on batch composition; training mutates parameters and
    running stats and therefore needs exclusive access.
    """

    def __init__(self, arch: ArchSpec, rng: np.random.Generator, dtype=None):
        self.arch = arch
        self.mode = "train"
        dt = dtype or dm.default_dtype()
        self._encoder = _build_modules(arch.encoder_layers, rng, dt)
        self._mu_head = _LinearModule(arch.mu_head, rng, dt)
        self._log_sigma_head = _LinearModule(arch.log_sigma_head, rng, dt)
        self._decoder = _build_modules(arch.decoder_layers, rng, dt)

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def _named_modules(self):
        for i, m in enumerate(self._encoder):
            yield f"encoder.{i}", m
        yield "mu_head", self._mu_head
        yield "log_sigma_head", self._log_sigma_head
        for i, m in enumerate(self._decoder):
            yield f"decoder.{i}", m

    def parameters(self) -> dict:
        out = {}
        for name, mod in self._named_modules():
            for pname, p in mod.params().items():
                out[f"{name}.{pname}"] = p
        return out

    def buffers(self) -> dict:
        out = {}
        for name, mod in self._named_modules():
            for bname, b in mod.buffers().items():
                out[f"{name}.{bname}"] = b
        return out

    def encode_tensors(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if tuple(x.shape[1:]) != tuple(self.arch.input_shape):
            raise ShapeError(
                f"batch shape {tuple(x.shape[1:])} != model input {tuple(self.arch.input_shape)}"
            )
        h = x
        for mod in self._encoder:
            h = mod(h, self.mode)
        return self._mu_head(h, self.mode), self._log_sigma_head(h, self.mode)

    def decode_tensors(self, z: Tensor) -> Tensor:
        if z.shape[1] != self.arch.latent_dim:
            raise ShapeError(f"latent dim {z.shape[1]} != model latent {self.arch.latent_dim}")
        h = z
        for mod in self._decoder:
            h = mod(h, self.mode)
        return h


def build_model(arch: ArchSpec, seed: int = 0, dtype=None) -> VaeModel:
    return VaeModel(arch, np.random.default_rng(seed), dtype=dtype)


def encode(model: VaeModel, batch: np.ndarray) -> list[LatentCode]:
    """Run the encoder on a (B,C,H,W) batch; returns one code per sample."""
    with dm.no_grad():
        mu, log_sigma = model.encode_tensors(Tensor(batch))
    return [LatentCode(mu.data[i].copy(), log_sigma.data[i].copy()) for i in range(len(batch))]


def reparameterize(code: LatentCode, epsilon: np.ndarray) -> np.ndarray:
    """z = mu + exp(log_sigma) * epsilon for a standard-normal epsilon."""
    if epsilon.shape != code.mu.shape:
        raise ShapeError(f"epsilon shape {epsilon.shape} != latent shape {code.mu.shape}")
    ls = np.clip(code.log_sigma, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)
    return code.mu + np.exp(ls) * epsilon


def decode(model: VaeModel, z: np.ndarray) -> np.ndarray:
    """Run the decoder on (B, latent_dim) codes; returns reconstructions."""
    z = np.atleast_2d(np.asarray(z))
    with dm.no_grad():
        out = model.decode_tensors(Tensor(z))
    return out.data.copy()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "csvae-checkpoint-v1"


@dataclass
class Checkpoint:
    """Everything needed to restore a trained model: arch + named tensors."""

    arch: ArchSpec
    tensors: dict  # name -> float32 ndarray (parameters, buffers, extras)
    config: dict = field(default_factory=dict)
    seed: int = 0

    def to_manifest_and_blob(self) -> tuple[dict, bytes]:
        entries = []
        chunks = []
        offset = 0
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f4")
            raw = arr.tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "arch": arch_to_json(self.arch),
            "latent_dim": self.arch.latent_dim,
            "tensors": entries,
            "config": self.config,
            "seed": self.seed,
        }
        return manifest, b"".join(chunks)


def snapshot_tensors(model: VaeModel, extras: dict | None = None) -> dict:
    """Copy model parameters and buffers (plus extras) into plain arrays."""
    tensors = {name: p.data.copy() for name, p in model.parameters().items()}
    for name, b in model.buffers().items():
        tensors[name] = b.copy()
    for name, arr in (extras or {}).items():
        tensors[name] = np.asarray(arr).copy()
    return tensors


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    """Write ``checkpoint.json`` + ``checkpoint.blob`` under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest, blob = ckpt.to_manifest_and_blob()
    (directory / "checkpoint.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (directory / "checkpoint.blob").write_bytes(blob)
    return directory / "checkpoint.json"


def load_checkpoint(path) -> Checkpoint:
    """Load from a directory or a manifest path written by ``save_checkpoint``."""
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.json"
    manifest = json.loads(path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint manifest: {path}")
    blob = (path.parent / "checkpoint.blob").read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(shape).copy()
    return Checkpoint(
        arch=arch_from_json(manifest["arch"]),
        tensors=tensors,
        config=manifest.get("config", {}),
        seed=int(manifest.get("seed", 0)),
    )


def checkpoint_digest(ckpt: Checkpoint) -> str:
    manifest, blob = ckpt.to_manifest_and_blob()
    h = hashlib.sha256()
    h.update(json.dumps(manifest, sort_keys=True).encode())
    h.update(blob)
    return h.hexdigest()


def model_from_checkpoint(ckpt: Checkpoint, dtype=None) -> VaeModel:
    """Rebuild a model and load parameters and running stats from a checkpoint."""
    model = build_model(ckpt.arch, seed=0, dtype=dtype)
    params = model.parameters()
    buffers = model.buffers()
    for name, p in params.items():
        if name not in ckpt.tensors:
            raise KeyError(f"checkpoint missing tensor {name}")
        p.data = ckpt.tensors[name].astype(p.data.dtype).reshape(p.data.shape)
        p.grad = np.zeros_like(p.data)
    for name, b in buffers.items():
        if name not in ckpt.tensors:
            raise KeyError(f"checkpoint missing buffer {name}")
        b[...] = ckpt.tensors[name].astype(b.dtype).reshape(b.shape)
    return model
