"""Backbone CNNs with named insertion points, plus checkpoint persistence.

Two architectures are provided:

* ``build_small_cnn`` -- a 4-block conv net (conv-BN-ReLU x4, two stride-2
  reductions at blocks 2 and 3, global average pool, linear head) with
  insertion points ``block1`` .. ``block4`` after each ReLU. This is the
  desk-scale workhorse.
* ``build_resnet18_like`` -- a width-scaled residual net with 8 basic
  blocks (2 per stage, 4 stages). Insertion points are named after conv
  ordinals ``layer1`` .. ``layer17`` (stem conv is ``layer1``; batch norm,
  ReLU and shortcut 1x1 convs are not counted); each tap sits after the
  ReLU that follows its conv. ``layer15`` is designated as the default
  insertion point for this architecture.

Any number of scaling modules can be attached at insertion points; the
forward pass then also returns their classifier scores.

Checkpoints are a binary format: magic, version, metadata JSON (epoch,
seed, config digest, architecture config), named parameter records
(little-endian float32 payloads by default, float64 behind a flag), and
a trailing CRC-32. Loading rebuilds the model from the embedded
architecture config and restores every parameter and batch-norm running
statistic.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheckpointChecksumError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    ShapeError,
)
from .scaling import AlcParams, EwasModule, ewas_forward
from .tensor import (
    RunningStats,
    Tensor,
    add,
    add_rowvec,
    batch_norm2d,
    conv2d,
    global_avg_pool,
    matmul,
    no_grad,
    relu,
)

CHECKPOINT_MAGIC = b"EWASCKPT"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv2dLayer:
    def __init__(self, name: str, cin: int, cout: int, kernel: int, stride: int,
                 padding: int, rng: np.random.Generator, dtype, bias: bool = False):
        self.name = name
        self.stride = stride
        self.padding = padding
        fan_in = cin * kernel * kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, kernel, kernel))
        self.weight = Tensor(w.astype(dtype), requires_grad=True, dtype=dtype)
        self.bias = None
        if bias:
            self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        out = [(f"{self.name}.weight", self.weight)]
        if self.bias is not None:
            out.append((f"{self.name}.bias", self.bias))
        return out


class BatchNorm2dLayer:
    def __init__(self, name: str, channels: int, dtype):
        self.name = name
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, dtype=dtype)
        self.stats = RunningStats.create(channels, dtype=dtype)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm2d(x, self.gamma, self.beta, self.stats, training)

    def parameters(self):
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def state_arrays(self):
        return [
            (f"{self.name}.running_mean", self.stats.mean),
            (f"{self.name}.running_var", self.stats.var),
        ]


class LinearLayer:
    def __init__(self, name: str, fan_in: int, fan_out: int,
                 rng: np.random.Generator, dtype):
        self.name = name
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        self.weight = Tensor(w.astype(dtype), requires_grad=True, dtype=dtype)
        self.bias = Tensor(b.astype(dtype), requires_grad=True, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return add_rowvec(matmul(x, self.weight), self.bias)

    def parameters(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]


# ---------------------------------------------------------------------------
# model base
# ---------------------------------------------------------------------------

@dataclass
class ForwardOut:
    """Result of a model forward pass."""

    logits: Tensor
    alc_scores: dict[str, Tensor] = field(default_factory=dict)
    captured: dict[str, Tensor] = field(default_factory=dict)


class Model:
    """Shared machinery: insertion-point taps, scaling modules, parameters."""

    arch = "model"

    def __init__(self, input_shape, num_classes: int, dtype):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.num_classes = int(num_classes)
        self.dtype = np.dtype(dtype).type
        self.ewas_modules: list[EwasModule] = []
        self.checkpoint_meta: dict = {}

    # subclasses provide _run(x, training, ctx) and _backbone_parameters()

    def insertion_points(self) -> list[str]:
        raise NotImplementedError

    def forward(self, x, labels=None, train: bool = False,
                mask_mode: str = "inference", capture=()) -> ForwardOut:
        """Run the network. ``train`` controls batch-norm behavior only;
        ``mask_mode`` controls scaling-mask selection for attached modules.

        ``capture`` is an iterable of insertion-point names whose outgoing
        activations (post-scaling, if a module is attached) are returned;
        ``"<name>:pre_scale"`` captures the activation before scaling.
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        elif x.data.dtype != np.dtype(self.dtype):
            raise ShapeError(
                f"input dtype {x.data.dtype} does not match model dtype {np.dtype(self.dtype)}"
            )
        ctx = _ForwardCtx(self, labels, mask_mode, frozenset(capture))
        logits = self._run(x, train, ctx)
        return ForwardOut(logits, ctx.alc_scores, ctx.captured)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self._backbone_parameters())
        for i, mod in enumerate(self.ewas_modules):
            out.append((f"ewas.{i}.{mod.host}.weight", mod.params.weight))
        return out

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Non-trained arrays persisted in checkpoints (BN running stats)."""
        return [rec for bn in self._batch_norms() for rec in bn.state_arrays()]

    def _batch_norms(self):
        raise NotImplementedError

    def arch_config(self) -> dict:
        return {
            "arch": self.arch,
            "width": self.width,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "insertion_points": [m.host for m in self.ewas_modules],
            "dtype": np.dtype(self.dtype).name,
        }

    def activation_shape(self, host: str) -> tuple[int, int, int]:
        """Dry-run a zero input to find the activation shape at a tap."""
        if host not in self.insertion_points():
            raise ConfigError(
                f"unknown insertion point {host!r}; valid points: "
                f"{', '.join(self.insertion_points())}"
            )
        from .tensor import no_grad

        with no_grad():
            probe = np.zeros((1, *self.input_shape), dtype=self.dtype)
            out = self.forward(probe, train=False, capture=(host,))
        return tuple(out.captured[host].data.shape[1:])


class _ForwardCtx:
    """Per-forward bookkeeping for taps: scaling, scores, captures."""

    def __init__(self, model: Model, labels, mask_mode: str, capture: frozenset):
        self.model = model
        self.labels = labels
        self.mask_mode = mask_mode
        self.capture = capture
        self.alc_scores: dict[str, Tensor] = {}
        self.captured: dict[str, Tensor] = {}

    def tap(self, name: str, h: Tensor) -> Tensor:
        for mod in self.model.ewas_modules:
            if mod.host != name:
                continue
            if f"{name}:pre_scale" in self.capture:
                self.captured[f"{name}:pre_scale"] = h
            h, scores = ewas_forward(h, mod.params, self.labels, self.mask_mode)
            self.alc_scores[mod.module_id] = scores
        if name in self.capture:
            self.captured[name] = h
        return h


# ---------------------------------------------------------------------------
# small CNN
# ---------------------------------------------------------------------------

class SmallCnn(Model):
    arch = "small_cnn"

    STRIDES = (1, 2, 2, 1)

    def __init__(self, input_shape, num_classes: int, width: int = 8,
                 seed: int = 0, dtype=np.float64):
        super().__init__(input_shape, num_classes, dtype)
        c, h, w = self.input_shape
        if h < 8 or w < 8:
            raise ShapeError(f"input spatial dims must be >= 8, got {h}x{w}")
        if width < 1:
            raise ConfigError(f"width must be >= 1, got {width}")
        self.width = int(width)
        rng = np.random.default_rng(seed)
        channels = (width, 2 * width, 4 * width, 4 * width)
        self.blocks = []
        cin = c
        for i, (cout, stride) in enumerate(zip(channels, self.STRIDES)):
            name = f"block{i + 1}"
            conv = Conv2dLayer(f"{name}.conv", cin, cout, 3, stride, 1, rng, self.dtype)
            bn = BatchNorm2dLayer(f"{name}.bn", cout, self.dtype)
            self.blocks.append((name, conv, bn))
            cin = cout
        self.head = LinearLayer("head", channels[-1], num_classes, rng, self.dtype)

    def insertion_points(self) -> list[str]:
        return [name for name, _, _ in self.blocks]

    def _run(self, x: Tensor, training: bool, ctx: _ForwardCtx) -> Tensor:
        h = x
        for name, conv, bn in self.blocks:
            h = relu(bn.forward(conv.forward(h), training))
            h = ctx.tap(name, h)
        return self.head.forward(global_avg_pool(h))

    def _backbone_parameters(self):
        for _, conv, bn in self.blocks:
            yield from conv.parameters()
            yield from bn.parameters()
        yield from self.head.parameters()

    def _batch_norms(self):
        return [bn for _, _, bn in self.blocks]


# ---------------------------------------------------------------------------
# residual network
# ---------------------------------------------------------------------------

class BasicBlock:
    """conv-BN-ReLU, conv-BN, add shortcut, ReLU. Taps after each ReLU."""

    def __init__(self, name: str, cin: int, cout: int, stride: int,
                 rng: np.random.Generator, dtype, tap1: str, tap2: str):
        self.name = name
        self.tap1 = tap1
        self.tap2 = tap2
        self.conv1 = Conv2dLayer(f"{name}.conv1", cin, cout, 3, stride, 1, rng, dtype)
        self.bn1 = BatchNorm2dLayer(f"{name}.bn1", cout, dtype)
        self.conv2 = Conv2dLayer(f"{name}.conv2", cout, cout, 3, 1, 1, rng, dtype)
        self.bn2 = BatchNorm2dLayer(f"{name}.bn2", cout, dtype)
        self.down_conv = None
        self.down_bn = None
        if stride != 1 or cin != cout:
            self.down_conv = Conv2dLayer(f"{name}.down", cin, cout, 1, stride, 0, rng, dtype)
            self.down_bn = BatchNorm2dLayer(f"{name}.down_bn", cout, dtype)

    def forward(self, x: Tensor, training: bool, ctx: _ForwardCtx) -> Tensor:
        h = relu(self.bn1.forward(self.conv1.forward(x), training))
        h = ctx.tap(self.tap1, h)
        h = self.bn2.forward(self.conv2.forward(h), training)
        if self.down_conv is not None:
            shortcut = self.down_bn.forward(self.down_conv.forward(x), training)
        else:
            shortcut = x
        out = relu(add(h, shortcut))
        return ctx.tap(self.tap2, out)

    def parameters(self):
        layers = [self.conv1, self.bn1, self.conv2, self.bn2]
        if self.down_conv is not None:
            layers += [self.down_conv, self.down_bn]
        for layer in layers:
            yield from layer.parameters()

    def batch_norms(self):
        out = [self.bn1, self.bn2]
        if self.down_bn is not None:
            out.append(self.down_bn)
        return out


class ResNetLike(Model):
    arch = "resnet18_like"

    DEFAULT_INSERTION = "layer15"

    def __init__(self, input_shape, num_classes: int, width: int = 8,
                 seed: int = 0, dtype=np.float64):
        super().__init__(input_shape, num_classes, dtype)
        if width < 4:
            raise ConfigError(f"resnet width must be >= 4, got {width}")
        self.width = int(width)
        c, h, w = self.input_shape
        if h < 8 or w < 8:
            raise ShapeError(f"input spatial dims must be >= 8, got {h}x{w}")
        rng = np.random.default_rng(seed)
        ordinal = iter(range(1, 18))
        self.stem_conv = Conv2dLayer("stem.conv", c, width, 3, 1, 1, rng, self.dtype)
        self.stem_bn = BatchNorm2dLayer("stem.bn", width, self.dtype)
        self.stem_tap = f"layer{next(ordinal)}"
        self.stages: list[list[BasicBlock]] = []
        self._taps = [self.stem_tap]
        cin = width
        for s, (cout, stride) in enumerate(
            zip((width, 2 * width, 4 * width, 8 * width), (1, 2, 2, 2))
        ):
            blocks = []
            for b in range(2):
                tap1 = f"layer{next(ordinal)}"
                tap2 = f"layer{next(ordinal)}"
                blocks.append(
                    BasicBlock(f"stage{s + 1}.block{b + 1}", cin, cout,
                               stride if b == 0 else 1, rng, self.dtype, tap1, tap2)
                )
                self._taps += [tap1, tap2]
                cin = cout
            self.stages.append(blocks)
        self.head = LinearLayer("head", 8 * width, num_classes, rng, self.dtype)

    def insertion_points(self) -> list[str]:
        return list(self._taps)

    def _run(self, x: Tensor, training: bool, ctx: _ForwardCtx) -> Tensor:
        h = relu(self.stem_bn.forward(self.stem_conv.forward(x), training))
        h = ctx.tap(self.stem_tap, h)
        for blocks in self.stages:
            for block in blocks:
                h = block.forward(h, training, ctx)
        return self.head.forward(global_avg_pool(h))

    def _backbone_parameters(self):
        yield from self.stem_conv.parameters()
        yield from self.stem_bn.parameters()
        for blocks in self.stages:
            for block in blocks:
                yield from block.parameters()
        yield from self.head.parameters()

    def _batch_norms(self):
        out = [self.stem_bn]
        for blocks in self.stages:
            for block in blocks:
                out += block.batch_norms()
        return out


def build_small_cnn(input_shape, num_classes: int, width: int = 8,
                    seed: int = 0, dtype=np.float64) -> SmallCnn:
    return SmallCnn(input_shape, num_classes, width=width, seed=seed, dtype=dtype)


def build_resnet18_like(input_shape, num_classes: int, width: int = 8,
                        seed: int = 0, dtype=np.float64) -> ResNetLike:
    return ResNetLike(input_shape, num_classes, width=width, seed=seed, dtype=dtype)


_BUILDERS = {"small_cnn": build_small_cnn, "resnet18_like": build_resnet18_like}


def build_model(arch: str, input_shape, num_classes: int, width: int = 8,
                seed: int = 0, dtype=np.float64) -> Model:
    if arch not in _BUILDERS:
        raise ConfigError(f"unknown arch {arch!r}; expected one of {sorted(_BUILDERS)}")
    return _BUILDERS[arch](input_shape, num_classes, width=width, seed=seed, dtype=dtype)


def insert_ewas(model: Model, host_layer: str, num_classes: int,
                seed: int = 0) -> Model:
    """Attach a scaling module sized by a dry-run at ``host_layer``.

    Multiple insertions are kept in list order; a repeated host name
    scales the already-scaled activation.
    """
    if num_classes != model.num_classes:
        raise ConfigError(
            f"ALC class count {num_classes} must match the model's {model.num_classes}"
        )
    shape = model.activation_shape(host_layer)  # validates the host name
    flat = int(np.prod(shape))
    rng = np.random.default_rng(seed)
    params = AlcParams.create(flat, num_classes, rng, dtype=model.dtype)
    module_id = host_layer
    existing = {m.module_id for m in model.ewas_modules}
    n = 1
    while module_id in existing:
        module_id = f"{host_layer}#{n}"
        n += 1
    model.ewas_modules.append(EwasModule(host_layer, params, module_id))
    return model


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _param_records(model: Model) -> list[tuple[str, np.ndarray]]:
    records = [(name, t.data) for name, t in model.parameters()]
    records += model.state_arrays()
    return records


def save_checkpoint(model: Model, path, epoch: int | None = None,
                    seed: int | None = None, config_digest: str | None = None,
                    float64: bool = False) -> None:
    """Write all parameters and running stats to a checkpoint file.

    Payloads are little-endian float32 unless ``float64`` is set. The
    metadata block embeds the architecture config so ``load_checkpoint``
    can rebuild the model without outside information. Metadata fields
    left as ``None`` keep the values carried over from a loaded
    checkpoint, so save -> load -> save is byte-stable.
    """
    carried = model.checkpoint_meta
    meta = {
        "epoch": int(epoch if epoch is not None else carried.get("epoch", 0)),
        "seed": int(seed if seed is not None else carried.get("seed", 0)),
        "config_digest": str(
            config_digest if config_digest is not None else carried.get("config_digest", "")
        ),
        "model": model.arch_config(),
    }
    payload_dtype = "<f8" if float64 else "<f4"
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<II", CHECKPOINT_VERSION, 1 if float64 else 0)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf += struct.pack("<Q", len(meta_bytes))
    buf += meta_bytes
    records = _param_records(model)
    buf += struct.pack("<I", len(records))
    for name, arr in records:
        name_b = name.encode()
        buf += struct.pack("<H", len(name_b))
        buf += name_b
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype=payload_dtype).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointTruncatedError(
                f"needed {n} bytes at offset {self.pos}, file has {len(self.blob)}"
            )
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Model:
    """Rebuild a model from a checkpoint, restoring every array bit-exactly
    (relative to the stored payload precision)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 4:
        raise CheckpointTruncatedError("file shorter than the fixed header")
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"bad magic {blob[:8]!r}")
    body = blob[:-4]
    r = _Reader(body)
    r.take(len(CHECKPOINT_MAGIC))
    version, f64_flag = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    (meta_len,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(meta_len).decode())
        cfg = meta["model"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointChecksumError(f"metadata block corrupt: {exc}") from exc
    payload_dtype = np.dtype("<f8" if f64_flag else "<f4")
    model = build_model(
        cfg["arch"], cfg["input_shape"], cfg["num_classes"],
        width=cfg["width"], dtype=np.dtype(cfg["dtype"]).type,
    )
    for host in cfg["insertion_points"]:
        insert_ewas(model, host, cfg["num_classes"])
    model.checkpoint_meta = {
        "epoch": meta["epoch"], "seed": meta["seed"],
        "config_digest": meta["config_digest"],
    }

    (n_records,) = r.unpack("<I")
    arrays = {}
    for _ in range(n_records):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode()
        except UnicodeDecodeError as exc:
            raise CheckpointChecksumError(f"record name corrupt: {exc}") from exc
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        raw = r.take(count * payload_dtype.itemsize)
        arrays[name] = np.frombuffer(raw, dtype=payload_dtype).reshape(shape)
    if r.pos != len(body):
        raise CheckpointTruncatedError(f"{len(body) - r.pos} trailing bytes after records")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CheckpointChecksumError("checksum mismatch; file is corrupt")

    expected = _param_records(model)
    missing = [name for name, _ in expected if name not in arrays]
    if missing:
        raise CheckpointTruncatedError(f"missing parameter records: {missing}")
    for name, target in expected:
        src = arrays[name].astype(target.dtype)
        if src.shape != target.shape:
            raise CheckpointTruncatedError(
                f"record {name!r} has shape {src.shape}, expected {target.shape}"
            )
        target[...] = src
    return model
