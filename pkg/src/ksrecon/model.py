"""Multimodal and unimodal dense U-Net builders.

The multimodal network runs each input modality (subsampled T2, FLAIR)
through its own contraction stem, fuses the two streams by channel
concatenation, and continues with a shared U-Net style encoder-decoder.
The unimodal baseline is the same network with a single stem and no fusion
layer. Dense blocks are stacks of BN -> ELU -> 3x3 conv; with growth rate
zero they keep a constant channel width and apply no concatenation, with a
positive growth rate they follow the usual progressive-concatenation
semantics. The output head is the last decoder dense block followed by a
1x1 convolution and a sigmoid, so predictions live in (0, 1).

Channel width is constant (``base_width``) everywhere; fusion and skip
concatenations are folded back to ``base_width`` by a 3x3 reduction
convolution at the start of each decoder stage.

Checkpoints are a JSON manifest (config, seed, epoch, history) plus one
little-endian float32 blob of every parameter and batch-norm buffer in
declaration order, preceded by a uint64 count.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T

__all__ = [
    "DenseBlockConfig",
    "Model",
    "ModelConfig",
    "build_model",
    "desk_config",
    "load_checkpoint",
    "full_scale_config",
    "save_checkpoint",
]

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class DenseBlockConfig:
    growth_rate: int = 0
    num_layers: int = 2
    width: int = 8

    def __post_init__(self):
        if self.growth_rate < 0:
            raise ValueError(f"growth rate must be >= 0, got {self.growth_rate}")
        if self.num_layers < 1:
            raise ValueError(f"need at least one layer, got {self.num_layers}")
        if self.width < 1:
            raise ValueError(f"width must be positive, got {self.width}")


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 2
    base_width: int = 8
    dense: DenseBlockConfig = DenseBlockConfig()
    multimodal: bool = True
    input_shape: tuple = (64, 64)
    fuse_after_stages: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            raise ValueError(f"base width must be positive, got {self.base_width}")
        if self.dense.width != self.base_width:
            raise ValueError(
                f"dense block width {self.dense.width} != base width {self.base_width}"
            )
        if not 1 <= self.fuse_after_stages <= self.depth:
            raise ValueError(
                f"fuse_after_stages must lie in [1, depth], got {self.fuse_after_stages}"
            )
        h, w = self.input_shape
        div = 1 << self.depth
        if h % div:
            raise ValueError(f"input height {h} not divisible by 2^depth = {div}")
        if w % div:
            raise ValueError(f"input width {w} not divisible by 2^depth = {div}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        dense = DenseBlockConfig(**d["dense"])
        return ModelConfig(
            depth=d["depth"],
            base_width=d["base_width"],
            dense=dense,
            multimodal=d["multimodal"],
            input_shape=tuple(d["input_shape"]),
            fuse_after_stages=d["fuse_after_stages"],
        )


def desk_config(multimodal: bool = True, input_shape=(64, 64)) -> ModelConfig:
    """Small configuration that trains in minutes on a CPU."""
    return ModelConfig(
        depth=2,
        base_width=8,
        dense=DenseBlockConfig(growth_rate=0, num_layers=2, width=8),
        multimodal=multimodal,
        input_shape=tuple(input_shape),
    )


def full_scale_config(multimodal: bool = True, input_shape=(192, 292)) -> ModelConfig:
    """Full-width configuration: 64 feature maps, 5 layers per dense block.

    Depth is limited to 2 by the 292-line axis (divisible by 4, not 8).
    """
    return ModelConfig(
        depth=2,
        base_width=64,
        dense=DenseBlockConfig(growth_rate=0, num_layers=5, width=64),
        multimodal=multimodal,
        input_shape=tuple(input_shape),
    )


class _Conv:
    """3x3 or 1x1 convolution layer.

    Interior convolutions are bias-free: every constant channel shift they
    could produce is cancelled exactly by a downstream batch-norm mean
    subtraction, which would leave the bias with an identically zero
    gradient. Only the output head carries a (zero-initialized) bias.
    """

    def __init__(self, model: "Model", name: str, cin: int, cout: int, ksize: int,
                 padding: int, use_bias: bool = False):
        bound = np.sqrt(6.0 / (cin * ksize * ksize))
        w = model.rng.uniform(-bound, bound, size=(cout, cin, ksize, ksize))
        self.weight = model.add_param(f"{name}.weight", w)
        if use_bias:
            self.bias = model.add_param(f"{name}.bias", np.zeros(cout))
        else:
            self.bias = T.Tensor(np.zeros(cout, dtype=model.dtype))
        self.padding = padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class _BatchNorm:
    def __init__(self, model: "Model", name: str, channels: int):
        self.gamma = model.add_param(f"{name}.gamma", np.ones(channels))
        self.beta = model.add_param(f"{name}.beta", np.zeros(channels))
        self.running_mean = model.add_buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_var = model.add_buffer(f"{name}.running_var", np.ones(channels))

    def __call__(self, x, training: bool):
        return T.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=training, momentum=BN_MOMENTUM, eps=BN_EPS,
        )


class _DenseBlock:
    """num_layers repetitions of BN -> ELU -> 3x3 conv.

    growth_rate == 0: plain constant-width stack, no concatenation.
    growth_rate > 0: layer i consumes width + i*GR channels, emits GR, and
    the outputs are concatenated onto the running feature stack.
    """

    def __init__(self, model: "Model", name: str, width_in: int, growth_rate: int,
                 num_layers: int):
        self.growth_rate = growth_rate
        self.layers = []
        for i in range(num_layers):
            cin = width_in + i * growth_rate if growth_rate > 0 else width_in
            cout = growth_rate if growth_rate > 0 else width_in
            bn = _BatchNorm(model, f"{name}.l{i}.bn", cin)
            conv = _Conv(model, f"{name}.l{i}.conv", cin, cout, 3, padding=1)
            self.layers.append((bn, conv))
        self.out_channels = (
            width_in + num_layers * growth_rate if growth_rate > 0 else width_in
        )

    def __call__(self, x, training: bool):
        if self.growth_rate == 0:
            h = x
            for bn, conv in self.layers:
                h = conv(T.elu(bn(h, training)))
            return h
        feats = x
        for bn, conv in self.layers:
            h = conv(T.elu(bn(feats, training)))
            feats = T.concat_channels(feats, h)
        return feats


class Model:
    """Network instance: parameter tensors plus the forward plan."""

    def __init__(self, config: ModelConfig, seed: int, dtype=np.float32):
        self.config = config
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(self.seed)
        self._params: list = []   # (name, Tensor), declaration order
        self._buffers: list = []  # (name, ndarray), declaration order
        self._build()
        del self.rng  # initialization is complete; forward never draws

    # -- registration -------------------------------------------------------

    def add_param(self, name: str, values: np.ndarray) -> T.Tensor:
        t = T.Tensor(np.ascontiguousarray(values, dtype=self.dtype), requires_grad=True)
        self._params.append((name, t))
        return t

    def add_buffer(self, name: str, values: np.ndarray) -> np.ndarray:
        arr = np.ascontiguousarray(values, dtype=self.dtype)
        self._buffers.append((name, arr))
        return arr

    def named_parameters(self):
        return list(self._params)

    def parameters(self):
        return [t for _, t in self._params]

    def named_buffers(self):
        return list(self._buffers)

    @property
    def num_params(self) -> int:
        return sum(t.data.size for _, t in self._params)

    @property
    def multimodal(self) -> bool:
        return self.config.multimodal

    def zero_grad(self):
        for _, t in self._params:
            t.grad = None

    # -- architecture -------------------------------------------------------

    def _build(self):
        cfg = self.config
        w = cfg.base_width
        gr = cfg.dense.growth_rate
        nc = cfg.dense.num_layers
        n_stems = 2 if cfg.multimodal else 1
        s = cfg.fuse_after_stages

        self.stems = []
        for m in range(n_stems):
            conv_in = _Conv(self, f"stem{m}.conv_in", 1, w, 3, padding=1)
            blocks = []
            ch = w
            for lvl in range(s):
                blk = _DenseBlock(self, f"stem{m}.block{lvl}", ch, gr, nc)
                blocks.append(blk)
                ch = blk.out_channels
            self.stems.append({"conv_in": conv_in, "blocks": blocks})
        stem_out = ch
        self._stem_skip_channels = [self.stems[0]["blocks"][lvl].out_channels
                                    for lvl in range(s)]

        if cfg.multimodal:
            self.fuse_conv = _Conv(self, "fuse.conv", n_stems * stem_out, w, 3, padding=1)
            ch = w
        else:
            self.fuse_conv = None
            ch = stem_out

        self.enc_blocks = []
        enc_skip_channels = {}
        for lvl in range(s, cfg.depth):
            blk = _DenseBlock(self, f"enc.block{lvl}", ch, gr, nc)
            self.enc_blocks.append(blk)
            enc_skip_channels[lvl] = blk.out_channels
            ch = blk.out_channels

        self.bottom = _DenseBlock(self, "bottom", ch, gr, nc)
        ch = self.bottom.out_channels

        self.dec_stages = []
        for lvl in range(cfg.depth - 1, -1, -1):
            if lvl >= s:
                skip_ch = enc_skip_channels[lvl]
            else:
                skip_ch = n_stems * self._stem_skip_channels[lvl]
            reduce = _Conv(self, f"dec{lvl}.reduce", ch + skip_ch, w, 3, padding=1)
            blk = _DenseBlock(self, f"dec{lvl}.block", w, gr, nc)
            self.dec_stages.append({"level": lvl, "reduce": reduce, "block": blk})
            ch = blk.out_channels

        self.head = _Conv(self, "head.conv", ch, 1, 1, padding=0, use_bias=True)

    # -- forward -------------------------------------------------------------

    def forward(self, t2sub, flair=None, training: bool = False) -> T.Tensor:
        """Run the network on a (B, 1, H, W) batch; returns (B, 1, H, W).

        ``flair`` is required for multimodal models and must be absent for
        unimodal ones. H and W must be divisible by 2^depth.
        """
        cfg = self.config
        x0 = t2sub if isinstance(t2sub, T.Tensor) else T.Tensor(t2sub)
        if cfg.multimodal:
            if flair is None:
                raise ValueError("multimodal model needs a FLAIR batch")
            x1 = flair if isinstance(flair, T.Tensor) else T.Tensor(flair)
            inputs = [x0, x1]
        else:
            if flair is not None:
                raise ValueError("unimodal model takes no FLAIR batch")
            inputs = [x0]

        _, _, h, w = x0.data.shape
        div = 1 << cfg.depth
        if h % div:
            raise ValueError(f"input height {h} not divisible by 2^depth = {div}")
        if w % div:
            raise ValueError(f"input width {w} not divisible by 2^depth = {div}")

        stem_skips = []
        stem_outs = []
        for stem, img in zip(self.stems, inputs):
            x = stem["conv_in"](img)
            skips = []
            for blk in stem["blocks"]:
                f = blk(x, training)
                skips.append(f)
                x = T.maxpool2d(f, 2)
            stem_skips.append(skips)
            stem_outs.append(x)

        if cfg.multimodal:
            x = self.fuse_conv(T.concat_channels(stem_outs[0], stem_outs[1]))
        else:
            x = stem_outs[0]

        enc_skips = {}
        for lvl, blk in zip(range(cfg.fuse_after_stages, cfg.depth), self.enc_blocks):
            f = blk(x, training)
            enc_skips[lvl] = f
            x = T.maxpool2d(f, 2)

        x = self.bottom(x, training)

        for stage in self.dec_stages:
            lvl = stage["level"]
            x = T.upsample_bilinear(x, 2)
            if lvl >= cfg.fuse_after_stages:
                x = T.concat_channels(x, enc_skips[lvl])
            else:
                for skips in stem_skips:
                    x = T.concat_channels(x, skips[lvl])
            x = stage["reduce"](x)
            x = stage["block"](x, training)

        return T.sigmoid(self.head(x))

    # -- state ----------------------------------------------------------------

    def state_arrays(self):
        """All parameter and buffer arrays in declaration order."""
        return [t.data for _, t in self._params] + [a for _, a in self._buffers]

    def copy_state(self) -> list:
        return [a.copy() for a in self.state_arrays()]

    def load_state(self, arrays):
        own = self.state_arrays()
        if len(arrays) != len(own):
            raise ValueError(f"state has {len(arrays)} arrays, model needs {len(own)}")
        for dst, src in zip(own, arrays):
            if dst.shape != src.shape:
                raise ValueError(f"state shape {src.shape} != model shape {dst.shape}")
            dst[...] = src

    def clone(self) -> "Model":
        other = Model(self.config, self.seed, dtype=self.dtype)
        other.load_state(self.state_arrays())
        return other


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Deterministically initialized network for the given configuration.

    Convolution weights are He-uniform over the fan-in, biases zero, batch
    norm gamma one and beta zero. Identical (config, seed, dtype) produce
    bit-identical parameters.
    """
    return Model(config, seed, dtype=dtype)


def min_pool_gap(model: Model, t2sub, flair=None, training: bool = True) -> float:
    """Smallest top-2 value gap over all pooled regions of one forward pass.

    Max pooling makes the network piecewise smooth; finite-difference probes
    are only meaningful when every pooled region's leader beats the runner-up
    by much more than the probe step can move activations. Gradient-check
    harnesses use this margin to construct tie-free test inputs.
    """
    gaps = [np.inf]
    plain = T.maxpool2d

    def recording(x, window=2):
        d = x.data
        B, C, H, W = d.shape
        reg = (
            d.reshape(B, C, H // window, window, W // window, window)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(B, C, H // window, W // window, window * window)
        )
        if reg.shape[-1] > 1:
            top2 = np.sort(reg, axis=-1)[..., -2:]
            gaps.append(float((top2[..., 1] - top2[..., 0]).min()))
        return plain(x, window)

    T.maxpool2d = recording
    try:
        model.forward(t2sub, flair, training=training)
    finally:
        T.maxpool2d = plain
    return min(gaps)


# -- checkpoint format --------------------------------------------------------

_BLOB_COUNT = struct.Struct("<Q")


def save_checkpoint(model: Model, json_path, blob_path, epoch: int = 0, history=()):
    values = [np.asarray(a, dtype="<f4") for a in model.state_arrays()]
    total = sum(v.size for v in values)
    manifest = {
        "format": "ksrecon-checkpoint-v1",
        "config": model.config.to_dict(),
        "seed": model.seed,
        "epoch": int(epoch),
        "history": list(history),
        "value_count": int(total),
    }
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(blob_path, "wb") as fh:
        fh.write(_BLOB_COUNT.pack(total))
        for v in values:
            fh.write(v.tobytes())


def load_checkpoint(json_path, blob_path):
    """Rebuild the model from a manifest + parameter blob pair.

    Returns (model, manifest_dict). The blob's leading count must match the
    model implied by the manifest's config.
    """
    with open(json_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "ksrecon-checkpoint-v1":
        raise ValueError(f"{json_path}: not a checkpoint manifest")
    config = ModelConfig.from_dict(manifest["config"])
    model = Model(config, manifest["seed"], dtype=np.float32)

    with open(blob_path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _BLOB_COUNT.size:
        raise ValueError(f"{blob_path}: too short for the leading count")
    (count,) = _BLOB_COUNT.unpack_from(raw, 0)
    expect = sum(a.size for a in model.state_arrays())
    if count != expect or count != manifest["value_count"]:
        raise ValueError(
            f"{blob_path}: blob holds {count} values but the config needs {expect}"
        )
    need = _BLOB_COUNT.size + 4 * count
    if len(raw) != need:
        raise ValueError(f"{blob_path}: expected {need} bytes, got {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4", offset=_BLOB_COUNT.size)
    pos = 0
    arrays = []
    for a in model.state_arrays():
        arrays.append(flat[pos : pos + a.size].reshape(a.shape))
        pos += a.size
    model.load_state(arrays)
    return model, manifest
