"""The DC-CRN voicing detector: densely-connected convolutional blocks with
gated downsampling convolutions, a grouped BLSTM stack, and a sigmoid head.

Each Conv-DC block runs four composite layers (1x3 freq convolution, batch
norm, ELU), every one consuming the channel concatenation of the block input
and all preceding composite outputs, then a gated 1x4 stride-2 convolution
halves the frequency axis. The stacked real/imaginary STFT feature enters as
two channels; activations are held channels-last ([batch, time, freq,
channel]) so each kernel tap is a single matrix product. Time is never
padded or strided, so one posterior is produced per input frame.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dsp import FeatureTensor, InvalidArgument
from ..tracker import VoicingLabels
from . import ops
from .recurrent import RecurrentStack

POSTERIOR_EPS = 1e-7


@dataclass(frozen=True)
class ModelConfig:
    block_out_channels: tuple[int, ...] = (4, 8, 16, 32, 64, 128, 256)
    composite_growth: int = 8
    composite_kernel: int = 3
    composite_pad: int = 1
    composite_layers: int = 4
    gated_kernel: int = 4
    gated_stride: int = 2
    gated_pad: int = 1
    blstm_layers: int = 2
    blstm_hidden: int = 512
    groups: int = 4
    input_freq_bins: int = 513
    input_channels: int = 2
    threshold: float = 0.5
    dtype: str = "float32"
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        if not (0.0 < self.threshold < 1.0):
            raise InvalidArgument("threshold must be in (0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise InvalidArgument(f"unsupported dtype {self.dtype}")
        if not self.block_out_channels:
            raise InvalidArgument("need at least one block")
        if self.flatten_width() % self.groups != 0:
            raise InvalidArgument(
                f"flattened width {self.flatten_width()} not divisible by groups={self.groups}"
            )

    def freq_chain(self) -> list[int]:
        """Frequency bins entering each block plus the final bin count."""
        chain = [self.input_freq_bins]
        for _ in self.block_out_channels:
            chain.append(
                ops.conv_freq_out_size(chain[-1], self.gated_kernel, self.gated_stride, self.gated_pad)
            )
        return chain

    def flatten_width(self) -> int:
        return self.block_out_channels[-1] * self.freq_chain()[-1]

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return {
            "block_out_channels": list(self.block_out_channels),
            "composite_growth": self.composite_growth,
            "composite_kernel": self.composite_kernel,
            "composite_pad": self.composite_pad,
            "composite_layers": self.composite_layers,
            "gated_kernel": self.gated_kernel,
            "gated_stride": self.gated_stride,
            "gated_pad": self.gated_pad,
            "blstm_layers": self.blstm_layers,
            "blstm_hidden": self.blstm_hidden,
            "groups": self.groups,
            "input_freq_bins": self.input_freq_bins,
            "input_channels": self.input_channels,
            "threshold": self.threshold,
            "dtype": self.dtype,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["block_out_channels"] = tuple(d["block_out_channels"])
        return cls(**d)


@dataclass(frozen=True)
class VoicingPosterior:
    """Per-frame voicing probabilities, clamped inside (0, 1)."""

    probs: np.ndarray

    def __post_init__(self):
        if np.any(self.probs <= 0.0) or np.any(self.probs >= 1.0):
            raise InvalidArgument("posteriors must lie strictly inside (0, 1)")

    def __len__(self) -> int:
        return self.probs.size


class CompositeLayer:
    """1x3 frequency convolution -> batch norm -> ELU (channels preserved in
    time/freq, growth channels out)."""

    def __init__(self, prefix, c_in, c_out, cfg: ModelConfig, rng):
        dtype = cfg.np_dtype()
        k = cfg.composite_kernel
        bound = np.sqrt(6.0 / (c_in * k))
        self.prefix = prefix
        self.cfg = cfg
        self.w = rng.uniform(-bound, bound, size=(k, c_in, c_out)).astype(dtype)
        self.b = np.zeros(c_out, dtype=dtype)
        self.gamma = np.ones(c_out, dtype=dtype)
        self.beta = np.zeros(c_out, dtype=dtype)
        self.running_mean = np.zeros(c_out, dtype=dtype)
        self.running_var = np.ones(c_out, dtype=dtype)

    def params(self):
        yield f"{self.prefix}.w", self.w
        yield f"{self.prefix}.b", self.b
        yield f"{self.prefix}.gamma", self.gamma
        yield f"{self.prefix}.beta", self.beta

    def buffers(self):
        yield f"{self.prefix}.running_mean", self.running_mean
        yield f"{self.prefix}.running_var", self.running_var

    def forward(self, x, training, update_stats):
        y, c_conv = ops.conv_freq_forward(x, self.w, self.b, 1, self.cfg.composite_pad)
        y, c_bn = ops.batchnorm_forward(
            y, self.gamma, self.beta, self.running_mean, self.running_var,
            self.cfg.bn_momentum, self.cfg.bn_eps, training, update_stats,
        )
        y, c_elu = ops.elu_forward(y)
        return y, (c_conv, c_bn, c_elu)

    def backward(self, dy, cache, grads):
        c_conv, c_bn, c_elu = cache
        dy = ops.elu_backward(dy, c_elu)
        dy, dgamma, dbeta = ops.batchnorm_backward(dy, c_bn)
        dx, dw, db = ops.conv_freq_backward(dy, c_conv)
        grads[f"{self.prefix}.w"] = dw
        grads[f"{self.prefix}.b"] = db
        grads[f"{self.prefix}.gamma"] = dgamma
        grads[f"{self.prefix}.beta"] = dbeta
        return dx


class GatedConv:
    """Gated 1x4 convolution, frequency stride 2: the block's downsampler."""

    def __init__(self, prefix, c_in, c_out, cfg: ModelConfig, rng):
        dtype = cfg.np_dtype()
        k = cfg.gated_kernel
        bound = np.sqrt(6.0 / (c_in * k))
        self.prefix = prefix
        self.cfg = cfg
        self.w1 = rng.uniform(-bound, bound, size=(k, c_in, c_out)).astype(dtype)
        self.b1 = np.zeros(c_out, dtype=dtype)
        self.w2 = rng.uniform(-bound, bound, size=(k, c_in, c_out)).astype(dtype)
        self.b2 = np.zeros(c_out, dtype=dtype)

    def params(self):
        yield f"{self.prefix}.w1", self.w1
        yield f"{self.prefix}.b1", self.b1
        yield f"{self.prefix}.w2", self.w2
        yield f"{self.prefix}.b2", self.b2

    def forward(self, x):
        return ops.gated_conv_forward(
            x, self.w1, self.b1, self.w2, self.b2, self.cfg.gated_stride, self.cfg.gated_pad
        )

    def backward(self, dv, cache, grads):
        du, dw1, db1, dw2, db2 = ops.gated_conv_backward(dv, cache)
        grads[f"{self.prefix}.w1"] = dw1
        grads[f"{self.prefix}.b1"] = db1
        grads[f"{self.prefix}.w2"] = dw2
        grads[f"{self.prefix}.b2"] = db2
        return du


class ConvDcBlock:
    """Densely-connected composite layers plus the gated downsampler.

    Layer l consumes [input, out_1, ..., out_{l-1}] concatenated along
    channels; the gated convolution consumes the full concatenation.
    """

    def __init__(self, prefix, c_in, c_out, cfg: ModelConfig, rng):
        self.prefix = prefix
        self.c_in = c_in
        g = cfg.composite_growth
        self.composites = [
            CompositeLayer(f"{prefix}.comp{l}", c_in + g * l, g, cfg, rng)
            for l in range(cfg.composite_layers)
        ]
        self.gated = GatedConv(
            f"{prefix}.gated", c_in + g * cfg.composite_layers, c_out, cfg, rng
        )

    def params(self):
        for comp in self.composites:
            yield from comp.params()
        yield from self.gated.params()

    def buffers(self):
        for comp in self.composites:
            yield from comp.buffers()

    def forward(self, x, training, update_stats):
        pieces = [x]
        comp_caches = []
        for comp in self.composites:
            cat = pieces[0] if len(pieces) == 1 else np.concatenate(pieces, axis=3)
            y, cache = comp.forward(cat, training, update_stats)
            comp_caches.append(cache)
            pieces.append(y)
        cat = np.concatenate(pieces, axis=3)
        v, gated_cache = self.gated.forward(cat)
        widths = [p.shape[3] for p in pieces]
        return v, (comp_caches, gated_cache, widths)

    def backward(self, dv, cache, grads):
        comp_caches, gated_cache, widths = cache
        dcat = self.gated.backward(dv, gated_cache, grads)
        # split the concatenation gradient back onto the pieces
        dpieces = []
        offset = 0
        for w in widths:
            dpieces.append(dcat[..., offset : offset + w])
            offset += w
        for l in range(len(self.composites) - 1, -1, -1):
            dcat_l = self.composites[l].backward(dpieces[l + 1], comp_caches[l], grads)
            offset = 0
            for i in range(l + 1):
                dpieces[i] = dpieces[i] + dcat_l[..., offset : offset + widths[i]]
                offset += widths[i]
        return dpieces[0]


class DccrnModel:
    """Forward/backward of the full detector; parameters live in plain numpy
    arrays updated in place by the optimizer."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dtype = cfg.np_dtype()
        self.blocks = []
        c_in = cfg.input_channels
        for i, c_out in enumerate(cfg.block_out_channels):
            self.blocks.append(ConvDcBlock(f"block{i}", c_in, c_out, cfg, rng))
            c_in = c_out
        width = cfg.flatten_width()
        self.recurrent = RecurrentStack(
            "blstm", width, cfg.groups, cfg.blstm_hidden, cfg.blstm_layers, rng, dtype
        )
        bound = np.sqrt(6.0 / width)
        self.head_w = rng.uniform(-bound, bound, size=(width, 1)).astype(dtype)
        self.head_b = np.zeros(1, dtype=dtype)

    # -- parameter plumbing ------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for block in self.blocks:
            out.update(block.params())
        out.update(self.recurrent.params())
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for block in self.blocks:
            out.update(block.buffers())
        return out

    def load_state(self, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray] | None = None):
        """Copy arrays into the model; shapes must match exactly."""
        own = self.params()
        if buffers:
            own = {**own, **self.buffers()}
            params = {**params, **buffers}
        if set(params) != set(own):
            missing = set(own) ^ set(params)
            raise InvalidArgument(f"architecture mismatch: differing arrays {sorted(missing)[:5]}")
        for name, arr in params.items():
            if own[name].shape != arr.shape:
                raise InvalidArgument(
                    f"architecture mismatch: {name} has shape {arr.shape}, expected {own[name].shape}"
                )
            own[name][...] = arr

    # -- forward / backward -------------------------------------------------

    def forward_batch(self, x, training: bool = False, update_stats: bool | None = None,
                      want_cache: bool = False):
        """x: [B, T, F, C] (channels-last) -> probs [B, T] (clamped), optional cache."""
        if update_stats is None:
            update_stats = training
        x = np.ascontiguousarray(x, dtype=self.cfg.np_dtype())
        if x.shape[3] != self.cfg.input_channels or x.shape[2] != self.cfg.input_freq_bins:
            raise InvalidArgument(
                f"input shape {x.shape} does not match config "
                f"(freq={self.cfg.input_freq_bins}, channels={self.cfg.input_channels})"
            )
        caches = []
        for block in self.blocks:
            x, cache = block.forward(x, training, update_stats)
            caches.append(cache)
        b, t, f, c = x.shape
        # channel-major flatten: feature index = channel * F + freq bin
        flat = x.transpose(0, 1, 3, 2).reshape(b, t, c * f)
        rec, rec_cache = self.recurrent.forward(flat)
        logits, lin_cache = ops.linear_forward(rec, self.head_w, self.head_b)
        logits = logits[..., 0]
        probs_raw = ops.sigmoid(logits)
        probs = np.clip(probs_raw, POSTERIOR_EPS, 1.0 - POSTERIOR_EPS)
        if not want_cache:
            return probs, None
        clamp_mask = (probs_raw > POSTERIOR_EPS) & (probs_raw < 1.0 - POSTERIOR_EPS)
        cache = (caches, (b, t, f, c), rec_cache, lin_cache, probs_raw, clamp_mask)
        return probs, cache

    def backward_batch(self, dprobs, cache) -> dict[str, np.ndarray]:
        """dprobs: [B, T] gradient w.r.t. the clamped posterior."""
        caches, conv_shape, rec_cache, lin_cache, probs_raw, clamp_mask = cache
        grads: dict[str, np.ndarray] = {}
        dlogits = dprobs * clamp_mask * probs_raw * (1.0 - probs_raw)
        drec, dw, db = ops.linear_backward(dlogits[..., None], lin_cache)
        grads["head.w"] = dw
        grads["head.b"] = db
        dflat = self.recurrent.backward(drec, rec_cache, grads)
        b, t, f, c = conv_shape
        dx = dflat.reshape(b, t, c, f).transpose(0, 1, 3, 2)
        for i in range(len(self.blocks) - 1, -1, -1):
            dx = self.blocks[i].backward(dx, caches[i], grads)
        return grads

    # -- utterance-level API -------------------------------------------------

    def arrange_feature(self, feat: FeatureTensor) -> np.ndarray:
        """[T, 2F] -> [1, T, F, 2]: real and imaginary halves as channels."""
        f = feat.n_bins
        if f != self.cfg.input_freq_bins:
            raise InvalidArgument(
                f"feature has {f} bins, model expects {self.cfg.input_freq_bins}"
            )
        vals = feat.values
        return np.stack([vals[:, :f], vals[:, f:]], axis=-1)[None]

    def model_forward(self, feat: FeatureTensor) -> VoicingPosterior:
        """Inference posterior for one utterance."""
        probs, _ = self.forward_batch(self.arrange_feature(feat), training=False)
        return VoicingPosterior(probs[0])


def bce_loss(y, probs) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. the posterior.

    y and probs share any shape; probs are assumed clamped inside (0, 1).
    """
    y = np.asarray(y, dtype=probs.dtype)
    if y.shape != probs.shape:
        raise InvalidArgument(f"label shape {y.shape} != posterior shape {probs.shape}")
    n = probs.size
    loss = float(-(y * np.log(probs) + (1.0 - y) * np.log1p(-probs)).sum() / n)
    grad = (probs - y) / (probs * (1.0 - probs) * n)
    return loss, grad


def decide_voicing(posterior: VoicingPosterior | np.ndarray, threshold: float = 0.5) -> VoicingLabels:
    """Voiced iff probability strictly exceeds the threshold."""
    if not (0.0 < threshold < 1.0):
        raise InvalidArgument("threshold must be in (0, 1)")
    probs = posterior.probs if isinstance(posterior, VoicingPosterior) else np.asarray(posterior)
    return VoicingLabels((probs > threshold).astype(np.int8))


def count_params(params) -> int:
    """Exact number of scalars in a parameter dict or (name, array) iterable."""
    if isinstance(params, dict):
        arrays = params.values()
    else:
        arrays = [a for _, a in params]
    return int(sum(a.size for a in arrays))
