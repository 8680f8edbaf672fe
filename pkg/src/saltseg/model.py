"""U-Net with a ResNeXt-style encoder, scSE recalibration, attention-gated
skips and a hypercolumn head."""
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .data import input_channels
from .errors import ConfigurationError, DimensionError
from .rng import make_rng


@dataclass
class ModelConfig:
    base_filters: int = 32
    encoder_blocks: tuple = (3, 4, 6, 3)
    cardinality: int = 32
    use_scse: bool = True
    use_attention_gates: bool = True
    use_hypercolumn: bool = True
    use_coordconv: bool = True
    use_depth_channel: bool = True
    use_batchnorm: bool = True
    center_pool: bool = False
    pool_stride: int = 2
    se_reduction: int = 16
    input_size: int = 128
    first_stride: int = 1

    def __post_init__(self):
        self.encoder_blocks = tuple(int(b) for b in self.encoder_blocks)

    @classmethod
    def desk(cls, **overrides):
        """Every mechanism of the full network at CPU-trainable cost."""
        base = dict(base_filters=8, encoder_blocks=(1, 1, 1, 1), cardinality=4, se_reduction=2, input_size=64)
        base.update(overrides)
        return cls(**base)

    def validate(self):
        def bad(name, msg):
            raise ConfigurationError(f"model.{name} = {getattr(self, name)!r}: {msg}")

        if self.base_filters < 4:
            bad("base_filters", "must be >= 4")
        if self.cardinality < 1 or self.base_filters % self.cardinality:
            bad("cardinality", f"must be >= 1 and divide base_filters ({self.base_filters})")
        if len(self.encoder_blocks) != 4 or min(self.encoder_blocks) < 1:
            bad("encoder_blocks", "needs 4 entries, each >= 1")
        if self.se_reduction < 1 or self.base_filters % self.se_reduction:
            bad("se_reduction", f"must be >= 1 and divide base_filters ({self.base_filters})")
        if self.pool_stride not in (1, 2):
            bad("pool_stride", "allowed values are 1 and 2")
        if self.first_stride not in (1, 2):
            bad("first_stride", "allowed values are 1 and 2")
        if self.input_size % self.downsample_factor():
            bad("input_size", f"must be divisible by the total downsampling factor {self.downsample_factor()}")
        return self

    def downsample_factor(self):
        pools = 3 + int(self.center_pool)
        return self.first_stride * self.pool_stride ** pools

    def in_channels(self):
        return input_channels(self)

    def to_dict(self):
        d = asdict(self)
        d["encoder_blocks"] = list(self.encoder_blocks)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


def encoder_channels(config):
    return [config.base_filters * 2 ** i for i in range(4)]


# -- layers ------------------------------------------------------------------------

class Layer:
    def __init__(self, model, name):
        self.model = model
        self.name = name

    def param(self, suffix, shape, init, fan_in=None):
        return self.model._register(f"{self.name}.{suffix}", shape, init, fan_in)

    def p(self, suffix):
        return self.model.params[f"{self.name}.{suffix}"]


class Conv(Layer):
    def __init__(self, model, name, cin, cout, k, stride=1, groups=1, bias=True):
        super().__init__(model, name)
        self.stride, self.pad, self.groups, self.has_bias = stride, k // 2, groups, bias
        self.param("weight", (cout, cin // groups, k, k), "he", fan_in=cin // groups * k * k)
        if bias:
            self.param("bias", (cout,), "zeros")

    def __call__(self, x, training):
        b = self.p("bias") if self.has_bias else None
        return T.conv2d(x, self.p("weight"), b, stride=self.stride, padding=self.pad, groups=self.groups)


class BatchNorm(Layer):
    def __init__(self, model, name, c):
        super().__init__(model, name)
        self.param("gamma", (c,), "ones")
        self.param("beta", (c,), "zeros")
        model.buffers[f"{name}.running_mean"] = np.zeros(c)
        model.buffers[f"{name}.running_var"] = np.ones(c)

    def __call__(self, x, training):
        m = self.model
        return T.batchnorm2d(x, self.p("gamma"), self.p("beta"),
                             m.buffers[f"{self.name}.running_mean"], m.buffers[f"{self.name}.running_var"],
                             training=training, momentum=m.bn_momentum)


class ConvBN(Layer):
    """conv -> [batchnorm] -> [relu]"""

    def __init__(self, model, name, cin, cout, k, stride=1, groups=1, relu=True):
        super().__init__(model, name)
        bn = model.config.use_batchnorm
        self.conv = Conv(model, f"{name}.conv", cin, cout, k, stride, groups, bias=not bn)
        self.bn = BatchNorm(model, f"{name}.bn", cout) if bn else None
        self.relu = relu

    def __call__(self, x, training):
        x = self.conv(x, training)
        if self.bn is not None:
            x = self.bn(x, training)
        return T.relu(x) if self.relu else x


class ChannelGate(Layer):
    """sigmoid(fc2(relu(fc1(GAP(x))))) as an N×C×1×1 tensor."""

    def __init__(self, model, name, c, reduction):
        super().__init__(model, name)
        if c % reduction:
            raise ConfigurationError(f"{name}: channels {c} not divisible by reduction {reduction}")
        hidden = c // reduction
        self.param("fc1.weight", (hidden, c), "he", fan_in=c)
        self.param("fc1.bias", (hidden,), "zeros")
        self.param("fc2.weight", (c, hidden), "he", fan_in=hidden)
        self.param("fc2.bias", (c,), "zeros")

    def __call__(self, x, training):
        n, c = x.shape[:2]
        h = T.relu(T.dense(T.global_avg_pool(x), self.p("fc1.weight"), self.p("fc1.bias")))
        g = T.sigmoid(T.dense(h, self.p("fc2.weight"), self.p("fc2.bias")))
        return T.reshape(g, (n, c, 1, 1))


class SCSE(Layer):
    def __init__(self, model, name, c, reduction):
        super().__init__(model, name)
        self.cse = ChannelGate(model, f"{name}.cse", c, reduction)
        self.sse = Conv(model, f"{name}.sse", c, 1, 1)

    def __call__(self, x, training):
        return T.mul(x, self.cse(x, training)) + T.mul(x, T.sigmoid(self.sse(x, training)))


class AttentionGate(Layer):
    """Additive spatial attention from the coarser gating signal, then a
    channel gate on the attended skip."""

    def __init__(self, model, name, skip_ch, gate_ch, reduction):
        super().__init__(model, name)
        inter = max(skip_ch // 2, 1)
        self.theta = Conv(model, f"{name}.theta", skip_ch, inter, 1)
        self.phi = Conv(model, f"{name}.phi", gate_ch, inter, 1)
        self.psi = Conv(model, f"{name}.psi", inter, 1, 1)
        self.channel = ChannelGate(model, f"{name}.channel", skip_ch, reduction)

    def __call__(self, skip, gating, training):
        sh, sw = skip.shape[2:]
        gh, gw = gating.shape[2:]
        if gh > sh or gw > sw:
            raise DimensionError(f"{self.name}: gating {gh}×{gw} larger than skip {sh}×{sw}")
        phi = T.resize_bilinear(self.phi(gating, training), sh, sw)
        theta = self.theta(skip, training)
        if theta.shape != phi.shape:
            raise DimensionError(f"{self.name}: projected skip {theta.shape} vs gating {phi.shape}")
        alpha = T.sigmoid(self.psi(T.relu(theta + phi), training))
        attended = T.mul(skip, alpha)
        return T.mul(attended, self.channel(attended, training))


class Bottleneck(Layer):
    def __init__(self, model, name, cin, cout, cardinality, scse, reduction):
        super().__init__(model, name)
        self.conv1 = ConvBN(model, f"{name}.conv1", cin, cout, 1)
        self.conv2 = ConvBN(model, f"{name}.conv2", cout, cout, 3, groups=cardinality)
        self.conv3 = ConvBN(model, f"{name}.conv3", cout, cout, 1, relu=False)
        self.scse = SCSE(model, f"{name}.scse", cout, reduction) if scse else None
        self.proj = ConvBN(model, f"{name}.proj", cin, cout, 1, relu=False) if cin != cout else None

    def __call__(self, x, training):
        y = self.conv3(self.conv2(self.conv1(x, training), training), training)
        if self.scse is not None:
            y = self.scse(y, training)
        shortcut = self.proj(x, training) if self.proj is not None else x
        return T.relu(y + shortcut)


class DecoderBlock(Layer):
    def __init__(self, model, name, prev_ch, skip_ch, cout, cfg):
        super().__init__(model, name)
        self.gate = AttentionGate(model, f"{name}.gate", skip_ch, prev_ch, cfg.se_reduction) \
            if cfg.use_attention_gates else None
        self.conv1 = ConvBN(model, f"{name}.conv1", prev_ch + skip_ch, cout, 3)
        self.conv2 = ConvBN(model, f"{name}.conv2", cout, cout, 3)
        self.scse = SCSE(model, f"{name}.scse", cout, cfg.se_reduction) if cfg.use_scse else None

    def __call__(self, prev, skip, training):
        sh, sw = skip.shape[2:]
        up = T.resize_bilinear(prev, sh, sw)
        if self.gate is not None:
            skip = self.gate(skip, prev, training)
        x = self.conv2(self.conv1(T.concat([up, skip], axis=1), training), training)
        if self.scse is not None:
            x = self.scse(x, training)
        return x


# -- model ---------------------------------------------------------------------------

class SegModel:
    bn_momentum = 0.1

    def __init__(self, config, seed=0):
        config.validate()
        self.config = config
        self.seed = seed
        self.params = OrderedDict()
        self.buffers = OrderedDict()
        cfg = config
        ch = encoder_channels(cfg)

        self.stem = ConvBN(self, "stem", cfg.in_channels(), cfg.base_filters, 3, stride=cfg.first_stride)
        self.stages = []
        cin = cfg.base_filters
        for i, nblocks in enumerate(cfg.encoder_blocks):
            blocks = []
            for j in range(nblocks):
                blocks.append(Bottleneck(self, f"enc{i}.b{j}", cin, ch[i], cfg.cardinality, cfg.use_scse,
                                         cfg.se_reduction))
                cin = ch[i]
            self.stages.append(blocks)
        self.center = ConvBN(self, "center", ch[3], ch[3], 3)
        self.decoders = {}
        prev = ch[3]
        for i in (3, 2, 1, 0):
            self.decoders[i] = DecoderBlock(self, f"dec{i}", prev, ch[i], ch[i], cfg)
            prev = ch[i]
        if cfg.use_hypercolumn:
            self.dsv = {i: Conv(self, f"dsv{i}", ch[i], 1, 1) for i in (3, 2, 1, 0)}
            self.final = Conv(self, "final", ch[0] + 4, 1, 1)
        else:
            self.dsv = {}
            self.final = Conv(self, "final", ch[0], 1, 1)

    def _register(self, name, shape, init, fan_in=None):
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter name {name}")
        if init == "he":
            bound = np.sqrt(6.0 / fan_in)
            data = make_rng(self.seed, name).uniform(-bound, bound, size=shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        t = T.Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _pool(self, x):
        if self.config.pool_stride == 2:
            return T.maxpool2d(x, 2, 2)
        return T.maxpool2d(x, 3, 1, padding=1)

    def forward(self, x, training=False, capture=None):
        cfg = self.config
        if x.ndim != 4:
            raise DimensionError(f"input must be N×C×S×S, got {x.shape}")
        if x.shape[1] != cfg.in_channels():
            raise DimensionError(f"input has {x.shape[1]} channels (axis 1), expected C_in = {cfg.in_channels()}")
        if x.shape[2:] != (cfg.input_size, cfg.input_size):
            raise DimensionError(f"input spatial size {x.shape[2:]} (axes 2, 3), expected {cfg.input_size}")
        size = cfg.input_size

        h = self.stem(x, training)
        skips = []
        for i, blocks in enumerate(self.stages):
            if i > 0:
                h = self._pool(h)
            for blk in blocks:
                h = blk(h, training)
            skips.append(h)
            if capture is not None:
                capture[f"enc{i}"] = h.data
        if cfg.center_pool:
            h = self._pool(h)
        h = self.center(h, training)
        if capture is not None:
            capture["center"] = h.data

        dsv_maps = []
        for i in (3, 2, 1, 0):
            h = self.decoders[i](h, skips[i], training)
            if capture is not None:
                capture[f"dec{i}"] = h.data
            if cfg.use_hypercolumn:
                dsv_maps.append(T.resize_bilinear(self.dsv[i](h, training), size, size))
        h = T.resize_bilinear(h, size, size)
        if cfg.use_hypercolumn:
            h = T.concat([h] + dsv_maps, axis=1)
        return self.final(h, training)

    __call__ = forward

    def parameters(self):
        return list(self.params.values())

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def parameter_shapes(self):
        return OrderedDict((k, tuple(v.shape)) for k, v in self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        out = OrderedDict((k, v.data.copy()) for k, v in self.params.items())
        out.update((k, v.copy()) for k, v in self.buffers.items())
        return out

    def load_state_dict(self, state):
        expected = set(self.params) | set(self.buffers)
        missing, extra = expected - set(state), set(state) - expected
        if missing or extra:
            raise DimensionError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, v in state.items():
            target = self.params[k].data if k in self.params else self.buffers[k]
            if target.shape != np.shape(v):
                raise DimensionError(f"{k}: checkpoint shape {np.shape(v)} vs model {target.shape}")
            target[...] = v


def build_model(config, seed=0):
    return SegModel(config, seed)
