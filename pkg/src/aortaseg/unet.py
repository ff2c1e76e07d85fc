"""U-Net assembly: configuration, parameter store, forward/backward, padding.

The network follows the encoder/bottleneck/decoder scheme with 2x2x1
pooling and up-convolution, so any slice count is accepted while x and y
must be divisible by 2**levels (use pad_to_grid otherwise). Skip
connections concatenate the encoder features ahead of the upsampled ones.
Dropout is applied after the bottleneck block only.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import layers
from .layers import BatchNormState


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 4
    init_features: int = 32
    convs_per_block: int = 2
    growth_factor: int = 2
    classes: int = 2
    bottleneck_dropout: float = 0.2
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    # intensity preprocessing: clamp then min-max scale to [0, 1]
    clamp_lo: float = -200.0
    clamp_hi: float = 500.0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.init_features < 1:
            raise ValueError(f"init_features must be >= 1, got {self.init_features}")
        if self.classes != 2:
            raise ValueError(f"this artifact is two-class only, got classes={self.classes}")
        if not 0.0 <= self.bottleneck_dropout < 1.0:
            raise ValueError(f"bad dropout rate {self.bottleneck_dropout}")

    def features_at(self, level):
        """Channel count at a given depth; level == levels is the bottleneck."""
        return self.init_features * self.growth_factor ** level

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class WeightStore:
    """Ordered named parameter tensors plus batch-norm and optimizer state.

    params maps names like "down0/conv1/kernel" to arrays; bn maps block
    names like "down0/bn1" to BatchNormState; opt holds per-parameter
    optimizer accumulators keyed like params.
    """

    def __init__(self):
        self.params = {}
        self.bn = {}
        self.opt = {}

    def add(self, name, tensor):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.params[name] = tensor

    def names(self):
        return list(self.params)

    def param_count(self):
        return sum(int(p.size) for p in self.params.values())

    def group_names(self):
        """Distinct layer groups, e.g. {"down0/conv1", "head/conv", ...}."""
        return sorted({n.rsplit("/", 1)[0] for n in self.params})

    def copy(self):
        out = WeightStore()
        out.params = {k: v.copy() for k, v in self.params.items()}
        out.bn = {k: v.copy() for k, v in self.bn.items()}
        out.opt = {k: v.copy() for k, v in self.opt.items()}
        return out

    def astype(self, dtype):
        out = WeightStore()
        out.params = {k: v.astype(dtype) for k, v in self.params.items()}
        out.bn = {
            k: BatchNormState(v.running_mean.astype(dtype), v.running_var.astype(dtype),
                              v.initialized)
            for k, v in self.bn.items()
        }
        out.opt = {k: v.astype(dtype) for k, v in self.opt.items()}
        return out

    def allclose(self, other, rtol=0.0, atol=0.0):
        if self.names() != other.names():
            return False
        return all(np.allclose(self.params[n], other.params[n], rtol=rtol, atol=atol)
                   for n in self.params)

    def equal_bits(self, other):
        if self.names() != other.names() or sorted(self.bn) != sorted(other.bn):
            return False
        for n in self.params:
            if not np.array_equal(self.params[n], other.params[n]):
                return False
        for n in self.bn:
            a, b = self.bn[n], other.bn[n]
            if a.initialized != b.initialized:
                return False
            if not (np.array_equal(a.running_mean, b.running_mean)
                    and np.array_equal(a.running_var, b.running_var)):
                return False
        return True


def _conv_block_channels(config, block, cin):
    """Yield (conv index, cin, cout) for the convs of one block."""
    cout = {
        "down": lambda i: config.features_at(i),
        "bottleneck": lambda i: config.features_at(config.levels),
        "up": lambda i: config.features_at(i),
    }
    for j in range(1, config.convs_per_block + 1):
        yield j, cin, cout[block[0]](block[1])
        cin = cout[block[0]](block[1])


def _block_plan(config):
    """Ordered (block name, in-channels) pairs covering the whole network."""
    plan = []
    cin = 1
    for i in range(config.levels):
        plan.append((("down", i), cin))
        cin = config.features_at(i)
    plan.append((("bottleneck", None), cin))
    cin = config.features_at(config.levels)
    for i in reversed(range(config.levels)):
        plan.append((("up", i), cin))
        cin = config.features_at(i)
    return plan


def build(config, seed, dtype=np.float32):
    """He-initialized weight store; deterministic given the seed."""
    rng = np.random.default_rng(seed)
    store = WeightStore()

    def add_conv(prefix, cin, cout, spatial):
        fan_in = cin * math.prod(spatial)
        scale = math.sqrt(2.0 / fan_in)
        kernel = rng.normal(0.0, scale, (cout, cin) + spatial).astype(dtype)
        store.add(f"{prefix}/kernel", kernel)
        store.add(f"{prefix}/bias", np.zeros(cout, dtype))

    def add_bn(prefix, channels):
        store.add(f"{prefix}/gamma", np.ones(channels, dtype))
        store.add(f"{prefix}/beta", np.zeros(channels, dtype))
        store.bn[prefix] = BatchNormState.fresh(channels, dtype)

    for (kind, i), cin in _block_plan(config):
        name = {"down": f"down{i}", "bottleneck": "bottleneck", "up": f"up{i}"}[kind]
        if kind == "up":
            # transposed conv halves the channel count before the skip concat
            c_from = config.features_at(i + 1)
            c_to = config.features_at(i)
            fan_in = c_from * 4
            kernel = rng.normal(0.0, math.sqrt(2.0 / fan_in),
                                (c_from, c_to, 2, 2, 1)).astype(dtype)
            store.add(f"{name}/upconv/kernel", kernel)
            store.add(f"{name}/upconv/bias", np.zeros(c_to, dtype))
            cin = c_to + c_to  # skip concat
        for j, cj_in, cj_out in _conv_block_channels(config, (kind, i), cin):
            add_conv(f"{name}/conv{j}", cj_in, cj_out, (3, 3, 3))
            add_bn(f"{name}/bn{j}", cj_out)

    add_conv("head/conv", config.init_features, config.classes, (1, 1, 1))
    return store


def expected_shapes(config):
    """Parameter name -> shape map implied by the config, for validation."""
    ref = build(config, seed=0)
    return {k: v.shape for k, v in ref.params.items()}


def normalize_intensities(volume, config):
    """Clamp raw intensities to the configured window and scale to [0, 1]."""
    lo, hi = config.clamp_lo, config.clamp_hi
    v = np.clip(volume, lo, hi)
    return ((v - lo) / (hi - lo)).astype(np.float32)


def pad_to_grid(volume, levels):
    """Zero-pad x and y symmetrically to the next multiple of 2**levels.

    Works on [X, Y, Z] arrays. Returns (padded, crop record); the record is
    (x_lo, x_hi, y_lo, y_hi) pad widths, (0, 0, 0, 0) when nothing was added.
    """
    grid = 2 ** levels
    x, y = volume.shape[0], volume.shape[1]
    px = (-x) % grid
    py = (-y) % grid
    rec = (px // 2, px - px // 2, py // 2, py - py // 2)
    if px == 0 and py == 0:
        return volume.copy(), rec
    out = np.zeros((x + px, y + py, volume.shape[2]), dtype=volume.dtype)
    out[rec[0]:rec[0] + x, rec[2]:rec[2] + y, :] = volume
    return out, rec


def unpad(volume, crop_record):
    """Exactly invert pad_to_grid."""
    x_lo, x_hi, y_lo, y_hi = crop_record
    x_end = volume.shape[0] - x_hi
    y_end = volume.shape[1] - y_hi
    return volume[x_lo:x_end, y_lo:y_end, :].copy()


def _check_input(config, volume):
    if volume.ndim != 5 or volume.shape[1] != 1:
        raise ValueError(f"expected [N,1,X,Y,Z] input, got shape {volume.shape}")
    grid = 2 ** config.levels
    if volume.shape[2] % grid or volume.shape[3] % grid:
        raise ValueError(
            f"x/y extents {volume.shape[2:4]} not divisible by {grid}; "
            "apply pad_to_grid first")


def _run(weights, config, volume, mode, seed, record):
    """Shared forward pass. In train mode batch-norm states in `weights` are
    replaced with their updated versions (single writer). When `record` is
    true a tape of intermediates for backward() is returned alongside."""
    _check_input(config, volume)
    p, bn, eps, mom = weights.params, weights.bn, config.bn_eps, config.bn_momentum
    tape = [] if record else None

    def conv_block(name, h):
        for j in range(1, config.convs_per_block + 1):
            x_in = h
            h = layers.conv3d_forward(h, p[f"{name}/conv{j}/kernel"], p[f"{name}/conv{j}/bias"])
            bn_name = f"{name}/bn{j}"
            conv_out = h
            h, new_state = layers.batchnorm_forward(
                h, p[f"{bn_name}/gamma"], p[f"{bn_name}/beta"], bn[bn_name], mode,
                eps=eps, momentum=mom)
            if mode == "train":
                bn[bn_name] = new_state
            bn_out = h
            h = layers.relu(h)
            if record:
                tape.append(("conv_bn_relu", name, j, x_in, conv_out, bn_out))
        return h

    h = volume
    skips = []
    pools = []
    for i in range(config.levels):
        h = conv_block(f"down{i}", h)
        skips.append(h)
        h, rec = layers.maxpool_2x2x1_forward(h)
        pools.append(rec)
        if record:
            tape.append(("pool", i, rec))

    h = conv_block("bottleneck", h)
    h, keep = layers.dropout(h, config.bottleneck_dropout, seed,
                             "train" if mode == "train" else "infer")
    if record:
        tape.append(("dropout", keep))

    for i in reversed(range(config.levels)):
        x_in = h
        h = layers.upconv_2x2x1_forward(h, p[f"up{i}/upconv/kernel"], p[f"up{i}/upconv/bias"])
        if record:
            tape.append(("upconv", i, x_in))
        skip = skips[i]
        h = layers.concat_channels(skip, h)
        if record:
            tape.append(("concat", i, skip.shape[1]))
        h = conv_block(f"up{i}", h)

    x_in = h
    logits = layers.conv1x1_forward(h, p["head/conv/kernel"], p["head/conv/bias"])
    prob = layers.softmax_channels(logits)
    if record:
        tape.append(("head", x_in, prob))
    return prob, tape


def forward(weights, config, volume, mode="infer", seed=0):
    """Probability map [N, classes, X, Y, Z] for a [N, 1, X, Y, Z] volume.

    Infer mode is pure and deterministic; train mode updates the batch-norm
    running statistics inside `weights` and applies seeded dropout.
    """
    prob, _ = _run(weights, config, volume, mode, seed, record=False)
    return prob


def binarize(prob, threshold=0.5):
    """Foreground-channel probabilities to a binary mask [N, X, Y, Z] (uint8).

    A voxel is foreground iff its channel-1 probability strictly exceeds the
    threshold; an exact tie maps to background.
    """
    if prob.ndim != 5 or prob.shape[1] != 2:
        raise ValueError(f"expected a two-channel probability map, got shape {prob.shape}")
    return (prob[:, 1] > threshold).astype(np.uint8)


def forward_train(weights, config, volume, seed):
    """Train-mode forward returning the tape needed by backward()."""
    return _run(weights, config, volume, "train", seed, record=True)


def backward(weights, config, tape, grad_prob):
    """Walk the tape in reverse; returns parameter gradients keyed like params.

    Encoder activations feed both the pool and a skip connection, so their
    gradients are the sum of the pooled branch and the stored skip branch.
    """
    p = weights.params
    grads = {}
    skip_grads = {}
    g = None
    for entry in reversed(tape):
        kind = entry[0]
        if kind == "head":
            _, x_in, prob = entry
            g = layers.softmax_channels_backward(prob, grad_prob)
            g, gk, gb = layers.conv1x1_backward(x_in, p["head/conv/kernel"], g)
            grads["head/conv/kernel"] = gk
            grads["head/conv/bias"] = gb
        elif kind == "conv_bn_relu":
            _, name, j, x_in, conv_out, bn_out = entry
            g = layers.relu_backward(bn_out, g)
            g, ggamma, gbeta = layers.batchnorm_backward(
                conv_out, p[f"{name}/bn{j}/gamma"], g, eps=config.bn_eps)
            grads[f"{name}/bn{j}/gamma"] = ggamma
            grads[f"{name}/bn{j}/beta"] = gbeta
            g, gk, gb = layers.conv3d_backward(x_in, p[f"{name}/conv{j}/kernel"], g)
            grads[f"{name}/conv{j}/kernel"] = gk
            grads[f"{name}/conv{j}/bias"] = gb
        elif kind == "concat":
            _, i, skip_channels = entry
            skip_grads[i], g = layers.concat_channels_backward(g, skip_channels)
        elif kind == "upconv":
            _, i, x_in = entry
            g, gk, gb = layers.upconv_2x2x1_backward(x_in, p[f"up{i}/upconv/kernel"], g)
            grads[f"up{i}/upconv/kernel"] = gk
            grads[f"up{i}/upconv/bias"] = gb
        elif kind == "dropout":
            g = layers.dropout_backward(entry[1], config.bottleneck_dropout, g)
        elif kind == "pool":
            _, i, rec = entry
            g = layers.maxpool_2x2x1_backward(rec, g)
            g = g + skip_grads.pop(i)
        else:
            raise AssertionError(f"unhandled tape entry {kind!r}")
    return grads
