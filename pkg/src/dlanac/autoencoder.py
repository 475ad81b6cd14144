"""U-Net style frame predictor.

The encoder maps a stack of ``in_frames`` frames to a bottleneck map
``F`` of shape ``(D, S/2^depth, S/2^depth)``. The decoder takes a fused map
with ``2*D`` channels (features plus prototypes, or features twice for the
plain model) and predicts the next frame in ``(-1, 1)``.

Forward functions return a cache; backward functions accumulate into the
parameter gradients and return the input gradient. The state itself is
never written during a forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ConfigError, Parameter


@dataclass
class AeConfig:
    in_frames: int = 4
    frame_channels: int = 1
    frame_size: int = 64
    depth: int = 3
    base_width: int = 16
    feat_channels: int = 64
    slope: float = 0.2

    def __post_init__(self):
        if self.depth < 1 or self.frame_size % (2 ** self.depth):
            raise ConfigError(
                f"frame_size {self.frame_size} is not divisible by 2^depth={2 ** self.depth}")

    @property
    def bottleneck_side(self) -> int:
        return self.frame_size // 2 ** self.depth

    @property
    def widths(self) -> list[int]:
        # channel count of each encoder level below the bottleneck
        return [self.base_width * 2 ** i for i in range(self.depth)]


class AeState:
    """Parameters of the encoder/decoder keyed by name."""

    def __init__(self, cfg: AeConfig, params: dict[str, Parameter]):
        self.cfg = cfg
        self.params = params

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def _uniform_kernel(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_autoencoder(cfg: AeConfig, rng: np.random.Generator) -> AeState:
    c_in = cfg.in_frames * cfg.frame_channels
    D = cfg.feat_channels
    widths = cfg.widths
    params: dict[str, Parameter] = {}

    def conv(name, co, ci, k):
        params[f"{name}.w"] = Parameter(_uniform_kernel(rng, (co, ci, k, k), ci * k * k))
        params[f"{name}.b"] = Parameter(np.zeros(co))

    def tconv(name, ci, co, k):
        params[f"{name}.w"] = Parameter(_uniform_kernel(rng, (ci, co, k, k), ci * k * k / 4))
        params[f"{name}.b"] = Parameter(np.zeros(co))

    # enc0 keeps full resolution; enc1..enc{depth} halve it
    conv("enc0", widths[0], c_in, 3)
    for i in range(1, cfg.depth):
        conv(f"enc{i}", widths[i], widths[i - 1], 3)
    conv(f"enc{cfg.depth}", D, widths[-1], 3)

    # dec{i} upsamples to the resolution of skip i and is followed by concat
    ci = 2 * D
    for i in reversed(range(cfg.depth)):
        tconv(f"dec{i}", ci, widths[i], 2)
        ci = 2 * widths[i]
    conv("head", cfg.frame_channels, ci, 1)
    return AeState(cfg, params)


def _check_window(x: np.ndarray, cfg: AeConfig) -> None:
    expect = (cfg.in_frames * cfg.frame_channels, cfg.frame_size, cfg.frame_size)
    if x.shape[-3:] != expect:
        raise ConfigError(f"window shape {x.shape[-3:]} does not match config {expect}")


def encode_forward(x: np.ndarray, state: AeState):
    """``x``: (B, 4C, S, S) window batch. Returns ``(F, skips, cache)``."""
    cfg = state.cfg
    _check_window(x, cfg)
    x = np.asarray(x, dtype=state["enc0.w"].value.dtype)
    caches, skips = [], []
    h = x
    for i in range(cfg.depth + 1):
        stride = 1 if i == 0 else 2
        z, cache = dc.conv2d_forward(h, state[f"enc{i}.w"].value, state[f"enc{i}.b"].value,
                                     stride=stride, pad=1)
        if i == cfg.depth:
            # bottleneck stays linear
            caches.append((cache, None))
            h = z
        else:
            h = dc.leaky_relu(z, cfg.slope)
            caches.append((cache, z))
            skips.append(h)
    return h, skips, caches


def encode_backward(dF: np.ndarray, dskips: list, caches, state: AeState) -> np.ndarray:
    cfg = state.cfg
    dh = dF
    for i in reversed(range(cfg.depth + 1)):
        cache, z = caches[i]
        if z is not None:
            dh = dh + dskips[i]
            dh = dc.leaky_relu_backward(dh, z, cfg.slope)
        dh, dw, db = dc.conv2d_backward(dh, cache)
        state[f"enc{i}.w"].accumulate(dw)
        state[f"enc{i}.b"].accumulate(db)
    return dh


def decode_forward(fused: np.ndarray, skips: list, state: AeState):
    cfg = state.cfg
    if fused.shape[-3] != 2 * cfg.feat_channels:
        raise ConfigError(
            f"decoder expects {2 * cfg.feat_channels} fused channels, got {fused.shape[-3]}")
    caches = []
    h = fused
    for i in reversed(range(cfg.depth)):
        z, cache = dc.transposed_conv2d_forward(h, state[f"dec{i}.w"].value,
                                                state[f"dec{i}.b"].value, stride=2, pad=0)
        a = dc.leaky_relu(z, cfg.slope)
        caches.append((cache, z, a.shape[-3]))
        h = dc.channel_concat(a, skips[i])
    z, head_cache = dc.conv2d_forward(h, state["head.w"].value, state["head.b"].value,
                                      stride=1, pad=0)
    out = np.tanh(z)
    return out, (caches, head_cache, out)


def decode_backward(dout: np.ndarray, cache, state: AeState):
    """Returns ``(d_fused, d_skips)`` with ``d_skips`` ordered like the skips."""
    cfg = state.cfg
    caches, head_cache, out = cache
    dz = dc.tanh_backward(dout, out)
    dh, dw, db = dc.conv2d_backward(dz, head_cache)
    state["head.w"].accumulate(dw)
    state["head.b"].accumulate(db)
    dskips = [None] * cfg.depth
    for (tcache, z, c1), i in zip(reversed(caches), range(cfg.depth)):
        da, dskips[i] = dc.channel_concat_backward(dh, c1)
        dz = dc.leaky_relu_backward(da, z, cfg.slope)
        dh, dw, db = dc.transposed_conv2d_backward(dz, tcache)
        state[f"dec{i}.w"].accumulate(dw)
        state[f"dec{i}.b"].accumulate(db)
    return dh, dskips


def encode(window: np.ndarray, state: AeState):
    """Bottleneck map and skip tensors (shallow to deep) for one window or a batch."""
    x = np.asarray(window)
    single = x.ndim == 3
    F, skips, _ = encode_forward(x[None] if single else x, state)
    if single:
        return F[0], [s[0] for s in skips]
    return F, skips


def decode(fused: np.ndarray, skips: list, state: AeState) -> np.ndarray:
    single = fused.ndim == 3
    if single:
        fused = fused[None]
        skips = [s[None] for s in skips]
    out, _ = decode_forward(fused, skips, state)
    return out[0] if single else out
