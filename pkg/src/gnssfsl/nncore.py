"""Small convolutional embedding network with hand-derived exact gradients.

Stack: repeated [conv 3x3 (pad 1) + bias + ReLU + 2x2 max-pool], global average
pool, dense projection to the embedding, and an optional dense classifier head.
An adaptation block (one extra conv 3x3 + ReLU before pooling) can be attached
after training; with the backbone frozen its gradients are exactly zero.

Parameters live in one flat vector so the optimizer and gradient checks treat
the whole network uniformly. float32 is the training default; float64 is used
when gradients are checked against finite differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

CHECKPOINT_MAGIC = b"GNSSNET1"

_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class ArchConfig:
    height: int = 32
    width: int = 32
    conv_channels: tuple = (16, 32, 64)
    embed_dim: int = 64
    num_classes: Optional[int] = None
    dtype: str = "f32"
    # Adds a fixed frequency-coordinate input plane. Global average pooling is
    # otherwise blind to where along the frequency axis energy sits, and tone
    # classes are defined by exactly that.
    freq_coord: bool = True

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"bad input dims {self.height}x{self.width}")
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        if len(self.conv_channels) == 0:
            raise ValueError("need at least one conv block")
        if self.num_classes is not None and self.num_classes < 2:
            raise ValueError("classifier head needs >= 2 classes")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        h, w = self.height, self.width
        for _ in self.conv_channels:
            h, w = h // 2, w // 2
            if h == 0 or w == 0:
                raise ValueError(
                    f"input {self.height}x{self.width} too small for "
                    f"{len(self.conv_channels)} pooling stages"
                )

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]


def softmax_normalize(v: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis; rows sum to 1."""
    v = np.asarray(v, dtype=np.float64)
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(s: np.ndarray, ds: np.ndarray) -> np.ndarray:
    """Gradient through softmax: given s = softmax(x) and dL/ds, return dL/dx."""
    dot = np.sum(ds * s, axis=-1, keepdims=True)
    return s * (ds - dot)


def sgd_step(
    params: np.ndarray,
    grads: np.ndarray,
    lr: float,
    weight_decay: float = 0.0,
    decay_mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Vanilla SGD with decoupled-style L2: p <- p - lr*(g + wd*p).

    `decay_mask` marks coordinates subject to decay (weights, not biases).
    """
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch {params.shape} vs {grads.shape}")
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise FloatingPointError(f"non-finite gradient at coordinate {bad}")
    decay = grads.dtype.type(weight_decay)
    if weight_decay == 0.0:
        update = grads
    elif decay_mask is None:
        update = grads + decay * params
    else:
        update = grads + decay * np.where(decay_mask, params, 0)
    return params - grads.dtype.type(lr) * update


# ---------------------------------------------------------------------------
# Layers. Each layer owns a slice of the flat parameter vector and implements
# forward(x, p) -> (y, cache) and backward(dy, p, cache) -> (dx, dp).
# ---------------------------------------------------------------------------


class _ConvRelu:
    """3x3 convolution (padding 1) + bias + ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.n_weights = out_ch * in_ch * 9
        self.n_params = self.n_weights + out_ch

    def init_params(self, rng: np.random.Generator, dtype) -> np.ndarray:
        bound = np.sqrt(6.0 / (self.in_ch * 9))
        w = rng.uniform(-bound, bound, size=self.n_weights)
        return np.concatenate([w, np.zeros(self.out_ch)]).astype(dtype)

    def decay_mask(self) -> np.ndarray:
        m = np.zeros(self.n_params, dtype=bool)
        m[: self.n_weights] = True
        return m

    def forward(self, x, p):
        w = p[: self.n_weights].reshape(self.out_ch, self.in_ch, 3, 3)
        b = p[self.n_weights :]
        bsz, _, h, wd = x.shape
        xp = np.zeros((bsz, self.in_ch, h + 2, wd + 2), dtype=x.dtype)
        xp[:, :, 1 : h + 1, 1 : wd + 1] = x
        y = np.zeros((bsz, self.out_ch, h, wd), dtype=x.dtype)
        for dy in range(3):
            for dx in range(3):
                xs = xp[:, :, dy : dy + h, dx : dx + wd]
                # (O,C) . (B,C,H,W) over C -> (O,B,H,W)
                y += np.tensordot(w[:, :, dy, dx], xs, axes=(1, 1)).transpose(1, 0, 2, 3)
        y += b[None, :, None, None]
        mask = y > 0
        return y * mask, (xp, mask)

    def backward(self, dy, p, cache):
        xp, mask = cache
        w = p[: self.n_weights].reshape(self.out_ch, self.in_ch, 3, 3)
        dy = dy * mask
        bsz = dy.shape[0]
        h, wd = dy.shape[2], dy.shape[3]
        dw = np.zeros_like(w)
        dxp = np.zeros_like(xp)
        for ky in range(3):
            for kx in range(3):
                xs = xp[:, :, ky : ky + h, kx : kx + wd]
                dw[:, :, ky, kx] = np.tensordot(dy, xs, axes=([0, 2, 3], [0, 2, 3]))
                dxp[:, :, ky : ky + h, kx : kx + wd] += np.tensordot(
                    dy, w[:, :, ky, kx], axes=(1, 0)
                ).transpose(0, 3, 1, 2)
        db = dy.sum(axis=(0, 2, 3))
        dx = dxp[:, :, 1 : h + 1, 1 : wd + 1]
        return dx, np.concatenate([dw.ravel(), db])

    def out_shape(self, h, w):
        return h, w


class _MaxPool2:
    """2x2 max-pool, stride 2; odd trailing rows/cols are dropped."""

    n_params = 0

    def init_params(self, rng, dtype):
        return np.zeros(0, dtype=dtype)

    def decay_mask(self):
        return np.zeros(0, dtype=bool)

    def forward(self, x, p):
        bsz, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        xc = x[:, :, : 2 * h2, : 2 * w2]
        windows = xc.reshape(bsz, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
        flat = windows.reshape(bsz, c, h2, w2, 4)
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, dy, p, cache):
        (bsz, c, h, w), arg = cache
        h2, w2 = h // 2, w // 2
        dflat = np.zeros((bsz, c, h2, w2, 4), dtype=dy.dtype)
        np.put_along_axis(dflat, arg[..., None], dy[..., None], axis=-1)
        dx = np.zeros((bsz, c, h, w), dtype=dy.dtype)
        dx[:, :, : 2 * h2, : 2 * w2] = (
            dflat.reshape(bsz, c, h2, w2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(bsz, c, 2 * h2, 2 * w2)
        )
        return dx, np.zeros(0, dtype=dy.dtype)

    def out_shape(self, h, w):
        return h // 2, w // 2


class _GlobalAvgPool:
    n_params = 0

    def init_params(self, rng, dtype):
        return np.zeros(0, dtype=dtype)

    def decay_mask(self):
        return np.zeros(0, dtype=bool)

    def forward(self, x, p):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dy, p, cache):
        bsz, c, h, w = cache
        dx = np.broadcast_to(dy[:, :, None, None], (bsz, c, h, w)) / (h * w)
        return dx.astype(dy.dtype), np.zeros(0, dtype=dy.dtype)


class _Dense:
    def __init__(self, in_features: int, out_features: int):
        self.in_features = in_features
        self.out_features = out_features
        self.n_weights = out_features * in_features
        self.n_params = self.n_weights + out_features

    def init_params(self, rng, dtype):
        bound = np.sqrt(6.0 / self.in_features)
        w = rng.uniform(-bound, bound, size=self.n_weights)
        return np.concatenate([w, np.zeros(self.out_features)]).astype(dtype)

    def decay_mask(self):
        m = np.zeros(self.n_params, dtype=bool)
        m[: self.n_weights] = True
        return m

    def forward(self, x, p):
        w = p[: self.n_weights].reshape(self.out_features, self.in_features)
        b = p[self.n_weights :]
        return x @ w.T + b, x

    def backward(self, dy, p, cache):
        x = cache
        w = p[: self.n_weights].reshape(self.out_features, self.in_features)
        dx = dy @ w
        dw = dy.T @ x
        db = dy.sum(axis=0)
        return dx, np.concatenate([dw.ravel(), db])


class EmbeddingNetwork:
    """Feature extractor f(X) with flat parameters and exact gradients."""

    def __init__(self, config: ArchConfig, seed: int):
        self.config = config
        self.seed = seed
        self.freeze_backbone = False
        self._cache = None
        self._build_layers(adaptation_head=False)
        rng = np.random.default_rng(seed)
        self.params = np.concatenate(
            [layer.init_params(rng, config.np_dtype) for layer in self._layers]
        )
        if self.params.dtype != config.np_dtype:
            self.params = self.params.astype(config.np_dtype)

    def _build_layers(self, adaptation_head: bool) -> None:
        cfg = self.config
        layers = []
        in_ch = 2 if cfg.freq_coord else 1
        for out_ch in cfg.conv_channels:
            layers.append(_ConvRelu(in_ch, out_ch))
            layers.append(_MaxPool2())
            in_ch = out_ch
        self._adaptation_index = None
        if adaptation_head:
            self._adaptation_index = len(layers)
            layers.append(_ConvRelu(in_ch, in_ch))
        layers.append(_GlobalAvgPool())
        self._embed_index = len(layers)
        layers.append(_Dense(in_ch, cfg.embed_dim))
        self._head_index = None
        if cfg.num_classes is not None:
            self._head_index = len(layers)
            layers.append(_Dense(cfg.embed_dim, cfg.num_classes))
        self._layers = layers
        offsets = np.cumsum([0] + [l.n_params for l in layers])
        self._offsets = offsets
        self.n_params = int(offsets[-1])

    @property
    def has_adaptation_head(self) -> bool:
        return self._adaptation_index is not None

    def _param_slice(self, i: int) -> slice:
        return slice(int(self._offsets[i]), int(self._offsets[i + 1]))

    def decay_mask(self) -> np.ndarray:
        return np.concatenate([l.decay_mask() for l in self._layers])

    def attach_adaptation_head(self, seed: int, freeze_backbone: bool = True) -> None:
        """Insert the post-training conv block before global pooling."""
        if self.has_adaptation_head:
            raise ValueError("adaptation head already attached")
        old_layers = self._layers
        old_offsets = self._offsets
        old_params = self.params
        self._build_layers(adaptation_head=True)
        rng = np.random.default_rng(seed)
        parts = []
        for i, layer in enumerate(self._layers):
            if i == self._adaptation_index:
                parts.append(layer.init_params(rng, self.config.np_dtype))
            else:
                j = i if i < self._adaptation_index else i - 1
                parts.append(old_params[int(old_offsets[j]) : int(old_offsets[j + 1])])
        del old_layers
        self.params = np.concatenate(parts).astype(self.config.np_dtype)
        self.freeze_backbone = freeze_backbone
        self._cache = None

    def trainable_mask(self) -> np.ndarray:
        """True where SGD may update; all-True unless the backbone is frozen."""
        mask = np.ones(self.n_params, dtype=bool)
        if self.freeze_backbone:
            if not self.has_adaptation_head:
                raise ValueError("freeze_backbone without an adaptation head")
            mask[:] = False
            mask[self._param_slice(self._adaptation_index)] = True
        return mask

    # -- forward / backward -------------------------------------------------

    def _prepare_batch(self, batch) -> np.ndarray:
        if isinstance(batch, (list, tuple)):
            batch = np.stack(
                [b.pixels if hasattr(b, "pixels") else np.asarray(b) for b in batch]
            )
        x = np.asarray(batch)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3:
            raise ValueError(f"expected (batch, h, w), got shape {x.shape}")
        if x.shape[1] != self.config.height or x.shape[2] != self.config.width:
            raise ValueError(
                f"image shape {x.shape[1:]}, network expects "
                f"{self.config.height}x{self.config.width}"
            )
        if x.dtype == np.uint8:
            x = x.astype(self.config.np_dtype) / np.array(255.0, self.config.np_dtype)
        else:
            x = x.astype(self.config.np_dtype)
        x = x[:, None, :, :]
        if self.config.freq_coord:
            ramp = np.linspace(-0.5, 0.5, self.config.height, dtype=self.config.np_dtype)
            coord = np.broadcast_to(
                ramp[None, None, :, None], (x.shape[0], 1, self.config.height, self.config.width)
            )
            x = np.concatenate([x, coord], axis=1)
        return x

    def forward_with_cache(self, batch, with_head: bool = False):
        if with_head and self._head_index is None:
            raise ValueError("network has no classifier head")
        x = self._prepare_batch(batch)
        stop = self._head_index if with_head else self._embed_index
        caches = []
        for i, layer in enumerate(self._layers[: stop + 1]):
            x, c = layer.forward(x, self.params[self._param_slice(i)])
            caches.append(c)
        return x, {"caches": caches, "stop": stop}

    def forward(self, batch, with_head: bool = False) -> np.ndarray:
        out, cache = self.forward_with_cache(batch, with_head)
        self._cache = cache
        return out

    def infer(self, batch, with_head: bool = False) -> np.ndarray:
        """Forward pass for inference; keeps no cache for backward."""
        out, _ = self.forward_with_cache(batch, with_head)
        return out

    def backward_from(self, cache, grad_out: np.ndarray) -> np.ndarray:
        stop = cache["stop"]
        caches = cache["caches"]
        grads = np.zeros_like(self.params)
        dy = np.asarray(grad_out, dtype=self.config.np_dtype)
        for i in range(stop, -1, -1):
            layer = self._layers[i]
            dy, dp = layer.backward(dy, self.params[self._param_slice(i)], caches[i])
            grads[self._param_slice(i)] = dp
        if self.freeze_backbone:
            grads[~self.trainable_mask()] = 0
        return grads

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        cache, self._cache = self._cache, None
        return self.backward_from(cache, grad_out)

    # -- persistence ----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        save_checkpoint(self, path)


def init(config: ArchConfig, seed: int) -> EmbeddingNetwork:
    """He-uniform weights, zero biases; same seed gives bit-identical params."""
    return EmbeddingNetwork(config, seed)


def save_checkpoint(net: EmbeddingNetwork, path: str | Path) -> None:
    header = {
        "height": net.config.height,
        "width": net.config.width,
        "conv_channels": list(net.config.conv_channels),
        "embed_dim": net.config.embed_dim,
        "num_classes": net.config.num_classes,
        "dtype": net.config.dtype,
        "freq_coord": net.config.freq_coord,
        "seed": net.seed,
        "adaptation_head": net.has_adaptation_head,
        "freeze_backbone": net.freeze_backbone,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = net.params.astype("<f4").tobytes()
    Path(path).write_bytes(
        CHECKPOINT_MAGIC + struct.pack("<I", len(blob)) + blob + payload
    )


def load_checkpoint(path: str | Path) -> EmbeddingNetwork:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad magic {data[:8]!r}, expected {CHECKPOINT_MAGIC!r}")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    config = ArchConfig(
        height=header["height"],
        width=header["width"],
        conv_channels=tuple(header["conv_channels"]),
        embed_dim=header["embed_dim"],
        num_classes=header["num_classes"],
        dtype=header["dtype"],
        freq_coord=header.get("freq_coord", True),
    )
    net = EmbeddingNetwork(config, header.get("seed", 0))
    if header.get("adaptation_head", False):
        net.attach_adaptation_head(seed=0, freeze_backbone=header.get("freeze_backbone", False))
    params = np.frombuffer(data[12 + hlen :], dtype="<f4")
    if params.size != net.n_params:
        raise ValueError(
            f"checkpoint has {params.size} parameters, architecture needs {net.n_params}"
        )
    net.params = params.astype(config.np_dtype)
    return net
