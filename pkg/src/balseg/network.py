"""Configurable U-Net variants for imbalanced multi-class segmentation.

The backbone is an encoder/decoder with `depth` 2x downsampling steps,
`convs_per_level` conv/ReLU/batch-norm blocks per resolution, a fixed filter
count everywhere, and skip connections at every resolution except full, so
the decoder stops at half resolution with an (H/2, W/2, N) feature map. Heads
are three more conv blocks with an upsample before the last, restoring full
resolution; a 1x1 classifier conv then produces logits.

Variants (combinable):
  - softmax head over C+1 channels (background channel carries no loss), or
    sigmoid head over C channels with the background output dropped;
  - an auxiliary head producing a single sigmoid map of the foreground union,
    built only in train mode;
  - separate per-class heads that branch immediately after the backbone
    (C+1 heads for softmax, C for sigmoid), each contributing one logit map.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError


@dataclass
class NetworkConfig:
    patch_size: int
    depth: int = 4
    filters: int = 8
    num_classes: int = 4
    convs_per_level: int = 3
    in_channels: int = 3
    use_sigmoid: bool = False
    use_aux_head: bool = False
    use_separate_heads: bool = False

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.filters < 1 or self.num_classes < 1 or self.convs_per_level < 1:
            raise ConfigError("filters, num_classes and convs_per_level must be >= 1")
        if self.patch_size % (1 << self.depth):
            raise ConfigError(
                f"patch size {self.patch_size} not divisible by 2^depth "
                f"= {1 << self.depth}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        return cls(**json.loads(text))


@dataclass
class NetworkOutput:
    main: np.ndarray          # (B, H, W, C+1) softmax probs or (B, H, W, C) sigmoid scores
    aux: np.ndarray | None    # (B, H, W, 1) sigmoid map, train mode only


@dataclass
class TrainForward:
    graph: ad.Graph
    main: ad.Node
    aux: ad.Node | None


def _init_rng(seed: int, name: str):
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class _ConvBlock:
    """conv -> ReLU -> batch norm, as the architecture orders them."""

    def __init__(self, name, cin, cout, seed, dtype):
        rng = _init_rng(seed, name)
        fan_in = 9 * cin
        limit = np.sqrt(6.0 / fan_in)
        self.w = ad.Parameter(f"{name}.w",
                              rng.uniform(-limit, limit, (3, 3, cin, cout)).astype(dtype))
        self.b = ad.Parameter(f"{name}.b", np.zeros(cout, dtype=dtype))
        self.bn = ad.BatchNormState(f"{name}.bn", cout, dtype=dtype)

    def __call__(self, g, x, training):
        h = ad.conv2d(g, x, self.w, self.b)
        h = ad.relu(g, h)
        return ad.batch_norm(g, h, self.bn, training)

    def params(self):
        return [self.w, self.b, self.bn.gamma, self.bn.beta]

    def buffers(self):
        return {f"{self.bn.name}.running_mean": self.bn.running_mean,
                f"{self.bn.name}.running_var": self.bn.running_var}


class _Head:
    """Three conv blocks with an upsample before the last, plus a 1x1
    classifier producing `out_channels` logit maps."""

    def __init__(self, name, filters, out_channels, seed, dtype):
        self.blocks = [
            _ConvBlock(f"{name}.block1", filters, filters, seed, dtype),
            _ConvBlock(f"{name}.block2", filters, filters, seed, dtype),
            _ConvBlock(f"{name}.block3", filters, filters, seed, dtype),
        ]
        rng = _init_rng(seed, f"{name}.cls")
        limit = np.sqrt(6.0 / filters)
        self.cls_w = ad.Parameter(f"{name}.cls.w",
                                  rng.uniform(-limit, limit, (filters, out_channels)).astype(dtype))
        self.cls_b = ad.Parameter(f"{name}.cls.b", np.zeros(out_channels, dtype=dtype))

    def __call__(self, g, x, training):
        h = self.blocks[0](g, x, training)
        h = self.blocks[1](g, h, training)
        h = ad.upsample2(g, h)
        h = self.blocks[2](g, h, training)
        return ad.conv1x1(g, h, self.cls_w, self.cls_b)

    def params(self):
        out = [p for blk in self.blocks for p in blk.params()]
        return out + [self.cls_w, self.cls_b]

    def buffers(self):
        out = {}
        for blk in self.blocks:
            out.update(blk.buffers())
        return out


class Network:
    def __init__(self, config: NetworkConfig, seed: int, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        n = config.filters
        k = config.convs_per_level

        def level(name, cin):
            return [_ConvBlock(f"{name}.conv{i}", cin if i == 0 else n, n, seed, dtype)
                    for i in range(k)]

        self.encoder = [level(f"enc{l}", config.in_channels if l == 0 else n)
                        for l in range(config.depth)]
        self.bottom = level("bottom", n)
        # decoder levels depth-1 .. 1; the first block sees skip + upsampled
        self.decoder = {l: [_ConvBlock(f"dec{l}.conv{i}", 2 * n if i == 0 else n, n, seed, dtype)
                            for i in range(k)]
                        for l in range(config.depth - 1, 0, -1)}

        if config.use_separate_heads:
            head_count = config.num_classes if config.use_sigmoid else config.num_classes + 1
            self.heads = [_Head(f"head{h}", n, 1, seed, dtype) for h in range(head_count)]
        else:
            out_ch = config.num_classes if config.use_sigmoid else config.num_classes + 1
            self.heads = [_Head("head0", n, out_ch, seed, dtype)]
        self.aux_head = (_Head("aux", n, 1, seed, dtype)
                         if config.use_aux_head else None)

    # --- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[ad.Parameter]:
        out = []
        for lvl in self.encoder:
            for blk in lvl:
                out.extend(blk.params())
        for blk in self.bottom:
            out.extend(blk.params())
        for l in sorted(self.decoder, reverse=True):
            for blk in self.decoder[l]:
                out.extend(blk.params())
        for head in self.heads:
            out.extend(head.params())
        if self.aux_head is not None:
            out.extend(self.aux_head.params())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for lvl in self.encoder:
            for blk in lvl:
                out.update(blk.buffers())
        for blk in self.bottom:
            out.update(blk.buffers())
        for l in sorted(self.decoder, reverse=True):
            for blk in self.decoder[l]:
                out.update(blk.buffers())
        for head in self.heads:
            out.update(head.buffers())
        if self.aux_head is not None:
            out.update(self.aux_head.buffers())
        return out

    def parameter_count(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))

    def get_state(self) -> dict[str, np.ndarray]:
        state = {p.name: p.value.copy() for p in self.parameters()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def set_state(self, state: dict[str, np.ndarray]):
        for p in self.parameters():
            p.value[...] = state[p.name]
        for k, v in self.buffers().items():
            v[...] = state[k]

    def save_checkpoint(self, path: str):
        ad.save_arrays(path, self.get_state())
        with open(os.path.join(path, "network.json"), "w") as fh:
            fh.write(self.config.to_json() + "\n")

    def load_checkpoint(self, path: str):
        self.set_state(ad.load_arrays(path))

    # --- forward ------------------------------------------------------------

    def _backbone(self, g, x, training):
        cfg = self.config
        h = x
        skips = {}
        for l in range(cfg.depth):
            for blk in self.encoder[l]:
                h = blk(g, h, training)
            if l >= 1:  # the full-resolution skip is intentionally absent
                skips[l] = h
            h = ad.max_pool2(g, h)
        for blk in self.bottom:
            h = blk(g, h, training)
        for l in range(cfg.depth - 1, 0, -1):
            h = ad.upsample2(g, h)
            h = ad.concat_channels(g, skips[l], h)
            for blk in self.decoder[l]:
                h = blk(g, h, training)
        return h  # (B, H/2, W/2, N)

    def _forward(self, g, batch: np.ndarray, training: bool, want_aux: bool):
        cfg = self.config
        if batch.ndim != 4 or batch.shape[3] != cfg.in_channels:
            raise ShapeError(
                f"expected input (B, H, W, {cfg.in_channels}), got {batch.shape}")
        if batch.shape[1] % (1 << cfg.depth) or batch.shape[2] % (1 << cfg.depth):
            raise ShapeError(
                f"input spatial dims {batch.shape[1]}x{batch.shape[2]} not "
                f"divisible by 2^depth = {1 << cfg.depth}")
        x = ad.Node(batch.astype(self.dtype, copy=False))
        trunk = self._backbone(g, x, training)
        if cfg.use_separate_heads:
            logit_maps = [head(g, trunk, training) for head in self.heads]
            logits = logit_maps[0]
            for extra in logit_maps[1:]:
                logits = ad.concat_channels(g, logits, extra)
        else:
            logits = self.heads[0](g, trunk, training)
        main = (ad.sigmoid(g, logits) if cfg.use_sigmoid
                else ad.softmax_channels(g, logits))
        aux = None
        if want_aux and self.aux_head is not None:
            aux = ad.sigmoid(g, self.aux_head(g, trunk, training))
        return x, main, aux

    def forward_train(self, batch: np.ndarray) -> TrainForward:
        g = ad.Graph()
        _, main, aux = self._forward(g, batch, training=True, want_aux=True)
        return TrainForward(graph=g, main=main, aux=aux)

    def forward_eval(self, batch: np.ndarray, include_aux: bool = False) -> NetworkOutput:
        _, main, aux = self._forward(None, batch, training=False,
                                     want_aux=include_aux)
        return NetworkOutput(main=main.data, aux=None if aux is None else aux.data)


def build_network(config: NetworkConfig, seed: int, dtype=np.float32) -> Network:
    return Network(config, seed, dtype)
