"""Small 2D U-Net with batch norm, decoder dropout and a softmax head."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 1
    num_classes: int = 5
    dropout_rate: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ConfigurationError("channel counts must be positive")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    def width(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        return asdict(self)


def _block_names(cfg: UNetConfig):
    """(prefix, in_channels, out_channels) for every double-conv block in order."""
    blocks = []
    for level in range(cfg.depth):
        cin = cfg.in_channels if level == 0 else cfg.width(level - 1)
        blocks.append((f"enc{level}", cin, cfg.width(level)))
    for level in range(cfg.depth - 2, -1, -1):
        blocks.append((f"dec{level}", cfg.width(level + 1) + cfg.width(level), cfg.width(level)))
    return blocks


class UNet:
    """Encoder/decoder network whose parameters live in ``self.params``.

    ``forward`` caches what ``backward`` needs; only one forward/backward
    pair may be in flight per instance.
    """

    def __init__(self, config: UNetConfig):
        config.validate()
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self.stats: dict[str, T.RunningStats] = {}
        rng = np.random.default_rng(config.seed)
        for prefix, cin, cout in _block_names(config):
            for k, (a, b) in enumerate(((cin, cout), (cout, cout)), start=1):
                self._add_conv(f"{prefix}.conv{k}", a, b, 3, rng)
                self.params[f"{prefix}.bn{k}.gamma"] = np.ones(b)
                self.params[f"{prefix}.bn{k}.beta"] = np.zeros(b)
                self.stats[f"{prefix}.bn{k}"] = T.RunningStats.fresh(b)
        self._add_conv("head", config.width(0), config.num_classes, 1, rng)
        self._cache = None

    def _add_conv(self, name, cin, cout, k, rng):
        std = np.sqrt(2.0 / (cin * k * k))
        self.params[f"{name}.w"] = rng.normal(0.0, std, size=(cout, cin, k, k))
        self.params[f"{name}.b"] = np.zeros(cout)

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # -- state ------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters followed by batch-norm running statistics, in declared order."""
        out = {f"param/{k}": v for k, v in self.params.items()}
        for k, s in self.stats.items():
            out[f"stat/{k}.mean"] = s.mean
            out[f"stat/{k}.var"] = s.var
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.params[k] = np.array(arrays[f"param/{k}"], dtype=np.float64)
        for k, s in self.stats.items():
            s.mean = np.array(arrays[f"stat/{k}.mean"], dtype=np.float64)
            s.var = np.array(arrays[f"stat/{k}.var"], dtype=np.float64)

    def copy(self) -> "UNet":
        other = UNet(self.config)
        other.load_arrays(self.snapshot())
        return other

    # -- forward / backward ----------------------------------------------

    def _check_input(self, x):
        x = T.as_grid(x)
        cfg = self.config
        if x.shape[1] != cfg.in_channels:
            raise ConfigurationError(f"input shape {x.shape} does not have {cfg.in_channels} channels")
        f = 2 ** (cfg.depth - 1)
        if x.shape[2] % f or x.shape[3] % f:
            raise ConfigurationError(
                f"spatial extents {x.shape[2:]} must be divisible by {f} for depth {cfg.depth}"
            )
        return x

    def _double_conv(self, prefix, x, train, caches):
        for k in (1, 2):
            x, c_conv = T.conv2d_forward(x, self.params[f"{prefix}.conv{k}.w"], self.params[f"{prefix}.conv{k}.b"])
            x, c_bn = T.batch_norm2d_forward(
                x, self.params[f"{prefix}.bn{k}.gamma"], self.params[f"{prefix}.bn{k}.beta"],
                self.stats[f"{prefix}.bn{k}"], train,
            )
            x, c_relu = T.relu_forward(x)
            caches.append((prefix, k, c_conv, c_bn, c_relu))
        return x

    def forward(self, x, train: bool = False, dropout: bool | None = None, seed=None) -> np.ndarray:
        """Return class probabilities of shape (B, num_classes, H, W).

        ``train`` selects batch statistics for batch norm (and updates the
        running estimates); ``dropout`` defaults to ``train``.
        """
        x = self._check_input(x)
        cfg = self.config
        if dropout is None:
            dropout = train
        rng = np.random.default_rng(seed) if dropout else None
        blocks, skips, pools, drops = [], [], [], []
        h = x
        for level in range(cfg.depth):
            caches = []
            h = self._double_conv(f"enc{level}", h, train, caches)
            blocks.append(caches)
            if level < cfg.depth - 1:
                skips.append(h)
                h, pc = T.max_pool2d_forward(h)
                pools.append(pc)
        if cfg.depth == 1:
            h, dc = T.dropout_forward(h, cfg.dropout_rate, rng, dropout)
            drops.append(dc)
        for level in range(cfg.depth - 2, -1, -1):
            up = T.upsample2d_forward(h)
            h = np.concatenate([up, skips[level]], axis=1)
            caches = []
            h = self._double_conv(f"dec{level}", h, train, caches)
            blocks.append(caches)
            h, dc = T.dropout_forward(h, cfg.dropout_rate, rng, dropout)
            drops.append(dc)
        logits, head_cache = T.conv2d_forward(h, self.params["head.w"], self.params["head.b"])
        prob = T.softmax_channelwise(logits)
        self._cache = (blocks, pools, drops, head_cache, prob)
        return prob

    def _double_conv_backward(self, d, caches, grads):
        for prefix, k, c_conv, c_bn, c_relu in reversed(caches):
            d = T.relu_backward(d, c_relu)
            d, dg, db = T.batch_norm2d_backward(d, c_bn)
            grads[f"{prefix}.bn{k}.gamma"] = dg
            grads[f"{prefix}.bn{k}.beta"] = db
            d, dw, dbias = T.conv2d_backward(d, c_conv)
            grads[f"{prefix}.conv{k}.w"] = dw
            grads[f"{prefix}.conv{k}.b"] = dbias
        return d

    def backward(self, dprob: np.ndarray, return_input_grad: bool = False):
        """Backpropagate a gradient w.r.t. the output probabilities.

        Returns a dict of parameter gradients (and the input gradient when asked).
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        cfg = self.config
        blocks, pools, drops, head_cache, prob = self._cache
        self._cache = None
        grads: dict[str, np.ndarray] = {}
        d = T.softmax_backward(dprob, prob)
        d, grads["head.w"], grads["head.b"] = T.conv2d_backward(d, head_cache)
        n_enc = cfg.depth
        skip_grads = {}
        for level in range(cfg.depth - 1):
            pos = cfg.depth - 2 - level  # order in which decoder level ran
            d = T.dropout_backward(d, drops[pos])
            d = self._double_conv_backward(d, blocks[n_enc + pos], grads)
            c_up = cfg.width(level + 1)
            skip_grads[level] = d[:, c_up:]
            d = T.upsample2d_backward(d[:, :c_up])
        if cfg.depth == 1:
            d = T.dropout_backward(d, drops[0])
        for level in range(n_enc - 1, -1, -1):
            if level < n_enc - 1:
                d = T.max_pool2d_backward(d, pools[level]) + skip_grads[level]
            d = self._double_conv_backward(d, blocks[level], grads)
        ordered = {k: grads[k] for k in self.params}
        if return_input_grad:
            return ordered, d
        return ordered


def build_unet(config: UNetConfig) -> UNet:
    return UNet(config)


def predict(model: UNet, batch, stochastic: bool = False, seed=None) -> np.ndarray:
    """Inference with frozen batch-norm statistics.

    With ``stochastic`` set, dropout stays active using ``seed``.
    """
    if stochastic:
        return model.forward(batch, train=False, dropout=True, seed=seed)
    return model.forward(batch, train=False, dropout=False)


def mc_forward(model: UNet, batch, passes: int, seed: int = 0) -> list[np.ndarray]:
    """``passes`` stochastic predictions; pass f uses the seed ``(seed, f)``."""
    if passes < 1:
        raise ValueError(f"need at least one MC pass, got {passes}")
    return [predict(model, batch, stochastic=True, seed=[seed, f]) for f in range(passes)]


def predict_batched(model: UNet, images: np.ndarray, batch_size: int = 16, **kwargs) -> np.ndarray:
    """Deterministic prediction of a stack of images (N, C, H, W), chunked."""
    outs = [predict(model, images[i:i + batch_size], **kwargs) for i in range(0, len(images), batch_size)]
    return np.concatenate(outs, axis=0)
