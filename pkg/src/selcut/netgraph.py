"""Main module (encoder, fence/wild decoders, reconstructor) and discriminator.

Layers are plain torch modules; gradients come from torch autograd. Every
stochastic or stateful piece is explicit: dropout draws from a passed
``torch.Generator`` and batchnorm is told per call whether to use batch
statistics and whether to update its running estimates.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datapipe import Slice
from .errors import InvalidDataError, NumericalFailureError

# batchnorm modes
TRAIN = "train"  # batch statistics, running estimates updated
FROZEN = "frozen"  # batch statistics, running estimates untouched
EVAL = "eval"  # running estimates


@dataclass(frozen=True)
class NetworkConfig:
    input_size: tuple[int, int] = (64, 64)
    encoder_channels: tuple[int, ...] = (32, 64, 128, 256)
    transition_channels: int = 512
    conv_kernel: int = 3
    pool_kernel: int = 2
    dropout_rate: float = 0.3
    skip_connections: bool = True
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(self.input_size))
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        self.validate()

    def validate(self) -> None:
        ch = self.encoder_channels
        if not ch or any(b <= a for a, b in zip(ch, ch[1:])) or ch[0] <= 0:
            raise ValueError(f"encoder_channels must be positive and strictly increasing, got {ch}")
        if self.transition_channels <= ch[-1]:
            raise ValueError("transition_channels must exceed the last encoder width")
        if self.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd")
        if self.pool_kernel != 2:
            raise ValueError("pool_kernel must be 2")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if not 0 <= self.bn_momentum < 1:
            raise ValueError("bn_momentum must be in [0, 1)")
        div = self.pool_kernel ** len(ch)
        if any(s <= 0 or s % div for s in self.input_size):
            raise ValueError(f"input_size {self.input_size} must be divisible by {div}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def _check(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericalFailureError(f"non-finite activation in {where}")
    return x


class BatchNorm(nn.Module):
    """Per-channel batchnorm with Keras-style running averages.

    ``running = momentum * running + (1 - momentum) * batch``.
    """

    def __init__(self, channels: int, momentum: float, eps: float):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: torch.Tensor, mode: str) -> torch.Tensor:
        if mode == EVAL:
            return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias, False, 0.0, self.eps)
        out = F.batch_norm(x, None, None, self.weight, self.bias, True, 0.0, self.eps)
        if mode == TRAIN:
            with torch.no_grad():
                dims = [d for d in range(x.dim()) if d != 1]
                n = x.numel() // x.shape[1]
                mean = x.mean(dim=dims)
                var = x.var(dim=dims, unbiased=False) * (n / max(n - 1, 1))
                self.running_mean.mul_(self.momentum).add_((1 - self.momentum) * mean)
                self.running_var.mul_(self.momentum).add_((1 - self.momentum) * var)
        return out


class ConvBlock(nn.Module):
    """Two (conv -> batchnorm -> ReLU) layers."""

    def __init__(self, cin: int, cout: int, cfg: NetworkConfig):
        super().__init__()
        k = cfg.conv_kernel
        self.conv1 = nn.Conv2d(cin, cout, k, padding=k // 2)
        self.bn1 = BatchNorm(cout, cfg.bn_momentum, cfg.bn_eps)
        self.conv2 = nn.Conv2d(cout, cout, k, padding=k // 2)
        self.bn2 = BatchNorm(cout, cfg.bn_momentum, cfg.bn_eps)

    def forward(self, x, mode):
        x = F.relu(self.bn1(self.conv1(x), mode))
        return F.relu(self.bn2(self.conv2(x), mode))


def dropout(x: torch.Tensor, rate: float, generator: torch.Generator | None) -> torch.Tensor:
    """Inverted dropout; identity when ``generator`` is None (inference)."""
    if generator is None or rate == 0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


class Encoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.rate = cfg.dropout_rate
        cin = 1
        for i, c in enumerate(cfg.encoder_channels, 1):
            self.add_module(f"block{i}", ConvBlock(cin, c, cfg))
            cin = c
        self.transition = ConvBlock(cin, cfg.transition_channels, cfg)
        self.depth = len(cfg.encoder_channels)

    def forward(self, x, mode, generator, tag="enc"):
        skips = []
        for i in range(1, self.depth + 1):
            x = _check(getattr(self, f"block{i}")(x, mode), f"{tag}.block{i}")
            skips.append(x)
            x = dropout(F.max_pool2d(x, 2), self.rate, generator)
        x = _check(self.transition(x, mode), f"{tag}.transition")
        return x, skips


class Decoder(nn.Module):
    """Mirror of the encoder: transposed-conv upsampling, skip concat, conv block."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.skip = cfg.skip_connections
        chans = list(reversed(cfg.encoder_channels))
        cin = cfg.transition_channels
        for i, c in enumerate(chans, 1):
            self.add_module(f"up{i}", nn.ConvTranspose2d(cin, c, 2, stride=2))
            self.add_module(f"block{i}", ConvBlock(2 * c if self.skip else c, c, cfg))
            cin = c
        self.out = nn.Conv2d(cin, 1, 1)
        self.depth = len(chans)

    def forward(self, x, skips, mode, tag):
        for i in range(1, self.depth + 1):
            x = getattr(self, f"up{i}")(x)
            if self.skip:
                x = torch.cat([x, skips[-i]], dim=1)
            x = _check(getattr(self, f"block{i}")(x, mode), f"{tag}.block{i}")
        return _check(torch.sigmoid(self.out(x)), f"{tag}.out")


class MainModule(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.enc = Encoder(cfg)
        self.fence = Decoder(cfg)
        self.wild = Decoder(cfg)
        # 1x1 conv over [I_fc, I_wc] with bias
        self.recon = nn.Conv2d(2, 1, 1)

    def forward(self, x, mode=EVAL, generator=None):
        h, skips = self.enc(x, mode, generator)
        fc = self.fence(h, skips, mode, "fence")
        wc = self.wild(h, skips, mode, "wild")
        ro = _check(torch.sigmoid(self.recon(torch.cat([fc, wc], dim=1))), "recon")
        return fc, wc, ro


class Discriminator(nn.Module):
    """Encoder-shaped feature extractor, flatten, one dense unit, tanh."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.features = Encoder(cfg)
        div = 2 ** len(cfg.encoder_channels)
        n = cfg.transition_channels * (cfg.input_size[0] // div) * (cfg.input_size[1] // div)
        self.dense = nn.Linear(n, 1)

    def forward(self, x, mode=EVAL, generator=None):
        h, _ = self.features(x, mode, generator, tag="disc")
        return _check(torch.tanh(self.dense(h.flatten(1))).squeeze(1), "disc.dense")


@dataclass
class ModelState:
    config: NetworkConfig
    main: MainModule
    disc: Discriminator
    step_counter: int = 0

    def main_weights(self) -> dict[str, torch.Tensor]:
        return dict(self.main.named_parameters())

    def disc_weights(self) -> dict[str, torch.Tensor]:
        return dict(self.disc.named_parameters())

    def tensors(self) -> dict[str, torch.Tensor]:
        """Every parameter and batchnorm statistic under a stable dotted name."""
        out = {}
        for prefix, mod in (("main", self.main), ("disc", self.disc)):
            for name, t in mod.state_dict().items():
                out[f"{prefix}.{name}"] = t
        return out


@dataclass
class ForwardOutputs:
    fence: torch.Tensor  # I_fc, (N, 1, H, W)
    wild: torch.Tensor  # I_wc
    recon: torch.Tensor  # I_ro

    def numpy(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(t.detach().cpu().numpy()[:, 0].astype(np.float64) for t in (self.fence, self.wild, self.recon))


def _glorot_(module: nn.Module, generator: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            fan_in, fan_out = fan_in_out(m)
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            with torch.no_grad():
                m.weight.uniform_(-limit, limit, generator=generator)
                m.bias.zero_()


def fan_in_out(m: nn.Module) -> tuple[int, int]:
    """Keras-convention fans: receptive field times input/output channels."""
    if isinstance(m, nn.Linear):
        return m.in_features, m.out_features
    rf = m.kernel_size[0] * m.kernel_size[1]
    return m.in_channels * rf, m.out_channels * rf


def init_limit(m: nn.Module) -> float:
    fan_in, fan_out = fan_in_out(m)
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_model(config: NetworkConfig, seed: int) -> ModelState:
    """Glorot-uniform weights, zero biases, unit/zero batchnorm affine."""
    config.validate()
    g = torch.Generator().manual_seed(seed)
    main, disc = MainModule(config), Discriminator(config)
    _glorot_(main, g)
    _glorot_(disc, g)
    return ModelState(config, main, disc)


def as_batch(batch, config: NetworkConfig | None = None) -> torch.Tensor:
    """Stack slices (or a (N, H, W) array / tensor) into a float32 (N, 1, H, W) tensor."""
    if isinstance(batch, torch.Tensor):
        x = batch
    elif isinstance(batch, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32))
    else:
        if not batch:
            raise InvalidDataError("empty batch")
        x = torch.from_numpy(np.stack([np.asarray(s.pixels, dtype=np.float32) for s in batch]))
    if x.dim() == 3:
        x = x.unsqueeze(1)
    if x.dim() != 4 or x.shape[1] != 1 or x.shape[0] == 0:
        raise InvalidDataError(f"expected a (N, H, W) batch, got shape {tuple(x.shape)}")
    if config is not None and tuple(x.shape[-2:]) != tuple(config.input_size):
        raise InvalidDataError(f"batch shape {tuple(x.shape[-2:])} != input_size {config.input_size}")
    return x


def dropout_generator(seed: int | None) -> torch.Generator | None:
    return None if seed is None else torch.Generator().manual_seed(int(seed))


def forward_main(
    state: ModelState,
    batch,
    training: bool = False,
    seed: int | None = 0,
    update_stats: bool = True,
) -> ForwardOutputs:
    """Run E, both decoders and R.

    With ``training`` the encoder applies dropout (seeded by ``seed``) and
    batchnorm uses batch statistics, updating running estimates unless
    ``update_stats`` is False.
    """
    x = as_batch(batch, state.config).to(next(state.main.parameters()).dtype)
    if training:
        fc, wc, ro = state.main(x, TRAIN if update_stats else FROZEN, dropout_generator(seed))
    else:
        fc, wc, ro = state.main(x, EVAL, None)
    return ForwardOutputs(fc, wc, ro)


def forward_discriminator(
    state: ModelState, batch, training: bool = False, seed: int | None = 0, update_stats: bool = True
) -> torch.Tensor:
    """One tanh score per slice."""
    x = as_batch(batch, state.config).to(next(state.disc.parameters()).dtype)
    if training:
        return state.disc(x, TRAIN if update_stats else FROZEN, dropout_generator(seed))
    return state.disc(x, EVAL, None)


def backward(params: dict[str, torch.Tensor], loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` for every trainable entry of ``params``.

    Frozen parameters (``requires_grad=False``) are omitted. Parameters the
    loss does not reach get zero gradients.
    """
    live = {k: p for k, p in params.items() if p.requires_grad}
    if not live:
        return {}
    if not isinstance(loss, torch.Tensor) or not loss.requires_grad:
        return {k: torch.zeros_like(p) for k, p in live.items()}
    if loss.numel() != 1:
        raise InvalidDataError("loss must be a scalar")
    grads = torch.autograd.grad(loss, list(live.values()), allow_unused=True)
    out = {}
    for (k, p), g in zip(live.items(), grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericalFailureError(f"non-finite gradient for {k}")
        out[k] = g
    return out


class frozen:
    """Context manager that switches ``requires_grad`` off for a module's parameters."""

    def __init__(self, module: nn.Module):
        self.params = list(module.parameters())

    def __enter__(self):
        self.prev = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad_(False)
        return self

    def __exit__(self, *exc):
        for p, r in zip(self.params, self.prev):
            p.requires_grad_(r)
        return False


@torch.no_grad()
def predict(state: ModelState, slices: Sequence[Slice] | np.ndarray, batch_size: int = 32) -> ForwardOutputs:
    """Inference-mode forward pass in chunks; outputs are detached."""
    x = as_batch(slices, state.config)
    parts = [forward_main(state, x[i : i + batch_size], training=False) for i in range(0, len(x), batch_size)]
    return ForwardOutputs(*(torch.cat([getattr(p, f) for p in parts]) for f in ("fence", "wild", "recon")))
