"""A tiny attention U-Net noise predictor, and its checkpoint format."""

import logging
import math
import os

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, PositiveInt, model_validator
from torch import nn

try:
    from typing import Self
except ImportError:
    from typing_extensions import Self

from ..attention import AttentionDirective, QKVBundle, guided_appearance_attention
from ..errors import FormatError, ParameterError
from ..tensor import LatentTensor, read_container, write_container
from .base import PredictRequest, Predictor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pnpmix-toy-denoiser"


class ToyConfig(BaseModel):
    """Shape and size of a :class:`ToyDenoiser`."""

    model_config = ConfigDict(frozen=True)

    channels: PositiveInt = 1
    height: PositiveInt = 8
    width: PositiveInt = 8
    model_width: PositiveInt = 32
    cond_dim: PositiveInt = 2

    @model_validator(mode="after")
    def check_even_spatial(self) -> Self:
        """The encoder halves the resolution once, so both sides must be even."""
        if self.height % 2 or self.width % 2:
            raise ValueError(
                f"spatial size must be even, got {self.height}x{self.width}"
            )
        return self

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0)
            * torch.arange(half, dtype=torch.float64)
            / max(half, 1)
        ).to(t.device)
        args = t.to(torch.float64)[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
        if self.dim % 2:
            emb = F.pad(emb, (0, 1))
        return emb


class ConvBlock(nn.Module):
    """Two 3x3 convolutions with the step embedding added in between."""

    def __init__(self, in_channels: int, out_channels: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv1(x))
        h = h + self.emb(emb)[:, :, None, None]
        return F.silu(self.conv2(h))


class AttentionBlock(nn.Module):
    """Single-head self-attention over spatial positions, with interceptable Q/K/V."""

    def __init__(self, width: int):
        super().__init__()
        self.width = width
        self.norm = nn.GroupNorm(math.gcd(8, width), width)
        self.qkv = nn.Conv2d(width, 3 * width, 1)
        self.proj = nn.Conv2d(width, width, 1)

    def forward(
        self,
        h: torch.Tensor,
        alpha: float | None = None,
        donor: QKVBundle | None = None,
        capture: list[QKVBundle] | None = None,
    ) -> torch.Tensor:
        B, C, H, W = h.shape
        q, k, v = (
            self.qkv(self.norm(h)).reshape(B, 3, C, H * W).transpose(-1, -2).unbind(1)
        )  # each [B, tokens, C]

        if capture is not None:
            capture.extend(
                QKVBundle(q[b].detach().numpy(), k[b].detach().numpy(), v[b].detach().numpy())
                for b in range(B)
            )

        if donor is not None:
            if B != 1:
                raise ParameterError("guided attention needs a batch of one")
            ref = QKVBundle(q[0].detach().numpy(), k[0].detach().numpy(), v[0].detach().numpy())
            out = torch.from_numpy(
                guided_appearance_attention(ref, donor, alpha if alpha is not None else 0.0)
            ).to(h.dtype)[None]
        else:
            weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(C), dim=-1)
            out = weights @ v

        out = out.transpose(-1, -2).reshape(B, C, H, W)
        return h + self.proj(out)


class ToyDenoiser(nn.Module):
    """Two-level convolutional encoder/decoder with one bottleneck attention block.

    The step embedding is sinusoidal and the conditioning vector is linearly embedded and
    added to it.  A learnable per-channel input skip is added to the output; with all
    parameters zero the network predicts zero noise.
    """

    def __init__(self, config: ToyConfig, seed: int = 0):
        super().__init__()
        self.config = config
        w = config.model_width
        c = config.channels
        self.time_embed = SinusoidalTimeEmbedding(w)
        self.time_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.cond_embed = nn.Linear(config.cond_dim, w, bias=False)
        self.enc1 = ConvBlock(c, w, w)
        self.down = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.enc2 = ConvBlock(w, w, w)
        self.attn = AttentionBlock(w)
        self.up = nn.Conv2d(w, w, 3, padding=1)
        self.dec1 = ConvBlock(2 * w, w, w)
        self.out = nn.Conv2d(w, c, 3, padding=1)
        self.skip = nn.Parameter(torch.zeros(c))
        self.init_parameters(seed)

    @property
    def attention_layers(self) -> int:
        return 1

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        cond: torch.Tensor,
        directive: AttentionDirective | None = None,
        capture: list[QKVBundle] | None = None,
    ) -> torch.Tensor:
        emb = self.time_mlp(self.time_embed(t).to(x.dtype)) + self.cond_embed(cond)
        h1 = self.enc1(x, emb)
        h2 = self.enc2(self.down(h1), emb)
        if directive is not None and directive.is_guided:
            h2 = self.attn(h2, directive.alpha, directive.donor[0], capture)
        else:
            h2 = self.attn(h2, capture=capture)
        u = self.up(F.interpolate(h2, scale_factor=2, mode="nearest"))
        h = self.dec1(torch.cat([u, h1], dim=1), emb)
        return self.out(h) + self.skip[None, :, None, None] * x

    def init_parameters(self, seed: int, *, zero_output: bool = True) -> Self:
        """Deterministically re-initialize every parameter from `seed`.

        Weights are drawn from ``N(0, 1/fan_in)``, biases start at zero.  With
        `zero_output` the output convolution and input skip start at zero, so the
        untrained network predicts zero noise.
        """
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias") or name == "skip":
                    p.zero_()
                elif name == "norm.weight" or name.endswith(".norm.weight"):
                    p.fill_(1.0)
                else:
                    fan_in = p[0].numel() if p.ndim > 1 else p.numel()
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) / math.sqrt(fan_in))
            if zero_output:
                self.out.weight.zero_()
                self.out.bias.zero_()
                self.skip.zero_()
        return self

    def zero_parameters(self) -> Self:
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self

    def save(self, path: str | os.PathLike[str]) -> None:
        """Write the parameters as a PNPC checkpoint."""
        blocks = {
            name: p.detach().to(torch.float32).numpy()
            for name, p in self.state_dict().items()
        }
        write_container(
            path,
            blocks,
            meta={"format": CHECKPOINT_FORMAT, "config": self.config.model_dump()},
        )

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> Self:
        """Read a checkpoint written by :meth:`save`."""
        meta, arrays = read_container(path)
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(f"{path} is not a toy denoiser checkpoint")
        if extra := set(meta) - {"format", "config"}:
            logger.warning("Ignoring unknown checkpoint metadata keys %s", sorted(extra))
        try:
            config = ToyConfig(**meta["config"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad toy checkpoint config: {e}") from e
        model = cls(config)
        expected = model.state_dict()
        if set(arrays) != set(expected):
            raise FormatError(
                f"checkpoint parameters {sorted(arrays)} do not match model {sorted(expected)}"
            )
        state = {}
        for name, ref in expected.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(ref.shape):
                raise FormatError(
                    f"parameter {name} has shape {tuple(arr.shape)}, expected {tuple(ref.shape)}"
                )
            state[name] = torch.from_numpy(np.array(arr, dtype=np.float32))
        model.load_state_dict(state)
        return model


class ToyPredictor(Predictor):
    """Serves a :class:`ToyDenoiser` through the :class:`Predictor` contract."""

    def __init__(self, model: ToyDenoiser):
        self.model = model.eval()
        self.shape = model.config.shape
        self.cond_dim = model.config.cond_dim

    @classmethod
    def from_checkpoint(cls, path: str | os.PathLike[str]) -> Self:
        return cls(ToyDenoiser.load(path))

    def predict_with_attention(
        self, req: PredictRequest
    ) -> tuple[LatentTensor, tuple[QKVBundle, ...]]:
        self.check_request(req)
        directive = req.attention_directive
        if directive.is_guided and len(directive.donor) != self.model.attention_layers:
            raise ParameterError(
                f"directive has {len(directive.donor)} donor bundles, model has "
                f"{self.model.attention_layers} attention layers"
            )
        capture: list[QKVBundle] = []
        x = torch.from_numpy(req.x_t.to_numpy())[None]
        t = torch.tensor([req.t], dtype=torch.int64)
        cond = torch.from_numpy(np.array(req.cond.values))[None]
        with torch.no_grad():
            eps = self.model(x, t, cond, directive, capture)
        return LatentTensor(eps[0].numpy()), tuple(capture)

    def __repr__(self) -> str:
        return f"ToyPredictor({self.model.config!r})"
