"""Distance-conditioned target speech extraction network.

Shapes follow ``(B, D, T, F)`` for TF embeddings. The waveform front end is
a centred square-root-Hann STFT whose real and imaginary parts are stacked
as two input channels; the decoder predicts one real mask in (0, 1) that
scales both parts of the mixture spectrogram.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import StftConfig


@dataclass
class ModelConfig:
    embed_dim: int = 64
    hidden_dim: int = 64
    n_dq_blocks: int = 4
    n_ts_blocks: int = 4
    deg_layer_sizes: tuple = (32, 64, 64)
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if isinstance(self.stft, dict):
            self.stft = StftConfig(**self.stft)
        self.deg_layer_sizes = tuple(self.deg_layer_sizes)
        if len(self.deg_layer_sizes) != 3:
            raise ValueError("deg_layer_sizes needs three layer widths")
        if self.deg_layer_sizes[-1] != self.embed_dim:
            raise ValueError(
                f"last DEG layer ({self.deg_layer_sizes[-1]}) must equal embed_dim ({self.embed_dim})")

    @classmethod
    def tiny(cls, d=16, h=16, n_dq=1, n_ts=1):
        return cls(d, h, n_dq, n_ts, (d, d, d))

    def to_dict(self):
        d = asdict(self)
        d["deg_layer_sizes"] = list(self.deg_layer_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ChannelNorm2d(nn.Module):
    """Per-channel normalisation over the (T, F) plane with learnable scale/shift."""

    def __init__(self, channels, eps=1e-8):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(1, channels, 1, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1, 1))

    def forward(self, x):
        mean = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
        return (x - mean) / torch.sqrt(var + self.eps) * self.weight + self.bias


class DistanceEmbedding(nn.Module):
    """Scalar distance (metres) -> D-dim embedding; tanh on the two hidden layers."""

    def __init__(self, sizes=(32, 64, 64)):
        super().__init__()
        a, b, c = sizes
        self.l1 = nn.Linear(1, a)
        self.l2 = nn.Linear(a, b)
        self.l3 = nn.Linear(b, c)

    def forward(self, d_q):
        d_q = torch.as_tensor(d_q, dtype=self.l1.weight.dtype, device=self.l1.weight.device)
        if d_q.dim() == 0:
            d_q = d_q[None]
        if not torch.all(torch.isfinite(d_q)) or torch.any(d_q <= 0):
            raise ValueError(f"query distance must be finite and positive, got {d_q.tolist()}")
        h = torch.tanh(self.l1(d_q[:, None]))
        h = torch.tanh(self.l2(h))
        return self.l3(h)


class AxisFusion(nn.Module):
    """LayerNorm + shared BLSTM along one axis, GELU projection, residual.

    ``axis="time"`` scans the T frames of every subband (intra-subband);
    ``axis="freq"`` scans the F subbands of every frame (intra-frame). When a
    distance embedding is given it is appended as one extra step at the end
    of the scanned axis and dropped again before the projection.
    """

    def __init__(self, dim, hidden, axis):
        super().__init__()
        if axis not in ("time", "freq"):
            raise ValueError(f"axis must be 'time' or 'freq', got {axis!r}")
        self.axis = axis
        self.norm = nn.LayerNorm(dim)
        self.rnn = nn.LSTM(dim, hidden, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * hidden, dim)

    def forward(self, h, emb=None):
        B, D, T, Fq = h.shape
        if self.axis == "time":
            seq = h.permute(0, 3, 2, 1).reshape(B * Fq, T, D)
            n_rows, n_steps = Fq, T
        else:
            seq = h.permute(0, 2, 3, 1).reshape(B * T, Fq, D)
            n_rows, n_steps = T, Fq
        if emb is not None:
            if emb.shape != (B, D):
                raise ValueError(f"distance embedding shape {tuple(emb.shape)} != {(B, D)}")
            tok = emb[:, None, None, :].expand(B, n_rows, 1, D).reshape(B * n_rows, 1, D)
            seq = torch.cat([seq, tok], dim=1)
        out, _ = self.rnn(self.norm(seq))
        out = F.gelu(self.proj(out[:, :n_steps]))
        if self.axis == "time":
            out = out.reshape(B, Fq, T, D).permute(0, 3, 2, 1)
        else:
            out = out.reshape(B, T, Fq, D).permute(0, 3, 1, 2)
        return h + out


class DQBlock(nn.Module):
    def __init__(self, dim, hidden, deg_sizes):
        super().__init__()
        self.deg_s = DistanceEmbedding(deg_sizes)
        self.deg_f = DistanceEmbedding(deg_sizes)
        self.subband = AxisFusion(dim, hidden, "time")
        self.frame = AxisFusion(dim, hidden, "freq")

    def forward(self, h, d_q):
        h = self.subband(h, self.deg_s(d_q))
        return self.frame(h, self.deg_f(d_q))


class TSBlock(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.subband = AxisFusion(dim, hidden, "time")
        self.frame = AxisFusion(dim, hidden, "freq")

    def forward(self, h):
        return self.frame(self.subband(h))


class DistanceTSE(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        D, H = cfg.embed_dim, cfg.hidden_dim
        self.enc_conv = nn.Conv2d(2, D, 3, padding=1)
        self.enc_norm = ChannelNorm2d(D)
        self.dq_blocks = nn.ModuleList(DQBlock(D, H, cfg.deg_layer_sizes) for _ in range(cfg.n_dq_blocks))
        self.ts_blocks = nn.ModuleList(TSBlock(D, H) for _ in range(cfg.n_ts_blocks))
        self.dec_conv = nn.Conv2d(D, 1, 3, padding=1)
        self.register_buffer("window", torch.sqrt(torch.hann_window(cfg.stft.frame_len)), persistent=False)

    def stft(self, y):
        c = self.cfg.stft
        if y.shape[-1] < c.frame_len:
            raise ValueError(f"input of {y.shape[-1]} samples is shorter than one frame ({c.frame_len})")
        spec = torch.stft(y, c.fft_size, c.hop_len, c.frame_len, window=self.window.to(y.dtype),
                          center=True, pad_mode="reflect", return_complex=True)
        return spec.transpose(-1, -2)  # (B, T, F)

    def istft(self, spec, length):
        c = self.cfg.stft
        return torch.istft(spec.transpose(-1, -2), c.fft_size, c.hop_len, c.frame_len,
                           window=self.window.to(spec.real.dtype), center=True, length=length)

    def encode(self, y):
        spec = self.stft(y)
        ri = torch.stack([spec.real, spec.imag], dim=1)
        return self.enc_norm(self.enc_conv(ri))

    def decode_mask(self, h):
        return torch.sigmoid(self.dec_conv(h))[:, 0]

    def mask(self, y, d_q):
        h = self.encode(y)
        for blk in self.dq_blocks:
            h = blk(h, d_q)
        for blk in self.ts_blocks:
            h = blk(h)
        return self.decode_mask(h)

    def forward(self, y, d_q):
        """``y``: (B, N) or (N,) waveform; ``d_q``: scalar or (B,) metres."""
        squeeze = y.dim() == 1
        if squeeze:
            y = y[None]
        d_q = torch.as_tensor(d_q, dtype=y.dtype, device=y.device)
        if d_q.dim() == 0:
            d_q = d_q.expand(y.shape[0])
        m = self.mask(y, d_q)
        out = apply_mask(self, y, m)
        return out[0] if squeeze else out


def apply_mask(model: DistanceTSE, y, mask):
    """Scale both real and imaginary parts of the mixture STFT by ``mask``."""
    spec = model.stft(y)
    return model.istft(spec * mask, y.shape[-1])


class LstmBaseline(nn.Module):
    """Reference model: stacked BLSTM over magnitude frames + distance embedding."""

    def __init__(self, stft=None, hidden=600, layers=4, deg_sizes=(32, 64, 64)):
        super().__init__()
        self.cfg = ModelConfig(stft=stft or StftConfig())
        n_f = self.cfg.stft.n_freqs
        self.deg = DistanceEmbedding(deg_sizes)
        self.rnn = nn.LSTM(n_f + deg_sizes[-1], hidden, layers, batch_first=True, bidirectional=True)
        self.out = nn.Linear(2 * hidden, n_f)
        self.register_buffer("window", torch.sqrt(torch.hann_window(self.cfg.stft.frame_len)), persistent=False)

    stft = DistanceTSE.stft
    istft = DistanceTSE.istft

    def forward(self, y, d_q):
        squeeze = y.dim() == 1
        if squeeze:
            y = y[None]
        d_q = torch.as_tensor(d_q, dtype=y.dtype, device=y.device).expand(y.shape[0])
        spec = self.stft(y)
        mag = torch.log1p(spec.abs())
        emb = self.deg(d_q)[:, None, :].expand(-1, mag.shape[1], -1)
        h, _ = self.rnn(torch.cat([mag, emb], dim=-1))
        mask = torch.sigmoid(self.out(h))
        out = self.istft(spec * mask, y.shape[-1])
        return out[0] if squeeze else out


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
