"""Token language models: NAR Conformer encoder and the Speech Enhancement
Transducer (SET) with encoder, causal predictor, and additive joiner.

Both models map a K x T grid of noisy token ids to per-frame, per-codebook
logits over C clean tokens. Output length always equals input length: the
alignment is identity, so there is no blank symbol and decoding runs exactly
T steps.

Blocks follow the Conformer layout (half-step feed-forward, self-attention,
convolution module, half-step feed-forward, final norm). Positional
information enters through a learned relative-position attention bias. The
convolution module normalizes with LayerNorm, not BatchNorm: batch statistics
over time would leak future frames into past outputs and break the
predictor's strict causality during training.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from tokse.archive import load_archive, save_archive
from tokse.core import CodecSpec, TokenSequence, ValidationError


@dataclass(frozen=True)
class ConformerConfig:
    num_layers: int
    num_heads: int = 4
    model_dim: int = 256
    ffn_dim: int = 2048
    dropout_p: float = 0.1
    causal: bool = False
    conv_kernel: int = 31
    max_rel_dist: int = 64

    def __post_init__(self) -> None:
        if self.model_dim % self.num_heads != 0:
            raise ValidationError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.conv_kernel % 2 != 1:
            raise ValidationError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


class FeedForward(nn.Module):
    def __init__(self, cfg: ConformerConfig):
        super().__init__()
        self.norm = nn.LayerNorm(cfg.model_dim)
        self.w_in = nn.Linear(cfg.model_dim, cfg.ffn_dim)
        self.w_out = nn.Linear(cfg.ffn_dim, cfg.model_dim)
        self.dropout = nn.Dropout(cfg.dropout_p)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.w_in(self.norm(x))
        y = self.dropout(F.silu(y))
        return self.dropout(self.w_out(y))


class RelPositionSelfAttention(nn.Module):
    """Multi-head self-attention with a learned bias over clipped relative
    distance; causal mode masks out future positions."""

    def __init__(self, cfg: ConformerConfig):
        super().__init__()
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.model_dim // cfg.num_heads
        self.causal = cfg.causal
        self.max_rel = cfg.max_rel_dist
        self.norm = nn.LayerNorm(cfg.model_dim)
        self.q_proj = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.k_proj = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.v_proj = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.out_proj = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.rel_bias = nn.Parameter(torch.zeros(2 * cfg.max_rel_dist + 1, cfg.num_heads))
        self.dropout = nn.Dropout(cfg.dropout_p)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        y = self.norm(x)
        q = self.q_proj(y).view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(y).view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(y).view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / self.head_dim**0.5  # (B, H, T, T)
        rel = torch.arange(t, device=x.device)[None, :] - torch.arange(t, device=x.device)[:, None]
        rel = rel.clamp(-self.max_rel, self.max_rel) + self.max_rel
        scores = scores + self.rel_bias[rel].permute(2, 0, 1)[None]
        if self.causal:
            mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
            scores = scores.masked_fill(mask, float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(b, t, -1)
        return self.dropout(self.out_proj(out))


class ConvModule(nn.Module):
    def __init__(self, cfg: ConformerConfig):
        super().__init__()
        d = cfg.model_dim
        self.causal = cfg.causal
        self.kernel = cfg.conv_kernel
        self.norm = nn.LayerNorm(d)
        self.pointwise_in = nn.Conv1d(d, 2 * d, kernel_size=1)
        self.depthwise = nn.Conv1d(d, d, kernel_size=cfg.conv_kernel, groups=d)
        self.conv_norm = nn.LayerNorm(d)
        self.pointwise_out = nn.Conv1d(d, d, kernel_size=1)
        self.dropout = nn.Dropout(cfg.dropout_p)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm(x).transpose(1, 2)  # (B, D, T)
        y = F.glu(self.pointwise_in(y), dim=1)
        if self.causal:
            y = F.pad(y, (self.kernel - 1, 0))
        else:
            half = (self.kernel - 1) // 2
            y = F.pad(y, (half, half))
        y = self.depthwise(y)
        y = self.conv_norm(y.transpose(1, 2))
        y = F.silu(y).transpose(1, 2)
        y = self.pointwise_out(y).transpose(1, 2)
        return self.dropout(y)


class ConformerBlock(nn.Module):
    def __init__(self, cfg: ConformerConfig):
        super().__init__()
        self.ffn1 = FeedForward(cfg)
        self.attn = RelPositionSelfAttention(cfg)
        self.conv = ConvModule(cfg)
        self.ffn2 = FeedForward(cfg)
        self.final_norm = nn.LayerNorm(cfg.model_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise FloatingPointError("non-finite activations entering conformer block")
        x = x + 0.5 * self.ffn1(x)
        x = x + self.attn(x)
        x = x + self.conv(x)
        x = x + 0.5 * self.ffn2(x)
        return self.final_norm(x)


class ConformerStack(nn.Module):
    """Applies the blocks to (T, D) or batched (B, T, D) feature sequences."""

    def __init__(self, cfg: ConformerConfig):
        super().__init__()
        self.blocks = nn.ModuleList(ConformerBlock(cfg) for _ in range(cfg.num_layers))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        single = x.ndim == 2
        if single:
            x = x.unsqueeze(0)
        for block in self.blocks:
            x = block(x)
        return x.squeeze(0) if single else x


class SumEmbedding(nn.Module):
    """K per-codebook tables; frame feature = sum over codebooks.

    Accepts (K, T) or batched (B, K, T) id grids.
    """

    def __init__(self, num_codebooks: int, vocab_size: int, model_dim: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.tables = nn.ModuleList(
            nn.Embedding(vocab_size, model_dim) for _ in range(num_codebooks)
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.numel() and int(tokens.max()) >= self.vocab_size:
            raise ValidationError(
                f"token id {int(tokens.max())} out of range for vocab {self.vocab_size}"
            )
        if tokens.numel() and int(tokens.min()) < 0:
            raise ValidationError("negative token id")
        k_axis = tokens.ndim - 2
        rows = tokens.unbind(dim=k_axis)
        out = self.tables[0](rows[0])
        for k in range(1, len(rows)):
            out = out + self.tables[k](rows[k])
        return out


def embed_sum(tokens: np.ndarray | torch.Tensor, embedding: SumEmbedding) -> torch.Tensor:
    """(K, T) ids -> (T, model_dim) features, summing the K table lookups."""
    return embedding(_as_long_tensor(tokens))


class NARModel(nn.Module):
    """Non-autoregressive model: sum-embed noisy tokens, encode, K linear heads."""

    kind = "nar"

    def __init__(self, codec: CodecSpec, config: ConformerConfig):
        super().__init__()
        if config.causal:
            raise ValidationError("NAR encoder is non-causal by definition")
        self.codec = codec
        self.config = config
        self.embed = SumEmbedding(codec.num_codebooks, codec.codebook_size, config.model_dim)
        self.encoder = ConformerStack(config)
        self.heads = nn.ModuleList(
            nn.Linear(config.model_dim, codec.codebook_size)
            for _ in range(codec.num_codebooks)
        )

    def forward(self, noisy: torch.Tensor) -> torch.Tensor:
        """(K, T) noisy ids -> (K, T, C) logits; batched (B, K, T) likewise."""
        if noisy.shape[-1] == 0:
            shape = noisy.shape[:-2] + (self.codec.num_codebooks, 0, self.codec.codebook_size)
            return torch.zeros(shape, dtype=self.heads[0].weight.dtype, device=noisy.device)
        enc = self.encoder(self.embed(noisy))
        return torch.stack([head(enc) for head in self.heads], dim=noisy.ndim - 2)


class SETModel(nn.Module):
    """Speech Enhancement Transducer.

    Encoder reads the noisy grid; the single-layer causal predictor reads the
    clean history (start token prepended, vocab C + 1); the joiner projects
    both branches to ``joiner_dim`` channels, sums elementwise, applies tanh,
    and K heads emit per-codebook logits. The projection is shared between
    branches unless ``joiner_per_branch`` is set.
    """

    kind = "set"

    def __init__(self, codec: CodecSpec, config: ConformerConfig,
                 joiner_dim: int = 120, joiner_per_branch: bool = False):
        super().__init__()
        if config.causal:
            raise ValidationError("SET encoder is non-causal; only the predictor is causal")
        self.codec = codec
        self.config = config
        self.joiner_dim = joiner_dim
        self.joiner_per_branch = joiner_per_branch
        d = config.model_dim
        self.enc_embed = SumEmbedding(codec.num_codebooks, codec.codebook_size, d)
        self.encoder = ConformerStack(config)
        pred_cfg = dataclasses.replace(config, num_layers=1, causal=True)
        self.pred_embed = SumEmbedding(codec.num_codebooks, codec.codebook_size + 1, d)
        self.predictor = ConformerStack(pred_cfg)
        self.joiner_proj = nn.Linear(d, joiner_dim)
        self.pred_proj = nn.Linear(d, joiner_dim) if joiner_per_branch else None
        self.heads = nn.ModuleList(
            nn.Linear(joiner_dim, codec.codebook_size)
            for _ in range(codec.num_codebooks)
        )

    def encode(self, noisy: torch.Tensor) -> torch.Tensor:
        return self.encoder(self.enc_embed(noisy))

    def predict(self, shifted: torch.Tensor) -> torch.Tensor:
        return self.predictor(self.pred_embed(shifted))

    def join(self, enc: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
        """(..., T, D) branch states -> (..., K-first stacked) logits."""
        proj_pred = self.pred_proj if self.joiner_per_branch else self.joiner_proj
        joint = torch.tanh(self.joiner_proj(enc) + proj_pred(pred))
        return torch.stack([head(joint) for head in self.heads], dim=joint.ndim - 2)

    def forward(self, noisy: torch.Tensor, shifted: torch.Tensor) -> torch.Tensor:
        """Noisy ids (K, T) + shifted clean ids (K, T) -> (K, T, C) logits;
        batched (B, K, T) inputs give (B, K, T, C)."""
        _check_shifted(shifted, noisy.shape[-1], self.codec)
        if noisy.shape[-1] == 0:
            shape = noisy.shape[:-2] + (self.codec.num_codebooks, 0, self.codec.codebook_size)
            return torch.zeros(shape, dtype=self.heads[0].weight.dtype, device=noisy.device)
        return self.join(self.encode(noisy), self.predict(shifted))


def _as_long_tensor(tokens: np.ndarray | torch.Tensor | TokenSequence) -> torch.Tensor:
    if isinstance(tokens, TokenSequence):
        tokens = tokens.tokens
    if isinstance(tokens, torch.Tensor):
        return tokens.long()
    return torch.from_numpy(np.array(tokens, copy=True)).long()


def _check_shifted(shifted: torch.Tensor, num_frames: int, codec: CodecSpec) -> None:
    if shifted.shape[-2:] != (codec.num_codebooks, num_frames):
        raise ValidationError(
            f"shifted grid shape {tuple(shifted.shape)} does not match "
            f"({codec.num_codebooks}, {num_frames})"
        )
    if num_frames == 0:
        return
    if not bool((shifted[..., :, 0] == codec.start_token).all()):
        raise ValidationError("shifted clean input must begin with the start token")
    if int(shifted.max()) > codec.start_token or int(shifted.min()) < 0:
        raise ValidationError(f"shifted ids must lie in [0, {codec.start_token}]")


def shift_with_start(clean: TokenSequence) -> np.ndarray:
    """Predictor input for teacher forcing: start token, then clean[:, :-1].

    Returned as a raw (K, T) array because the start id C is not a valid
    stored token.
    """
    k, t = clean.tokens.shape
    out = np.empty((k, t), dtype=np.int64)
    out[:, 0:1] = clean.spec.start_token
    out[:, 1:] = clean.tokens[:, :-1]
    return out


def nar_forward(model: NARModel, noisy: TokenSequence) -> torch.Tensor:
    if noisy.spec.num_codebooks != model.codec.num_codebooks or \
            noisy.spec.codebook_size != model.codec.codebook_size:
        raise ValidationError("token sequence spec does not match model codec")
    return model(_as_long_tensor(noisy))


def set_forward(model: SETModel, noisy: TokenSequence,
                shifted_clean: np.ndarray | torch.Tensor) -> torch.Tensor:
    if noisy.spec.num_codebooks != model.codec.num_codebooks or \
            noisy.spec.codebook_size != model.codec.codebook_size:
        raise ValidationError("token sequence spec does not match model codec")
    return model(_as_long_tensor(noisy), _as_long_tensor(shifted_clean))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_model(kind: str, codec: CodecSpec, config: ConformerConfig,
                seed: int = 0, joiner_dim: int = 120,
                joiner_per_branch: bool = False) -> NARModel | SETModel:
    """Seeded construction so identical settings give identical weights."""
    torch.manual_seed(seed)
    if kind == "nar":
        return NARModel(codec, config)
    if kind == "set":
        return SETModel(codec, config, joiner_dim=joiner_dim,
                        joiner_per_branch=joiner_per_branch)
    raise ValidationError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# Checkpoints


def save_model(model: NARModel | SETModel, path, extra_meta: dict | None = None) -> None:
    cfg = dataclasses.asdict(model.config)
    meta = {
        "kind": model.kind,
        "config": cfg,
        "codec": {
            "num_codebooks": model.codec.num_codebooks,
            "codebook_size": model.codec.codebook_size,
            "frame_rate_hz": model.codec.frame_rate_hz,
            "sample_rate_hz": model.codec.sample_rate_hz,
            "name": model.codec.name,
        },
    }
    if model.kind == "set":
        meta["joiner_dim"] = model.joiner_dim
        meta["joiner_per_branch"] = model.joiner_per_branch
    if extra_meta:
        meta.update(extra_meta)
    arrays = {name: p.detach().cpu().numpy() for name, p in model.state_dict().items()}
    save_archive(path, meta, arrays)


def load_model(path) -> tuple[NARModel | SETModel, dict]:
    meta, arrays = load_archive(path)
    codec = CodecSpec(**meta["codec"])
    config = ConformerConfig(**meta["config"])
    if meta["kind"] == "nar":
        model = NARModel(codec, config)
    elif meta["kind"] == "set":
        model = SETModel(codec, config, joiner_dim=int(meta.get("joiner_dim", 120)),
                         joiner_per_branch=bool(meta.get("joiner_per_branch", False)))
    else:
        raise ValidationError(f"unknown checkpoint kind {meta['kind']!r}")
    state = {name: torch.from_numpy(arr.copy()) for name, arr in arrays.items()}
    model.load_state_dict(state)
    model.eval()
    return model, meta
