"""Projector, toy causal decoder and the assembled multimodal model.

Images go through the encoder, a two-layer MLP projects each visual token to
the decoder width, and the projected tokens are prepended to the text
embeddings before a small pre-norm causal transformer.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import ops
from .encoder import EncoderConfig, EncoderState, VisualTokens, build_encoder, encode, token_grid
from .tensor import Tensor


@dataclass(frozen=True)
class ProjectorConfig:
    in_dim: int
    out_dim: int

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError("projector dims must be positive")


@dataclass(frozen=True)
class ToyLMConfig:
    vocab_size: int = 16
    embed_dim: int = 32
    num_layers: int = 1
    heads: int = 1
    max_seq: int = 64
    mlp_ratio: int = 4
    ln_eps: float = 1e-5
    embed_std: float = 0.1

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")


def _init_linear(rng, params, name, d_out, d_in, dtype, std):
    params[f"{name}.weight"] = Tensor(rng.normal(0.0, std, (d_out, d_in)), requires_grad=True, dtype=dtype)
    params[f"{name}.bias"] = Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype)


def build_projector(cfg: ProjectorConfig, seed: int = 0, dtype="float32") -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    _init_linear(rng, params, "fc1", cfg.out_dim, cfg.in_dim, dtype, std=1.0 / math.sqrt(cfg.in_dim))
    _init_linear(rng, params, "fc2", cfg.out_dim, cfg.out_dim, dtype, std=1.0 / math.sqrt(cfg.out_dim))
    return params


def project(params: dict[str, Tensor], tokens: VisualTokens | Tensor) -> Tensor:
    """Per-token ``fc2(gelu(fc1(x)))``; token count is unchanged."""
    x = tokens.tokens if isinstance(tokens, VisualTokens) else tokens
    w1 = params["fc1.weight"]
    if x.shape[-1] != w1.shape[1]:
        raise ValueError(f"project: token dim {x.shape[-1]} != projector in_dim {w1.shape[1]}")
    h = ops.gelu(ops.linear(x, w1, params["fc1.bias"]))
    return ops.linear(h, params["fc2.weight"], params["fc2.bias"])


def build_lm(cfg: ToyLMConfig, seed: int = 0, dtype="float32") -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d = cfg.embed_dim
    params: dict[str, Tensor] = {
        "tok_emb": Tensor(rng.normal(0.0, cfg.embed_std, (cfg.vocab_size, d)), requires_grad=True, dtype=dtype),
        "pos_emb": Tensor(rng.normal(0.0, cfg.embed_std, (cfg.max_seq, d)), requires_grad=True, dtype=dtype),
    }
    for i in range(cfg.num_layers):
        pre = f"layers.{i}"
        for ln in ("ln1", "ln2"):
            params[f"{pre}.{ln}.weight"] = Tensor(np.ones(d), requires_grad=True, dtype=dtype)
            params[f"{pre}.{ln}.bias"] = Tensor(np.zeros(d), requires_grad=True, dtype=dtype)
        for proj in ("q", "k", "v", "o"):
            _init_linear(rng, params, f"{pre}.attn.{proj}", d, d, dtype, std=d ** -0.5)
        _init_linear(rng, params, f"{pre}.mlp.fc1", cfg.mlp_ratio * d, d, dtype, std=d ** -0.5)
        _init_linear(rng, params, f"{pre}.mlp.fc2", d, cfg.mlp_ratio * d, dtype, std=(cfg.mlp_ratio * d) ** -0.5)
    params["ln_f.weight"] = Tensor(np.ones(d), requires_grad=True, dtype=dtype)
    params["ln_f.bias"] = Tensor(np.zeros(d), requires_grad=True, dtype=dtype)
    return params


def _attention(x: Tensor, p: dict[str, Tensor], pre: str, heads: int) -> Tensor:
    b, t, d = x.shape
    hd = d // heads

    def split(name):
        y = ops.linear(x, p[f"{pre}.{name}.weight"], p[f"{pre}.{name}.bias"])
        return ops.transpose(ops.reshape(y, (b, t, heads, hd)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    att = ops.matmul(ops.softmax(scores, causal=True), v)
    att = ops.reshape(ops.transpose(att, (0, 2, 1, 3)), (b, t, d))
    return ops.linear(att, p[f"{pre}.o.weight"], p[f"{pre}.o.bias"])


def forward_lm(params: dict[str, Tensor], cfg: ToyLMConfig, visual_emb: Tensor | None, text_ids) -> Tensor:
    """Logits (B, N + T, V) for a visual prefix followed by text tokens."""
    text_ids = np.asarray(text_ids, dtype=np.int64)
    if text_ids.ndim == 1:
        text_ids = text_ids[None]
    b, t_text = text_ids.shape
    n_vis = 0 if visual_emb is None else visual_emb.shape[1]
    total = n_vis + t_text
    if total > cfg.max_seq:
        raise ValueError(f"forward_lm: sequence length {total} exceeds max_seq {cfg.max_seq}")
    if total == 0:
        raise ValueError("forward_lm: empty sequence")
    parts = []
    if visual_emb is not None:
        if visual_emb.shape[0] != b or visual_emb.shape[2] != cfg.embed_dim:
            raise ValueError(f"forward_lm: visual embeddings {visual_emb.shape} do not match batch {b} "
                             f"and embed_dim {cfg.embed_dim}")
        parts.append(visual_emb)
    if t_text:
        parts.append(ops.embedding(params["tok_emb"], text_ids))
    x = parts[0] if len(parts) == 1 else ops.concat(parts, axis=1)
    pos = ops.embedding(params["pos_emb"], np.broadcast_to(np.arange(total), (b, total)))
    x = ops.add(x, pos)
    for i in range(cfg.num_layers):
        pre = f"layers.{i}"
        h = ops.layer_norm(x, params[f"{pre}.ln1.weight"], params[f"{pre}.ln1.bias"], eps=cfg.ln_eps)
        x = ops.add(x, _attention(h, params, f"{pre}.attn", cfg.heads))
        h = ops.layer_norm(x, params[f"{pre}.ln2.weight"], params[f"{pre}.ln2.bias"], eps=cfg.ln_eps)
        h = ops.gelu(ops.linear(h, params[f"{pre}.mlp.fc1.weight"], params[f"{pre}.mlp.fc1.bias"]))
        x = ops.add(x, ops.linear(h, params[f"{pre}.mlp.fc2.weight"], params[f"{pre}.mlp.fc2.bias"]))
    x = ops.layer_norm(x, params["ln_f.weight"], params["ln_f.bias"], eps=cfg.ln_eps)
    return ops.linear(x, params["tok_emb"])


# -- byte tokenizer --------------------------------------------------------


def encode_text(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode_text(ids) -> str:
    return bytes(int(i) for i in ids).decode("utf-8", errors="replace")


# -- assembled model -------------------------------------------------------


@dataclass
class MultimodalBatch:
    images: np.ndarray  # (B, 3, H, W)
    text_ids: np.ndarray  # (B, T)
    loss_mask: np.ndarray  # (B, N + T), True where the token is a target

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "MultimodalBatch":
        return MultimodalBatch(self.images[idx], self.text_ids[idx], self.loss_mask[idx])


@dataclass
class ConvLLaVA:
    encoder: EncoderState
    projector: dict[str, Tensor]
    lm: dict[str, Tensor]
    lm_config: ToyLMConfig

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"projector.{k}": v for k, v in self.projector.items()})
        out.update({f"lm.{k}": v for k, v in self.lm.items()})
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def num_visual_tokens(self, height: int, width: int) -> int:
        gh, gw = token_grid(self.encoder.config, height, width)
        return gh * gw


def build_model(enc_cfg: EncoderConfig, lm_cfg: ToyLMConfig, seed: int = 0) -> ConvLLaVA:
    dtype = enc_cfg.dtype
    encoder = build_encoder(enc_cfg, seed)
    projector = build_projector(ProjectorConfig(enc_cfg.out_channels, lm_cfg.embed_dim), seed + 1, dtype)
    lm = build_lm(lm_cfg, seed + 2, dtype)
    return ConvLLaVA(encoder, projector, lm, lm_cfg)


def forward(model: ConvLLaVA, images, text_ids) -> tuple[Tensor, int]:
    """Full forward pass; returns logits and the visual token count N."""
    dtype = np.dtype(model.encoder.config.dtype)
    img = images if isinstance(images, Tensor) else Tensor(np.asarray(images), dtype=dtype)
    tokens = encode(model.encoder, img)
    z = project(model.projector, tokens)
    return forward_lm(model.lm, model.lm_config, z, text_ids), tokens.count


def lm_loss(model: ConvLLaVA, batch: MultimodalBatch) -> Tensor:
    """Next-token cross-entropy over positions flagged in ``batch.loss_mask``.

    Position ``j`` of the sequence is predicted from the logits at ``j - 1``;
    visual positions carry no token and never act as targets.
    """
    logits, n_vis = forward(model, batch.images, batch.text_ids)
    b, total, vocab = logits.shape
    text = np.asarray(batch.text_ids, dtype=np.int64)
    mask = np.asarray(batch.loss_mask, dtype=bool)
    if mask.shape != (b, total):
        raise ValueError(f"lm_loss: loss_mask shape {mask.shape} != (batch, N + T) = {(b, total)}")
    if mask[:, :n_vis + 1].any():
        raise ValueError("lm_loss: loss_mask may not select visual positions or the first token")
    seq = np.concatenate([np.zeros((b, n_vis), dtype=np.int64), text], axis=1)
    targets = seq[:, 1:].reshape(-1)
    if total < 2:
        raise ValueError("lm_loss: need at least two positions for next-token prediction")
    pred = ops.reshape(ops.narrow(logits, 1, 0, total - 1), (b * (total - 1), vocab))
    if not mask.any():
        warnings.warn("lm_loss: every position is masked", ops.EmptyLossWarning, stacklevel=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ops.EmptyLossWarning)
        return ops.softmax_cross_entropy(pred, targets, mask[:, 1:].reshape(-1))

