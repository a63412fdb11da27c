"""Encoder-decoder transformer whose feed-forward blocks are exposed as key/value memories.

The encoder reads the interaction history as a flat run of semantic-ID tokens,
the decoder emits the target item's digits one position at a time. Every
decoder FFN can be observed (hidden state, key, value), have its output
replaced at a single token position, or run with an additive weight delta on
its output projection. Those three hooks are all the editing code needs.
"""
from __future__ import annotations

import hashlib
import io
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError, NumericalError

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
N_SPECIAL = 4

ACTIVATIONS = ("gated-silu", "relu")
DTYPES = {"fp32": torch.float32, "fp64": torch.float64}


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    d_ff: int = 256
    n_enc_layers: int = 2
    n_dec_layers: int = 6
    n_heads: int = 4
    max_seq_len: int = 128
    activation: str = "gated-silu"
    precision: str = "fp32"
    seed: int = 0

    def validate(self, min_vocab: int = N_SPECIAL) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_ff < self.d_model:
            raise ConfigError(f"d_ff={self.d_ff} must be >= d_model={self.d_model}")
        if self.vocab_size < min_vocab:
            raise ConfigError(f"vocab_size={self.vocab_size} < required {min_vocab}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.precision not in DTYPES:
            raise ConfigError(f"unknown precision {self.precision!r}")
        if min(self.n_enc_layers, self.n_dec_layers, self.n_heads, self.max_seq_len) < 1:
            raise ConfigError("layer counts, heads and max_seq_len must be positive")
        return self

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.precision]

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            k, v = line.split("=", 1)
            kw[k] = v if types[k] in ("str", str) else int(v)
        return cls(**kw)


@dataclass
class FfnWeights:
    """Plain-array view of one FFN block. ``w_gate`` is None for relu."""

    w_in: np.ndarray
    w_out: np.ndarray
    w_gate: np.ndarray | None = None


@dataclass
class ActivationCapture:
    layer: int
    token_position: int
    hidden: np.ndarray
    key: np.ndarray
    value: np.ndarray


def ffn_apply(weights: FfnWeights, h, activation: str = "gated-silu"):
    """Return ``(key, value)`` of one FFN for a single hidden vector."""
    h = np.asarray(h, dtype=np.float64)
    w_in = np.asarray(weights.w_in, dtype=np.float64)
    w_out = np.asarray(weights.w_out, dtype=np.float64)
    if w_in.ndim != 2 or w_in.shape[1] != h.shape[-1] or w_out.shape[1] != w_in.shape[0]:
        raise ConfigError(f"FFN shape mismatch: W_in {w_in.shape}, W_out {w_out.shape}, h {h.shape}")
    pre = w_in @ h
    if activation == "relu":
        key = np.maximum(pre, 0.0)
    elif activation == "gated-silu":
        if weights.w_gate is None:
            raise ConfigError("gated-silu needs a gate matrix")
        w_gate = np.asarray(weights.w_gate, dtype=np.float64)
        if w_gate.shape != w_in.shape:
            raise ConfigError(f"gate shape {w_gate.shape} != W_in shape {w_in.shape}")
        g = w_gate @ h
        key = g / (1.0 + np.exp(-g)) * pre
    else:
        raise ConfigError(f"unknown activation {activation!r}")
    return key, w_out @ key


class RMSNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(d))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model, bias=False)
        self.k = nn.Linear(d_model, d_model, bias=False)
        self.v = nn.Linear(d_model, d_model, bias=False)
        self.o = nn.Linear(d_model, d_model, bias=False)

    def split(self, x):
        B, T, D = x.shape
        return x.view(B, T, self.n_heads, D // self.n_heads).transpose(1, 2)

    def kv(self, src):
        return self.split(self.k(src)), self.split(self.v(src))

    def attend(self, x, k, v, mask):
        # mask: bool, broadcastable to (B, Tq, Tk); True means visible
        B, T, D = x.shape
        q = self.split(self.q(x))
        s = q @ k.transpose(-1, -2) / math.sqrt(D // self.n_heads)
        s = s.masked_fill(~mask[:, None], float("-inf"))
        out = torch.softmax(s, dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(B, T, D))

    def forward(self, x, src, mask):
        k, v = self.kv(src)
        return self.attend(x, k, v, mask)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, activation: str):
        super().__init__()
        self.activation = activation
        self.w_in = nn.Linear(d_model, d_ff, bias=False)
        self.w_gate = nn.Linear(d_model, d_ff, bias=False) if activation == "gated-silu" else None
        self.w_out = nn.Linear(d_ff, d_model, bias=False)

    def key(self, h):
        if self.w_gate is None:
            return F.relu(self.w_in(h))
        return F.silu(self.w_gate(h)) * self.w_in(h)

    def weights(self) -> FfnWeights:
        def arr(lin):
            return None if lin is None else lin.weight.detach().cpu().numpy().copy()

        return FfnWeights(arr(self.w_in), arr(self.w_out), arr(self.w_gate))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = RMSNorm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.n_heads)
        self.ln2 = RMSNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, cfg.activation)

    def forward(self, x, mask):
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        h = self.ln2(x)
        return x + self.ffn.w_out(self.ffn.key(h))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = RMSNorm(cfg.d_model)
        self.self_attn = Attention(cfg.d_model, cfg.n_heads)
        self.ln2 = RMSNorm(cfg.d_model)
        self.cross_attn = Attention(cfg.d_model, cfg.n_heads)
        self.ln3 = RMSNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, cfg.activation)


@dataclass
class Encoded:
    """Encoder output plus per-layer cross-attention keys/values, reusable across decodes."""

    cross: list
    mask: torch.Tensor  # (B, 1, T_enc)

    def select(self, index: torch.Tensor) -> "Encoded":
        return Encoded([(k[index], v[index]) for k, v in self.cross], self.mask[index])


@dataclass
class Override:
    """Replace the FFN output of ``layer`` at decoder ``position`` with ``value`` (B, d_model)."""

    layer: int
    position: int
    value: torch.Tensor


@dataclass
class WeightDelta:
    """Additive update on a decoder layer's W_out.

    ``position`` None applies it at every decoder position; otherwise only
    while computing the token at that absolute decoder position.
    """

    layer: int
    delta: torch.Tensor
    position: int | None = None


class DecoderCache:
    """Self-attention keys/values of already decoded positions, one entry per layer."""

    def __init__(self, n_layers: int):
        self.k = [None] * n_layers
        self.v = [None] * n_layers

    @property
    def length(self) -> int:
        return 0 if self.k[0] is None else self.k[0].shape[2]

    def select(self, index: torch.Tensor) -> "DecoderCache":
        out = DecoderCache(len(self.k))
        if self.k[0] is not None:
            out.k = [k[index] for k in self.k]
            out.v = [v[index] for v in self.v]
        return out


class Seq2Seq(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.enc_pos = nn.Embedding(cfg.max_seq_len, cfg.d_model)
        self.dec_pos = nn.Embedding(cfg.max_seq_len, cfg.d_model)
        self.enc_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_enc_layers))
        self.enc_norm = RMSNorm(cfg.d_model)
        self.dec_layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_dec_layers))
        self.dec_norm = RMSNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.reset_parameters()
        self.to(cfg.dtype)

    def reset_parameters(self):
        gen = torch.Generator().manual_seed(self.cfg.seed)
        std = 0.02 / math.sqrt(self.cfg.n_enc_layers + self.cfg.n_dec_layers)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if isinstance(self.get_submodule(name.rsplit(".", 1)[0]), RMSNorm):
                    p.fill_(1.0)
                else:
                    p.copy_(torch.randn(p.shape, generator=gen) * std)

    def check_tokens(self, tokens: torch.Tensor, what: str, offset: int = 0):
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab_size):
            raise InputError(f"{what} token id out of range [0, {self.cfg.vocab_size})")
        if tokens.shape[-1] + offset > self.cfg.max_seq_len:
            raise InputError(f"{what} length {tokens.shape[-1] + offset} exceeds max_seq_len={self.cfg.max_seq_len}")

    def encode(self, enc_tokens: torch.Tensor) -> Encoded:
        self.check_tokens(enc_tokens, "encoder")
        B, T = enc_tokens.shape
        mask = (enc_tokens != PAD)[:, None, :]
        x = self.tok_emb(enc_tokens) + self.enc_pos.weight[:T]
        for layer in self.enc_layers:
            x = layer(x, mask)
        mem = self.enc_norm(x)
        return Encoded([layer.cross_attn.kv(mem) for layer in self.dec_layers], mask)

    def decode(
        self,
        enc: Encoded,
        dec_tokens: torch.Tensor,
        *,
        deltas=(),
        override: Override | None = None,
        capture: dict | None = None,
        cache: DecoderCache | None = None,
        store: bool = True,
    ) -> torch.Tensor:
        """Logits (B, T_dec, vocab) for ``dec_tokens`` appended after ``cache``.

        ``deltas`` is an iterable of WeightDelta. ``capture`` is filled with
        layer -> {"hidden", "key", "value"} tensors of the new positions.
        With ``store=False`` the cache is read but not extended.
        """
        offset = cache.length if cache is not None else 0
        self.check_tokens(dec_tokens, "decoder", offset)
        B, T = dec_tokens.shape
        by_layer: dict = {}
        for d in deltas:
            by_layer.setdefault(d.layer, []).append(d)
        causal = torch.ones(T, offset + T, dtype=torch.bool).tril(offset)[None]
        x = self.tok_emb(dec_tokens) + self.dec_pos.weight[offset : offset + T]
        for i, layer in enumerate(self.dec_layers):
            h = layer.ln1(x)
            k, v = layer.self_attn.kv(h)
            if cache is not None:
                if cache.k[i] is not None:
                    k = torch.cat([cache.k[i], k], dim=2)
                    v = torch.cat([cache.v[i], v], dim=2)
                if store:
                    cache.k[i], cache.v[i] = k, v
            x = x + layer.self_attn.attend(h, k, v, causal)
            ck, cv = enc.cross[i]
            x = x + layer.cross_attn.attend(layer.ln2(x), ck, cv, enc.mask)
            h = layer.ln3(x)
            key = layer.ffn.key(h)
            value = layer.ffn.w_out(key)
            for d in by_layer.get(i, ()):
                if d.position is None:
                    value = value + key @ d.delta.T
                elif offset <= d.position < offset + T:
                    q = d.position - offset
                    value = value.clone()
                    value[:, q] = value[:, q] + key[:, q] @ d.delta.T
            if override is not None and override.layer == i and offset <= override.position < offset + T:
                value = value.clone()
                value[:, override.position - offset] = override.value
            if capture is not None:
                capture[i] = {"hidden": h, "key": key, "value": value}
            x = x + value
        return self.lm_head(self.dec_norm(x))

    def forward(self, enc_tokens, dec_tokens, **kw):
        return self.decode(self.encode(enc_tokens), dec_tokens, **kw)

    def ffn_weights(self, layer: int) -> FfnWeights:
        return self.dec_layers[layer].ffn.weights()

    def w_out(self, layer: int) -> torch.Tensor:
        return self.dec_layers[layer].ffn.w_out.weight


# ---------------------------------------------------------------- batching


def pad_batch(seqs, pad: int = PAD, device=None) -> torch.Tensor:
    width = max(1, max((len(s) for s in seqs), default=1))
    out = torch.full((len(seqs), width), pad, dtype=torch.long, device=device)
    for i, s in enumerate(seqs):
        if len(s):
            out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def decoder_input(target_tokens) -> list[int]:
    """Teacher-forcing input: BOS followed by all but the last target token."""
    return [BOS] + list(target_tokens)[:-1]


# ---------------------------------------------------------------- pure ops


def _as_batch(tokens) -> torch.Tensor:
    t = torch.as_tensor(list(tokens), dtype=torch.long)
    return t[None]


@torch.no_grad()
def forward_logits(model: Seq2Seq, history_tokens, decoder_tokens) -> np.ndarray:
    """Logit rows for every decoder position of a single example."""
    logits = model(_as_batch(history_tokens), _as_batch(decoder_tokens))
    return logits[0].cpu().numpy()


def _check_sites(model: Seq2Seq, sites, n_dec: int):
    for layer, pos in sites:
        if not 0 <= layer < model.cfg.n_dec_layers:
            raise InputError(f"site layer {layer} outside decoder depth {model.cfg.n_dec_layers}")
        if not 0 <= pos < n_dec:
            raise InputError(f"site position {pos} outside decoder length {n_dec}")


@torch.no_grad()
def capture_activations(model: Seq2Seq, history_tokens, decoder_tokens, sites) -> list[ActivationCapture]:
    dec = _as_batch(decoder_tokens)
    _check_sites(model, sites, dec.shape[1])
    cap: dict = {}
    model(_as_batch(history_tokens), dec, capture=cap)
    out = []
    for layer, pos in sites:
        c = cap[layer]
        out.append(
            ActivationCapture(
                layer,
                pos,
                c["hidden"][0, pos].cpu().numpy().copy(),
                c["key"][0, pos].cpu().numpy().copy(),
                c["value"][0, pos].cpu().numpy().copy(),
            )
        )
    return out


@torch.no_grad()
def forward_with_value_override(model: Seq2Seq, history_tokens, decoder_tokens, site, replacement) -> np.ndarray:
    dec = _as_batch(decoder_tokens)
    _check_sites(model, [site], dec.shape[1])
    rep = torch.as_tensor(np.asarray(replacement), dtype=model.cfg.dtype)
    if rep.shape != (model.cfg.d_model,) or not torch.isfinite(rep).all():
        raise InputError("replacement value must be a finite vector of size d_model")
    ov = Override(site[0], site[1], rep[None])
    return model(_as_batch(history_tokens), dec, override=ov)[0].cpu().numpy()


def sequence_loss(model: Seq2Seq, enc_tokens: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean next-token cross-entropy over all decoder positions."""
    dec_in = torch.cat([torch.full_like(targets[:, :1], BOS), targets[:, :-1]], dim=1)
    logits = model(enc_tokens, dec_in)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 3e-3
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0


@dataclass
class TrainResult:
    model: Seq2Seq
    step_losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    seconds: float = 0.0


def _corpus_tensors(corpus):
    enc = pad_batch([c[0] for c in corpus])
    tgt = torch.as_tensor([list(c[1]) for c in corpus], dtype=torch.long)
    lengths = (enc != PAD).sum(1)
    return enc, tgt, lengths


def train(model: Seq2Seq, corpus, schedule: TrainConfig) -> TrainResult:
    """Next-token cross-entropy training with Adam; mutates ``model`` in place.

    ``corpus`` is a sequence of ``(encoder_tokens, target_tokens)`` pairs.
    """
    if not len(corpus):
        raise InputError("training corpus is empty")
    t0 = time.perf_counter()
    enc, tgt, lengths = _corpus_tensors(corpus)
    gen = torch.Generator().manual_seed(schedule.seed)
    opt = torch.optim.Adam(model.parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay)
    result = TrainResult(model)
    n = len(corpus)
    model.train()
    for epoch in range(schedule.epochs):
        order = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for start in range(0, n, schedule.batch_size):
            idx = order[start : start + schedule.batch_size]
            width = int(lengths[idx].max())
            loss = sequence_loss(model, enc[idx, :width], tgt[idx])
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, batch starting {start}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if schedule.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), schedule.grad_clip)
            opt.step()
            lv = float(loss.detach())
            result.step_losses.append(lv)
            total += lv * len(idx)
            count += len(idx)
        result.epoch_losses.append(total / count)
        log.info("epoch %d loss %.4f", epoch, result.epoch_losses[-1])
    model.eval()
    result.seconds = time.perf_counter() - t0
    return result


# ---------------------------------------------------------------- checkpoints

MAGIC = b"GRED"
FORMAT_VERSION = 1
_DTYPE_CODES = {torch.float32: (0, "<f4"), torch.float64: (1, "<f8")}
_CODE_DTYPES = {0: (torch.float32, "<f4"), 1: (torch.float64, "<f8")}


def checkpoint_bytes(model: Seq2Seq) -> bytes:
    buf = io.BytesIO()
    cfg_text = model.cfg.to_text().encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(cfg_text)))
    buf.write(cfg_text)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, t in state.items():
        code, np_dtype = _DTYPE_CODES[t.dtype]
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(np.ascontiguousarray(t.detach().cpu().numpy(), dtype=np_dtype).tobytes())
    return buf.getvalue()


def save_checkpoint(model: Seq2Seq, path) -> str:
    """Write the checkpoint and return its sha256 hex digest."""
    data = checkpoint_bytes(model)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> Seq2Seq:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise InputError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    cfg = ModelConfig.from_text(data[off : off + n].decode())
    off += n
    model = Seq2Seq(cfg)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    state = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + ln].decode()
        off += ln
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dtype, np_dtype = _CODE_DTYPES[code]
        size = int(np.prod(shape)) * np.dtype(np_dtype).itemsize
        arr = np.frombuffer(data[off : off + size], dtype=np_dtype).reshape(shape)
        off += size
        state[name] = torch.from_numpy(arr.copy()).to(dtype)
    model.load_state_dict(state)
    model.eval()
    return model


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
