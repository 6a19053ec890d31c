"""Dual-stream multimodal transformer with syntax-masked text self-attention.

Encoder layer (post-norm, every sublayer wrapped in residual + layernorm)::

    text' = LN(text + CrossAttn(text -> vis))      vis' = LN(vis + CrossAttn(vis -> text))
    text' = LN(text' + MaskedSelfAttn(text'))      vis' = LN(vis' + SelfAttn(vis'))
    text' = LN(text' + FFN(text'))                 vis' = LN(vis' + FFN(vis'))

Both cross-attentions read the layer inputs. With weight sharing the same
parameter set is applied at every encoder step. The decoder attends causally
over the action prefix and, through cross-attention, over ``[text; vis]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from syngrid import autodiff as ad
from syngrid.autodiff import Parameter, Tensor
from syngrid.errors import OutOfVocab, ShapeMismatch
from syngrid.grammar import VOCABULARY
from syngrid.gridworld import ACTIONS, CELL_DIM, GRID_SIZE

TEXT_PAD = "<pad>"
TEXT_VOCAB = (TEXT_PAD,) + VOCABULARY
SOS, EOS, PAD = "<sos>", "<eos>", "<pad>"
ACTION_VOCAB = ACTIONS + (SOS, EOS, PAD)
SOS_ID, EOS_ID, PAD_ID = (ACTION_VOCAB.index(t) for t in (SOS, EOS, PAD))
N_VISUAL = GRID_SIZE * GRID_SIZE

ATTENTION_BLOCKS = ("t2v_cross", "v2t_cross", "self_attn_text", "self_attn_vis")
ENCODER_NORMS = ("norm_t2v", "norm_v2t", "norm_self_text", "norm_self_vis", "norm_ffn_text", "norm_ffn_vis")


@dataclass
class ModelConfig:
    d_model: int = 128
    d_hidden: int = 256
    n_heads: int = 8
    n_encoder_layers: int = 6
    n_decoder_layers: int = 6
    dropout: float = 0.1
    share_encoder_weights: bool = True
    use_text_mask: bool = True
    mask_source: str = "dependency"
    max_text_len: int = 32
    max_decode_len: int = 64
    text_vocab_size: int = len(TEXT_VOCAB)
    action_vocab_size: int = len(ACTION_VOCAB)
    dtype: str = "float32"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.mask_source not in ("dependency", "constituency"):
            raise ValueError(f"mask_source must be dependency or constituency, got {self.mask_source!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for name in ("d_model", "d_hidden", "n_heads", "n_encoder_layers", "n_decoder_layers", "max_decode_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def text_ids(tokens: Sequence[str]) -> list[int]:
    try:
        return [TEXT_VOCAB.index(t) for t in tokens]
    except ValueError:
        bad = [t for t in tokens if t not in TEXT_VOCAB]
        raise OutOfVocab(f"tokens outside the text vocabulary: {bad}") from None


def action_ids(actions: Sequence[str]) -> list[int]:
    try:
        return [ACTION_VOCAB.index(a) for a in actions]
    except ValueError:
        bad = [a for a in actions if a not in ACTION_VOCAB]
        raise OutOfVocab(f"actions outside the action vocabulary: {bad}") from None


class _Init:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype

    def linear(self, fan_in: int, fan_out: int) -> np.ndarray:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return self.rng.uniform(-bound, bound, (fan_in, fan_out)).astype(self.dtype)

    def embed(self, rows: int, d: int) -> np.ndarray:
        return (self.rng.standard_normal((rows, d)) / math.sqrt(d)).astype(self.dtype)

    def zeros(self, *shape) -> np.ndarray:
        return np.zeros(shape, dtype=self.dtype)

    def ones(self, *shape) -> np.ndarray:
        return np.ones(shape, dtype=self.dtype)


@dataclass
class Batch:
    """Padded numeric inputs for a list of episodes."""

    text: np.ndarray  # (B, n) int ids
    text_len: np.ndarray  # (B,)
    text_allow: np.ndarray  # (B, n, n) bool, syntax mask (pad rows: self only)
    world: np.ndarray  # (B, 36, 17)
    dec_in: Optional[np.ndarray] = None  # (B, T) SOS + actions, PAD-filled
    dec_out: Optional[np.ndarray] = None  # (B, T) actions + EOS, PAD-filled

    @property
    def key_allow(self) -> np.ndarray:
        n = self.text.shape[1]
        return np.arange(n)[None, :] < self.text_len[:, None]


class MultimodalTransformer:
    """Parameters plus the functional forward pass.

    ``record`` lists passed to the forward methods collect attention
    probability arrays as ``(kind, layer, probs)`` with ``probs`` shaped
    ``(B, heads, queries, keys)``.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.params: dict[str, Parameter] = {}
        self._build(np.random.default_rng(seed))

    # -- parameters -------------------------------------------------------
    def _add(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data)
        self.params[name] = p
        return p

    def _attention_params(self, init: _Init, prefix: str) -> None:
        d = self.config.d_model
        for w in ("wq", "wk", "wv", "wo"):
            self._add(f"{prefix}.{w}", init.linear(d, d))
            self._add(f"{prefix}.b{w[1]}", init.zeros(d))

    def _ffn_params(self, init: _Init, prefix: str) -> None:
        d, h = self.config.d_model, self.config.d_hidden
        self._add(f"{prefix}.w1", init.linear(d, h))
        self._add(f"{prefix}.b1", init.zeros(h))
        self._add(f"{prefix}.w2", init.linear(h, d))
        self._add(f"{prefix}.b2", init.zeros(d))

    def _norm_params(self, init: _Init, prefix: str) -> None:
        d = self.config.d_model
        self._add(f"{prefix}.gain", init.ones(d))
        self._add(f"{prefix}.bias", init.zeros(d))

    def encoder_prefixes(self) -> list[str]:
        """Parameter prefix used at each encoder application."""
        cfg = self.config
        if cfg.share_encoder_weights:
            return ["encoder.shared"] * cfg.n_encoder_layers
        return [f"encoder.layer{i}" for i in range(cfg.n_encoder_layers)]

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        init = _Init(rng, self.dtype)
        d = cfg.d_model
        self._add("text_embed", init.embed(cfg.text_vocab_size, d))
        self._add("text_pos", init.embed(cfg.max_text_len, d))
        self._add("vis_proj.w", init.linear(CELL_DIM, d))
        self._add("vis_proj.b", init.zeros(d))
        self._add("vis_row", init.embed(GRID_SIZE, d))
        self._add("vis_col", init.embed(GRID_SIZE, d))
        for prefix in dict.fromkeys(self.encoder_prefixes()):
            for block in ATTENTION_BLOCKS:
                self._attention_params(init, f"{prefix}.{block}")
            self._ffn_params(init, f"{prefix}.ffn_text")
            self._ffn_params(init, f"{prefix}.ffn_vis")
            for norm in ENCODER_NORMS:
                self._norm_params(init, f"{prefix}.{norm}")
        self._add("action_embed", init.embed(cfg.action_vocab_size, d))
        self._add("action_pos", init.embed(cfg.max_decode_len, d))
        for i in range(cfg.n_decoder_layers):
            prefix = f"decoder.layer{i}"
            self._attention_params(init, f"{prefix}.self_attn")
            self._attention_params(init, f"{prefix}.cross_attn")
            self._ffn_params(init, f"{prefix}.ffn")
            for norm in ("norm_self", "norm_cross", "norm_ffn"):
                self._norm_params(init, f"{prefix}.{norm}")
        self._add("out_proj.w", init.linear(d, cfg.action_vocab_size))
        self._add("out_proj.b", init.zeros(cfg.action_vocab_size))

    def param_names(self, prefix: str) -> list[str]:
        return [n for n in self.params if n.startswith(prefix + ".")]

    def load_arrays(self, arrays: dict) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in arrays.items():
            p = self.params[name]
            if p.shape != arr.shape:
                raise ShapeMismatch(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = np.array(arr, dtype=self.dtype)

    # -- building blocks --------------------------------------------------
    def _p(self, name: str) -> Parameter:
        return self.params[name]

    def _linear(self, x: Tensor, prefix: str, w: str = "w", b: str = "b") -> Tensor:
        return ad.matmul(x, self._p(f"{prefix}.{w}")) + self._p(f"{prefix}.{b}")

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return ad.layernorm(x, self._p(f"{prefix}.gain"), self._p(f"{prefix}.bias"), self.config.ln_eps)

    def _drop(self, x: Tensor, rng: Optional[np.random.Generator]) -> Tensor:
        return ad.dropout(x, self.config.dropout, rng, training=rng is not None)

    def _split_heads(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.config.n_heads
        return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)

    def attention(
        self,
        prefix: str,
        query: Tensor,
        memory: Tensor,
        allow: Optional[np.ndarray],
        record: Optional[list] = None,
        tag: Optional[tuple] = None,
    ) -> Tensor:
        """Multi-head attention; ``allow`` broadcasts against ``(B, heads, q, k)``."""
        b, nq, d = query.shape
        if memory.shape[0] != b or memory.shape[2] != d:
            raise ShapeMismatch(f"attention: query {query.shape} vs memory {memory.shape}")
        h = self.config.n_heads
        q = self._split_heads(self._linear(query, prefix, "wq", "bq"))
        k = self._split_heads(self._linear(memory, prefix, "wk", "bk"))
        v = self._split_heads(self._linear(memory, prefix, "wv", "bv"))
        scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d // h))
        if allow is None:
            probs = ad.softmax_lastdim(scores)
        else:
            probs = ad.masked_softmax(scores, allow)
        if record is not None:
            record.append((tag, probs.data))
        ctx = ad.matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, nq, d)
        return self._linear(ctx, prefix, "wo", "bo")

    def feed_forward(self, x: Tensor, prefix: str, rng=None) -> Tensor:
        hidden = ad.relu(self._linear(x, prefix, "w1", "b1"))
        return self._linear(self._drop(hidden, rng), prefix, "w2", "b2")

    # -- embeddings -------------------------------------------------------
    def embed_text(self, ids: np.ndarray, rng=None) -> Tensor:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        cfg = self.config
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.text_vocab_size):
            raise OutOfVocab(f"text ids must be < {cfg.text_vocab_size}")
        n = ids.shape[1]
        if n > cfg.max_text_len:
            raise ShapeMismatch(f"command of {n} tokens exceeds max_text_len={cfg.max_text_len}")
        tok = ad.embedding_gather(self._p("text_embed"), ids)
        pos = ad.embedding_gather(self._p("text_pos"), np.arange(n))
        return self._drop(tok + pos, rng)

    def embed_world(self, world: np.ndarray, rng=None) -> Tensor:
        world = np.asarray(world, dtype=self.dtype)
        if world.shape[-3:] == (GRID_SIZE, GRID_SIZE, CELL_DIM):
            world = world.reshape(world.shape[:-3] + (N_VISUAL, CELL_DIM))
        if world.ndim == 2:
            world = world[None]
        if world.shape[1:] != (N_VISUAL, CELL_DIM):
            raise ShapeMismatch(f"world encoding must be (6, 6, 17) or (36, 17), got {world.shape}")
        rows = np.repeat(np.arange(GRID_SIZE), GRID_SIZE)
        cols = np.tile(np.arange(GRID_SIZE), GRID_SIZE)
        x = self._linear(Tensor(world), "vis_proj")
        x = x + ad.embedding_gather(self._p("vis_row"), rows) + ad.embedding_gather(self._p("vis_col"), cols)
        return self._drop(x, rng)

    # -- encoder / decoder ------------------------------------------------
    def text_self_allow(self, batch: Batch) -> np.ndarray:
        if self.config.use_text_mask:
            return batch.text_allow
        key = batch.key_allow
        n = key.shape[1]
        return (key[:, :, None] & key[:, None, :]) | np.eye(n, dtype=bool)[None]

    def encoder_layer(self, prefix, text, vis, text_allow, key_allow, layer=0, rng=None, record=None):
        t_cross = self.attention(f"{prefix}.t2v_cross", text, vis, None, record, ("t2v_cross", layer))
        v_cross = self.attention(
            f"{prefix}.v2t_cross", vis, text, key_allow[:, None, None, :], record, ("v2t_cross", layer)
        )
        text = self._norm(text + self._drop(t_cross, rng), f"{prefix}.norm_t2v")
        vis = self._norm(vis + self._drop(v_cross, rng), f"{prefix}.norm_v2t")
        t_self = self.attention(
            f"{prefix}.self_attn_text", text, text, text_allow[:, None], record, ("text_self", layer)
        )
        v_self = self.attention(f"{prefix}.self_attn_vis", vis, vis, None, record, ("vis_self", layer))
        text = self._norm(text + self._drop(t_self, rng), f"{prefix}.norm_self_text")
        vis = self._norm(vis + self._drop(v_self, rng), f"{prefix}.norm_self_vis")
        text = self._norm(text + self._drop(self.feed_forward(text, f"{prefix}.ffn_text", rng), rng), f"{prefix}.norm_ffn_text")
        vis = self._norm(vis + self._drop(self.feed_forward(vis, f"{prefix}.ffn_vis", rng), rng), f"{prefix}.norm_ffn_vis")
        return text, vis

    def encode(self, text_emb: Tensor, vis_emb: Tensor, batch: Batch, rng=None, record=None):
        n = text_emb.shape[1]
        if batch.text_allow.shape[1:] != (n, n):
            raise ShapeMismatch(f"mask of size {batch.text_allow.shape[1:]} for {n} text tokens")
        allow = self.text_self_allow(batch)
        key_allow = batch.key_allow
        text, vis = text_emb, vis_emb
        for layer, prefix in enumerate(self.encoder_prefixes()):
            text, vis = self.encoder_layer(prefix, text, vis, allow, key_allow, layer, rng, record)
        return text, vis

    def decode(self, text_enc: Tensor, vis_enc: Tensor, prefix_ids: np.ndarray, key_allow: np.ndarray,
               rng=None, record=None) -> Tensor:
        """Logits ``(B, T, action_vocab)`` for every prefix position."""
        prefix_ids = np.atleast_2d(np.asarray(prefix_ids, dtype=np.int64))
        b, t = prefix_ids.shape
        if t > self.config.max_decode_len:
            raise ShapeMismatch(f"prefix length {t} exceeds max_decode_len={self.config.max_decode_len}")
        memory = ad.concat([text_enc, vis_enc], axis=1)
        mem_allow = np.concatenate([key_allow, np.ones((b, vis_enc.shape[1]), dtype=bool)], axis=1)
        mem_allow = mem_allow[:, None, None, :]
        causal = np.tril(np.ones((t, t), dtype=bool))[None, None]
        x = ad.embedding_gather(self._p("action_embed"), prefix_ids)
        x = self._drop(x + ad.embedding_gather(self._p("action_pos"), np.arange(t)), rng)
        for i in range(self.config.n_decoder_layers):
            p = f"decoder.layer{i}"
            x = self._norm(x + self._drop(self.attention(f"{p}.self_attn", x, x, causal, record, ("dec_self", i)), rng), f"{p}.norm_self")
            x = self._norm(x + self._drop(self.attention(f"{p}.cross_attn", x, memory, mem_allow, record, ("dec_cross", i)), rng), f"{p}.norm_cross")
            x = self._norm(x + self._drop(self.feed_forward(x, f"{p}.ffn", rng), rng), f"{p}.norm_ffn")
        return self._linear(x, "out_proj")

    def forward(self, batch: Batch, rng=None, record=None) -> Tensor:
        text = self.embed_text(batch.text, rng)
        vis = self.embed_world(batch.world, rng)
        text_enc, vis_enc = self.encode(text, vis, batch, rng, record)
        return self.decode(text_enc, vis_enc, batch.dec_in, batch.key_allow, rng, record)

    def loss(self, batch: Batch, rng=None) -> Tensor:
        return ad.cross_entropy(self.forward(batch, rng), batch.dec_out, PAD_ID)

    def greedy_decode(self, batch: Batch, max_len: Optional[int] = None) -> list[list[str]]:
        """Argmax decoding until EOS or ``max_len`` actions; returns action names."""
        cfg = self.config
        max_len = min(max_len or cfg.max_decode_len - 1, cfg.max_decode_len - 1)
        with ad.no_grad():
            text = self.embed_text(batch.text)
            vis = self.embed_world(batch.world)
            text_enc, vis_enc = self.encode(text, vis, batch)
            b = batch.text.shape[0]
            prefix = np.full((b, 1), SOS_ID, dtype=np.int64)
            done = np.zeros(b, dtype=bool)
            outputs: list[list[str]] = [[] for _ in range(b)]
            for _ in range(max_len):
                logits = self.decode(text_enc, vis_enc, prefix, batch.key_allow).data[:, -1]
                nxt = logits.argmax(axis=-1)
                for i in np.flatnonzero(~done):
                    if nxt[i] == EOS_ID:
                        done[i] = True
                    elif nxt[i] < len(ACTIONS):
                        outputs[i].append(ACTION_VOCAB[nxt[i]])
                    else:
                        done[i] = True  # SOS/PAD emitted: treat as termination
                if done.all():
                    break
                prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
        return outputs


def episode_mask(episode, source: str = "dependency") -> np.ndarray:
    from syngrid.parsing import mask_from_constituency, parse_constituency

    if source == "dependency":
        return episode.mask.allow
    return mask_from_constituency(parse_constituency(episode.ast, list(episode.tokens))).allow


def make_batch(episodes: Sequence, config: ModelConfig, with_targets: bool = True) -> Batch:
    """Pad a list of episodes into numeric arrays."""
    from syngrid.gridworld import encode_world

    b = len(episodes)
    lens = np.array([len(ep.tokens) for ep in episodes], dtype=np.int64)
    n = int(lens.max())
    text = np.zeros((b, n), dtype=np.int64)
    allow = np.zeros((b, n, n), dtype=bool)
    allow[:, np.arange(n), np.arange(n)] = True
    world = np.zeros((b, N_VISUAL, CELL_DIM), dtype=config.dtype)
    for i, ep in enumerate(episodes):
        k = lens[i]
        text[i, :k] = text_ids(ep.tokens)
        allow[i, :k, :k] = episode_mask(ep, config.mask_source)
        world[i] = encode_world(ep.world).reshape(N_VISUAL, CELL_DIM)
    batch = Batch(text, lens, allow, world)
    if with_targets:
        t = max(len(ep.actions) for ep in episodes) + 1
        if t > config.max_decode_len:
            raise ShapeMismatch(f"action sequence of length {t - 1} exceeds max_decode_len={config.max_decode_len}")
        dec_in = np.full((b, t), PAD_ID, dtype=np.int64)
        dec_out = np.full((b, t), PAD_ID, dtype=np.int64)
        for i, ep in enumerate(episodes):
            ids = action_ids(ep.actions)
            dec_in[i, 0] = SOS_ID
            dec_in[i, 1 : len(ids) + 1] = ids
            dec_out[i, : len(ids)] = ids
            dec_out[i, len(ids)] = EOS_ID
        batch.dec_in, batch.dec_out = dec_in, dec_out
    return batch
