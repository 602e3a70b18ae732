"""A small Backpack-style ranking model.

Every vocabulary token owns k context-independent sense vectors (a learned
multi-vector extension of a classic embedding table). A transformer-style
encoder reads the input once and emits nonnegative contextualization weights
alpha of shape k x n x n, row-normalized per (sense, position); the output at
position i is the alpha-weighted sum of the sense vectors of all visible
tokens. Because that sum is linear in the senses, scaling chosen senses by a
factor in (0, 1] at inference time suppresses whatever those senses encode
without retraining; the all-ones weighting reproduces the plain forward pass
bit for bit.

For ranking, query and document are packed as query ++ <sep> ++ document,
pooled, and passed through a two-layer MLP with a sigmoid output.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .errors import DomainError, ParseError
from .numkernel import Tensor
from .rng import SplitMix64

CHECKPOINT_MAGIC = b"BPCKPT1\n"
_MASK_VALUE = -1e30


@dataclass(frozen=True)
class BackpackConfig:
    """Model hyperparameters; embed_dim must be divisible by context_heads."""

    vocab_size: int
    embed_dim: int = 24
    num_senses: int = 16
    sense_hidden: int = 4
    context_layers: int = 1
    context_heads: int = 2
    max_seq_len: int = 32
    causal: bool = True
    head_hidden: int = 16
    pooling: str = "last"
    sep_index: int = 2

    def __post_init__(self):
        if self.vocab_size < 1:
            raise DomainError("vocab_size must be >= 1")
        if self.embed_dim < 1:
            raise DomainError("embed_dim must be >= 1")
        if self.num_senses < 1:
            raise DomainError("num_senses must be >= 1")
        if self.sense_hidden < 1:
            raise DomainError("sense_hidden must be >= 1")
        if self.context_layers < 1:
            raise DomainError("context_layers must be >= 1")
        if self.context_heads < 1:
            raise DomainError("context_heads must be >= 1")
        if self.embed_dim % self.context_heads != 0:
            raise DomainError("context_heads must divide embed_dim")
        if self.max_seq_len < 1:
            raise DomainError("max_seq_len must be >= 1")
        if self.head_hidden < 1:
            raise DomainError("head_hidden must be >= 1")
        if self.pooling not in ("last", "mean"):
            raise DomainError("pooling must be 'last' or 'mean'")
        if not 0 <= self.sep_index < self.vocab_size:
            raise DomainError("sep_index must be a valid vocab index")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "BackpackConfig":
        return cls(**d)


@dataclass
class ContextWeights:
    """alpha[l, i, j]: weight of token j's sense l in the output at i."""

    alpha: Tensor
    causal: bool


def _param(rng: SplitMix64, shape: tuple[int, ...], sigma: float) -> Tensor:
    return Tensor(rng.normal_array(shape, sigma), requires_grad=True)


def _zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class SenseTable:
    """Per-token sense vectors: embedding plus k independent two-layer maps.

    Non-contextual by construction; the output for a token depends only on
    that token's base embedding.  Each sense reads the embedding through its
    own narrow bottleneck (sense_hidden wide) rather than a shared hidden
    layer.  A shared wide layer leaks every embedding direction into every
    sense, so all senses end up encoding the same contrasts; independent
    low-rank channels start out sensitive to different subspaces and stay
    specialized under training.
    """

    def __init__(self, cfg: BackpackConfig, rng: SplitMix64):
        d, k, p = cfg.embed_dim, cfg.num_senses, cfg.sense_hidden
        self.base = _param(rng, (cfg.vocab_size, d), 0.1)
        self.w1 = _param(rng, (d, k * p), 1.0 / math.sqrt(d))
        # Random (not zero) hidden biases: tanh is odd, so with zero biases a
        # +/- contrast in an embedding stays a +/- contrast in every sense and
        # the senses can never disagree about it.
        self.b1 = _param(rng, (k * p,), 0.5)
        self.w2 = _param(rng, (k, p, d), 1.0 / math.sqrt(p))
        self.b2 = _zeros((k, 1, d))
        self._k = k
        self._d = d
        self._p = p

    def senses_for(self, token_ids: Sequence[int]) -> Tensor:
        """Sense vectors for a token sequence, shaped k x n x d."""
        n = len(token_ids)
        e = nk.take_rows(self.base, list(token_ids))
        h = nk.tanh(nk.add(nk.matmul(e, self.w1), self.b1))
        h = nk.transpose(nk.reshape(h, (n, self._k, self._p)), (1, 0, 2))
        return nk.add(nk.matmul(h, self.w2), self.b2)

    def sense_vectors(self, token: int) -> Tensor:
        """d x k matrix for one token; column l is its l-th sense vector."""
        s = self.senses_for([token])
        return nk.transpose(nk.reshape(s, (self._k, self._d)), (1, 0))


class _EncoderLayer:
    def __init__(self, cfg: BackpackConfig, rng: SplitMix64):
        d = cfg.embed_dim
        hidden = 2 * d
        w_sigma = 1.0 / math.sqrt(d)
        self.wq = _param(rng, (d, d), w_sigma)
        self.bq = _zeros((d,))
        self.wk = _param(rng, (d, d), w_sigma)
        self.bk = _zeros((d,))
        self.wv = _param(rng, (d, d), w_sigma)
        self.bv = _zeros((d,))
        self.wo = _param(rng, (d, d), w_sigma)
        self.bo = _zeros((d,))
        self.f1 = _param(rng, (d, hidden), w_sigma)
        self.fb1 = _zeros((hidden,))
        self.f2 = _param(rng, (hidden, d), 1.0 / math.sqrt(hidden))
        self.fb2 = _zeros((d,))


class ContextEncoder:
    """Produces the per-sense contextualization weights from the raw tokens."""

    def __init__(self, cfg: BackpackConfig, rng: SplitMix64):
        d, k = cfg.embed_dim, cfg.num_senses
        self.cfg = cfg
        self.alpha_dim = d // cfg.context_heads
        w_sigma = 1.0 / math.sqrt(d)
        self.tok_emb = _param(rng, (cfg.vocab_size, d), 0.1)
        self.pos_emb = _param(rng, (cfg.max_seq_len, d), 0.1)
        self.layers = [_EncoderLayer(cfg, rng) for _ in range(cfg.context_layers)]
        self.aq = _param(rng, (d, k * self.alpha_dim), w_sigma)
        self.abq = _zeros((k * self.alpha_dim,))
        self.ak = _param(rng, (d, k * self.alpha_dim), w_sigma)
        self.abk = _zeros((k * self.alpha_dim,))

    def _mask(self, n: int) -> Tensor | None:
        if not self.cfg.causal:
            return None
        m = np.triu(np.full((n, n), _MASK_VALUE), k=1)
        return Tensor(m)

    def _attention(self, layer: _EncoderLayer, hs: Tensor, mask: Tensor | None) -> Tensor:
        n = hs.shape[0]
        heads = self.cfg.context_heads
        dh = self.cfg.embed_dim // heads

        def split(x: Tensor) -> Tensor:
            return nk.transpose(nk.reshape(x, (n, heads, dh)), (1, 0, 2))

        q = split(nk.add(nk.matmul(hs, layer.wq), layer.bq))
        k = split(nk.add(nk.matmul(hs, layer.wk), layer.bk))
        v = split(nk.add(nk.matmul(hs, layer.wv), layer.bv))
        scores = nk.scale(nk.matmul(q, nk.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = nk.add(scores, mask)
        ctx = nk.matmul(nk.softmax(scores, axis=-1), v)
        merged = nk.reshape(nk.transpose(ctx, (1, 0, 2)), (n, self.cfg.embed_dim))
        return nk.add(nk.matmul(merged, layer.wo), layer.bo)

    def encode(self, token_ids: Sequence[int]) -> Tensor:
        n = len(token_ids)
        mask = self._mask(n)
        tok = nk.take_rows(self.tok_emb, list(token_ids))
        pos = nk.take_rows(self.pos_emb, list(range(n)))
        hs = nk.add(tok, pos)
        for layer in self.layers:
            hs = nk.add(hs, self._attention(layer, hs, mask))
            ff = nk.tanh(nk.add(nk.matmul(hs, layer.f1), layer.fb1))
            hs = nk.add(hs, nk.add(nk.matmul(ff, layer.f2), layer.fb2))
        return hs

    def alpha(self, token_ids: Sequence[int]) -> Tensor:
        """k x n x n weights, softmax-normalized over j for every (l, i)."""
        n = len(token_ids)
        k = self.cfg.num_senses
        ah = self.alpha_dim
        hs = self.encode(token_ids)

        def split(x: Tensor) -> Tensor:
            return nk.transpose(nk.reshape(x, (n, k, ah)), (1, 0, 2))

        q = split(nk.add(nk.matmul(hs, self.aq), self.abq))
        key = split(nk.add(nk.matmul(hs, self.ak), self.abk))
        scores = nk.scale(nk.matmul(q, nk.transpose(key, (0, 2, 1))), 1.0 / math.sqrt(ah))
        mask = self._mask(n)
        if mask is not None:
            scores = nk.add(scores, mask)
        return nk.softmax(scores, axis=-1)


class RelevanceHead:
    """Pooled representation -> two dense layers -> scalar logit."""

    def __init__(self, cfg: BackpackConfig, rng: SplitMix64):
        d, h = cfg.embed_dim, cfg.head_hidden
        self.w1 = _param(rng, (d, h), 1.0 / math.sqrt(d))
        self.b1 = _zeros((h,))
        self.w2 = _param(rng, (h, 1), 1.0 / math.sqrt(h))
        self.b2 = _zeros((1,))

    def logit(self, pooled: Tensor) -> Tensor:
        h = nk.tanh(nk.add(nk.matmul(pooled, self.w1), self.b1))
        out = nk.add(nk.matmul(h, self.w2), self.b2)
        return nk.reshape(out, ())


class LMHead:
    """Linear map from output vectors to vocabulary logits."""

    def __init__(self, cfg: BackpackConfig, rng: SplitMix64):
        self.w = _param(rng, (cfg.embed_dim, cfg.vocab_size),
                        1.0 / math.sqrt(cfg.embed_dim))


def aggregate(alpha: Tensor, senses: Tensor, weights=None) -> Tensor:
    """Weighted sense aggregation: out[i] = sum_l w_l sum_j alpha[l,i,j] senses[l,j].

    ``weights`` is an optional length-k positive per-sense multiplier applied
    outside alpha with no renormalization, so the all-ones weighting is
    bit-identical to the plain sum.
    """
    if alpha.ndim != 3 or senses.ndim != 3:
        raise DomainError("aggregate expects k x n x n weights and k x n x d senses")
    k = alpha.shape[0]
    ctx = nk.matmul(alpha, senses)
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (k,):
            raise DomainError(f"sense weights must have length {k}, got shape {w.shape}")
        if np.any(w <= 0.0):
            raise DomainError("sense weights must be strictly positive")
        ctx = nk.mul(ctx, Tensor(w.reshape(k, 1, 1)))
    return nk.tensor_sum(ctx, axis=0)


class Backpack:
    """The full model: sense table, contextualizer, relevance and LM heads."""

    def __init__(self, config: BackpackConfig, seed: int = 0):
        self.config = config
        rng = SplitMix64(seed)
        self.senses = SenseTable(config, rng)
        self.context = ContextEncoder(config, rng)
        self.head = RelevanceHead(config, rng)
        self.lm = LMHead(config, rng)

    # ------------------------------------------------------------------
    # parameter registry

    def _components(self) -> dict[str, object]:
        comps: dict[str, object] = {
            "sense": self.senses,
            "ctx": self.context,
            "head": self.head,
            "lm": self.lm,
        }
        for i, layer in enumerate(self.context.layers):
            comps[f"ctx.layer{i}"] = layer
        return comps

    def parameters(self) -> dict[str, Tensor]:
        """Stable name -> tensor mapping over every trainable parameter."""
        out: dict[str, Tensor] = {}
        for prefix, comp in self._components().items():
            for attr, value in vars(comp).items():
                if isinstance(value, Tensor):
                    out[f"{prefix}.{attr}"] = value
        return out

    def set_param(self, name: str, tensor: Tensor) -> None:
        """Replace a parameter tensor by registry name."""
        prefix, _, attr = name.rpartition(".")
        comp = self._components().get(prefix)
        if comp is None or not isinstance(getattr(comp, attr, None), Tensor):
            raise DomainError(f"unknown parameter {name!r}")
        if tensor.shape != getattr(comp, attr).shape:
            raise DomainError(f"parameter {name!r} expects shape "
                              f"{getattr(comp, attr).shape}, got {tensor.shape}")
        setattr(comp, attr, tensor)

    # ------------------------------------------------------------------
    # forward paths

    def _check_tokens(self, token_ids: Sequence[int]) -> list[int]:
        ids = [int(t) for t in token_ids]
        if not ids:
            raise DomainError("token sequence must be non-empty")
        if len(ids) > self.config.max_seq_len:
            raise DomainError(
                f"sequence length {len(ids)} exceeds max_seq_len {self.config.max_seq_len}")
        for t in ids:
            if not 0 <= t < self.config.vocab_size:
                raise DomainError(f"token index {t} outside vocabulary")
        return ids

    def sense_vectors(self, token: int) -> Tensor:
        if not 0 <= int(token) < self.config.vocab_size:
            raise DomainError(f"token index {token} outside vocabulary")
        return self.senses.sense_vectors(int(token))

    def contextualize(self, token_ids: Sequence[int]) -> ContextWeights:
        ids = self._check_tokens(token_ids)
        return ContextWeights(self.context.alpha(ids), self.config.causal)

    @staticmethod
    def _map_weights(sense_map) -> Sequence[float]:
        return getattr(sense_map, "weights", sense_map)

    def forward(self, token_ids: Sequence[int]) -> Tensor:
        """Per-position output vectors, shaped n x d."""
        ids = self._check_tokens(token_ids)
        return aggregate(self.context.alpha(ids), self.senses.senses_for(ids))

    def forward_reweighted(self, token_ids: Sequence[int], sense_map) -> Tensor:
        """Forward pass with per-sense multipliers applied inside the sum."""
        if sense_map is None:
            return self.forward(token_ids)
        ids = self._check_tokens(token_ids)
        return aggregate(self.context.alpha(ids), self.senses.senses_for(ids),
                         self._map_weights(sense_map))

    def pack_sequence(self, query_ids: Sequence[int], doc_ids: Sequence[int]) -> list[int]:
        """query ++ <sep> ++ document, truncating the document tail first."""
        q = [int(t) for t in query_ids]
        d = [int(t) for t in doc_ids]
        budget = self.config.max_seq_len
        room = budget - len(q) - 1
        if room < 0:
            q = q[:budget - 1]
            room = 0
        return q + [self.config.sep_index] + d[:room]

    def _pool(self, out: Tensor) -> Tensor:
        if self.config.pooling == "mean":
            return nk.reshape(nk.tensor_mean(out, axis=0), (1, out.shape[1]))
        return nk.take_rows(out, [out.shape[0] - 1])

    def relevance_logit(self, query_ids: Sequence[int], doc_ids: Sequence[int],
                        sense_map=None) -> Tensor:
        """Pre-sigmoid relevance of the document to the query (scalar tensor)."""
        seq = self.pack_sequence(query_ids, doc_ids)
        out = self.forward_reweighted(seq, sense_map)
        return self.head.logit(self._pool(out))

    def relevance_score(self, query_ids: Sequence[int], doc_ids: Sequence[int],
                        sense_map=None) -> float:
        """Sigmoid relevance in (0, 1)."""
        z = self.relevance_logit(query_ids, doc_ids, sense_map).item()
        if z >= 0.0:
            return 1.0 / (1.0 + math.exp(-z))
        e = math.exp(z)
        return e / (1.0 + e)

    def lm_logits(self, token_ids: Sequence[int]) -> Tensor:
        """Per-position distribution over the vocabulary (rows sum to 1)."""
        out = self.forward(token_ids)
        return nk.softmax(nk.matmul(out, self.lm.w), axis=-1)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Backpack, vocab_tokens: Sequence[str],
                    meta: dict | None = None) -> None:
    """Binary checkpoint: magic, JSON header (config, vocab, meta), tensors."""
    header = {
        "format_version": 1,
        "config": model.config.to_dict(),
        "vocab": list(vocab_tokens),
        "meta": dict(meta or {}),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        nk.write_snapshot(fh, {n: t.data for n, t in model.parameters().items()})


def load_checkpoint(path) -> tuple[Backpack, list[str], dict]:
    """Rebuild a model bit-identically from a checkpoint file."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ParseError("not a checkpoint file (bad magic)", path=str(path))
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors = nk.read_snapshot(fh)
    config = BackpackConfig.from_dict(header["config"])
    model = Backpack(config, seed=0)
    params = model.parameters()
    if set(tensors) != set(params):
        missing = sorted(set(params) - set(tensors))
        extra = sorted(set(tensors) - set(params))
        raise ParseError(f"checkpoint parameter mismatch: missing={missing} extra={extra}",
                         path=str(path))
    for name, arr in tensors.items():
        if arr.shape != params[name].shape:
            raise ParseError(f"checkpoint tensor {name!r} has shape {arr.shape}, "
                             f"expected {params[name].shape}", path=str(path))
        model.set_param(name, Tensor(arr, requires_grad=True))
    return model, list(header["vocab"]), dict(header["meta"])
