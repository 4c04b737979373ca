"""A small decoder-only causal LM, frozen during prompt training.

Pre-LN transformer, rotary attention by default (a learned absolute
position table remains available behind ``rotary=False``); the LM head is
tied to the embedding table. The prompt is a per-example matrix of k soft
embedding rows occupying positions 0..k-1; input tokens follow at
positions k.. and attend to the prompt like ordinary context. Forward passes always record an
autodiff graph; when the model is frozen its own tensors enter as constants
so gradients stop at the prompt boundary.

Tokenization is byte-level UTF-8: ids 0..255 are raw bytes, 256 is PAD and
257 EOS. The stock model config keeps vocab_size=256 (bytes only); configs
that train on padded/terminated batches use 258.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, ShapeError

PAD_ID = 256
EOS_ID = 257
VOCAB_WITH_SPECIALS = 258


def encode(text):
    return list(text.encode("utf-8"))


def decode(ids):
    return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


@dataclass
class LMConfig:
    vocab_size: int = 256
    hidden: int = 64
    layers: int = 2
    heads: int = 2
    max_seq: int = 256
    # rotate q/k instead of adding a learned position table. Attention
    # then depends on relative offsets only, so circuits learned at one
    # depth work at every depth - which prompted runs need, since the
    # prompt shifts the whole input deeper than any pretraining doc.
    rotary: bool = True

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if (self.hidden // self.heads) % 2 != 0 and self.rotary:
            raise ConfigError(f"rotary needs an even head dim, got {self.hidden // self.heads}")
        if min(self.vocab_size, self.hidden, self.layers, self.heads, self.max_seq) < 1:
            raise ConfigError(f"non-positive model dimension in {self}")


@dataclass
class Batch:
    token_ids: np.ndarray  # (b, s) int
    attn_mask: np.ndarray  # (b, s) 0/1, 0 on padding
    loss_mask: np.ndarray  # (b, s) 0/1, 1 only on answer positions
    tasks: list = field(default_factory=list)
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.attn_mask = np.asarray(self.attn_mask, dtype=np.float64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=np.float64)
        if not (self.token_ids.shape == self.attn_mask.shape == self.loss_mask.shape):
            raise ShapeError(
                f"batch arrays disagree: ids {self.token_ids.shape}, attn "
                f"{self.attn_mask.shape}, loss {self.loss_mask.shape}"
            )
        if np.any(self.loss_mask > self.attn_mask):
            raise DataError("loss mask marks a padding position")

    @property
    def size(self):
        return self.token_ids.shape[0]


class ToyLM:
    def __init__(self, cfg, params, frozen=True):
        self.cfg = cfg
        self.params = params
        self.frozen = frozen
        self._node_cache = {}

    def freeze(self):
        self.frozen = True
        return self

    @classmethod
    def create(cls, cfg, rng, init_std=0.02):
        h, v = cfg.hidden, cfg.vocab_size
        p = {
            "emb": np.asarray(rng.child("emb").normal((v, h), std=init_std)),
            "lnf.g": np.ones(h),
            "lnf.b": np.zeros(h),
        }
        if not cfg.rotary:
            p["pos"] = np.asarray(rng.child("pos").normal((cfg.max_seq, h), std=init_std))
        for i in range(cfg.layers):
            lr = rng.child("layer", i)
            p[f"l{i}.ln1.g"] = np.ones(h)
            p[f"l{i}.ln1.b"] = np.zeros(h)
            p[f"l{i}.ln2.g"] = np.ones(h)
            p[f"l{i}.ln2.b"] = np.zeros(h)
            for name, shape in [
                ("wq", (h, h)),
                ("wk", (h, h)),
                ("wv", (h, h)),
                ("wo", (h, h)),
                ("w1", (h, 4 * h)),
                ("w2", (4 * h, h)),
            ]:
                p[f"l{i}.{name}"] = np.asarray(lr.child(name).normal(shape, std=init_std))
            for name, size in [("bq", h), ("bk", h), ("bv", h), ("bo", h), ("b1", 4 * h), ("b2", h)]:
                p[f"l{i}.{name}"] = np.zeros(size)
        return cls(cfg, p, frozen=False)

    def param_hash(self):
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.params[name]).tobytes())
        return digest.hexdigest()

    def _p(self, name):
        # frozen tensors enter the graph as constants: no gradient entries.
        # Unfrozen tensors are cached per forward so a twice-used tensor
        # (the tied embedding table) is one node with one accumulated grad.
        if self.frozen:
            return ad.const(self.params[name])
        node = self._node_cache.get(name)
        if node is None:
            node = self._node_cache[name] = ad.leaf(self.params[name], f"lm.{name}")
        return node

    def embed(self, token_ids):
        """Raw embedding rows for ids; validates range and names the offender."""
        ids = np.asarray(token_ids, dtype=np.int64)
        bad = np.argwhere((ids < 0) | (ids >= self.cfg.vocab_size))
        if bad.size:
            pos = tuple(int(x) for x in bad[0])
            raise DataError(
                f"token id {int(ids[pos])} out of range for vocab "
                f"{self.cfg.vocab_size} at position {pos}"
            )
        return self.params["emb"][ids]

    _ROPE_CACHE = {}

    @classmethod
    def _rope_tables(cls, total, dh):
        """(cos, sin, rotate) constants for rotary attention.

        cos/sin are (total, dh); rotate is the (dh, dh) matrix sending
        [x1, x2] to [-x2, x1] over the half-split of the head dim.
        """
        key = (total, dh)
        hit = cls._ROPE_CACHE.get(key)
        if hit is None:
            d2 = dh // 2
            inv_freq = 10000.0 ** (-np.arange(d2) / d2)
            ang = np.arange(total)[:, None] * inv_freq[None, :]
            cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=1)
            sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=1)
            rot = np.zeros((dh, dh))
            rot[np.arange(d2) + d2, np.arange(d2)] = -1.0
            rot[np.arange(d2), np.arange(d2) + d2] = 1.0
            hit = cls._ROPE_CACHE[key] = (cos, sin, rot)
        return hit

    def _rope(self, t, total, dh):
        cos, sin, rot = self._rope_tables(total, dh)
        half = ad.matmul(t, ad.const(rot))
        return ad.add(ad.mul(t, ad.const(cos)), ad.mul(half, ad.const(sin)))

    def _attention_allow(self, attn_mask, k):
        b, s = attn_mask.shape
        total = k + s
        key_ok = np.concatenate([np.ones((b, k)), attn_mask], axis=1)
        causal = np.tril(np.ones((total, total)))
        return (causal[None, None, :, :] * key_ok[:, None, None, :]).astype(np.float64)

    def forward(self, prompt, input_embeds, attn_mask):
        """Logits over the concatenated [prompt | input] sequence.

        prompt: (b, k, h) Node or array, or None for k=0. input_embeds:
        raw (b, s, h). Returns a (b, k+s, vocab) Node.
        """
        embeds = np.asarray(input_embeds, dtype=np.float64)
        b, s, h = embeds.shape
        if h != self.cfg.hidden:
            raise ShapeError(f"embedding width {h} != model hidden {self.cfg.hidden}")
        k = 0
        if prompt is not None:
            pv = prompt.value if isinstance(prompt, ad.Node) else np.asarray(prompt)
            if pv.ndim != 3 or pv.shape[0] != b or pv.shape[2] != h:
                raise ShapeError(f"prompt shape {pv.shape} does not fit batch ({b}, k, {h})")
            k = pv.shape[1]
        attn_mask = np.asarray(attn_mask, dtype=np.float64)
        if attn_mask.shape != (b, s):
            raise ShapeError(f"attention mask {attn_mask.shape} does not match ({b}, {s})")

        self._node_cache = {}
        if k > 0:
            x = ad.concat([ad.as_node(prompt), ad.const(embeds)], axis=1)
        else:
            x = ad.const(embeds)
        return self._trunk(x, attn_mask, k)

    def forward_tokens(self, token_ids, attn_mask):
        """Logits with a differentiable embedding lookup; the pretraining path."""
        ids = np.asarray(token_ids, dtype=np.int64)
        self.embed(ids)  # range validation only
        self._node_cache = {}
        x = ad.embedding(self._p("emb"), ids)
        return self._trunk(x, np.asarray(attn_mask, dtype=np.float64), 0)

    def _trunk(self, x, attn_mask, k):
        b, total = x.value.shape[0], x.value.shape[1]
        h = self.cfg.hidden
        if total > self.cfg.max_seq:
            raise ShapeError(f"sequence length {total} exceeds max_seq {self.cfg.max_seq}")
        if not self.cfg.rotary:
            x = ad.add(x, self._pos_slice(total))
        allow = self._attention_allow(attn_mask, k)
        heads, dh = self.cfg.heads, self.cfg.hidden // self.cfg.heads
        for i in range(self.cfg.layers):
            ln1 = ad.layernorm(x, self._p(f"l{i}.ln1.g"), self._p(f"l{i}.ln1.b"))

            def split_heads(t):
                return ad.transpose(ad.reshape(t, (b, total, heads, dh)), (0, 2, 1, 3))

            q = split_heads(ad.add(ad.matmul(ln1, self._p(f"l{i}.wq")), self._p(f"l{i}.bq")))
            key = split_heads(ad.add(ad.matmul(ln1, self._p(f"l{i}.wk")), self._p(f"l{i}.bk")))
            if self.cfg.rotary:
                q, key = self._rope(q, total, dh), self._rope(key, total, dh)
            val = split_heads(ad.add(ad.matmul(ln1, self._p(f"l{i}.wv")), self._p(f"l{i}.bv")))
            scores = ad.scale(ad.matmul(q, ad.transpose(key, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
            probs = ad.masked_softmax(scores, allow)
            ctx = ad.reshape(ad.transpose(ad.matmul(probs, val), (0, 2, 1, 3)), (b, total, h))
            attn = ad.add(ad.matmul(ctx, self._p(f"l{i}.wo")), self._p(f"l{i}.bo"))
            x = ad.add(x, attn)
            ln2 = ad.layernorm(x, self._p(f"l{i}.ln2.g"), self._p(f"l{i}.ln2.b"))
            inner = ad.gelu(ad.add(ad.matmul(ln2, self._p(f"l{i}.w1")), self._p(f"l{i}.b1")))
            mlp = ad.add(ad.matmul(inner, self._p(f"l{i}.w2")), self._p(f"l{i}.b2"))
            x = ad.add(x, mlp)
        x = ad.layernorm(x, self._p("lnf.g"), self._p("lnf.b"))
        emb = self._p("emb")
        return ad.matmul(x, ad.transpose(emb, (1, 0)))

    def _pos_slice(self, total):
        if self.frozen:
            return ad.const(self.params["pos"][:total])
        # keep the full table as the leaf so its gradient has table shape
        sel = np.zeros((total, self.params["pos"].shape[0]))
        sel[np.arange(total), np.arange(total)] = 1.0
        return ad.matmul(ad.const(sel), self._p("pos"))

    def loss_on_batch(self, prompt, batch):
        """Summed masked NLL plus token count for the standard next-token setup.

        Logits at concat position k+i-1 predict input token i, so the loss
        mask is shifted left by one against the logits. Position 0 of the
        input is never predicted (it is conditioned on prompt/positions
        only), enforced by the mask shift.
        """
        embeds = self.embed(batch.token_ids)
        logits = self.forward(prompt, embeds, batch.attn_mask)
        return self._shifted_nll(logits, batch)

    def loss_on_tokens(self, batch):
        """Same loss via the differentiable embedding path (no prompt)."""
        logits = self.forward_tokens(batch.token_ids, batch.attn_mask)
        return self._shifted_nll(logits, batch)

    def _shifted_nll(self, logits, batch):
        k = logits.value.shape[1] - batch.token_ids.shape[1]
        b, s = batch.token_ids.shape
        targets = np.zeros((b, k + s), dtype=np.int64)
        mask = np.zeros((b, k + s))
        # logits at concat position k+i-1 predict input token i; with no
        # prompt, token 0 has no predicting position
        start = 1 if k == 0 else 0
        targets[:, k + start - 1 : k + s - 1] = batch.token_ids[:, start:]
        mask[:, k + start - 1 : k + s - 1] = batch.loss_mask[:, start:]
        return ad.masked_nll(logits, targets, mask)

    def generate(self, prompt, token_ids, attn_mask, max_new, eos_id=EOS_ID):
        """Greedy continuation per example; stops at eos_id or max_new.

        prompt is raw (b, k, h) or None and is kept fixed for the whole
        generation (routing happens once, upstream). Returns a list of id
        lists, EOS excluded.
        """
        if max_new < 1:
            raise ConfigError(f"max_new must be >= 1, got {max_new}")
        ids = np.asarray(token_ids, dtype=np.int64)
        attn = np.asarray(attn_mask, dtype=np.float64)
        b, s = ids.shape
        k = 0 if prompt is None else np.asarray(prompt).shape[1]
        if k + s + max_new > self.cfg.max_seq:
            raise ShapeError(
                f"generation would reach length {k + s + max_new}, over max_seq "
                f"{self.cfg.max_seq}"
            )
        lengths = attn.sum(axis=1).astype(int)
        buf = np.full((b, s + max_new), PAD_ID if self.cfg.vocab_size > PAD_ID else 0, dtype=np.int64)
        buf[:, :s] = ids
        mask = np.zeros((b, s + max_new))
        mask[:, :s] = attn
        done = np.zeros(b, dtype=bool)
        out = [[] for _ in range(b)]
        for _ in range(max_new):
            width = int(lengths.max())
            logits = self.forward(
                prompt if prompt is None else np.asarray(prompt),
                self.embed(buf[:, :width]),
                mask[:, :width],
            ).value
            nxt = np.argmax(logits[np.arange(b), k + lengths - 1], axis=-1)
            for e in range(b):
                if done[e]:
                    continue
                if nxt[e] == eos_id:
                    done[e] = True
                    continue
                out[e].append(int(nxt[e]))
                buf[e, lengths[e]] = nxt[e]
                mask[e, lengths[e]] = 1.0
                lengths[e] += 1
            if done.all():
                break
        return out
