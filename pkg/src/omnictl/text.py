"""Toy prompt encoder: closed-vocabulary tokenizer, extensible embedding table,
and a small fixed transformer producing contextual + pooled prompt embeddings.

New task "words" rendered as ⟨name⟩ get their own embedding rows, appended
after the base table so registration never perturbs existing rows.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

import numpy as np

from . import rng
from . import tensor as T
from .tensor import ContractError, Parameter, Tensor

log = logging.getLogger(__name__)

CONTEXT_LEN = 32
D_TEXT = 64
N_BLOCKS = 2
N_HEADS = 4

PAD, BOS, EOS, UNK = 0, 1, 2, 3
_SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

# words any prompt template may use beyond scene captions (incl. task names
# so text-mode task embeddings are distinct)
PROMPT_WORDS = ("use", "as", "feature", ",", "image", "of", "an",
                "depth", "hed", "scribble", "animal", "pose")

_WORD_RE = re.compile(r"⟨[^⟨⟩\s]+⟩|[a-z0-9]+|[,.;:!?]")


def split_words(prompt: str) -> list[str]:
    """Lowercase and split into words; ⟨...⟩ spans and punctuation are single tokens."""
    return _WORD_RE.findall(prompt.lower())


def _positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / np.power(10000.0, 2.0 * i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


@dataclass
class TextEmbedding:
    """Per-token contextual matrix plus mean-pooled vector (non-PAD rows)."""

    tokens: Tensor  # [CONTEXT_LEN, D_TEXT]
    pooled: Tensor  # [D_TEXT]


class TextEncoder:
    """Embedding table + sinusoidal positions + N_BLOCKS transformer blocks."""

    def __init__(self, words, seed: int):
        self.seed = seed
        base = list(_SPECIALS) + sorted(set(words) - set(_SPECIALS))
        self.id_of = {w: i for i, w in enumerate(base)}
        self.words = base
        self.base_size = len(base)
        self.extra: dict[str, Parameter] = {}  # registered ⟨task⟩ rows, insertion order
        self.p: dict[str, Parameter] = {}
        self._init_params()
        self.pos = _positions(CONTEXT_LEN, D_TEXT)

    # -- parameters ---------------------------------------------------------

    def _add(self, name, arr):
        self.p[name] = Parameter(arr, name)

    def _init_params(self):
        s = self.seed
        self._add("text.embed", rng.normal(s, (self.base_size, D_TEXT), "text.embed", scale=0.02))
        for b in range(N_BLOCKS):
            pre = f"text.b{b}"
            for w in ("wq", "wk", "wv", "wo"):
                self._add(f"{pre}.{w}", rng.normal(s, (D_TEXT, D_TEXT), f"{pre}.{w}", scale=D_TEXT ** -0.5))
            self._add(f"{pre}.ln1.scale", np.ones(D_TEXT))
            self._add(f"{pre}.ln1.shift", np.zeros(D_TEXT))
            self._add(f"{pre}.ln2.scale", np.ones(D_TEXT))
            self._add(f"{pre}.ln2.shift", np.zeros(D_TEXT))
            self._add(f"{pre}.w1", rng.normal(s, (D_TEXT, 2 * D_TEXT), f"{pre}.w1", scale=D_TEXT ** -0.5))
            self._add(f"{pre}.b1", np.zeros(2 * D_TEXT))
            self._add(f"{pre}.w2", rng.normal(s, (2 * D_TEXT, D_TEXT), f"{pre}.w2", scale=(2 * D_TEXT) ** -0.5))
            self._add(f"{pre}.b2", np.zeros(D_TEXT))
        self._add("text.lnf.scale", np.ones(D_TEXT))
        self._add("text.lnf.shift", np.zeros(D_TEXT))

    def params(self, include_tokens: bool = True) -> dict[str, Parameter]:
        out = dict(self.p)
        if include_tokens:
            out.update({p.name: p for p in self.extra.values()})
        return out

    def freeze(self, include_tokens: bool = False):
        for p in self.p.values():
            p.frozen = True
        if include_tokens:
            for p in self.extra.values():
                p.frozen = True

    @property
    def vocab_size(self) -> int:
        return self.base_size + len(self.extra)

    # -- vocabulary ----------------------------------------------------------

    def register_token(self, name: str) -> int:
        """Add ⟨name⟩ to the vocabulary; idempotent, returns the token id."""
        if not name or any(c.isspace() for c in name):
            raise ContractError(f"invalid task token name {name!r}")
        token = f"⟨{name}⟩"
        if token in self.id_of:
            return self.id_of[token]
        row = rng.normal(self.seed, (D_TEXT,), "text.tok", name, scale=0.02)
        param = Parameter(row, f"text.tok.{name}")
        tok_id = self.vocab_size
        self.extra[name] = param
        self.id_of[token] = tok_id
        self.words.append(token)
        return tok_id

    def token_row(self, name: str) -> Parameter:
        return self.extra[name]

    def has_token(self, name: str) -> bool:
        return f"⟨{name}⟩" in self.id_of

    def tokenize(self, prompt: str) -> list[int]:
        words = split_words(prompt)
        if len(words) > CONTEXT_LEN - 2:
            log.warning("prompt truncated to context length %d: %r", CONTEXT_LEN, prompt)
            words = words[: CONTEXT_LEN - 2]
        ids = [BOS] + [self.id_of.get(w, UNK) for w in words] + [EOS]
        ids += [PAD] * (CONTEXT_LEN - len(ids))
        return ids

    def detokenize(self, ids) -> str:
        words = [self.words[i] for i in ids if i not in (PAD, BOS, EOS)]
        out = ""
        for w in words:
            if w in ",.;:!?":
                out += w
            else:
                out += (" " if out else "") + w
        return out

    def save_vocab(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.words) + "\n")

    # -- encoding -------------------------------------------------------------

    def _table(self) -> Tensor:
        if not self.extra:
            return self.p["text.embed"]
        rows = [T.reshape(p, (1, D_TEXT)) for p in self.extra.values()]
        return T.concat([self.p["text.embed"]] + rows, axis=0)

    def encode_ids(self, ids) -> TextEmbedding:
        ids = list(ids)
        if any(i < 0 or i >= self.vocab_size for i in ids):
            raise ContractError(f"token id out of range [0, {self.vocab_size})")
        x = T.add(T.take_rows(self._table(), ids), T.constant(self.pos[: len(ids)]))
        for b in range(N_BLOCKS):
            pre = f"text.b{b}"
            h = T.layer_norm(x, self.p[f"{pre}.ln1.scale"], self.p[f"{pre}.ln1.shift"])
            x = T.add(x, self._mha(h, pre))
            h = T.layer_norm(x, self.p[f"{pre}.ln2.scale"], self.p[f"{pre}.ln2.shift"])
            ff = T.matmul(T.silu(T.bias_add_last(T.matmul(h, self.p[f"{pre}.w1"]), self.p[f"{pre}.b1"])),
                          self.p[f"{pre}.w2"])
            x = T.add(x, T.bias_add_last(ff, self.p[f"{pre}.b2"]))
        x = T.layer_norm(x, self.p["text.lnf.scale"], self.p["text.lnf.shift"])
        mask = np.array([i != PAD for i in ids], dtype=np.float64)
        w = (mask / mask.sum()).reshape(1, -1)
        pooled = T.reshape(T.matmul(T.constant(w), x), (D_TEXT,))
        return TextEmbedding(tokens=x, pooled=pooled)

    def _mha(self, x: Tensor, pre: str) -> Tensor:
        L = x.shape[0]
        hd = D_TEXT // N_HEADS
        heads = []
        for name in ("wq", "wk", "wv"):
            y = T.matmul(x, self.p[f"{pre}.{name}"])
            heads.append(T.transpose(T.reshape(y, (L, N_HEADS, hd)), (1, 0, 2)))
        o = T.attention(*heads)
        o = T.reshape(T.transpose(o, (1, 0, 2)), (L, D_TEXT))
        return T.matmul(o, self.p[f"{pre}.wo"])

    def encode(self, prompt: str) -> TextEmbedding:
        return self.encode_ids(self.tokenize(prompt))


def apply_prefix(encoder: TextEncoder, task: str, prompt: str) -> str:
    """Prepend the task-token instruction that tells the trainable copy what to condition on."""
    if not encoder.has_token(task):
        raise ContractError(f"task {task!r} has no registered token")
    return f"Use ⟨{task}⟩ as a feature, " + prompt


def standard_encoder(seed: int) -> TextEncoder:
    """Encoder over the scene-caption vocabulary plus prompt template words."""
    from .scenes import caption_vocabulary

    return TextEncoder(sorted(set(caption_vocabulary()) | set(PROMPT_WORDS)), seed)
