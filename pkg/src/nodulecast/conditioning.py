"""Report conditioning: tokenizer, frozen causal text backbone, soft prompts.

The screening report (a fixed template over a finite lexicon) is tokenized
word-by-word with digits as single tokens, embedded by a small frozen
decoder-only transformer, and read out at the final token position. A bank
of m trainable prompt sets is prepended to the token embeddings; the m
final-position hidden states form the conditioning sequence consumed by the
denoiser's cross-attention. The bank (and a learned null embedding used for
unconditional passes) are the only trainable parameters here.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .ehr import (
    ATT_PHRASES,
    EMPHYSEMA_CLAUSE,
    FAMILY_CLAUSE,
    GENDERS,
    LOC_PHRASES,
    MARGIN_PHRASES,
)

MAX_REPORT_TOKENS = 64
BACKBONE_SEED = 7
EOS_TOKEN = "<eos>"

_TOKEN_RE = re.compile(r"[a-z]+|[0-9]|[.,]")

_TEMPLATE_TEXT = (
    "Lung cancer screening with low dose computed tomography performed for "
    "this years old . A nodule, with margin, mm in size is present in the ."
)


def _lexicon() -> list[str]:
    texts = [_TEMPLATE_TEXT, EMPHYSEMA_CLAUSE, FAMILY_CLAUSE]
    texts += list(ATT_PHRASES.values()) + list(MARGIN_PHRASES.values())
    texts += list(LOC_PHRASES.values()) + [g.lower() for g in GENDERS]
    tokens = set()
    for t in texts:
        tokens.update(_TOKEN_RE.findall(t.lower()))
    tokens.update(str(d) for d in range(10))
    tokens.update({".", ","})
    return sorted(tokens)


def normalize_text(text: str) -> str:
    """Canonical form used for round-trip checks: lowercased tokens, single spaces."""
    return " ".join(_TOKEN_RE.findall(text.lower()))


class Vocabulary:
    """Fixed token<->id map over the report template lexicon plus digits."""

    def __init__(self, tokens: list[str] | None = None):
        tokens = list(tokens) if tokens is not None else _lexicon()
        if EOS_TOKEN in tokens:
            tokens.remove(EOS_TOKEN)
        self.id_of = {tok: i for i, tok in enumerate(tokens)}
        self.id_of[EOS_TOKEN] = len(tokens)
        self.token_of = {i: t for t, i in self.id_of.items()}

    def __len__(self) -> int:
        return len(self.id_of)

    @property
    def eos_id(self) -> int:
        return self.id_of[EOS_TOKEN]

    def tokenize(self, report: str, max_len: int = MAX_REPORT_TOKENS) -> list[int]:
        """Token ids for a report, with a trailing <eos> id.

        Out-of-vocabulary words are a hard error: template-generated text can
        never produce them, so one indicates template drift.
        """
        ids = []
        for tok in _TOKEN_RE.findall(report.lower()):
            if tok not in self.id_of:
                raise ValueError(f"out-of-vocabulary token {tok!r}")
            ids.append(self.id_of[tok])
        ids.append(self.eos_id)
        if len(ids) > max_len:
            raise ValueError(f"report has {len(ids)} tokens, maximum is {max_len}")
        return ids

    def detokenize(self, ids) -> str:
        return " ".join(self.token_of[int(i)] for i in ids if int(i) != self.eos_id)

    def save(self, path: str | Path) -> None:
        with open(path, "w") as f:
            json.dump(self.id_of, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path) as f:
            id_of = json.load(f)
        tokens = [t for t, _ in sorted(id_of.items(), key=lambda kv: kv[1]) if t != EOS_TOKEN]
        return cls(tokens)


class _CausalBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, length, d = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        hd = d // self.n_heads
        q = q.view(b, length, self.n_heads, hd).transpose(1, 2)
        k = k.view(b, length, self.n_heads, hd).transpose(1, 2)
        v = v.view(b, length, self.n_heads, hd).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        causal = torch.triu(torch.ones(length, length, dtype=torch.bool), diagonal=1)
        attn = attn.masked_fill(causal, float("-inf")).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, length, d)
        x = x + self.proj(out)
        return x + self.mlp(self.ln2(x))


class TextBackbone(nn.Module):
    """Small frozen decoder-only transformer with seeded random weights.

    Causal attention means the final position is the only one attending to
    the whole sequence; its last-layer hidden state is the context readout.
    """

    def __init__(
        self,
        vocab_size: int,
        d_model: int = 128,
        n_layers: int = 2,
        n_heads: int = 4,
        max_positions: int = 96,
        seed: int = BACKBONE_SEED,
    ):
        super().__init__()
        self.d_model = d_model
        self.token_emb = nn.Embedding(vocab_size, d_model)
        self.pos_emb = nn.Embedding(max_positions, d_model)
        self.blocks = nn.ModuleList(_CausalBlock(d_model, n_heads) for _ in range(n_layers))
        self.ln_out = nn.LayerNorm(d_model)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                if p.ndim >= 2:
                    p.copy_(0.02 * torch.randn(p.shape, generator=gen))
        for p in self.parameters():
            p.requires_grad_(False)

    def embed_tokens(self, ids: list[int]) -> torch.Tensor:
        return self.token_emb(torch.tensor(ids, dtype=torch.long))

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        """Run (B, L, D) embedding sequences through the frozen stack."""
        b, length, _ = embeddings.shape
        pos = self.pos_emb(torch.arange(length))
        h = embeddings + pos[None]
        for block in self.blocks:
            h = block(h)
        return self.ln_out(h)


class SoftPromptBank(nn.Module):
    """m sets of n trainable prompt vectors plus a learned null context."""

    def __init__(self, m: int = 4, n: int = 8, d_model: int = 128, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.prompts = nn.Parameter(0.02 * torch.randn(m, n, d_model, generator=gen))
        self.null = nn.Parameter(0.02 * torch.randn(m, d_model, generator=gen))

    @property
    def m(self) -> int:
        return self.prompts.shape[0]


@dataclass
class ContextEmbedding:
    """Conditioning sequence: one hidden-state row per prompt set."""

    sequence: torch.Tensor  # (m, D)
    null: bool = False


def embed_context(
    report: str, bank: SoftPromptBank, backbone: TextBackbone, vocab: Vocabulary
) -> ContextEmbedding:
    """Prepend each prompt set to the report embedding and read out <eos> states."""
    return embed_context_batch([report], bank, backbone, vocab)[0]


def embed_context_batch(
    reports: list[str], bank: SoftPromptBank, backbone: TextBackbone, vocab: Vocabulary
) -> list[ContextEmbedding]:
    """Batched variant: m * len(reports) sequences in one forward pass.

    Sequences are right-padded with <eos>; with causal attention the hidden
    state at each sequence's own final token is unaffected by the padding.
    """
    ids = [vocab.tokenize(r) for r in reports]
    lengths = [len(i) for i in ids]
    max_len = max(lengths)
    m, n = bank.prompts.shape[0], bank.prompts.shape[1]
    rows = []
    for seq in ids:
        padded = seq + [vocab.eos_id] * (max_len - len(seq))
        rows.append(backbone.embed_tokens(padded))
    tok = torch.stack(rows)  # (R, max_len, D)
    tok = tok[None].expand(m, -1, -1, -1)  # (m, R, L, D)
    prompts = bank.prompts[:, None].expand(m, len(reports), n, -1)
    seqs = torch.cat([prompts, tok], dim=2).reshape(m * len(reports), n + max_len, -1)
    hidden = backbone(seqs).reshape(m, len(reports), n + max_len, -1)
    out = []
    for r, length in enumerate(lengths):
        out.append(ContextEmbedding(sequence=hidden[:, r, n + length - 1, :], null=False))
    return out


def null_context(bank: SoftPromptBank) -> ContextEmbedding:
    """The learned null conditioning used during unconditional passes."""
    return ContextEmbedding(sequence=bank.null, null=True)
