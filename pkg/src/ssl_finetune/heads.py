"""Downstream adaptors placed on top of the encoder.

* utterance classification: mean pooling over valid frames + one linear layer
* speaker verification: cosine similarity of pooled embeddings
* spoken language understanding: character-level attentional GRU decoder
  with beam search and a flat ``scenario|action|slot=value;...`` format
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .model import FrameSequence

SV_EPS = 1e-8


# ---------------------------------------------------------------------------
# pooling + classification


@dataclass
class PooledEmbedding:
    vector: torch.Tensor
    source_length: int


def pool_mean(frames: FrameSequence) -> PooledEmbedding:
    if frames.length < 1:
        raise ValueError("cannot pool a zero-length sequence")
    return PooledEmbedding(frames.values[: frames.length].mean(0), frames.length)


def pool_mean_batch(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Masked mean over time of ``[B, T, D]`` using the first ``lengths[b]`` rows."""
    if int(lengths.min()) < 1:
        raise ValueError("cannot pool a zero-length sequence")
    valid = (torch.arange(x.shape[1])[None, :] < lengths[:, None]).to(x.dtype)
    return (x * valid[..., None]).sum(1) / lengths[:, None].to(x.dtype)


class ClassifierHead(nn.Module):
    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.linear = nn.Linear(dim, num_classes)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.linear(pooled)


def classify(embedding: PooledEmbedding, head: ClassifierHead, label: int | None = None):
    """Logits for one utterance, and the cross-entropy when ``label`` is given."""
    if embedding.vector.shape[-1] != head.linear.in_features:
        raise ValueError(f"embedding dim {embedding.vector.shape[-1]} != head dim {head.linear.in_features}")
    logits = head(embedding.vector)
    if label is None:
        return logits, None
    return logits, classification_loss(logits[None], torch.tensor([label]))


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    C = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= C):
        raise ValueError(f"label outside [0, {C})")
    return F.cross_entropy(logits, labels)


def sv_score(a: PooledEmbedding | torch.Tensor, b: PooledEmbedding | torch.Tensor) -> float:
    va = a.vector if isinstance(a, PooledEmbedding) else a
    vb = b.vector if isinstance(b, PooledEmbedding) else b
    va, vb = va.double(), vb.double()
    return float((va @ vb) / ((va.norm() + SV_EPS) * (vb.norm() + SV_EPS)))


# ---------------------------------------------------------------------------
# semantics format


RESERVED = "|=;"


@dataclass(frozen=True)
class SemanticAnnotation:
    scenario: str
    action: str
    entities: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "entities", frozenset((str(t), str(v)) for t, v in self.entities))

    @property
    def intent(self) -> str:
        return f"{self.scenario}_{self.action}"

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "action": self.action,
                "entities": [list(e) for e in sorted(self.entities)]}

    @classmethod
    def from_dict(cls, d: dict) -> "SemanticAnnotation":
        return cls(d["scenario"], d["action"], frozenset(tuple(e) for e in d.get("entities", ())))


class ParsedSemantics(tuple):
    """``(annotation, errors)``; ``errors`` is empty for a well-formed string."""

    def __new__(cls, annotation, errors):
        return super().__new__(cls, (annotation, tuple(errors)))

    @property
    def annotation(self) -> SemanticAnnotation:
        return self[0]

    @property
    def errors(self) -> tuple[str, ...]:
        return self[1]

    @property
    def ok(self) -> bool:
        return not self[1]


def serialize_semantics(ann: SemanticAnnotation) -> str:
    parts = [ann.scenario, ann.action, *[x for e in ann.entities for x in e]]
    for p in parts:
        if any(ch in p for ch in RESERVED):
            raise ValueError(f"label {p!r} contains a reserved delimiter")
    ents = ";".join(f"{t}={v}" for t, v in sorted(ann.entities))
    return f"{ann.scenario}|{ann.action}|{ents}"


def parse_semantics(text: str) -> ParsedSemantics:
    """Best-effort parse; structural problems are reported, never raised."""
    errors = []
    fields = text.split("|")
    if len(fields) < 3:
        errors.append(f"expected 3 '|'-separated fields, got {len(fields)}")
        fields = fields + [""] * (3 - len(fields))
    elif len(fields) > 3:
        errors.append(f"expected 3 '|'-separated fields, got {len(fields)}")
        fields = fields[:2] + ["|".join(fields[2:]).replace("|", ";")]
    scenario, action, ents = fields
    if not scenario:
        errors.append("empty scenario")
    if not action:
        errors.append("empty action")
    entities = set()
    for chunk in ents.split(";") if ents else []:
        if not chunk:
            errors.append("empty entity")
            continue
        slot, eq, value = chunk.partition("=")
        if not eq:
            errors.append(f"entity {chunk!r} has no '='")
        elif not value:
            errors.append(f"entity {slot!r} has an empty value")
        if not slot:
            errors.append(f"entity {chunk!r} has an empty slot type")
        entities.add((slot, value))
    return ParsedSemantics(SemanticAnnotation(scenario, action, frozenset(entities)), errors)


# ---------------------------------------------------------------------------
# character vocabulary


class CharVocab:
    PAD, BOS, EOS = 0, 1, 2
    CHARS = " _0123456789abcdefghijklmnopqrstuvwxyz|=;"

    def __init__(self, chars: str = CHARS):
        self.itos = ["<pad>", "<bos>", "<eos>", *chars]
        self.stoi = {c: i for i, c in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.stoi[c] for c in text]
        except KeyError as e:
            raise ValueError(f"character {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        return "".join(self.itos[i] for i in ids if i > self.EOS)


# ---------------------------------------------------------------------------
# attentional decoder


@dataclass
class DecoderState:
    hidden: torch.Tensor   # [B, H]
    context: torch.Tensor  # [B, D_enc]

    def index(self, idx: torch.Tensor) -> "DecoderState":
        return DecoderState(self.hidden[idx], self.context[idx])


class AttentionalGRUDecoder(nn.Module):
    """One GRU cell with additive attention and input feeding."""

    def __init__(self, enc_dim: int, vocab_size: int, emb_dim: int = 32, hidden_dim: int = 64,
                 attn_dim: int = 32, bos_index: int = CharVocab.BOS, eos_index: int = CharVocab.EOS):
        super().__init__()
        self.vocab_size = vocab_size
        self.bos_index, self.eos_index = bos_index, eos_index
        self.embedding = nn.Embedding(vocab_size, emb_dim)
        self.init_proj = nn.Linear(enc_dim, hidden_dim)
        self.cell = nn.GRUCell(emb_dim + enc_dim, hidden_dim)
        self.attn_enc = nn.Linear(enc_dim, attn_dim, bias=False)
        self.attn_dec = nn.Linear(hidden_dim, attn_dim)
        self.attn_v = nn.Linear(attn_dim, 1, bias=False)
        self.out_hidden = nn.Linear(hidden_dim + enc_dim, hidden_dim)
        self.out = nn.Linear(hidden_dim, vocab_size)

    def init_state(self, enc: torch.Tensor, enc_lengths: torch.Tensor) -> DecoderState:
        pooled = pool_mean_batch(enc, enc_lengths)
        return DecoderState(torch.tanh(self.init_proj(pooled)), torch.zeros_like(pooled))

    def attend(self, hidden, enc, enc_lengths, enc_keys=None):
        keys = self.attn_enc(enc) if enc_keys is None else enc_keys
        scores = self.attn_v(torch.tanh(keys + self.attn_dec(hidden)[:, None, :])).squeeze(-1)
        pad = torch.arange(enc.shape[1])[None, :] >= enc_lengths[:, None]
        weights = scores.masked_fill(pad, float("-inf")).softmax(-1)
        return torch.bmm(weights[:, None, :], enc).squeeze(1), weights

    def decode_step(self, state: DecoderState, enc, enc_lengths, prev_tokens, enc_keys=None):
        """Returns (log-probabilities ``[B, V]``, new state, attention weights ``[B, T]``)."""
        emb = self.embedding(prev_tokens)
        hidden = self.cell(torch.cat([emb, state.context], -1), state.hidden)
        context, weights = self.attend(hidden, enc, enc_lengths, enc_keys)
        h = torch.tanh(self.out_hidden(torch.cat([hidden, context], -1)))
        return F.log_softmax(self.out(h), -1), DecoderState(hidden, context), weights

    def forward(self, enc, enc_lengths, tokens_in):
        """Teacher-forced log-probabilities ``[B, L, V]`` for inputs ``[B, L]``."""
        state = self.init_state(enc, enc_lengths)
        keys = self.attn_enc(enc)
        out = []
        for t in range(tokens_in.shape[1]):
            lp, state, _ = self.decode_step(state, enc, enc_lengths, tokens_in[:, t], keys)
            out.append(lp)
        return torch.stack(out, 1)

    def nll(self, enc, enc_lengths, targets: list[list[int]], pad_index: int = CharVocab.PAD) -> torch.Tensor:
        """Summed token NLL with EOS appended, averaged over utterances."""
        L = max(len(t) for t in targets) + 1
        B = len(targets)
        tin = torch.full((B, L), pad_index, dtype=torch.long)
        tout = torch.full((B, L), pad_index, dtype=torch.long)
        for b, t in enumerate(targets):
            tin[b, 0] = self.bos_index
            tin[b, 1 : len(t) + 1] = torch.tensor(t, dtype=torch.long)
            tout[b, : len(t)] = torch.tensor(t, dtype=torch.long)
            tout[b, len(t)] = self.eos_index
        lp = self(enc, enc_lengths, tin)
        return F.nll_loss(lp.reshape(-1, lp.shape[-1]), tout.reshape(-1), ignore_index=pad_index,
                          reduction="sum") / B


# ---------------------------------------------------------------------------
# search


@dataclass
class DecodeHypothesis:
    tokens: tuple[int, ...]
    log_prob: float
    finished: bool
    step_log_probs: tuple[float, ...] = field(default=(), repr=False)


def _single(enc, enc_lengths):
    if enc.dim() == 2:
        enc = enc[None]
    if enc_lengths is None:
        enc_lengths = torch.tensor([enc.shape[1]])
    return enc, torch.as_tensor(enc_lengths).reshape(1)


@torch.no_grad()
def greedy_search(decoder: AttentionalGRUDecoder, enc, max_len: int, enc_lengths=None) -> DecodeHypothesis:
    enc, enc_lengths = _single(enc, enc_lengths)
    state = decoder.init_state(enc, enc_lengths)
    keys = decoder.attn_enc(enc)
    prev = torch.tensor([decoder.bos_index])
    tokens, steps = [], []
    for _ in range(max_len):
        lp, state, _ = decoder.decode_step(state, enc, enc_lengths, prev, keys)
        lp = lp[0].double()
        best = int(torch.argmax(lp))  # lowest id wins ties
        steps.append(float(lp[best]))
        if best == decoder.eos_index:
            return DecodeHypothesis(tuple(tokens), sum(steps), True, tuple(steps))
        tokens.append(best)
        prev = torch.tensor([best])
    return DecodeHypothesis(tuple(tokens), sum(steps), False, tuple(steps))


@torch.no_grad()
def beam_search(decoder: AttentionalGRUDecoder, enc, beam_width: int = 80, max_len: int = 100,
                enc_lengths=None) -> DecodeHypothesis:
    """Length-unnormalized beam search without any coverage term.

    Returns the best finished hypothesis; if none finishes within
    ``max_len`` steps, the best unfinished one (``finished=False``).
    Ties are broken by the lexicographically smaller token sequence.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    enc, enc_lengths = _single(enc, enc_lengths)
    state = decoder.init_state(enc, enc_lengths)
    keys = decoder.attn_enc(enc)
    # live beams: (score, tokens, step scores)
    beams = [(0.0, (), ())]
    finished: list[tuple[float, tuple, tuple]] = []
    prev = torch.tensor([decoder.bos_index])
    eos = decoder.eos_index

    for _ in range(max_len):
        n = len(beams)
        lp, new_state, _ = decoder.decode_step(
            state, enc.expand(n, -1, -1), enc_lengths.expand(n), prev, keys.expand(n, -1, -1)
        )
        lp = lp.double().tolist()
        cands = []
        for b, (score, toks, steps) in enumerate(beams):
            row = lp[b]
            for v, s in enumerate(row):
                cands.append((score + s, toks + (v,), steps + (s,), b))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, toks, steps, b in cands[:beam_width]:
            if toks[-1] == eos:
                finished.append((score, toks[:-1], steps))
            else:
                live.append((score, toks, steps, b))
        if not live:
            break
        if finished:
            best_fin = max(f[0] for f in finished)
            # extensions only lower the score, so no live beam can overtake
            if best_fin >= live[0][0]:
                break
        idx = torch.tensor([c[3] for c in live])
        state = new_state.index(idx)
        prev = torch.tensor([c[1][-1] for c in live])
        beams = [(c[0], c[1], c[2]) for c in live]

    if finished:
        score, toks, steps = min(finished, key=lambda f: (-f[0], f[1]))
        return DecodeHypothesis(toks, score, True, steps)
    score, toks, steps = min(beams, key=lambda f: (-f[0], f[1]))
    return DecodeHypothesis(toks, score, False, steps)
