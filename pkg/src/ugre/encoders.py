"""Evidence encoders: translation-based KG scoring and CNN-max over tokens.

The KG side embeds entities and relations in one space and scores a
triplet as ``b - ||(t - h) - r||``; the probability of a relation is the
softmax of those scores over the whole relation vocabulary. The text
side maps each token to word and two position embeddings, convolves a
sliding window, and max-pools per filter.

Plain-float helpers (``transe_score`` and friends) are the simple API
used by tests and oracles; the ``*_node`` variants build the same
arithmetic on a tape for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ParamSlot, Tensor

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1


class EncoderError(ValueError):
    pass


class UnknownIdError(EncoderError):
    pass


class Vocab:
    """Token to contiguous-id mapping with reserved pad and unk entries."""

    def __init__(self, tokens) -> None:
        self.id_to_token = [PAD_TOKEN, UNK_TOKEN]
        seen = {PAD_TOKEN, UNK_TOKEN}
        for tok in tokens:
            if tok not in seen:
                seen.add(tok)
                self.id_to_token.append(tok)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens) -> np.ndarray:
        return np.array([self.lookup(t) for t in tokens], dtype=np.int64)

    @classmethod
    def build(cls, token_iterables) -> "Vocab":
        """Deterministic vocabulary: sorted set of all observed tokens."""
        seen = set()
        for toks in token_iterables:
            seen.update(toks)
        seen.discard(PAD_TOKEN)
        seen.discard(UNK_TOKEN)
        return cls(sorted(seen))


@dataclass
class TokenFeatures:
    """Per-token word ids plus clipped, shifted offsets to both mentions."""

    word_ids: np.ndarray
    e1_offsets: np.ndarray
    e2_offsets: np.ndarray

    def __len__(self) -> int:
        return len(self.word_ids)


def featurize(tokens, e1_pos: int, e2_pos: int, maxdist: int, vocab: Vocab) -> TokenFeatures:
    """Encode tokens and relative distances to the two entity mentions.

    Offsets are clipped to [-maxdist, +maxdist] and shifted by +maxdist
    so they index a (2*maxdist+1)-row position table.
    """
    n = len(tokens)
    if n == 0:
        raise EncoderError("cannot featurize an empty token sequence")
    for name, pos in (("e1_pos", e1_pos), ("e2_pos", e2_pos)):
        if not 0 <= pos < n:
            raise EncoderError(f"{name}={pos} is outside the {n}-token sequence")
    idx = np.arange(n)
    off1 = np.clip(idx - e1_pos, -maxdist, maxdist) + maxdist
    off2 = np.clip(idx - e2_pos, -maxdist, maxdist) + maxdist
    return TokenFeatures(vocab.encode(tokens), off1.astype(np.int64), off2.astype(np.int64))


# ---------------------------------------------------------------------------
# Parameter containers.
# ---------------------------------------------------------------------------


@dataclass
class KGParams:
    """Entity/relation embedding tables plus the score bias constant."""

    entity_ids: list[str]
    relation_ids: list[str]
    entity_emb: ParamSlot
    relation_emb: ParamSlot
    b: float
    norm: str = "l2"

    def __post_init__(self) -> None:
        self.entity_index = {e: i for i, e in enumerate(self.entity_ids)}
        self.relation_index = {r: i for i, r in enumerate(self.relation_ids)}
        if self.norm not in ("l2", "l1"):
            raise EncoderError(f"unknown norm {self.norm!r} (expected 'l2' or 'l1')")

    def eidx(self, eid: str) -> int:
        try:
            return self.entity_index[eid]
        except KeyError:
            raise UnknownIdError(f"unknown entity {eid!r}") from None

    def ridx(self, rel: str) -> int:
        try:
            return self.relation_index[rel]
        except KeyError:
            raise UnknownIdError(f"unknown relation {rel!r}") from None

    def slots(self) -> list[ParamSlot]:
        return [self.entity_emb, self.relation_emb]


@dataclass
class NetParams:
    """Embedding tables, the two conv kernels, attention and classifier."""

    word_emb: ParamSlot
    pos_emb: ParamSlot
    conv_sent_w: ParamSlot
    conv_sent_b: ParamSlot
    conv_path_w: ParamSlot
    conv_path_b: ParamSlot
    attn_w: ParamSlot
    attn_b: ParamSlot
    class_w: ParamSlot
    class_b: ParamSlot

    def slots(self) -> list[ParamSlot]:
        return [
            self.word_emb,
            self.pos_emb,
            self.conv_sent_w,
            self.conv_sent_b,
            self.conv_path_w,
            self.conv_path_b,
            self.attn_w,
            self.attn_b,
            self.class_w,
            self.class_b,
        ]


def init_kg_params(
    entity_ids,
    relation_ids,
    dim: int,
    b: float,
    norm: str,
    rng: np.random.Generator,
) -> KGParams:
    lim = 6.0 / np.sqrt(dim)
    ent = rng.uniform(-lim, lim, size=(len(entity_ids), dim))
    rel = rng.uniform(-lim, lim, size=(len(relation_ids), dim))
    return KGParams(
        entity_ids=list(entity_ids),
        relation_ids=list(relation_ids),
        entity_emb=ParamSlot("entity_emb", Tensor(ent), "kg"),
        relation_emb=ParamSlot("relation_emb", Tensor(rel), "kg"),
        b=b,
        norm=norm,
    )


def init_net_params(
    vocab_size: int,
    n_relations: int,
    word_dim: int,
    pos_dim: int,
    kg_dim: int,
    filters: int,
    window: int,
    maxdist: int,
    mode: str,
    rng: np.random.Generator,
) -> NetParams:
    in_dim = word_dim + 2 * pos_dim
    conv_in = window * in_dim
    word = rng.uniform(-0.25, 0.25, size=(vocab_size, word_dim))
    word[0] = 0.0  # pad row, never gathered into real features
    pos = rng.uniform(-0.25, 0.25, size=(2 * maxdist + 1, pos_dim))
    conv_lim = np.sqrt(6.0 / (conv_in + filters))
    attn_lim = np.sqrt(6.0 / (filters + kg_dim))
    blocks = 2 if mode == "base" else 4
    cls_lim = np.sqrt(6.0 / (blocks * filters + n_relations))
    return NetParams(
        word_emb=ParamSlot("word_emb", Tensor(word), "net"),
        pos_emb=ParamSlot("pos_emb", Tensor(pos), "net"),
        conv_sent_w=ParamSlot(
            "conv_sent_w", Tensor(rng.uniform(-conv_lim, conv_lim, size=(conv_in, filters))), "net"
        ),
        conv_sent_b=ParamSlot("conv_sent_b", Tensor(np.zeros(filters)), "net"),
        conv_path_w=ParamSlot(
            "conv_path_w", Tensor(rng.uniform(-conv_lim, conv_lim, size=(conv_in, filters))), "net"
        ),
        conv_path_b=ParamSlot("conv_path_b", Tensor(np.zeros(filters)), "net"),
        attn_w=ParamSlot(
            "attn_w", Tensor(rng.uniform(-attn_lim, attn_lim, size=(kg_dim, filters))), "net"
        ),
        attn_b=ParamSlot("attn_b", Tensor(np.zeros(kg_dim)), "net"),
        class_w=ParamSlot(
            "class_w",
            Tensor(rng.uniform(-cls_lim, cls_lim, size=(n_relations, blocks * filters))),
            "net",
        ),
        class_b=ParamSlot("class_b", Tensor(np.zeros(n_relations)), "net"),
    )


# ---------------------------------------------------------------------------
# KG scoring: plain-float API.
# ---------------------------------------------------------------------------


def latent_relation(e1: str, e2: str, kg: KGParams) -> np.ndarray:
    """Embedding-space difference t - h used as the attention query."""
    h = kg.entity_emb.value.data[kg.eidx(e1)]
    t = kg.entity_emb.value.data[kg.eidx(e2)]
    return t - h


def _norm(vec: np.ndarray, norm: str) -> float:
    if norm == "l1":
        return float(np.abs(vec).sum())
    return float(np.sqrt((vec ** 2).sum()))


def transe_score(e1: str, rel: str, e2: str, kg: KGParams) -> float:
    """Triplet plausibility ``b - ||(t - h) - r||``."""
    r = kg.relation_emb.value.data[kg.ridx(rel)]
    return kg.b - _norm(latent_relation(e1, e2, kg) - r, kg.norm)


def all_relation_scores(e1: str, e2: str, kg: KGParams) -> np.ndarray:
    diff = latent_relation(e1, e2, kg)[None, :] - kg.relation_emb.value.data
    if kg.norm == "l1":
        norms = np.abs(diff).sum(axis=1)
    else:
        norms = np.sqrt((diff ** 2).sum(axis=1))
    return kg.b - norms


def kg_log_prob(e1: str, rel: str, e2: str, kg: KGParams) -> float:
    """Log probability of ``rel`` under the softmax over all relations."""
    scores = all_relation_scores(e1, e2, kg)
    shifted = scores - scores.max()
    return float(shifted[kg.ridx(rel)] - np.log(np.exp(shifted).sum()))


# ---------------------------------------------------------------------------
# KG scoring: tape-tracked nodes for training.
# ---------------------------------------------------------------------------


def latent_relation_node(tape, e1: str, e2: str, kg: KGParams) -> Tensor:
    h = nm.gather_row(tape, kg.entity_emb.value, kg.eidx(e1))
    t = nm.gather_row(tape, kg.entity_emb.value, kg.eidx(e2))
    return nm.sub(tape, t, h)


def kg_log_probs_node(tape, r_ht: Tensor, kg: KGParams) -> Tensor:
    """Log softmax of triplet scores over the whole relation vocabulary."""
    diff = nm.sub_rowvec(tape, kg.relation_emb.value, r_ht)
    if kg.norm == "l1":
        norms = nm.row_l1norms(tape, diff)
    else:
        norms = nm.row_l2norms(tape, diff)
    scores = nm.affine(tape, norms, -1.0, kg.b)
    return nm.log_softmax(tape, scores)


# ---------------------------------------------------------------------------
# CNN-max evidence encoder.
# ---------------------------------------------------------------------------


def cnn_max(
    tape,
    feats: TokenFeatures,
    word_emb: ParamSlot,
    pos_emb: ParamSlot,
    kernel: ParamSlot,
    bias: ParamSlot,
    window: int,
) -> Tensor:
    """Convolve token features with one kernel and max-pool per filter.

    Each token vector concatenates its word embedding with two position
    embeddings; a width-``window`` sliding window is flattened, mapped
    through ``tanh(z @ kernel + bias)``, and pooled with a per-filter
    max over positions. Pad tokens (word id 0) contribute zero vectors
    and are excluded from pooling, so padding beyond the window reach of
    the real tokens cannot change the output.
    """
    if len(feats) == 0:
        raise EncoderError("cannot encode an empty token sequence")
    real = feats.word_ids != PAD_ID
    if not real.any():
        raise EncoderError("cannot encode a sequence of only pad tokens")
    vw = nm.gather_rows(tape, word_emb.value, feats.word_ids)
    vp1 = nm.gather_rows(tape, pos_emb.value, feats.e1_offsets)
    vp2 = nm.gather_rows(tape, pos_emb.value, feats.e2_offsets)
    v = nm.concat_cols(tape, [vw, vp1, vp2])
    if not real.all():
        v = nm.mul_elem(tape, v, real[:, None].astype(np.float64))
    z = nm.window_concat(tape, v, window)
    h = nm.tanh(tape, nm.add_rowvec(tape, nm.matmul(tape, z, kernel.value), bias.value))
    return nm.max_over_time(tape, h, row_mask=real)


# ---------------------------------------------------------------------------
# Pretrained word embeddings (text format: header "vocab_size dim",
# then one token plus dim reals per line).
# ---------------------------------------------------------------------------


def load_pretrained_embeddings(path) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        parts = header.split()
        if len(parts) != 2:
            raise EncoderError(f"{path}:1: expected header 'vocab_size dim'")
        try:
            count, dim = int(parts[0]), int(parts[1])
        except ValueError:
            raise EncoderError(f"{path}:1: non-integer header fields") from None
        tokens: list[str] = []
        rows: list[list[float]] = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != dim + 1:
                raise EncoderError(
                    f"{path}:{lineno}: expected token plus {dim} values, got {len(fields)} fields"
                )
            tokens.append(fields[0])
            try:
                rows.append([float(x) for x in fields[1:]])
            except ValueError:
                raise EncoderError(f"{path}:{lineno}: non-numeric embedding value") from None
    if len(tokens) != count:
        raise EncoderError(f"{path}: header promised {count} rows, found {len(tokens)}")
    return tokens, np.array(rows, dtype=np.float64)


def apply_pretrained_embeddings(word_emb: ParamSlot, vocab: Vocab, path) -> int:
    """Overwrite embedding rows for vocabulary tokens found in the file."""
    tokens, matrix = load_pretrained_embeddings(path)
    if matrix.shape[1] != word_emb.value.data.shape[1]:
        raise EncoderError(
            f"pretrained dimension {matrix.shape[1]} does not match "
            f"model dimension {word_emb.value.data.shape[1]}"
        )
    hits = 0
    for tok, row in zip(tokens, matrix):
        tid = vocab.token_to_id.get(tok)
        if tid is not None and tid != PAD_ID:
            word_emb.value.data[tid] = row
            hits += 1
    return hits
