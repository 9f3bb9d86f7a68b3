"""Bag-level attention over evidence, classification, and the joint loss.

Each bag is encoded twice: sentence evidences and path evidences are
run through their CNN encoders, pooled with selective attention whose
query is the entity pair's latent relation embedding, and the pooled
blocks are concatenated into the relation classifier. In ranking mode
two extra blocks attend within the most-complex and least-complex path
groups, which keeps gradient flowing to paths whose global attention
weight underflows.

The loss couples the text-side log likelihood with the KG-side softmax
over relation scores, averaged over the batch. By default the latent
relation embedding enters attention as a constant (the two objectives
are optimized in parallel); ``rht_grad=True`` routes attention gradients
into the entity table as well, which is what the gradient checker uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import complexity as cx
from . import encoders as enc
from . import numerics as nm
from .data_io import Bag
from .encoders import KGParams, NetParams, TokenFeatures, Vocab
from .numerics import ParamSlot, Tensor

MODES = ("base", "ranking")


class ModelError(ValueError):
    pass


class EmptyBagError(ModelError):
    pass


@dataclass
class ModelConfig:
    mode: str = "base"
    word_dim: int = 50
    pos_dim: int = 5
    kg_dim: int = 50
    filters: int = 100
    window: int = 3
    maxdist: int = 30
    dropout: float = 0.5
    j: int = 50
    lambda1: float = 1.0
    lambda2: float = 1.0
    norm: str = "l2"
    b: float = 7.0
    rht_grad: bool = False

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ModelError(f"unknown mode {self.mode!r} (expected one of {MODES})")
        if self.j < 1:
            raise ModelError(f"group size j must be >= 1, got {self.j}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def blocks(self) -> int:
        return 2 if self.mode == "base" else 4

    def complexity_weights(self) -> cx.ComplexityWeights:
        return cx.ComplexityWeights(self.lambda1, self.lambda2)


class Model:
    """Parameters plus the vocabulary and pair/relation indexing."""

    def __init__(
        self,
        cfg: ModelConfig,
        vocab: Vocab,
        relations: list[str],
        kg: KGParams,
        net: NetParams,
    ):
        self.cfg = cfg
        self.vocab = vocab
        self.relations = list(relations)
        self.relation_index = {r: i for i, r in enumerate(self.relations)}
        self.kg = kg
        self.net = net
        self._feat_cache: dict = {}

    def slots(self) -> list[ParamSlot]:
        return self.kg.slots() + self.net.slots()

    def relation_idx(self, rel: str) -> int:
        try:
            return self.relation_index[rel]
        except KeyError:
            raise ModelError(f"relation {rel!r} outside the vocabulary") from None

    def features(self, evidence) -> TokenFeatures:
        feats = self._feat_cache.get(evidence)
        if feats is None:
            if hasattr(evidence, "pos1"):
                e1_pos, e2_pos = evidence.pos1, evidence.pos2
            else:
                e1_pos, e2_pos = evidence.e1_pos, evidence.e2_pos
            feats = enc.featurize(
                evidence.tokens, e1_pos, e2_pos, self.cfg.maxdist, self.vocab
            )
            self._feat_cache[evidence] = feats
        return feats


def build_model(
    cfg: ModelConfig,
    entity_ids,
    relations,
    vocab: Vocab,
    rng: np.random.Generator,
) -> Model:
    """Initialize all parameter tables in a fixed draw order."""
    kg = enc.init_kg_params(
        entity_ids, relations, cfg.kg_dim, cfg.b, cfg.norm, rng
    )
    net = enc.init_net_params(
        vocab_size=len(vocab),
        n_relations=len(list(relations)),
        word_dim=cfg.word_dim,
        pos_dim=cfg.pos_dim,
        kg_dim=cfg.kg_dim,
        filters=cfg.filters,
        window=cfg.window,
        maxdist=cfg.maxdist,
        mode=cfg.mode,
        rng=rng,
    )
    return Model(cfg, vocab, list(relations), kg, net)


@dataclass
class BagForward:
    """Everything one bag forward produces, for loss and diagnostics."""

    sentence_rep: Tensor
    path_rep: Tensor
    complex_rep: Tensor | None
    simple_rep: Tensor | None
    sentence_weights: np.ndarray | None
    path_weights: np.ndarray | None
    complex_weights: np.ndarray | None
    simple_weights: np.ndarray | None
    complex_group: list[int] | None
    simple_group: list[int] | None
    scores: Tensor
    class_log_probs: Tensor
    kg_log_probs: Tensor

    @property
    def class_probs(self) -> np.ndarray:
        return np.exp(self.class_log_probs.data)


def bag_attention(
    tape,
    item_vecs: list[Tensor],
    r_ht: Tensor,
    attn_w: ParamSlot,
    attn_b: ParamSlot,
) -> tuple[Tensor, Tensor]:
    """Selective attention: weights softmax(<r_ht, tanh(W v + b)>) over items."""
    if not item_vecs:
        raise EmptyBagError("attention over an empty bag")
    stacked = nm.stack_rows(tape, item_vecs)
    proj = nm.matmul(tape, stacked, nm.transpose(tape, attn_w.value))
    hidden = nm.tanh(tape, nm.add_rowvec(tape, proj, attn_b.value))
    logits = nm.matvec(tape, hidden, r_ht)
    weights = nm.softmax(tape, logits)
    pooled = nm.vecmat(tape, weights, stacked)
    return pooled, weights


def complexity_guided_reps(
    tape,
    path_vecs: list[Tensor],
    groups: tuple[list[int], list[int]],
    r_ht: Tensor,
    attn_w: ParamSlot,
    attn_b: ParamSlot,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Within-group attention for the complex and simple path subsets."""
    complex_idx, simple_idx = groups
    if not complex_idx or not simple_idx:
        raise EmptyBagError("complexity groups must be non-empty")
    p_complex, w_complex = bag_attention(
        tape, [path_vecs[i] for i in complex_idx], r_ht, attn_w, attn_b
    )
    p_simple, w_simple = bag_attention(
        tape, [path_vecs[i] for i in simple_idx], r_ht, attn_w, attn_b
    )
    return p_complex, p_simple, w_complex, w_simple


def classify(tape, blocks: list[Tensor], class_w: ParamSlot, class_b: ParamSlot) -> Tensor:
    """Concatenate representation blocks and score every relation."""
    cat = nm.concat(tape, blocks)
    if class_w.value.data.shape[1] != cat.data.shape[0]:
        raise nm.ShapeError(
            f"classifier expects input of width {class_w.value.data.shape[1]}, "
            f"got {cat.data.shape[0]}"
        )
    return nm.add(tape, nm.matvec(tape, class_w.value, cat), class_b.value)


def _dropout_mask(rng: np.random.Generator, size: int, rate: float) -> np.ndarray:
    keep = 1.0 - rate
    return (rng.random(size) < keep).astype(np.float64) / keep


def forward_bag(
    tape,
    model: Model,
    bag: Bag,
    dropout_rng: np.random.Generator | None = None,
    path_type_counter: dict | None = None,
) -> BagForward:
    """Encode one bag end to end.

    ``dropout_rng`` enables inverted dropout on the pooled blocks
    (training); pass None for deterministic evaluation. The counter, if
    given, tallies the path types that enter this forward pass.
    """
    cfg = model.cfg
    net = model.net
    rht_node = enc.latent_relation_node(tape, bag.e1, bag.e2, model.kg)
    if cfg.rht_grad:
        rht_att = rht_node
    else:
        rht_att = Tensor(rht_node.data.copy())

    zero = lambda: Tensor(np.zeros(cfg.filters))

    sent_vecs = [
        enc.cnn_max(
            tape, model.features(s), net.word_emb, net.pos_emb,
            net.conv_sent_w, net.conv_sent_b, cfg.window,
        )
        for s in bag.sentences
    ]
    if sent_vecs:
        s_all, s_w = bag_attention(tape, sent_vecs, rht_att, net.attn_w, net.attn_b)
        sent_weights = s_w.data
    else:
        s_all, sent_weights = zero(), None

    if path_type_counter is not None:
        for p in bag.paths:
            path_type_counter[p.path_type] = path_type_counter.get(p.path_type, 0) + 1

    path_vecs = [
        enc.cnn_max(
            tape, model.features(p), net.word_emb, net.pos_emb,
            net.conv_path_w, net.conv_path_b, cfg.window,
        )
        for p in bag.paths
    ]
    if path_vecs:
        p_all, p_w = bag_attention(tape, path_vecs, rht_att, net.attn_w, net.attn_b)
        path_weights = p_w.data
    else:
        p_all, path_weights = zero(), None

    complex_rep = simple_rep = None
    complex_weights = simple_weights = None
    complex_group = simple_group = None
    if cfg.mode == "ranking":
        if path_vecs:
            groups = cx.rank_and_group(bag.paths, cfg.j, cfg.complexity_weights())
            complex_group, simple_group = groups
            complex_rep, simple_rep, w_c, w_s = complexity_guided_reps(
                tape, path_vecs, groups, rht_att, net.attn_w, net.attn_b
            )
            complex_weights, simple_weights = w_c.data, w_s.data
        else:
            complex_rep, simple_rep = zero(), zero()

    blocks = [s_all, p_all]
    if cfg.mode == "ranking":
        blocks += [complex_rep, simple_rep]
    if dropout_rng is not None and cfg.dropout > 0.0:
        blocks = [
            nm.mul_elem(tape, blk, _dropout_mask(dropout_rng, cfg.filters, cfg.dropout))
            for blk in blocks
        ]

    scores = classify(tape, blocks, net.class_w, net.class_b)
    class_log_probs = nm.log_softmax(tape, scores)
    kg_log_probs = enc.kg_log_probs_node(tape, rht_node, model.kg)
    return BagForward(
        sentence_rep=s_all,
        path_rep=p_all,
        complex_rep=complex_rep,
        simple_rep=simple_rep,
        sentence_weights=sent_weights,
        path_weights=path_weights,
        complex_weights=complex_weights,
        simple_weights=simple_weights,
        complex_group=complex_group,
        simple_group=simple_group,
        scores=scores,
        class_log_probs=class_log_probs,
        kg_log_probs=kg_log_probs,
    )


def joint_loss(
    tape,
    bags: list[Bag],
    model: Model,
    dropout_rng: np.random.Generator | None = None,
    path_type_counter: dict | None = None,
) -> tuple[Tensor, list[BagForward]]:
    """Mean over bags of -(KG log prob + classification log prob) at the label."""
    if not bags:
        raise EmptyBagError("joint loss needs at least one bag")
    total = None
    forwards = []
    for bag in bags:
        fwd = forward_bag(
            tape, model, bag,
            dropout_rng=dropout_rng,
            path_type_counter=path_type_counter,
        )
        forwards.append(fwd)
        ridx = model.relation_idx(bag.label)
        ll = nm.add(
            tape,
            nm.pick(tape, fwd.kg_log_probs, ridx),
            nm.pick(tape, fwd.class_log_probs, ridx),
        )
        total = ll if total is None else nm.add(tape, total, ll)
    loss = nm.scale(tape, total, -1.0 / len(bags))
    return loss, forwards


def make_loss_fn(model: Model, bags: list[Bag]):
    """Deterministic closure for the finite-difference harness.

    Zeroes grads, runs forward and backward with dropout off, returns
    the loss value.
    """
    def loss_fn() -> float:
        nm.zero_grads(model.slots())
        tape = nm.Tape()
        loss, _ = joint_loss(tape, bags, model, dropout_rng=None)
        tape.backward(loss)
        return loss.item()

    return loss_fn
