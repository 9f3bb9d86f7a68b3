"""Shared builders for model-level tests."""

import numpy as np

from ugre.attention_model import ModelConfig, build_model
from ugre.data_io import Bag, PathEvidence, SentenceEvidence
from ugre.encoders import Vocab


def toy_model(mode="base", seed=0, **cfg_kwargs):
    """A tiny two-entity model over a fixed vocabulary."""
    defaults = dict(
        mode=mode,
        word_dim=3,
        pos_dim=2,
        kg_dim=4,
        filters=3,
        window=3,
        maxdist=4,
        dropout=0.0,
        j=1,
        b=2.0,
    )
    defaults.update(cfg_kwargs)
    cfg = ModelConfig(**defaults)
    vocab = Vocab(
        ["s1", "s2", "ps", "m1", "m2", "c1", "c2", "c3", "c4", "c5", "x1", "x2"]
    )
    model = build_model(
        cfg, ["A", "B"], ["NA", "linked"], vocab, np.random.default_rng(seed)
    )
    return model


def path_of(tokens, ptype="KG"):
    toks = tuple(tokens)
    return PathEvidence(
        tokens=toks,
        path_type=ptype,
        num_tokens=len(toks),
        num_token_types=len(set(toks)),
        e1_pos=0,
        e2_pos=len(toks) - 1,
    )


def underflow_setup(mode):
    """A bag whose most complex path gets exactly zero global attention.

    The entity pair's latent relation vector is huge, path encodings are
    driven to opposite signs, and the resulting attention logit gap is
    far beyond the float64 exponent range, so the complex path's global
    softmax weight underflows to 0.0. Its tokens (c1..c5) are unique, so
    gradient reaching the word embedding rows of those tokens can only
    come through the path itself.
    """
    model = toy_model(mode=mode, seed=3)
    kg = model.kg
    net = model.net
    scale = 1e4
    kg.entity_emb.value.data[kg.eidx("A")] = 0.0
    kg.entity_emb.value.data[kg.eidx("B")] = scale

    vocab = model.vocab
    for tok in ("ps", "m1", "m2"):
        net.word_emb.value.data[vocab.lookup(tok)] = 0.5
    complex_tokens = ("c1", "c2", "c3", "c4", "c5")
    for tok in complex_tokens:
        net.word_emb.value.data[vocab.lookup(tok)] = -0.5
    net.pos_emb.value.data[:] = 0.0
    net.conv_path_w.value.data[:] = 0.6
    net.conv_path_b.value.data[:] = 0.0
    net.attn_w.value.data[:] = 1.0
    net.attn_b.value.data[:] = 0.0
    rng = np.random.default_rng(9)
    net.class_w.value.data[:] = rng.normal(scale=0.3, size=net.class_w.value.shape)
    net.class_b.value.data[:] = 0.0

    bag = Bag(
        e1="A",
        e2="B",
        label="linked",
        sentences=[SentenceEvidence(("s1", "s2"), 0, 1)],
        paths=[
            path_of(("ps",)),
            path_of(("m1", "m2")),
            path_of(complex_tokens),
        ],
    )
    complex_row_ids = [vocab.lookup(t) for t in complex_tokens]
    return model, bag, complex_row_ids
