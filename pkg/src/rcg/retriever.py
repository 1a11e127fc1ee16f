"""Cross-modal bi-encoders: sentences and videos meet in one embedding space.

The textual side runs tokens through a bi-directional recurrence and
aggregates; the visual side projects appearance/motion features and
aggregates per modality.  Similarity is the average of the two modality
cosines, so scores live in [-1, 1].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (AdditiveAttention, LstmCell, Module,
                     MultiplicativeAggregator, bilstm_encode, embed)
from .tensor import Parameter, Tensor, apply, constant, xavier_uniform

MODALITIES = ("both", "appearance", "motion")


@dataclass(frozen=True)
class RetrieverConfig:
    vocab_size: int
    appearance_dim: int
    motion_dim: int
    word_dim: int = 300
    embed_dim: int = 1024          # joint embedding size
    modality: str = "both"

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")


class TextualEncoder(Module):
    def __init__(self, rng, config, dtype=np.float32):
        d = config.embed_dim
        self.w_s = Parameter("w_s", xavier_uniform(rng, (config.vocab_size, config.word_dim), dtype))
        self.fwd = LstmCell(rng, config.word_dim, d, dtype, name="fwd")
        self.bwd = LstmCell(rng, config.word_dim, d, dtype, name="bwd")
        self.agg = MultiplicativeAggregator(rng, d, dtype, name="v_s")

    def encode(self, token_ids, mask):
        """(B, L) int ids + mask -> (B, d) sentence embeddings."""
        token_ids = np.asarray(token_ids, dtype=np.int64)
        if token_ids.ndim != 2 or token_ids.shape[1] < 1:
            raise ValueError("encode expects a non-empty (B, L) id batch")
        words = embed(self.w_s, token_ids)
        states = bilstm_encode(self.fwd, self.bwd, words, mask)
        return self.agg(states, mask)


class VisualEncoder(Module):
    def __init__(self, rng, config, dtype=np.float32):
        d = config.embed_dim
        self.w_app = Parameter("w_app", xavier_uniform(rng, (config.appearance_dim, d), dtype))
        self.b_app = Parameter("b_app", np.zeros(d, dtype=dtype))
        self.w_mot = Parameter("w_mot", xavier_uniform(rng, (config.motion_dim, d), dtype))
        self.b_mot = Parameter("b_mot", np.zeros(d, dtype=dtype))
        self.agg_app = MultiplicativeAggregator(rng, d, dtype, name="v_a")
        self.agg_mot = MultiplicativeAggregator(rng, d, dtype, name="v_m")

    def encode(self, appearance, motion):
        """(B, K, d_a) and (B, K, d_m) -> appearance/motion embeddings (B, d)."""
        if appearance is None or motion is None:
            raise ValueError("both appearance and motion features are required")
        if appearance.shape[1] < 1:
            raise ValueError("need at least one frame")
        B, K = appearance.shape[0], appearance.shape[1]
        mask = np.ones((B, K), dtype=bool)
        app = apply("add", apply("matmul", appearance, self.w_app), self.b_app)
        mot = apply("add", apply("matmul", motion, self.w_mot), self.b_mot)
        return self.agg_app(app, mask), self.agg_mot(mot, mask)


class BiEncoderRetriever(Module):
    def __init__(self, rng, config, dtype=np.float32):
        self.config = config
        self.textual = TextualEncoder(rng, config, dtype)
        self.visual = VisualEncoder(rng, config, dtype)

    def encode_sentences(self, token_ids, mask):
        return self.textual.encode(token_ids, mask)

    def encode_videos(self, appearance, motion):
        return self.visual.encode(appearance, motion)

    def video_query(self, e_app, e_mot):
        """Normalized query vector: rows score Eq.-style against unit text rows."""
        na = apply("l2-normalize-last-axis", e_app)
        nm = apply("l2-normalize-last-axis", e_mot)
        if self.config.modality == "appearance":
            return na
        if self.config.modality == "motion":
            return nm
        half = constant(0.5, na.dtype)
        return apply("mul", apply("add", nm, na), half)

    def similarity_matrix(self, text_emb, e_app, e_mot):
        """S[i, j] = similarity(video i, sentence j), shape (B, B)."""
        q = self.video_query(e_app, e_mot)
        z = apply("l2-normalize-last-axis", text_emb)
        return apply("matmul", q, apply("transpose", z))


def similarity(e_w, e_m, e_a):
    """Average of motion and appearance cosines for one triple of vectors."""
    for name, vec in (("sentence", e_w), ("motion", e_m), ("appearance", e_a)):
        arr = vec.data if isinstance(vec, Tensor) else np.asarray(vec)
        if np.linalg.norm(arr) == 0.0:
            raise ValueError(f"zero {name} embedding")
    w = np.asarray(e_w.data if isinstance(e_w, Tensor) else e_w, dtype=np.float64)
    m = np.asarray(e_m.data if isinstance(e_m, Tensor) else e_m, dtype=np.float64)
    a = np.asarray(e_a.data if isinstance(e_a, Tensor) else e_a, dtype=np.float64)
    w /= np.linalg.norm(w)
    m /= np.linalg.norm(m)
    a /= np.linalg.norm(a)
    return float(w @ (m + a) / 2.0)


def ranking_loss(sim_matrix, margin=0.2, video_ids=None, hardest=True):
    """Bidirectional hinge on in-batch negatives, mean over positive pairs.

    With hardest=True only the most violating negative per direction counts;
    hardest=False sums over all negatives.  Pairs that share a video id are
    never treated as negatives of each other.
    """
    B = sim_matrix.shape[0]
    if sim_matrix.shape != (B, B):
        raise ValueError(f"similarity matrix must be square, got {sim_matrix.shape}")
    if B < 2:
        raise ValueError("need a batch of at least 2 for in-batch negatives")
    skip = np.eye(B, dtype=bool)
    if video_ids is not None:
        video_ids = np.asarray(video_ids)
        skip |= video_ids[:, None] == video_ids[None, :]
    dtype = sim_matrix.dtype
    diag = apply("gather-last", sim_matrix, ids=np.arange(B))
    margin_t = constant(margin, dtype)
    cols = apply("transpose", sim_matrix)
    if hardest:
        row_max = apply("max-last-axis", apply("masked-fill", sim_matrix, mask=skip, value=-1e9))
        col_max = apply("max-last-axis", apply("masked-fill", cols, mask=skip.T, value=-1e9))
        row_term = apply("relu", apply("add", margin_t, apply("sub", row_max, diag)))
        col_term = apply("relu", apply("add", margin_t, apply("sub", col_max, diag)))
        return apply("mean", apply("add", row_term, col_term))
    B1 = (B, 1)
    row_h = apply("relu", apply("add", margin_t,
                                apply("sub", sim_matrix, apply("reshape", diag, shape=B1))))
    col_h = apply("relu", apply("add", margin_t,
                                apply("sub", cols, apply("reshape", diag, shape=B1))))
    row_h = apply("masked-fill", row_h, mask=skip, value=0.0)
    col_h = apply("masked-fill", col_h, mask=skip.T, value=0.0)
    total = apply("add", apply("sum", row_h, axis=-1), apply("sum", col_h, axis=-1))
    return apply("mean", total)


def encode_sentence(encoder, tokens, vocab):
    """One sentence -> one embedding vector (inference convenience)."""
    if not tokens:
        raise ValueError("empty sentence")
    ids = np.asarray([vocab.encode(tokens)], dtype=np.int64)
    mask = np.ones_like(ids, dtype=bool)
    return encoder.encode(ids, mask)


def encode_video(encoder, appearance, motion, dtype=np.float32):
    """One video's raw feature arrays -> (appearance, motion) embeddings."""
    app = constant(np.asarray(appearance, dtype=dtype)[None, ...], dtype)
    mot = constant(np.asarray(motion, dtype=dtype)[None, ...], dtype)
    return encoder.encode(app, mot)
