"""Offline sentence-embedding index: exact top-k search with exclusion.

Index file ("RCGI1"): magic, u32 N, u32 d, sentence ids u64[N], video ids
u64[N], row-major f32 embeddings, 32-byte fingerprint.  The fingerprint is
sha256(corpus digest || encoder parameter digest), so an index can be
verified against the retriever checkpoint that produced it.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

INDEX_MAGIC = b"RCGI1"


@dataclass(frozen=True)
class RetrievedSet:
    """Top-k sentences for one query with similarities and probabilities."""
    query_video_id: int
    sentence_ids: tuple
    video_ids: tuple
    similarities: np.ndarray
    probabilities: np.ndarray
    tokens: tuple = ()

    def __post_init__(self):
        sims = np.asarray(self.similarities)
        if len(self.sentence_ids) != sims.shape[0]:
            raise ValueError("entry count mismatch")
        if np.any(np.diff(sims) > 1e-7):
            raise ValueError("similarities must be non-increasing")
        if abs(float(np.asarray(self.probabilities).sum()) - 1.0) > 1e-6:
            raise ValueError("probabilities must sum to 1")

    @property
    def k(self):
        return len(self.sentence_ids)


@dataclass
class EmbeddingIndex:
    embeddings: np.ndarray       # (N, d) unit rows, float32
    sentence_ids: np.ndarray     # (N,) int64
    video_ids: np.ndarray        # (N,) int64
    fingerprint: bytes
    tokens: list | None = None   # per-row token tuples (not serialized)

    def __post_init__(self):
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-5):
            raise ValueError("index rows must be unit-normalized")
        if len(set(self.sentence_ids.tolist())) != len(self.sentence_ids):
            raise ValueError("sentence ids must be unique")

    @property
    def size(self):
        return self.embeddings.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[1]


def params_digest(named_arrays):
    """Stable sha256 over parameter names, shapes, and raw bytes."""
    h = hashlib.sha256()
    for name in sorted(named_arrays):
        arr = np.ascontiguousarray(named_arrays[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.digest()


def corpus_digest(corpus):
    h = hashlib.sha256()
    for s in corpus:
        h.update(f"{s.sentence_id}:{s.video_id}:{' '.join(s.tokens)}\n".encode())
    return h.digest()


def build_index(retriever, corpus, vocab, batch_size=128):
    """Encode every corpus sentence offline; deterministic given weights."""
    if not corpus:
        raise ValueError("corpus is empty")
    rows = []
    for start in range(0, len(corpus), batch_size):
        chunk = corpus[start:start + batch_size]
        max_len = max(len(s.tokens) for s in chunk)
        ids = np.zeros((len(chunk), max_len), dtype=np.int64)
        mask = np.zeros((len(chunk), max_len), dtype=bool)
        for i, s in enumerate(chunk):
            if not s.tokens:
                raise ValueError(f"sentence {s.sentence_id} is empty")
            enc = vocab.encode(list(s.tokens))
            ids[i, :len(enc)] = enc
            mask[i, :len(enc)] = True
        try:
            emb = retriever.textual.encode(ids, mask).data
        except Exception as e:
            raise RuntimeError(
                f"encoding failed around sentence {chunk[0].sentence_id}: {e}") from e
        rows.append(emb.astype(np.float32))
    emb = np.concatenate(rows, axis=0)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        bad = corpus[int(np.argmin(norms))].sentence_id
        raise RuntimeError(f"sentence {bad} encoded to a zero vector")
    emb = emb / norms
    fingerprint = hashlib.sha256(
        corpus_digest(corpus) + params_digest(retriever.export_arrays())).digest()
    return EmbeddingIndex(
        embeddings=emb,
        sentence_ids=np.array([s.sentence_id for s in corpus], dtype=np.int64),
        video_ids=np.array([s.video_id for s in corpus], dtype=np.int64),
        fingerprint=fingerprint,
        tokens=[s.tokens for s in corpus])


def save_index(path, index):
    with open(path, "wb") as f:
        f.write(INDEX_MAGIC)
        f.write(struct.pack("<II", index.size, index.dim))
        f.write(index.sentence_ids.astype("<u8").tobytes())
        f.write(index.video_ids.astype("<u8").tobytes())
        f.write(np.ascontiguousarray(index.embeddings, dtype="<f4").tobytes())
        f.write(index.fingerprint)


def load_index(path):
    with open(path, "rb") as f:
        magic = f.read(len(INDEX_MAGIC))
        if magic != INDEX_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        n, d = struct.unpack("<II", f.read(8))
        sentence_ids = np.frombuffer(f.read(8 * n), dtype="<u8").astype(np.int64)
        video_ids = np.frombuffer(f.read(8 * n), dtype="<u8").astype(np.int64)
        emb = np.frombuffer(f.read(4 * n * d), dtype="<f4").reshape(n, d).copy()
        fingerprint = f.read(32)
        if len(fingerprint) != 32:
            raise ValueError(f"{path}: truncated fingerprint")
    return EmbeddingIndex(emb, sentence_ids, video_ids, fingerprint)


def combine_query(e_m, e_a):
    """Eq.-style query vector: average of the normalized modality embeddings."""
    m = np.asarray(e_m, dtype=np.float64).reshape(-1)
    a = np.asarray(e_a, dtype=np.float64).reshape(-1)
    nm, na = np.linalg.norm(m), np.linalg.norm(a)
    if nm == 0.0 or na == 0.0:
        raise ValueError("zero query embedding")
    return ((m / nm + a / na) / 2.0).astype(np.float32)


def _eligible(index, exclude_video_id):
    if exclude_video_id is None:
        return np.ones(index.size, dtype=bool)
    return index.video_ids != exclude_video_id


def _ranked_order(scores, sentence_ids, eligible):
    idx = np.nonzero(eligible)[0]
    order = np.lexsort((sentence_ids[idx], -scores[idx]))
    return idx[order]


def topk_search(index, query_embeds, k, exclude_video_id=None, temperature=1.0):
    """Exact top-k by inner product; ties break by ascending sentence id.

    query_embeds is either a (motion, appearance) embedding pair or an
    already-combined query vector.  Sentences owned by exclude_video_id are
    removed before ranking.
    """
    if isinstance(query_embeds, tuple):
        q = combine_query(*query_embeds)
    else:
        q = np.asarray(query_embeds, dtype=np.float32).reshape(-1)
    eligible = _eligible(index, exclude_video_id)
    n_eligible = int(eligible.sum())
    if k < 1 or k > n_eligible:
        raise ValueError(f"k={k} outside [1, {n_eligible}] eligible sentences")
    scores = index.embeddings @ q
    order = _ranked_order(scores.astype(np.float64), index.sentence_ids, eligible)[:k]
    sims = scores[order].astype(np.float64)
    return RetrievedSet(
        query_video_id=exclude_video_id if exclude_video_id is not None else -1,
        sentence_ids=tuple(int(i) for i in index.sentence_ids[order]),
        video_ids=tuple(int(i) for i in index.video_ids[order]),
        similarities=sims,
        probabilities=retrieval_probs(sims, temperature),
        tokens=tuple(index.tokens[i] for i in order) if index.tokens else ())


def rank_all(index, query_embeds, exclude_video_id=None):
    """Full eligible ranking (sentence ids best-first) for retrieval metrics."""
    if isinstance(query_embeds, tuple):
        q = combine_query(*query_embeds)
    else:
        q = np.asarray(query_embeds, dtype=np.float32).reshape(-1)
    eligible = _eligible(index, exclude_video_id)
    scores = index.embeddings @ q
    order = _ranked_order(scores.astype(np.float64), index.sentence_ids, eligible)
    return [int(i) for i in index.sentence_ids[order]]


def retrieval_probs(similarities, temperature=1.0):
    """Softmax over the retained top-k similarities (no temperature by default)."""
    sims = np.asarray(similarities, dtype=np.float64)
    if sims.ndim != 1 or sims.size < 1:
        raise ValueError("similarities must be a non-empty vector")
    z = sims / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


def retrieval_metrics(ranked_lists, truths):
    """R@K, median rank (lower median), and mean rank over queries.

    ranked_lists[i] holds candidate ids best-first; truths[i] is the set of
    correct ids for query i.  The rank of a query is the best position of
    any correct target, 1-based.
    """
    if len(ranked_lists) != len(truths):
        raise ValueError("ranked_lists and truths must align")
    ranks = []
    for qi, (ranking, truth) in enumerate(zip(ranked_lists, truths)):
        positions = [pos + 1 for pos, cand in enumerate(ranking) if cand in truth]
        if not positions:
            raise ValueError(f"query {qi} has no correct target in the candidate pool")
        ranks.append(min(positions))
    ranks = np.asarray(ranks, dtype=np.float64)
    ranks_sorted = np.sort(ranks)
    medr = float(ranks_sorted[(len(ranks) - 1) // 2])
    return {
        "r_at": {str(k): float((ranks <= k).mean()) for k in (1, 5, 10)},
        "medr": medr,
        "mnr": float(ranks.mean()),
    }
