"""Data model, file formats, tokenizer/vocabulary, and synthetic datasets.

On-disk layout of a dataset directory:
    features/<video_id>.rct   two tensors per video (appearance, motion),
                              each stored as: magic "RCT1", u32 rank,
                              u32 dims[], f32 little-endian payload
    captions.jsonl            lines {"video_id": int, "caption": str}
    splits.json               {"train": [...], "val": [...], "test": [...]}
    clusters.json             optional {"<video_id>": cluster_id}; written by
                              the synthetic generator, used for cluster-level
                              retrieval ground truth
"""
from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RCT_MAGIC = b"RCT1"

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

MAX_SENTENCE_TOKENS = 40

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class DataError(Exception):
    """Raised for malformed or inconsistent dataset files."""


def tokenize(text):
    """Lowercase, split on word/punctuation boundaries, truncate at 40 tokens."""
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        raise DataError(f"caption empty after tokenization: {text!r}")
    return tokens[:MAX_SENTENCE_TOKENS]


class Vocabulary:
    """Bijective token<->id map with fixed specials PAD=0 BOS=1 EOS=2 UNK=3."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        if self.tokens[:4] != list(SPECIAL_TOKENS):
            raise ValueError("vocabulary must start with the special tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def encode(self, tokens):
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def to_json(self):
        return {"tokens": self.tokens}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["tokens"])


def build_vocab(captions, min_freq=1):
    """Tokens with frequency >= min_freq, ordered by descending frequency.

    Ties break alphabetically so the mapping is deterministic.
    """
    if not captions:
        raise DataError("cannot build a vocabulary from an empty caption set")
    counts = {}
    for caption in captions:
        for token in caption:
            counts[token] = counts.get(token, 0) + 1
    kept = sorted((t for t, c in counts.items() if c >= min_freq),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIAL_TOKENS) + kept)


# ---------------------------------------------------------------------------
# feature container
# ---------------------------------------------------------------------------

def write_tensors(path, arrays):
    """Write a sequence of f32 tensors back-to-back in RCT1 blocks."""
    with open(path, "wb") as f:
        for arr in arrays:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            f.write(RCT_MAGIC)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.tobytes())


def read_tensors(path):
    arrays = []
    with open(path, "rb") as f:
        while True:
            magic = f.read(len(RCT_MAGIC))
            if not magic:
                break
            if magic != RCT_MAGIC:
                raise DataError(f"{path}: bad magic {magic!r}")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            payload = f.read(4 * n)
            if len(payload) != 4 * n:
                raise DataError(f"{path}: truncated tensor payload")
            arrays.append(np.frombuffer(payload, dtype="<f4").reshape(dims).copy())
    if not arrays:
        raise DataError(f"{path}: no tensors found")
    return arrays


# ---------------------------------------------------------------------------
# dataset model
# ---------------------------------------------------------------------------

@dataclass
class VideoRecord:
    video_id: int
    appearance: np.ndarray      # (K, d_a) float32
    motion: np.ndarray          # (K, d_m) float32
    captions: list              # list of token lists

    def validate(self):
        if self.appearance.ndim != 2 or self.motion.ndim != 2:
            raise DataError(f"video {self.video_id}: features must be rank 2")
        if self.appearance.shape[0] != self.motion.shape[0]:
            raise DataError(f"video {self.video_id}: frame counts differ")
        if self.appearance.shape[0] < 1:
            raise DataError(f"video {self.video_id}: needs at least one frame")
        if not self.captions:
            raise DataError(f"video {self.video_id}: has no captions")
        if not (np.isfinite(self.appearance).all() and np.isfinite(self.motion).all()):
            raise DataError(f"video {self.video_id}: non-finite features")


@dataclass
class Dataset:
    records: dict
    splits: dict
    clusters: dict | None = None

    def videos(self, split):
        return [self.records[vid] for vid in self.splits[split]]

    def all_caption_tokens(self, split="train"):
        out = []
        for vid in self.splits[split]:
            out.extend(self.records[vid].captions)
        return out


@dataclass(frozen=True)
class CorpusSentence:
    sentence_id: int
    video_id: int
    tokens: tuple


def save_dataset(directory, records, splits, clusters=None):
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    for rec in records.values():
        write_tensors(directory / "features" / f"{rec.video_id}.rct",
                      [rec.appearance, rec.motion])
    with open(directory / "captions.jsonl", "w") as f:
        for vid in sorted(records):
            for caption in records[vid].captions:
                f.write(json.dumps({"video_id": vid, "caption": " ".join(caption)}) + "\n")
    with open(directory / "splits.json", "w") as f:
        json.dump(splits, f, indent=1)
    if clusters is not None:
        with open(directory / "clusters.json", "w") as f:
            json.dump({str(k): v for k, v in clusters.items()}, f, indent=1)


def load_dataset(directory):
    """Load and validate a dataset directory; feature dims must be uniform."""
    directory = Path(directory)
    try:
        with open(directory / "splits.json") as f:
            splits = json.load(f)
    except FileNotFoundError:
        raise DataError(f"{directory}: missing splits.json") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{directory}/splits.json: malformed JSON ({e})") from None

    captions = {}
    try:
        with open(directory / "captions.jsonl") as f:
            for line_no, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DataError(
                        f"{directory}/captions.jsonl:{line_no}: malformed JSON ({e})") from None
                captions.setdefault(int(obj["video_id"]), []).append(tokenize(obj["caption"]))
    except FileNotFoundError:
        raise DataError(f"{directory}: missing captions.jsonl") from None

    video_ids = sorted({vid for ids in splits.values() for vid in ids})
    unknown = sorted(set(captions) - set(video_ids))
    if unknown:
        raise DataError(f"captions.jsonl references unknown video_id {unknown[0]}")

    records, app_dim, mot_dim = {}, None, None
    for vid in video_ids:
        path = directory / "features" / f"{vid}.rct"
        if not path.exists():
            raise DataError(f"missing feature file {path}")
        tensors = read_tensors(path)
        if len(tensors) != 2:
            raise DataError(f"{path}: expected 2 tensors, found {len(tensors)}")
        appearance, motion = tensors
        if vid not in captions:
            raise DataError(f"video {vid} has no captions")
        rec = VideoRecord(vid, appearance, motion, captions[vid])
        rec.validate()
        if app_dim is None:
            app_dim, mot_dim = appearance.shape[1], motion.shape[1]
        elif (appearance.shape[1], motion.shape[1]) != (app_dim, mot_dim):
            raise DataError(
                f"video {vid}: feature dims {appearance.shape[1]}/{motion.shape[1]} "
                f"differ from dataset dims {app_dim}/{mot_dim}")
        records[vid] = rec

    clusters = None
    cluster_path = directory / "clusters.json"
    if cluster_path.exists():
        with open(cluster_path) as f:
            clusters = {int(k): v for k, v in json.load(f).items()}
    return Dataset(records=records, splits=splits, clusters=clusters)


# ---------------------------------------------------------------------------
# retrieval corpus views
# ---------------------------------------------------------------------------

def corpus_sentences(dataset, split):
    """Sentences of a split with globally stable sentence ids.

    Ids are assigned once over the whole dataset (sorted video id, caption
    index) so fraction/oracle views of the same dataset agree on ids.
    """
    sid_of = {}
    next_sid = 0
    for vid in sorted(dataset.records):
        for ci in range(len(dataset.records[vid].captions)):
            sid_of[(vid, ci)] = next_sid
            next_sid += 1
    out = []
    for vid in dataset.splits[split]:
        for ci, caption in enumerate(dataset.records[vid].captions):
            out.append(CorpusSentence(sid_of[(vid, ci)], vid, tuple(caption)))
    out.sort(key=lambda s: s.sentence_id)
    return out


def corpus_view(dataset, kind, seed=0):
    """Build a retrieval corpus: "train", "fraction:F", or "oracle"."""
    if kind == "train":
        view = corpus_sentences(dataset, "train")
    elif kind == "oracle":
        view = corpus_sentences(dataset, "train") + corpus_sentences(dataset, "test")
        view.sort(key=lambda s: s.sentence_id)
    elif kind.startswith("fraction:"):
        f = float(kind.split(":", 1)[1])
        if not 0.0 < f <= 1.0:
            raise ValueError(f"fraction must be in (0, 1], got {f}")
        full = corpus_sentences(dataset, "train")
        n = max(1, int(round(f * len(full))))
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(full), size=n, replace=False)
        view = [full[i] for i in sorted(picked)]
    else:
        raise ValueError(f"unknown corpus kind {kind!r}")
    if not view:
        raise DataError(f"corpus view {kind!r} is empty")
    return view


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Clustered videos with template captions; copying is learnable because
    captions inside a cluster share multi-token phrases."""
    clusters: int = 64
    videos_per_cluster: int = 16
    captions_per_video: int = 5
    frames: int = 8
    appearance_dim: int = 64
    motion_dim: int = 64
    bank_size: int = 8               # caption template bank per cluster
    noise: float = 0.08              # intra-cluster feature sigma
    min_caption_len: int = 6
    max_caption_len: int = 14
    val_per_cluster: int = 2
    test_per_cluster: int = 3
    seed: int = 0


_SYLLABLES = ["ba", "do", "fi", "gu", "ka", "lo", "mi", "nu", "pe", "ra",
              "so", "tu", "ve", "wa", "zo", "che", "dri", "ska", "plo", "tra"]


def _word_bank(rng, count, length=3):
    words, seen = [], set()
    while len(words) < count:
        w = "".join(rng.choice(_SYLLABLES) for _ in range(length))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _cluster_patterns(entity, idiom, locations):
    """Caption forms for one cluster; every form contains the cluster's
    entity and its three-token idiom, so captions share a multi-token phrase.
    The {m} slot is filled per caption, which keeps most captions distinct
    (exact duplicates still occur and are retained)."""
    i1, i2, i3 = idiom
    l1, l2 = locations
    return [
        lambda m: ["a", m, entity, i1, i2, i3],
        lambda m: ["the", entity, i1, i2, i3, "near", "the", l1, l2],
        lambda m: ["a", entity, i1, i2, i3, "with", "a", m],
        lambda m: ["the", m, entity, "is", i1, i2, i3],
        lambda m: ["a", m, entity, i1, i2, i3, "by", "the", l1, l2],
        lambda m: ["the", entity, i1, i2, i3, "while", "a", m, "watches"],
        lambda m: ["a", entity, "and", "a", m, i1, i2, i3],
        lambda m: ["the", entity, i1, i2, i3, "at", "the", l1, l2, "again"],
    ]


def generate_synthetic(spec, out_dir):
    """Write a synthetic clustered dataset to out_dir; deterministic per seed."""
    if spec.clusters < 2:
        raise ValueError("need at least 2 clusters so retrieval has distractors")
    if spec.val_per_cluster + spec.test_per_cluster >= spec.videos_per_cluster:
        raise ValueError("splits leave no training videos per cluster")
    rng = np.random.default_rng(spec.seed)

    n = spec.clusters
    entities = _word_bank(rng, n, length=3)
    idiom_words = _word_bank(rng, 3 * n, length=2)
    location_words = _word_bank(rng, 2 * n, length=3)
    modifier_pool = _word_bank(rng, 18, length=2)

    proto_app = rng.normal(size=(n, spec.appearance_dim))
    proto_mot = rng.normal(size=(n, spec.motion_dim))

    records, clusters = {}, {}
    split_lists = {"train": [], "val": [], "test": []}
    vid = 0
    for c in range(n):
        patterns = _cluster_patterns(entities[c], idiom_words[3 * c:3 * c + 3],
                                     location_words[2 * c:2 * c + 2])
        bank = patterns[:min(spec.bank_size, len(patterns))]
        roles = (["test"] * spec.test_per_cluster + ["val"] * spec.val_per_cluster
                 + ["train"] * (spec.videos_per_cluster - spec.test_per_cluster
                                - spec.val_per_cluster))
        order = rng.permutation(spec.videos_per_cluster)
        for slot in range(spec.videos_per_cluster):
            video_noise_a = rng.normal(size=spec.appearance_dim)
            video_noise_m = rng.normal(size=spec.motion_dim)
            frames_a = np.stack([
                proto_app[c] + spec.noise * (video_noise_a + 0.3 * rng.normal(size=spec.appearance_dim))
                for _ in range(spec.frames)])
            frames_m = np.stack([
                proto_mot[c] + spec.noise * (video_noise_m + 0.3 * rng.normal(size=spec.motion_dim))
                for _ in range(spec.frames)])
            captions = []
            for _ in range(spec.captions_per_video):
                form = bank[int(rng.integers(len(bank)))]
                caption = form(modifier_pool[int(rng.integers(len(modifier_pool)))])
                assert spec.min_caption_len <= len(caption) <= spec.max_caption_len
                captions.append(caption)
            records[vid] = VideoRecord(vid, frames_a.astype(np.float32),
                                       frames_m.astype(np.float32), captions)
            clusters[vid] = c
            split_lists[roles[int(order[slot])]].append(vid)
            vid += 1

    save_dataset(out_dir, records, split_lists, clusters)
    return load_dataset(out_dir)
