"""Training orchestration: retriever pretraining, fixed/joint RCG training
with per-epoch retrieval refresh, and evaluation.

Modes:
    retriever-pretrain  contrastive bi-encoder training, best-by-R@1
    rcg-fixed           frozen retriever, generator minimizes the caption NLL
    rcg-joint           end-to-end; ranking loss + generation loss, retrieval
                        refreshed per epoch, gradients reach the retriever
                        through the top-k softmax probabilities
    baseline            decoder-only generator (no retriever)

Model selection uses validation R@1 for the retriever and validation CIDEr
(greedy decode, for speed) for the caption models.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .data import (BOS, EOS, PAD, Vocabulary, build_vocab, corpus_sentences,
                   corpus_view)
from .generator import (CopyGenerator, GeneratorConfig, beam_search,
                        generation_loss, greedy_decode_batch, teacher_batch)
from .index import (build_index, params_digest, corpus_digest, rank_all,
                    retrieval_metrics, topk_search)
from .layers import Module
from .metrics import make_pair, metric_report
from .retriever import BiEncoderRetriever, RetrieverConfig, ranking_loss
from .tensor import Adam, Tape, apply, backward, clip_global_norm, constant

MODES = ("retriever-pretrain", "rcg-fixed", "rcg-joint", "baseline")
_MODE_CODES = {m: i for i, m in enumerate(MODES)}


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "rcg-fixed"
    # schedule
    epochs: int = 10
    seed: int = 0
    lr: float = 2e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 3
    grad_clip: float = 5.0
    batch_retriever: int = 128
    batch_generator: int = 64
    # retrieval
    topk_train: int = 3
    topk_test: int = 10
    margin: float = 0.2
    refresh_period: int = 1
    temperature: float = 1.0
    hardest_negatives: bool = True
    modality: str = "both"
    # joint loss (the reference formulation is an unweighted sum)
    ret_loss_weight: float = 1.0
    gen_loss_weight: float = 1.0
    # model dimensions
    word_dim: int = 300
    embed_dim: int = 1024
    hidden_size: int = 1024
    att_size: int = 512
    feat_proj: int = 512
    copy_hidden: int = 0
    gate_bias: bool = False
    share_copy_embedding: bool = False
    # vocabulary / decoding
    min_freq: int = 1
    beam: int = 3
    max_len: int = 20

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.topk_train < 1 or self.topk_test < 1:
            raise ValueError("topk must be >= 1")
        if self.lr < 0 or self.lr_decay <= 0 or self.lr_decay_every < 1:
            raise ValueError("learning-rate schedule values must be positive")
        if self.epochs < 1 or self.refresh_period < 1:
            raise ValueError("epochs and refresh_period must be >= 1")

    def lr_at(self, epoch):
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)


def config_hash(config):
    blob = json.dumps(asdict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------

@dataclass
class RcgModel:
    config: TrainConfig
    vocab: Vocabulary
    retriever: BiEncoderRetriever | None
    generator: CopyGenerator | None

    def named_arrays(self):
        out = {}
        if self.retriever is not None:
            out.update(self.retriever.export_arrays("retriever."))
        if self.generator is not None:
            out.update(self.generator.export_arrays("generator."))
        return out

    def param_items(self):
        items = []
        if self.retriever is not None:
            items.extend(self.retriever.named_parameters("retriever."))
        if self.generator is not None:
            items.extend(self.generator.named_parameters("generator."))
        return items


def feature_dims(dataset):
    rec = next(iter(dataset.records.values()))
    return rec.appearance.shape[1], rec.motion.shape[1]


def build_model(config, dataset, with_retriever, with_generator, seed=None):
    """Fresh model with seeded initialization; vocabulary comes from the
    training captions and is deterministic given the dataset."""
    vocab = build_vocab(dataset.all_caption_tokens("train"), config.min_freq)
    d_a, d_m = feature_dims(dataset)
    rng = np.random.default_rng(config.seed if seed is None else seed)
    retriever = None
    if with_retriever:
        rcfg = RetrieverConfig(vocab_size=len(vocab), appearance_dim=d_a,
                               motion_dim=d_m, word_dim=config.word_dim,
                               embed_dim=config.embed_dim, modality=config.modality)
        retriever = BiEncoderRetriever(rng, rcfg)
    generator = None
    if with_generator:
        gcfg = GeneratorConfig(vocab_size=len(vocab), appearance_dim=d_a,
                               motion_dim=d_m, word_dim=config.word_dim,
                               hidden_size=config.hidden_size, att_size=config.att_size,
                               feat_proj=config.feat_proj, copy_hidden=config.copy_hidden,
                               share_copy_embedding=config.share_copy_embedding,
                               gate_bias=config.gate_bias,
                               use_retrieval=config.mode != "baseline",
                               max_len=config.max_len)
        generator = CopyGenerator(rng, gcfg)
    return RcgModel(config, vocab, retriever, generator)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: RcgModel
    arrays: dict                 # parameters + optimizer moments + meta
    epoch: int
    history: list
    loss_curve: list
    config_hash: str
    retrieval_audit: dict = field(default_factory=dict)

    def save(self, path):
        ckpt.save_arrays(path, self.arrays)


def _meta_arrays(config, epoch, history):
    rows = np.array([[h["epoch"], h.get("metric", 0.0)] for h in history],
                    dtype=np.float64) if history else np.zeros((0, 2))
    return {
        "meta.epoch": np.array([float(epoch)], dtype=np.float64),
        "meta.mode": np.array([float(_MODE_CODES[config.mode])], dtype=np.float64),
        "meta.config_hash": ckpt.encode_bytes(bytes.fromhex(config_hash(config))),
        "meta.history": rows,
    }


def checkpoint_meta(arrays):
    return {
        "epoch": int(arrays["meta.epoch"][0]),
        "mode": MODES[int(arrays["meta.mode"][0])],
        "config_hash": ckpt.decode_bytes(arrays["meta.config_hash"]).hex(),
        "history": arrays["meta.history"].tolist(),
    }


def load_model(config, dataset, arrays):
    """Rebuild an RcgModel from checkpoint arrays (bit-exact parameters)."""
    mode = MODES[int(arrays["meta.mode"][0])]
    with_retriever = any(k.startswith("retriever.") for k in arrays)
    with_generator = any(k.startswith("generator.") for k in arrays)
    model = build_model(config, dataset, with_retriever, with_generator)
    if model.retriever is not None:
        model.retriever.load_arrays(arrays, "retriever.")
    if model.generator is not None:
        model.generator.load_arrays(arrays, "generator.")
    return model, mode


# ---------------------------------------------------------------------------
# batching helpers
# ---------------------------------------------------------------------------

def pad_token_batch(id_lists):
    L = max(len(x) for x in id_lists)
    ids = np.zeros((len(id_lists), L), dtype=np.int64)
    mask = np.zeros((len(id_lists), L), dtype=bool)
    for i, seq in enumerate(id_lists):
        ids[i, :len(seq)] = seq
        mask[i, :len(seq)] = True
    return ids, mask


def stack_features(records):
    app = np.stack([r.appearance for r in records]).astype(np.float32)
    mot = np.stack([r.motion for r in records]).astype(np.float32)
    return constant(app), constant(mot)


def caption_units(dataset, split):
    units = []
    for vid in dataset.splits[split]:
        for ci in range(len(dataset.records[vid].captions)):
            units.append((vid, ci))
    return units


def _retrieval_truths(dataset, corpus, query_vids):
    """Correct sentence ids per query: same-cluster sentences when cluster
    labels exist (synthetic data), otherwise the video's own sentences."""
    by_video = {}
    for s in corpus:
        by_video.setdefault(s.video_id, set()).add(s.sentence_id)
    truths = []
    for vid in query_vids:
        if dataset.clusters is not None:
            cluster = dataset.clusters[vid]
            ids = set()
            for other, sids in by_video.items():
                if dataset.clusters.get(other) == cluster and other != vid:
                    ids |= sids
            # fall back to own sentences if the cluster has no other videos
            truths.append(ids or by_video.get(vid, set()))
        else:
            truths.append(by_video.get(vid, set()))
    return truths


def encode_video_queries(retriever, dataset, vids):
    """Batch-encode query vectors for a list of videos (inference)."""
    records = [dataset.records[v] for v in vids]
    app, mot = stack_features(records)
    e_a, e_m = retriever.encode_videos(app, mot)
    return retriever.video_query(e_a, e_m).data


def retrieve_for_videos(retriever, dataset, vids, index, k, temperature,
                        audit=None, exclude=True):
    """Per-epoch retrieval cache: one RetrievedSet per video, own-video
    sentences excluded.  Exclusion is audited (leaks counted) on every call."""
    queries = encode_video_queries(retriever, dataset, vids)
    out = {}
    for vid, q in zip(vids, queries):
        rs = topk_search(index, q, k, exclude_video_id=vid if exclude else None,
                         temperature=temperature)
        if audit is not None:
            audit["queries"] = audit.get("queries", 0) + 1
            audit["own_video_leaks"] = audit.get("own_video_leaks", 0) + sum(
                1 for v in rs.video_ids if v == vid)
        out[vid] = rs
    return out


def retrieved_token_batch(vocab, retrieved_sets, sid_tokens, k):
    """(B, k, L) vocabulary ids + mask for the retrieved sentences of a batch."""
    rows = []
    for rs in retrieved_sets:
        sents = [sid_tokens[sid] for sid in rs.sentence_ids[:k]]
        rows.append([vocab.encode(list(t)) for t in sents])
    L = max(len(s) for row in rows for s in row)
    B = len(rows)
    ids = np.zeros((B, k, L), dtype=np.int64)
    mask = np.zeros((B, k, L), dtype=bool)
    for b, row in enumerate(rows):
        for i, seq in enumerate(row):
            ids[b, i, :len(seq)] = seq
            mask[b, i, :len(seq)] = True
    return ids, mask


# ---------------------------------------------------------------------------
# retriever pretraining
# ---------------------------------------------------------------------------

def retrieval_eval(retriever, dataset, split, vocab):
    """R@K/MedR/MnR of video->sentence retrieval within a split."""
    sentences = corpus_sentences(dataset, split)
    index = build_index(retriever, sentences, vocab)
    vids = dataset.splits[split]
    queries = encode_video_queries(retriever, dataset, vids)
    rankings = [rank_all(index, q) for q in queries]
    truths = _retrieval_truths(dataset, sentences, vids)
    return retrieval_metrics(rankings, truths)


def pretrain_retriever(config, dataset):
    """Contrastive pretraining; returns the best-by-validation-R@1 model."""
    vocab = build_vocab(dataset.all_caption_tokens("train"), config.min_freq)
    model = build_model(config, dataset, with_retriever=True, with_generator=False)
    retriever = model.retriever
    names = [n for n, _ in retriever.named_parameters("retriever.")]
    params = [p for _, p in retriever.named_parameters("retriever.")]
    opt = Adam(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    units = caption_units(dataset, "train")

    history, loss_curve = [], []
    best = None
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(units))
        losses = []
        for start in range(0, len(order), config.batch_retriever):
            chosen = [units[i] for i in order[start:start + config.batch_retriever]]
            if len(chosen) < 2:
                continue
            vids = [vid for vid, _ in chosen]
            captions = [dataset.records[vid].captions[ci] for vid, ci in chosen]
            ids, mask = pad_token_batch([vocab.encode(c) for c in captions])
            app, mot = stack_features([dataset.records[v] for v in vids])
            opt.zero_grad()
            with Tape() as tape:
                text = retriever.encode_sentences(ids, mask)
                e_a, e_m = retriever.encode_videos(app, mot)
                sim = retriever.similarity_matrix(text, e_a, e_m)
                loss = ranking_loss(sim, margin=config.margin, video_ids=vids,
                                    hardest=config.hardest_negatives)
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError(
                    f"retriever loss diverged at epoch {epoch}, batch {start // config.batch_retriever}")
            backward(tape, loss)
            clip_global_norm(params, config.grad_clip)
            opt.step(lr=lr)
            losses.append(value)
        metrics = retrieval_eval(retriever, dataset, "val", vocab)
        loss_curve.append(float(np.mean(losses)) if losses else 0.0)
        entry = {"epoch": epoch, "metric": metrics["r_at"]["1"], "loss": loss_curve[-1],
                 **metrics}
        history.append(entry)
        if best is None or entry["metric"] > best["metric"]:
            best = {"metric": entry["metric"], "epoch": epoch,
                    "arrays": retriever.export_arrays("retriever."),
                    "opt": opt.state_arrays(names)}

    retriever.load_arrays(best["arrays"], "retriever.")
    arrays = dict(best["arrays"])
    arrays.update(best["opt"])
    arrays.update(_meta_arrays(config, best["epoch"], history))
    return TrainResult(model=model, arrays=arrays, epoch=best["epoch"],
                       history=history, loss_curve=loss_curve,
                       config_hash=config_hash(config))


# ---------------------------------------------------------------------------
# caption model training (fixed / joint / baseline)
# ---------------------------------------------------------------------------

def _greedy_validation_cider(model, dataset, split, retrieval_cache, sid_tokens,
                             topk, temperature):
    """Greedy-decode the split in one batch and score CIDEr for selection."""
    vids = dataset.splits[split]
    records = [dataset.records[v] for v in vids]
    app, mot = stack_features(records)
    keys = model.generator.project_visual(app, mot)
    retrieved, p_eta = None, None
    if model.generator.config.use_retrieval:
        sets = [retrieval_cache[v] for v in vids]
        ids, mask = retrieved_token_batch(model.vocab, sets, sid_tokens, topk)
        retrieved = model.generator.encode_retrieved(ids, mask)
        p_eta = np.stack([s.probabilities[:topk] for s in sets]).astype(np.float32)
    decoded = greedy_decode_batch(model.generator, keys, retrieved, p_eta,
                                  model.generator.config.max_len)
    pairs = []
    for vid, ids_out in zip(vids, decoded):
        hyp = model.vocab.decode(ids_out) or ["<unk>"]
        refs = dataset.records[vid].captions
        pairs.append(make_pair(vid, hyp, refs))
    return metric_report(pairs)["cider"]


def _assemble_generator_batch(model, dataset, chosen, retrieval_cache, sid_tokens, k):
    vids = [vid for vid, _ in chosen]
    records = [dataset.records[v] for v in vids]
    app, mot = stack_features(records)
    targets = [model.vocab.encode(dataset.records[vid].captions[ci]) + [EOS]
               for vid, ci in chosen]
    prev, target, tmask = teacher_batch(targets)
    ret_ids = ret_mask = None
    sets = None
    if model.generator.config.use_retrieval:
        sets = [retrieval_cache[v] for v in vids]
        ret_ids, ret_mask = retrieved_token_batch(model.vocab, sets, sid_tokens, k)
    return vids, app, mot, prev, target, tmask, ret_ids, ret_mask, sets


def _joint_p_eta(model, sets, sid_tokens, app, mot, k, temperature):
    """Differentiable retrieval probabilities: re-encode the retained top-k
    sentences and the query video with the live retriever."""
    B = len(sets)
    flat = [model.vocab.encode(list(sid_tokens[sid]))
            for rs in sets for sid in rs.sentence_ids[:k]]
    ids, mask = pad_token_batch(flat)
    text = model.retriever.encode_sentences(ids, mask)          # (B*k, d)
    z = apply("l2-normalize-last-axis", text)
    z = apply("reshape", z, shape=(B, k, z.shape[-1]))
    e_a, e_m = model.retriever.encode_videos(app, mot)
    q = model.retriever.video_query(e_a, e_m)                   # (B, d)
    q3 = apply("reshape", q, shape=(B, 1, q.shape[-1]))
    sims = apply("sum", apply("mul", z, q3), axis=-1)           # (B, k)
    if temperature != 1.0:
        sims = apply("mul", sims, constant(1.0 / temperature, sims.dtype))
    return apply("softmax-last-axis", sims)


def train_captioner(config, dataset, retriever_arrays=None, index=None):
    """Train rcg-fixed, rcg-joint, or baseline per config.mode."""
    mode = config.mode
    if mode not in ("rcg-fixed", "rcg-joint", "baseline"):
        raise ValueError(f"train_captioner cannot run mode {mode!r}")
    with_retriever = mode != "baseline"
    model = build_model(config, dataset, with_retriever, with_generator=True)
    if with_retriever:
        if retriever_arrays is None:
            raise ValueError(f"{mode} needs a retriever checkpoint")
        model.retriever.load_arrays(retriever_arrays, "retriever.")
    corpus = corpus_view(dataset, "train")
    sid_tokens = {s.sentence_id: s.tokens for s in corpus}

    if with_retriever and index is not None:
        expected = hashlib.sha256(
            corpus_digest(corpus)
            + params_digest(model.retriever.export_arrays())).digest()
        if index.fingerprint != expected:
            raise ValueError("index fingerprint does not match the retriever "
                             "checkpoint and training corpus")

    frozen_retriever_bytes = None
    if mode == "rcg-fixed":
        frozen_retriever_bytes = {n: a.tobytes()
                                  for n, a in model.retriever.export_arrays().items()}

    gen_items = model.generator.named_parameters("generator.")
    opt_items = list(gen_items)
    if mode == "rcg-joint":
        opt_items += list(model.retriever.named_parameters("retriever."))
    names = [n for n, _ in opt_items]
    params = [p for _, p in opt_items]
    opt = Adam(params, lr=config.lr)

    rng = np.random.default_rng(config.seed)
    units = caption_units(dataset, "train")
    audit = {}
    history, loss_curve = [], []
    best = None
    current_index = index
    retrieval_cache = {}
    val_cache = {}

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        if with_retriever and (epoch == 0 or epoch % config.refresh_period == 0):
            if mode == "rcg-joint" or current_index is None:
                # joint mode snapshots the live retriever; fixed mode keeps
                # the frozen index and only re-runs the (identical) retrieval
                current_index = build_index(model.retriever, corpus, model.vocab)
            retrieval_cache = retrieve_for_videos(
                model.retriever, dataset, dataset.splits["train"], current_index,
                config.topk_train, config.temperature, audit)
            val_cache = retrieve_for_videos(
                model.retriever, dataset, dataset.splits["val"], current_index,
                config.topk_train, config.temperature, audit)
        order = rng.permutation(len(units))
        losses = []
        for start in range(0, len(order), config.batch_generator):
            chosen = [units[i] for i in order[start:start + config.batch_generator]]
            if mode == "rcg-joint" and len(chosen) < 2:
                continue
            (vids, app, mot, prev, target, tmask,
             ret_ids, ret_mask, sets) = _assemble_generator_batch(
                model, dataset, chosen, retrieval_cache, sid_tokens, config.topk_train)
            opt.zero_grad()
            with Tape() as tape:
                keys = model.generator.project_visual(app, mot)
                retrieved = None
                p_eta = None
                if with_retriever:
                    retrieved = model.generator.encode_retrieved(ret_ids, ret_mask)
                    if mode == "rcg-joint":
                        p_eta = _joint_p_eta(model, sets, sid_tokens, app, mot,
                                             config.topk_train, config.temperature)
                    else:
                        p_eta = np.stack([s.probabilities[:config.topk_train]
                                          for s in sets]).astype(np.float32)
                loss = generation_loss(model.generator, keys, retrieved, p_eta,
                                       prev, target, tmask)
                if mode == "rcg-joint":
                    captions = [dataset.records[vid].captions[ci]
                                for vid, ci in chosen]
                    ids, mask = pad_token_batch(
                        [model.vocab.encode(c) for c in captions])
                    text = model.retriever.encode_sentences(ids, mask)
                    e_a, e_m = model.retriever.encode_videos(app, mot)
                    sim = model.retriever.similarity_matrix(text, e_a, e_m)
                    l_ret = ranking_loss(sim, margin=config.margin, video_ids=vids,
                                         hardest=config.hardest_negatives)
                    gw = constant(config.gen_loss_weight, loss.dtype)
                    rw = constant(config.ret_loss_weight, loss.dtype)
                    loss = apply("add", apply("mul", loss, gw),
                                 apply("mul", l_ret, rw))
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError(
                    f"loss diverged at epoch {epoch}, batch {start // config.batch_generator}")
            backward(tape, loss)
            clip_global_norm(params, config.grad_clip)
            opt.step(lr=lr)
            losses.append(value)
        loss_curve.append(float(np.mean(losses)) if losses else 0.0)
        val_cider = _greedy_validation_cider(
            model, dataset, "val", val_cache, sid_tokens,
            config.topk_train, config.temperature)
        entry = {"epoch": epoch, "metric": val_cider, "loss": loss_curve[-1]}
        if with_retriever:
            entry["index_fingerprint"] = current_index.fingerprint.hex()
        history.append(entry)
        if best is None or entry["metric"] > best["metric"]:
            best = {"metric": entry["metric"], "epoch": epoch,
                    "arrays": model.named_arrays(), "opt": opt.state_arrays(names)}

    if mode == "rcg-fixed":
        after = model.retriever.export_arrays()
        for name, blob in frozen_retriever_bytes.items():
            if after[name].tobytes() != blob:
                raise AssertionError(f"frozen retriever parameter {name} changed")

    final_arrays = dict(best["arrays"])
    if model.retriever is not None:
        model.retriever.load_arrays(best["arrays"], "retriever.")
    model.generator.load_arrays(best["arrays"], "generator.")
    final_arrays.update(best["opt"])
    final_arrays.update(_meta_arrays(config, best["epoch"], history))
    return TrainResult(model=model, arrays=final_arrays, epoch=best["epoch"],
                       history=history, loss_curve=loss_curve,
                       config_hash=config_hash(config), retrieval_audit=audit)


def train_rcg_fixed(config, dataset, retriever_arrays, index=None):
    if config.mode != "rcg-fixed":
        raise ValueError("config.mode must be rcg-fixed")
    return train_captioner(config, dataset, retriever_arrays, index)


def train_rcg_joint(config, dataset, retriever_arrays):
    if config.mode != "rcg-joint":
        raise ValueError("config.mode must be rcg-joint")
    return train_captioner(config, dataset, retriever_arrays)


def train_baseline(config, dataset):
    if config.mode != "baseline":
        raise ValueError("config.mode must be baseline")
    return train_captioner(config, dataset)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(model, dataset, split="test", topk_test=None, corpus_kind="train",
             beam=None, corpus_seed=0, gate_override=None, epoch=None):
    """Beam-search captions for a split against a corpus view; returns the
    metric report.  Own-video sentences are always excluded from retrieval;
    when a fraction view leaves fewer than topk eligible sentences for some
    query, k is clamped per query and reported."""
    config = model.config
    topk_test = topk_test or config.topk_test
    beam = beam or config.beam
    vids = dataset.splits[split]
    use_retrieval = model.generator.config.use_retrieval
    audit = {}
    report = {
        "epoch": epoch, "split": split,
        "corpus": corpus_kind, "topk_test": topk_test, "beam": beam,
        "config_hash": config_hash(config),
    }

    retrieved_sets = {}
    if use_retrieval:
        corpus = corpus_view(dataset, corpus_kind, seed=corpus_seed)
        sid_tokens = {s.sentence_id: s.tokens for s in corpus}
        index = build_index(model.retriever, corpus, model.vocab)
        queries = encode_video_queries(model.retriever, dataset, vids)
        min_k = topk_test
        for vid, q in zip(vids, queries):
            eligible = int((index.video_ids != vid).sum())
            if eligible == 0:
                raise ValueError(f"corpus empty after excluding video {vid}")
            k = min(topk_test, eligible)
            min_k = min(min_k, k)
            rs = topk_search(index, q, k, exclude_video_id=vid,
                             temperature=config.temperature)
            audit["queries"] = audit.get("queries", 0) + 1
            audit["own_video_leaks"] = audit.get("own_video_leaks", 0) + sum(
                1 for v in rs.video_ids if v == vid)
            retrieved_sets[vid] = rs
        report["effective_topk_min"] = min_k
        # retrieval quality over queries that still have a correct target
        truths = _retrieval_truths(dataset, corpus, vids)
        rankings, covered_truths = [], []
        for vid, q, truth in zip(vids, queries, truths):
            if truth:
                rankings.append(rank_all(index, q, exclude_video_id=vid))
                covered_truths.append(truth)
        if covered_truths:
            report.update(retrieval_metrics(rankings, covered_truths))
            report["retrieval_coverage"] = len(covered_truths) / len(vids)

    pairs = []
    forced = 0
    for vid in vids:
        rec = dataset.records[vid]
        app, mot = stack_features([rec])
        keys = model.generator.project_visual(app, mot)
        retrieved = p_eta = None
        if use_retrieval:
            rs = retrieved_sets[vid]
            ids, mask = retrieved_token_batch(model.vocab, [rs], sid_tokens, rs.k)
            retrieved = model.generator.encode_retrieved(ids, mask)
            p_eta = rs.probabilities[None, :]
        hyp = beam_search(model.generator, keys, retrieved, p_eta,
                          beam_width=beam, max_len=config.max_len,
                          gate_override=gate_override)
        forced += int(hyp.forced)
        tokens = model.vocab.decode(hyp.tokens) or ["<unk>"]
        pairs.append(make_pair(vid, tokens, rec.captions))
    caption_metrics = metric_report(pairs)
    report.update(caption_metrics)
    report["forced_finalizations"] = forced
    report["retrieval_audit"] = audit
    return report
