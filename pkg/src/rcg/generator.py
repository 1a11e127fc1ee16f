"""Copy-mechanism caption generator.

A hierarchical decoder (attention recurrence over visual features feeding a
language recurrence) produces a fixed-vocabulary distribution per step.  A
multi-pointer module attends separately over each retrieved sentence,
scatters the attention weights onto vocabulary ids, and gates per sentence
between copying and generating.  The per-sentence mixtures are marginalized
by the retrieval probabilities into the final word distribution.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import BOS, EOS, PAD, UNK
from .layers import AdditiveAttention, LstmCell, Module, bilstm_encode, embed
from .tensor import Parameter, Tensor, apply, constant, xavier_uniform

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class GeneratorConfig:
    vocab_size: int
    appearance_dim: int
    motion_dim: int
    word_dim: int = 300
    hidden_size: int = 1024        # hierarchical recurrence width
    att_size: int = 512            # attention module state size
    feat_proj: int = 512           # per-modality visual projection
    copy_hidden: int = 0           # retrieved-sentence encoder width (0 = hidden_size)
    share_copy_embedding: bool = False
    gate_bias: bool = False
    use_retrieval: bool = True     # decoder-only baseline when False
    max_len: int = 20

    def __post_init__(self):
        if self.copy_hidden == 0:
            object.__setattr__(self, "copy_hidden", self.hidden_size)


@dataclass
class DecoderState:
    h_att: Tensor
    c_att: Tensor
    h_lang: Tensor
    c_lang: Tensor


@dataclass
class RetrievedEncoding:
    """Per-batch-row retrieved sentences, encoded by the generator's own
    bi-recurrent encoder (never the retriever's)."""
    token_ids: np.ndarray        # (B, k, L) vocabulary ids (OOV already UNK)
    mask: np.ndarray             # (B, k, L) bool
    states: Tensor               # (B*k, L, H_copy)
    k: int

    @property
    def batch(self):
        return self.token_ids.shape[0]


@dataclass
class StepDistribution:
    """Everything the decoder produced for one step of one sample."""
    p_voc: np.ndarray            # (V,)
    p_ret: np.ndarray            # (k, V)
    p_copy: np.ndarray           # (k,)
    p_theta: np.ndarray          # (k, V)
    p_final: np.ndarray          # (V,)
    attention: np.ndarray        # (k, L) pointer weights per sentence


class CopyGenerator(Module):
    def __init__(self, rng, config, dtype=np.float32):
        self.config = config
        c = config
        self.w_e = Parameter("w_e", xavier_uniform(rng, (c.vocab_size, c.word_dim), dtype))
        self.att_lstm = LstmCell(rng, c.word_dim, c.hidden_size, dtype, name="att_lstm")
        self.proj_app = Parameter("proj_app", xavier_uniform(rng, (c.appearance_dim, c.feat_proj), dtype))
        self.b_app = Parameter("b_app", np.zeros(c.feat_proj, dtype=dtype))
        self.proj_mot = Parameter("proj_mot", xavier_uniform(rng, (c.motion_dim, c.feat_proj), dtype))
        self.b_mot = Parameter("b_mot", np.zeros(c.feat_proj, dtype=dtype))
        self.att_visual = AdditiveAttention(rng, c.hidden_size, 2 * c.feat_proj,
                                            c.att_size, dtype, name="att_visual")
        self.lang_lstm = LstmCell(rng, c.hidden_size + 2 * c.feat_proj, c.hidden_size,
                                  dtype, name="lang_lstm")
        self.w_voc = Parameter("w_voc", xavier_uniform(rng, (c.hidden_size, c.vocab_size), dtype))
        self.b_voc = Parameter("b_voc", np.zeros(c.vocab_size, dtype=dtype))
        if c.use_retrieval:
            if not c.share_copy_embedding:
                self.z_embed = Parameter("z_embed", xavier_uniform(rng, (c.vocab_size, c.word_dim), dtype))
            self.z_fwd = LstmCell(rng, c.word_dim, c.copy_hidden, dtype, name="z_fwd")
            self.z_bwd = LstmCell(rng, c.word_dim, c.copy_hidden, dtype, name="z_bwd")
            self.att_copy = AdditiveAttention(rng, c.hidden_size, c.copy_hidden,
                                              c.att_size, dtype, name="att_copy")
            self.w_gate_ctx = Parameter("w_gate_ctx", xavier_uniform(rng, (c.copy_hidden,), dtype))
            self.w_gate_state = Parameter("w_gate_state", xavier_uniform(rng, (c.hidden_size,), dtype))
            if c.gate_bias:
                self.b_gate = Parameter("b_gate", np.zeros((), dtype=dtype))

    # -- encoding ----------------------------------------------------------

    def project_visual(self, appearance, motion):
        """Project both modalities and concatenate along the feature axis."""
        app = apply("add", apply("matmul", appearance, self.proj_app), self.b_app)
        mot = apply("add", apply("matmul", motion, self.proj_mot), self.b_mot)
        return apply("concat-last-axis", mot, app)        # (B, K, 2*feat_proj)

    def encode_retrieved(self, token_ids, mask):
        """Encode (B, k, L) retrieved token ids with the copy-side encoder."""
        token_ids = np.asarray(token_ids, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        B, k, L = token_ids.shape
        if k < 1:
            raise ValueError("need at least one retrieved sentence")
        if not mask.any(axis=-1).all():
            raise ValueError("empty retrieved sentence (filter before encoding)")
        flat_ids = token_ids.reshape(B * k, L)
        flat_mask = mask.reshape(B * k, L)
        table = self.w_e if self.config.share_copy_embedding else self.z_embed
        words = embed(table, flat_ids)
        states = bilstm_encode(self.z_fwd, self.z_bwd, words, flat_mask)
        return RetrievedEncoding(token_ids, mask, states, k)

    # -- decoding ----------------------------------------------------------

    def init_state(self, batch, dtype=None):
        dtype = dtype or self.w_e.dtype
        h_a, c_a = self.att_lstm.init_state(batch, dtype)
        h_l, c_l = self.lang_lstm.init_state(batch, dtype)
        return DecoderState(h_a, c_a, h_l, c_l)

    def decode_step(self, state, prev_ids, vis_keys, vis_mask=None):
        """One step of the hierarchical decoder.

        Returns the new state, the language hidden state (query for both the
        vocabulary head and the pointer module), and the visual context.
        """
        if state is None:
            raise ValueError("decoder state not initialized; call init_state")
        prev_ids = np.asarray(prev_ids, dtype=np.int64)
        if prev_ids.max() >= self.config.vocab_size:
            raise ValueError("previous token outside vocabulary")
        if vis_mask is None:
            vis_mask = np.ones(vis_keys.shape[:2], dtype=bool)
        word = embed(self.w_e, prev_ids)                           # (B, word_dim)
        h_a, c_a = self.att_lstm.step(word, (state.h_att, state.c_att))
        _, c_v = self.att_visual(h_a, vis_keys, vis_keys, vis_mask)
        lang_in = apply("concat-last-axis", h_a, c_v)
        h_l, c_l = self.lang_lstm.step(lang_in, (state.h_lang, state.c_lang))
        return DecoderState(h_a, c_a, h_l, c_l), h_l, c_v

    def vocab_distribution(self, h_lang):
        logits = apply("add", apply("matmul", h_lang, self.w_voc), self.b_voc)
        return apply("softmax-last-axis", logits)                  # (B, V)

    def multi_pointer(self, h_lang, retrieved):
        """Attend over each retrieved sentence; scatter weights to vocab ids.

        Returns per-sentence vocabulary distributions (B, k, V), copy gates
        (B, k), raw attention weights (B, k, L), and sentence contexts.
        """
        B, k = retrieved.batch, retrieved.k
        L = retrieved.token_ids.shape[2]
        V = self.config.vocab_size
        query = apply("repeat-rows", h_lang, times=k)              # (B*k, H)
        flat_mask = retrieved.mask.reshape(B * k, L)
        weights, context = self.att_copy(query, retrieved.states,
                                         retrieved.states, flat_mask)
        flat_ids = retrieved.token_ids.reshape(B * k, L)
        p_ret = apply("scatter-add", weights, index=flat_ids, size=V)
        p_ret = apply("reshape", p_ret, shape=(B, k, V))
        gate_logit = apply("add", apply("matmul", context, self.w_gate_ctx),
                           apply("matmul", query, self.w_gate_state))
        if self.config.gate_bias:
            gate_logit = apply("add", gate_logit, self.b_gate)
        p_copy = apply("reshape", apply("sigmoid", gate_logit), shape=(B, k))
        attn = apply("reshape", weights, shape=(B, k, L))
        return p_ret, p_copy, attn, context

    def mix_step(self, p_voc, p_ret, p_copy, p_eta):
        """Per-sentence copy/generate mixtures, marginalized by retrieval
        confidence into the final vocabulary distribution."""
        B, k, V = p_ret.shape
        one = constant(1.0, p_voc.dtype)
        inv = apply("reshape", apply("sub", one, p_copy), shape=(B, k, 1))
        gate = apply("reshape", p_copy, shape=(B, k, 1))
        voc = apply("reshape", p_voc, shape=(B, 1, V))
        p_theta = apply("add", apply("mul", inv, voc), apply("mul", gate, p_ret))
        if not isinstance(p_eta, Tensor):
            p_eta = constant(np.asarray(p_eta, dtype=p_voc.dtype.type), p_voc.dtype)
        eta = apply("reshape", p_eta, shape=(B, k, 1))
        p_final = apply("sum", apply("mul", eta, p_theta), axis=1)  # (B, V)
        return p_theta, p_final


def _override_gates(p_copy, value):
    B, k = p_copy.shape
    return constant(np.full((B, k), value, dtype=p_copy.dtype.type), p_copy.dtype)


# ---------------------------------------------------------------------------
# teacher-forced loss
# ---------------------------------------------------------------------------

def teacher_batch(sequences):
    """Pack target id sequences (each ending with EOS) into prev/target/mask."""
    if not sequences:
        raise ValueError("empty batch")
    T = max(len(s) for s in sequences)
    B = len(sequences)
    prev = np.full((B, T), PAD, dtype=np.int64)
    target = np.full((B, T), PAD, dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    for i, seq in enumerate(sequences):
        prev[i, 0] = BOS
        prev[i, 1:len(seq)] = seq[:-1]
        target[i, :len(seq)] = seq
        mask[i, :len(seq)] = True
    return prev, target, mask


def validate_targets(target_ids, target_mask):
    target_ids = np.asarray(target_ids, dtype=np.int64)
    target_mask = np.asarray(target_mask, dtype=bool)
    for row_ids, row_mask in zip(target_ids, target_mask):
        length = int(row_mask.sum())
        if length == 0:
            raise ValueError("empty target")
        if not row_mask[:length].all():
            raise ValueError("target mask must be a contiguous prefix")
        if np.any(row_ids[:length] == PAD):
            raise ValueError("PAD inside a target sequence")
        if row_ids[length - 1] != EOS:
            raise ValueError("target must end with EOS")
    return target_ids, target_mask


def generation_loss(generator, vis_keys, retrieved, p_eta, prev_ids, target_ids,
                    target_mask, reduction="mean", gate_override=None):
    """Negative log-likelihood of the targets under the marginalized mixture.

    reduction="mean" averages over time steps per sample, then over the
    batch; "sum" is the plain summed form used by oracle-equivalence tests.
    The final probability is floored at 1e-12 before the log.
    """
    target_ids, target_mask = validate_targets(target_ids, target_mask)
    B, T = target_ids.shape
    dtype = generator.w_e.dtype
    state = generator.init_state(B, dtype)
    step_nll = []
    for t in range(T):
        state, h_l, _ = generator.decode_step(state, prev_ids[:, t], vis_keys)
        p_voc = generator.vocab_distribution(h_l)
        if generator.config.use_retrieval and retrieved is not None:
            p_ret, p_copy, _, _ = generator.multi_pointer(h_l, retrieved)
            if gate_override is not None:
                p_copy = _override_gates(p_copy, gate_override)
            _, p_final = generator.mix_step(p_voc, p_ret, p_copy, p_eta)
        else:
            p_final = p_voc
        picked = apply("gather-last", p_final, ids=target_ids[:, t])
        logp = apply("log", apply("clamp-min", picked, value=PROB_FLOOR))
        step_nll.append(apply("reshape", apply("neg", logp), shape=(B, 1)))
    nll = apply("concat-last-axis", *step_nll) if T > 1 else step_nll[0]
    mask_t = constant(target_mask.astype(dtype), dtype)
    masked = apply("mul", nll, mask_t)
    if reduction == "sum":
        return apply("sum", masked)
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    lengths = target_mask.sum(axis=1).astype(dtype)
    inv_len = constant(1.0 / lengths, dtype)
    per_sample = apply("mul", apply("sum", masked, axis=-1), inv_len)
    return apply("mean", per_sample)


# ---------------------------------------------------------------------------
# step-level distributions (tests, export, analysis)
# ---------------------------------------------------------------------------

def step_distributions(generator, vis_keys, retrieved, p_eta, token_ids,
                       gate_override=None):
    """Teacher-forced decode of one sample; returns one StepDistribution per
    step.  token_ids must end with EOS; BOS is fed internally."""
    token_ids = list(token_ids)
    V = generator.config.vocab_size
    state = generator.init_state(1, generator.w_e.dtype)
    prev = BOS
    steps = []
    for token in token_ids:
        state, h_l, _ = generator.decode_step(state, np.array([prev]), vis_keys)
        p_voc = generator.vocab_distribution(h_l)
        if generator.config.use_retrieval and retrieved is not None:
            p_ret, p_copy, attn, _ = generator.multi_pointer(h_l, retrieved)
            if gate_override is not None:
                p_copy = _override_gates(p_copy, gate_override)
            p_theta, p_final = generator.mix_step(p_voc, p_ret, p_copy, p_eta)
            steps.append(StepDistribution(
                p_voc=p_voc.data[0].copy(), p_ret=p_ret.data[0].copy(),
                p_copy=p_copy.data[0].copy(), p_theta=p_theta.data[0].copy(),
                p_final=p_final.data[0].copy(), attention=attn.data[0].copy()))
        else:
            k = 0
            steps.append(StepDistribution(
                p_voc=p_voc.data[0].copy(), p_ret=np.zeros((k, V)),
                p_copy=np.zeros(k), p_theta=np.zeros((k, V)),
                p_final=p_voc.data[0].copy(), attention=np.zeros((k, 0))))
        prev = token
    return steps


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

@dataclass
class Hypothesis:
    tokens: tuple                 # emitted ids, EOS excluded
    score: float                  # sum of log p_final over emitted tokens
    finished: bool = False
    forced: bool = False          # hit max_len without EOS
    finish_step: float = np.inf

    def sort_key(self):
        return (-self.score, self.finish_step, self.tokens)


def _final_distribution(generator, state, prev_ids, vis_keys, retrieved, p_eta,
                        gate_override=None):
    state, h_l, _ = generator.decode_step(state, prev_ids, vis_keys)
    p_voc = generator.vocab_distribution(h_l)
    if generator.config.use_retrieval and retrieved is not None:
        p_ret, p_copy, _, _ = generator.multi_pointer(h_l, retrieved)
        if gate_override is not None:
            p_copy = _override_gates(p_copy, gate_override)
        _, p_final = generator.mix_step(p_voc, p_ret, p_copy, p_eta)
    else:
        p_final = p_voc
    return state, p_final.data


def _gather_state(state, rows):
    def pick(t):
        return apply("gather-rows", t, ids=np.asarray(rows, dtype=np.int64))
    return DecoderState(pick(state.h_att), pick(state.c_att),
                        pick(state.h_lang), pick(state.c_lang))


def _tile_retrieved(retrieved, rows):
    if retrieved is None:
        return None
    B, k, L = retrieved.token_ids.shape
    assert B == 1, "beam search runs on a single video"
    n = len(rows)
    flat_rows = np.arange(k).tolist() * n
    states = apply("gather-rows",
                   apply("reshape", retrieved.states,
                         shape=(k, retrieved.states.shape[1] * retrieved.states.shape[2])),
                   ids=np.asarray(flat_rows, dtype=np.int64))
    states = apply("reshape", states,
                   shape=(n * k, retrieved.states.shape[1], retrieved.states.shape[2]))
    return RetrievedEncoding(
        token_ids=np.tile(retrieved.token_ids, (n, 1, 1)),
        mask=np.tile(retrieved.mask, (n, 1, 1)),
        states=states, k=k)


def beam_search(generator, vis_keys, retrieved, p_eta, beam_width, max_len,
                gate_override=None):
    """Beam over the marginalized distribution; no length normalization.

    Ties break by earlier finalization, then lexicographic token ids.
    beam_width=1 reproduces greedy decoding exactly.  Hypotheses that reach
    max_len without EOS are finalized forcibly and flagged.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    dtype = generator.w_e.dtype
    p_eta_arr = None
    if p_eta is not None:
        p_eta_arr = np.asarray(p_eta.data if isinstance(p_eta, Tensor) else p_eta,
                               dtype=np.float64).reshape(1, -1)
    active = [Hypothesis(tokens=(), score=0.0)]
    states = generator.init_state(1, dtype)
    finished = []
    t = 0
    while t < max_len and active:
        n = len(active)
        prev = np.array([h.tokens[-1] if h.tokens else BOS for h in active])
        ret_n = _tile_retrieved(retrieved, range(n))
        eta_n = np.tile(p_eta_arr, (n, 1)).astype(dtype) if p_eta_arr is not None else None
        keys_n = constant(np.tile(vis_keys.data, (n, 1, 1)), dtype)
        states, probs = _final_distribution(generator, states, prev, keys_n,
                                            ret_n, eta_n, gate_override)
        logp = np.log(np.maximum(probs.astype(np.float64), PROB_FLOOR))
        candidates = []
        for i, hyp in enumerate(active):
            for v in range(logp.shape[1]):
                if v == PAD or v == BOS:
                    continue
                candidates.append((i, v, hyp.score + logp[i, v]))
        candidates.sort(key=lambda c: (-c[2], active[c[0]].tokens + (c[1],)))
        pool = list(finished)
        new_active, new_rows = [], []
        for i, v, score in candidates:
            if len(new_active) >= beam_width:
                break
            if v == EOS:
                pool.append(Hypothesis(tokens=active[i].tokens, score=score,
                                       finished=True, finish_step=t))
            else:
                new_active.append(Hypothesis(tokens=active[i].tokens + (v,), score=score))
                new_rows.append(i)
        pool.sort(key=Hypothesis.sort_key)
        finished = pool[:beam_width]
        # scores only fall as sequences grow, so actives at or below the
        # worst kept finished score can never win (later finish loses ties)
        if len(finished) >= beam_width and new_active:
            cutoff = finished[-1].score
            keep = [j for j, h in enumerate(new_active) if h.score > cutoff]
            new_active = [new_active[j] for j in keep]
            new_rows = [new_rows[j] for j in keep]
        active = new_active
        if active:
            states = _gather_state(states, new_rows)
        t += 1
    for hyp in active:
        # ran out of steps without emitting EOS
        finished.append(Hypothesis(tokens=hyp.tokens, score=hyp.score, finished=True,
                                   forced=True, finish_step=float(max_len)))
    finished.sort(key=Hypothesis.sort_key)
    return finished[0]


def greedy_decode(generator, vis_keys, retrieved, p_eta, max_len,
                  gate_override=None):
    """Plain argmax decoding (independent of beam_search; used to cross-check
    that beam_width=1 matches it exactly)."""
    dtype = generator.w_e.dtype
    state = generator.init_state(1, dtype)
    tokens, score = [], 0.0
    prev = BOS
    eta = None
    if p_eta is not None:
        eta = np.asarray(p_eta.data if isinstance(p_eta, Tensor) else p_eta,
                         dtype=dtype).reshape(1, -1)
    for t in range(max_len):
        state, probs = _final_distribution(generator, state, np.array([prev]),
                                           vis_keys, retrieved, eta, gate_override)
        row = probs[0].astype(np.float64).copy()
        row[PAD] = -np.inf
        row[BOS] = -np.inf
        v = int(np.argmax(row))
        score += float(np.log(max(row[v], PROB_FLOOR)))
        if v == EOS:
            return Hypothesis(tokens=tuple(tokens), score=score, finished=True,
                              finish_step=t)
        tokens.append(v)
        prev = v
    return Hypothesis(tokens=tuple(tokens), score=score, finished=True,
                      forced=True, finish_step=float(max_len))


def greedy_decode_batch(generator, vis_keys, retrieved_list, p_eta_rows, max_len,
                        gate_override=None):
    """Vectorized greedy decoding across videos (validation-time speed)."""
    dtype = generator.w_e.dtype
    B = vis_keys.shape[0]
    state = generator.init_state(B, dtype)
    prev = np.full(B, BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    out = [[] for _ in range(B)]
    retrieved = retrieved_list
    eta = None
    if p_eta_rows is not None:
        eta = np.asarray(p_eta_rows, dtype=dtype)
    for _ in range(max_len):
        state, probs = _final_distribution(generator, state, prev, vis_keys,
                                           retrieved, eta, gate_override)
        row = probs.astype(np.float64).copy()
        row[:, PAD] = -np.inf
        row[:, BOS] = -np.inf
        nxt = row.argmax(axis=1)
        for b in range(B):
            if done[b]:
                continue
            if nxt[b] == EOS:
                done[b] = True
            else:
                out[b].append(int(nxt[b]))
        prev = np.where(done, EOS, nxt)
        if done.all():
            break
    return out


# ---------------------------------------------------------------------------
# copy-weight export
# ---------------------------------------------------------------------------

def export_copy_weights(generator, video_id, vis_keys, retrieved, p_eta, caption_ids,
                        vocab, gate_override=None):
    """Per-step copy gates and pointer attention rows as a JSON-ready dict."""
    steps = step_distributions(generator, vis_keys, retrieved, p_eta, caption_ids,
                               gate_override=gate_override)
    doc = {"video_id": int(video_id), "steps": []}
    lengths = retrieved.mask[0].sum(axis=1) if retrieved is not None else []
    for token_id, step in zip(caption_ids, steps):
        attn_rows = [step.attention[i, :int(lengths[i])].tolist()
                     for i in range(step.attention.shape[0])]
        doc["steps"].append({
            "token": vocab.tokens[token_id],
            "p_copy": [float(x) for x in step.p_copy],
            "attn": attn_rows,
        })
    return doc
