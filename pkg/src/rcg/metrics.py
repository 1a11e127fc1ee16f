"""Corpus-level caption metrics: BLEU-4, ROUGE-L, and CIDEr-D.

BLEU is corpus-level with clipped precisions and a closest-reference-length
brevity penalty, no smoothing.  ROUGE-L takes the best F(beta=1.2) over
references per pair and averages.  CIDEr follows the CIDEr-D variant:
TF-IDF n-gram cosines (n = 1..4) with count clipping and a Gaussian length
penalty (sigma = 6), averaged over n, scaled by 10.
"""
from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass


@dataclass(frozen=True)
class EvalPair:
    video_id: int
    hypothesis: tuple
    references: tuple        # tuple of token tuples, at least one

    def __post_init__(self):
        if not self.hypothesis:
            raise ValueError(f"video {self.video_id}: empty hypothesis")
        if not self.references or any(not r for r in self.references):
            raise ValueError(f"video {self.video_id}: empty reference")


def make_pair(video_id, hypothesis, references):
    return EvalPair(video_id, tuple(hypothesis),
                    tuple(tuple(r) for r in references))


def _ngram_counts(tokens, max_n=4):
    counts = Counter()
    for n in range(1, max_n + 1):
        for i in range(len(tokens) - n + 1):
            counts[tuple(tokens[i:i + n])] += 1
    return counts


def bleu4(pairs):
    """Corpus BLEU-4; zero matches at any order give an exact 0."""
    if not pairs:
        raise ValueError("need at least one pair")
    correct = [0] * 4
    guess = [0] * 4
    hyp_len_total = 0
    ref_len_total = 0
    for pair in pairs:
        hyp = pair.hypothesis
        hyp_counts = _ngram_counts(hyp)
        max_ref = Counter()
        for ref in pair.references:
            for ngram, cnt in _ngram_counts(ref).items():
                max_ref[ngram] = max(max_ref[ngram], cnt)
        for ngram, cnt in hyp_counts.items():
            n = len(ngram) - 1
            correct[n] += min(cnt, max_ref.get(ngram, 0))
        for n in range(4):
            guess[n] += max(0, len(hyp) - n)
        hyp_len_total += len(hyp)
        # closest reference length; ties go to the shorter reference
        ref_len_total += min((abs(len(r) - len(hyp)), len(r))
                             for r in pair.references)[1]
    if any(c == 0 for c in correct) or any(g == 0 for g in guess):
        return 0.0
    log_prec = sum(math.log(c / g) for c, g in zip(correct, guess)) / 4.0
    bp = 1.0 if hyp_len_total > ref_len_total else math.exp(1.0 - ref_len_total / hyp_len_total)
    return bp * math.exp(log_prec)


def bleu_components(pairs):
    """Per-order clipped precisions and brevity penalty (for diagnostics)."""
    correct = [0] * 4
    guess = [0] * 4
    hyp_len_total = 0
    ref_len_total = 0
    for pair in pairs:
        hyp_counts = _ngram_counts(pair.hypothesis)
        max_ref = Counter()
        for ref in pair.references:
            for ngram, cnt in _ngram_counts(ref).items():
                max_ref[ngram] = max(max_ref[ngram], cnt)
        for ngram, cnt in hyp_counts.items():
            correct[len(ngram) - 1] += min(cnt, max_ref.get(ngram, 0))
        for n in range(4):
            guess[n] += max(0, len(pair.hypothesis) - n)
        hyp_len_total += len(pair.hypothesis)
        ref_len_total += min((abs(len(r) - len(pair.hypothesis)), len(r))
                             for r in pair.references)[1]
    precisions = [c / g if g else 0.0 for c, g in zip(correct, guess)]
    bp = 1.0 if hyp_len_total > ref_len_total else math.exp(1.0 - ref_len_total / max(1, hyp_len_total))
    return precisions, bp


def _lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


ROUGE_BETA = 1.2


def rouge_l(pairs):
    """Mean over pairs of the best LCS F-measure across references."""
    if not pairs:
        raise ValueError("need at least one pair")
    total = 0.0
    for pair in pairs:
        best = 0.0
        for ref in pair.references:
            lcs = _lcs_length(pair.hypothesis, ref)
            if lcs == 0:
                continue
            prec = lcs / len(pair.hypothesis)
            rec = lcs / len(ref)
            beta2 = ROUGE_BETA ** 2
            best = max(best, (1 + beta2) * prec * rec / (rec + beta2 * prec))
        total += best
    return total / len(pairs)


CIDER_SIGMA = 6.0


def cider(pairs):
    """CIDEr-D over the pair corpus; references double as the IDF corpus."""
    if not pairs:
        raise ValueError("need at least one pair")
    if len({p.video_id for p in pairs}) < 2:
        raise ValueError("CIDEr needs at least 2 distinct videos for IDF")

    doc_freq = defaultdict(int)
    for pair in pairs:
        seen = set()
        for ref in pair.references:
            seen.update(_ngram_counts(ref).keys())
        for ngram in seen:
            doc_freq[ngram] += 1
    log_docs = math.log(len(pairs))

    def tfidf_vector(tokens):
        vec = [defaultdict(float) for _ in range(4)]
        norm = [0.0] * 4
        for ngram, cnt in _ngram_counts(tokens).items():
            idf = log_docs - math.log(max(1.0, doc_freq[ngram]))
            n = len(ngram) - 1
            vec[n][ngram] = cnt * idf
            norm[n] += vec[n][ngram] ** 2
        return vec, [math.sqrt(x) for x in norm], len(tokens)

    scores = []
    for pair in pairs:
        hyp_vec, hyp_norm, hyp_len = tfidf_vector(pair.hypothesis)
        acc = [0.0] * 4
        for ref in pair.references:
            ref_vec, ref_norm, ref_len = tfidf_vector(ref)
            delta = float(hyp_len - ref_len)
            penalty = math.exp(-(delta ** 2) / (2.0 * CIDER_SIGMA ** 2))
            for n in range(4):
                val = 0.0
                for ngram, w in hyp_vec[n].items():
                    # count clipping: hypothesis weight capped at the reference's
                    val += min(w, ref_vec[n][ngram]) * ref_vec[n][ngram]
                if hyp_norm[n] != 0.0 and ref_norm[n] != 0.0:
                    val /= hyp_norm[n] * ref_norm[n]
                acc[n] += val * penalty
        score = 10.0 * sum(acc) / 4.0 / len(pair.references)
        scores.append(score)
    return sum(scores) / len(scores)


def metric_report(pairs):
    """All three metrics plus counts, in a stable field order."""
    return {
        "bleu4": bleu4(pairs),
        "rougeL": rouge_l(pairs),
        "cider": cider(pairs),
        "pairs": len(pairs),
        "videos": len({p.video_id for p in pairs}),
    }
