"""Decoding and scoring: greedy search, word error rate, error breakdowns.

WER comes from a minimal edit-distance alignment with uniform costs.  The
backtrace resolves cost ties with a fixed preference (substitution/match,
then insertion, then deletion) so error counts are deterministic.  The rate
is (S + D + I) / max(1, reference length); hits satisfy S + D + H = |ref|
and S + I + H = |hyp|.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import ContractError
from .model import BOS_ID, EOS_ID
from .train import teacher_pair


def greedy_decode(model_like, features: np.ndarray, max_len: int) -> tuple[list[int], bool]:
    """Argmax decoding until EOS; returns (tokens, hit_length_cap).

    ``model_like`` only needs ``predict_logits(features, dec_in) -> (L, V)``,
    so the float model, the fake-quant simulation, and the integer path are
    all accepted.
    """
    if max_len < 1:
        raise ContractError("max_len must be positive")
    tokens: list[int] = []
    while True:
        dec_in = np.array([BOS_ID] + tokens, dtype=np.int64)
        logits = model_like.predict_logits(features, dec_in)
        nxt = int(np.argmax(logits[-1]))
        if nxt == EOS_ID:
            return tokens, False
        tokens.append(nxt)
        if len(tokens) >= max_len:
            return tokens, True


@dataclasses.dataclass(frozen=True)
class WerResult:
    substitutions: int
    deletions: int
    insertions: int
    hits: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def ref_len(self) -> int:
        return self.substitutions + self.deletions + self.hits

    @property
    def wer(self) -> float:
        return self.errors / max(1, self.ref_len)


def wer(ref, hyp) -> WerResult:
    """Align ``hyp`` against ``ref`` and count substitution/deletion/insertion.

    Ties during backtrace prefer the diagonal move, then insertion, then
    deletion.
    """
    r = [int(t) for t in ref]
    h = [int(t) for t in hyp]
    nr, nh = len(r), len(h)
    # d[i][j]: distance between ref[:i] and hyp[:j]
    d = [[0] * (nh + 1) for _ in range(nr + 1)]
    for i in range(1, nr + 1):
        d[i][0] = i
    for j in range(1, nh + 1):
        d[0][j] = j
    for i in range(1, nr + 1):
        ri = r[i - 1]
        row = d[i]
        prev = d[i - 1]
        for j in range(1, nh + 1):
            diag = prev[j - 1] + (ri != h[j - 1])
            ins = row[j - 1] + 1
            dele = prev[j] + 1
            best = diag
            if ins < best:
                best = ins
            if dele < best:
                best = dele
            row[j] = best

    subs = dels = inss = hits = 0
    i, j = nr, nh
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (r[i - 1] != h[j - 1]):
            if r[i - 1] == h[j - 1]:
                hits += 1
            else:
                subs += 1
            i -= 1
            j -= 1
        elif j > 0 and d[i][j] == d[i][j - 1] + 1:
            inss += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return WerResult(substitutions=subs, deletions=dels, insertions=inss, hits=hits)


@dataclasses.dataclass
class EvalSummary:
    n_utterances: int
    wer: float
    substitutions: int
    deletions: int
    insertions: int
    hits: int
    ref_tokens: int
    truncated: int
    by_length: dict[int, tuple[int, float]]          # ref len -> (count, wer)
    repeated_wer: float | None
    regular_wer: float | None

    def as_record(self) -> dict:
        rec = {"n_utterances": self.n_utterances, "wer": self.wer,
               "substitutions": self.substitutions, "deletions": self.deletions,
               "insertions": self.insertions, "hits": self.hits,
               "ref_tokens": self.ref_tokens, "truncated": self.truncated}
        if self.repeated_wer is not None:
            rec["repeated_wer"] = self.repeated_wer
        if self.regular_wer is not None:
            rec["regular_wer"] = self.regular_wer
        return rec


def evaluate(model_like, data, max_len: int | None = None) -> EvalSummary:
    """Greedy-decode every utterance and aggregate WER over the corpus.

    Corpus WER pools error counts over utterances (not a mean of per-utterance
    rates).  Utterances flagged as repeated n-grams are also scored separately,
    as are reference-length buckets; both feed the error analysis reports.
    """
    if not data:
        raise ContractError("empty evaluation set")
    if max_len is None:
        max_len = 2 * max(len(u[1]) for u in data) + 5
    totals = {"S": 0, "D": 0, "I": 0, "H": 0}
    buckets: dict[int, list[WerResult]] = {}
    split: dict[bool, list[WerResult]] = {True: [], False: []}
    truncated = 0
    has_flags = False
    for u in data:
        feats, ref = u[0], u[1]
        hyp, cut = greedy_decode(model_like, feats, max_len)
        truncated += cut
        res = wer(ref, hyp)
        totals["S"] += res.substitutions
        totals["D"] += res.deletions
        totals["I"] += res.insertions
        totals["H"] += res.hits
        buckets.setdefault(len(ref), []).append(res)
        flag = bool(getattr(u, "repeated_ngram", False))
        has_flags = has_flags or flag
        split[flag].append(res)

    def pooled(results: list[WerResult]) -> float:
        errs = sum(r.errors for r in results)
        refs = sum(r.ref_len for r in results)
        return errs / max(1, refs)

    ref_tokens = totals["S"] + totals["D"] + totals["H"]
    return EvalSummary(
        n_utterances=len(data),
        wer=(totals["S"] + totals["D"] + totals["I"]) / max(1, ref_tokens),
        substitutions=totals["S"], deletions=totals["D"],
        insertions=totals["I"], hits=totals["H"],
        ref_tokens=ref_tokens, truncated=truncated,
        by_length={n: (len(rs), pooled(rs)) for n, rs in sorted(buckets.items())},
        repeated_wer=pooled(split[True]) if has_flags else None,
        regular_wer=pooled(split[False]) if has_flags else None,
    )


@dataclasses.dataclass
class LengthDeletionReport:
    rows: list[tuple[int, int]]        # one (reference length, deletions) row per utterance
    length_histogram: dict[int, int]   # reference length -> utterance count


def length_deletion_report(refs, hyps) -> LengthDeletionReport:
    """Per-utterance deletion counts paired with reference lengths.

    The rows plus the reference-length histogram are the inputs needed to
    plot how deletions grow with utterance length; plotting itself is left
    to external tools.
    """
    refs = list(refs)
    hyps = list(hyps)
    if len(refs) != len(hyps):
        raise ContractError(
            f"{len(refs)} references vs {len(hyps)} hypotheses")
    rows: list[tuple[int, int]] = []
    hist: dict[int, int] = {}
    for r, h in zip(refs, hyps):
        n = len(r)
        rows.append((n, wer(r, h).deletions))
        hist[n] = hist.get(n, 0) + 1
    return LengthDeletionReport(rows=rows,
                                length_histogram=dict(sorted(hist.items())))


def export_attention(model, features: np.ndarray, tokens: np.ndarray) -> list[tuple[str, np.ndarray]]:
    """Teacher-forced attention maps for one utterance.

    One entry per layer/head (``enc0.self.h0``, ``dec0.cross.h1``, ...) plus a
    head-averaged map per attention block (``dec0.cross.mean``); every map is
    row-stochastic.
    """
    from . import tensor as T

    dec_in, _ = teacher_pair(tokens)
    sink: list[tuple[str, np.ndarray]] = []
    with T.no_grad():
        model.forward(features, dec_in, attn_sink=sink)
    blocks: dict[str, list[np.ndarray]] = {}
    for name, arr in sink:
        base, _, head = name.rpartition(".")
        if head.startswith("h"):
            blocks.setdefault(base, []).append(arr)
    means = [(f"{base}.mean", np.mean(np.stack(heads), axis=0))
             for base, heads in blocks.items()]
    return sink + means
