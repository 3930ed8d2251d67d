"""ROUGE-1/2/L scoring, category-wise word precision, and seed aggregation.

ROUGE uses clipped n-gram multisets (each reference n-gram credited at most
its reference multiplicity) and LCS by dynamic programming; both are scored
over the same word segmentation used for the category analysis, and
per-corpus numbers are macro averages over cases.

Word precision follows membership semantics: a generated word counts as
matched if its surface form occurs anywhere among the gold summary's words,
and every generated occurrence contributes to the denominator.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .metadata import FeatureKind
from .text import CATEGORIES, TagLexicon, Vocab, detokenize, segment_and_tag

KIND_LABELS = {
    FeatureKind.VANILLA: "vanilla",
    FeatureKind.HOSPITAL: "w/ hospital",
    FeatureKind.PHYSICIAN: "w/ physician",
    FeatureKind.DISEASE: "w/ disease",
    FeatureKind.LENGTH_OF_STAY: "w/ stay",
    FeatureKind.ALL_FEATURES: "w/ all features",
}


@dataclass
class RougeScore:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0

    @classmethod
    def from_counts(cls, overlap: float, n_cand: int, n_ref: int) -> "RougeScore":
        p = overlap / n_cand if n_cand else 0.0
        r = overlap / n_ref if n_ref else 0.0
        f = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
        return cls(p, r, f)

    def to_dict(self) -> dict:
        return {"p": self.precision, "r": self.recall, "f1": self.f1}


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> RougeScore:
    """Clipped n-gram overlap precision/recall/F1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cand = [tuple(candidate[i:i + n]) for i in range(len(candidate) - n + 1)]
    ref = [tuple(reference[i:i + n]) for i in range(len(reference) - n + 1)]
    if not cand or not ref:
        return RougeScore()
    ref_counts = Counter(ref)
    overlap = sum(min(c, ref_counts[g]) for g, c in Counter(cand).items())
    return RougeScore.from_counts(overlap, len(cand), len(ref))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> RougeScore:
    """Longest-common-subsequence precision/recall/F1."""
    if not candidate or not reference:
        return RougeScore()
    lcs = lcs_length(candidate, reference)
    return RougeScore.from_counts(lcs, len(candidate), len(reference))


@dataclass
class CategoryPrecision:
    generated: float = 0.0
    matched: float = 0.0

    @property
    def precision(self) -> Optional[float]:
        return self.matched / self.generated if self.generated else None

    def to_dict(self) -> dict:
        return {"generated": self.generated, "matched": self.matched,
                "precision": self.precision}


def word_precision(candidate: str, gold: str,
                   lexicon: TagLexicon) -> Dict[str, CategoryPrecision]:
    """Per-category fraction of generated words that occur in the gold summary."""
    gold_words = {w for w, _ in segment_and_tag(gold, lexicon)}
    report = {cat: CategoryPrecision() for cat in CATEGORIES}
    for word, cat in segment_and_tag(candidate, lexicon):
        cp = report[cat]
        cp.generated += 1
        if word in gold_words:
            cp.matched += 1
    return report


@dataclass
class EvalReport:
    rouge1: RougeScore = field(default_factory=RougeScore)
    rouge2: RougeScore = field(default_factory=RougeScore)
    rougeL: RougeScore = field(default_factory=RougeScore)
    word_precision: Dict[str, CategoryPrecision] = field(default_factory=dict)
    seed: Optional[int] = None

    def to_dict(self) -> dict:
        d = {"rouge1": self.rouge1.to_dict(),
             "rouge2": self.rouge2.to_dict(),
             "rougeL": self.rougeL.to_dict(),
             "word_precision": {c: cp.to_dict()
                                for c, cp in self.word_precision.items()}}
        if self.seed is not None:
            d["seed"] = self.seed
        return d


@dataclass
class AggregateReport:
    """Seed-mean report plus the per-seed values and sample std deviations."""

    mean: EvalReport
    per_seed: List[EvalReport]
    std: Dict[str, float]

    def to_dict(self) -> dict:
        d = self.mean.to_dict()
        d["seeds"] = [r.to_dict() for r in self.per_seed]
        d["std"] = self.std
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2)


def _mean_rouge(scores: List[RougeScore]) -> RougeScore:
    return RougeScore(float(np.mean([s.precision for s in scores])),
                      float(np.mean([s.recall for s in scores])),
                      float(np.mean([s.f1 for s in scores])))


def evaluate_texts(pairs: Sequence[tuple], lexicon: TagLexicon,
                   seed: Optional[int] = None) -> EvalReport:
    """Score (candidate_text, gold_text) pairs: macro-averaged ROUGE and
    pooled word-precision counts."""
    r1, r2, rl = [], [], []
    pooled = {cat: CategoryPrecision() for cat in CATEGORIES}
    for cand_text, gold_text in pairs:
        cand = [w for w, _ in segment_and_tag(cand_text, lexicon)]
        gold = [w for w, _ in segment_and_tag(gold_text, lexicon)]
        r1.append(rouge_n(cand, gold, 1))
        r2.append(rouge_n(cand, gold, 2))
        rl.append(rouge_l(cand, gold))
        for cat, cp in word_precision(cand_text, gold_text, lexicon).items():
            pooled[cat].generated += cp.generated
            pooled[cat].matched += cp.matched
    if not r1:
        return EvalReport(seed=seed)
    return EvalReport(_mean_rouge(r1), _mean_rouge(r2), _mean_rouge(rl),
                      pooled, seed=seed)


def evaluate_model(params, test_set, vocab: Vocab, lexicon: TagLexicon,
                   chunk: int = 64, seed: Optional[int] = None) -> EvalReport:
    """Greedy-decode a test split and score it against the gold summaries."""
    from .model import generate_batch  # local import to avoid a cycle
    pairs = []
    for lo in range(0, len(test_set), chunk):
        part = test_set[lo:lo + chunk]
        outs = generate_batch([(c.src, c.features) for c in part], params)
        for case, ids in zip(part, outs):
            pairs.append((detokenize(ids, vocab), case.gold_text))
    return evaluate_texts(pairs, lexicon, seed=seed)


def aggregate(runs: Sequence[EvalReport]) -> AggregateReport:
    """Arithmetic mean per metric across seeds, with sample std deviations."""
    if not runs:
        raise ValueError("nothing to aggregate")
    mean = EvalReport(
        _mean_rouge([r.rouge1 for r in runs]),
        _mean_rouge([r.rouge2 for r in runs]),
        _mean_rouge([r.rougeL for r in runs]),
    )
    for cat in CATEGORIES:
        gen = [r.word_precision.get(cat, CategoryPrecision()).generated for r in runs]
        mat = [r.word_precision.get(cat, CategoryPrecision()).matched for r in runs]
        mean.word_precision[cat] = CategoryPrecision(float(np.mean(gen)),
                                                     float(np.mean(mat)))
    std = {}
    for name in ("rouge1", "rouge2", "rougeL"):
        vals = [getattr(r, name).f1 for r in runs]
        std[f"{name}.f1"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return AggregateReport(mean, list(runs), std)


def mean_precision(runs: Sequence[EvalReport], category: str) -> Optional[float]:
    """Seed-mean category precision, ignoring seeds that generated nothing."""
    vals = [r.word_precision[category].precision for r in runs
            if category in r.word_precision
            and r.word_precision[category].precision is not None]
    return float(np.mean(vals)) if vals else None


def render_table(reports: Dict[FeatureKind, AggregateReport]) -> str:
    """Aligned comparison table (scores x100); best value per column starred."""
    cols = ["R-1", "R-2", "R-L", *CATEGORIES]
    rows = []
    for kind, rep in reports.items():
        cells = [rep.mean.rouge1.f1 * 100, rep.mean.rouge2.f1 * 100,
                 rep.mean.rougeL.f1 * 100]
        for cat in CATEGORIES:
            p = mean_precision(rep.per_seed, cat)
            cells.append(p * 100 if p is not None else None)
        rows.append((KIND_LABELS[kind], cells))
    best = []
    for j in range(len(cols)):
        vals = [cells[j] for _, cells in rows if cells[j] is not None]
        best.append(max(vals) if vals else None)
    width = max(len(label) for label, _ in rows) + 2
    lines = ["model".ljust(width) + "".join(c.rjust(10) for c in cols)]
    for label, cells in rows:
        out = [label.ljust(width)]
        for j, v in enumerate(cells):
            if v is None:
                out.append("-".rjust(10))
            else:
                mark = "*" if best[j] is not None and v == best[j] else ""
                out.append(f"{v:.2f}{mark}".rjust(10))
        lines.append("".join(out))
    return "\n".join(lines)
