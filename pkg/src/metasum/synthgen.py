"""Synthetic (progress notes, discharge summary, metadata) corpus generator.

Metadata causally controls summary content and style through per-kind
coupling strengths in [0, 1]:

* hospital  -> the bullet symbol and sentence punctuation of the summary
* physician -> a header phrase and whether summary lines are numbered
* disease   -> which disease/symptom/drug terms the summary asserts
* stay      -> the day count quoted in the summary

The source notes record the facts for every case (the true disease's terms
mixed with two equally-mentioned differential distractors plus shared filler
vocabulary), so the primary disease is decidable only from metadata. With a
coupling at 0 the corresponding summary trait is drawn uniformly at random,
making it statistically independent of that feature.

Generation is deterministic: each case draws from a substream keyed by
(seed, case_id), so any subset of cases can be produced in any order.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .metadata import decode_icd10
from .text import DISEASE, SYMPTOM, TagLexicon

HOSPITAL_BULLETS = ("•", "*", "-", "+", ">")
HOSPITAL_PUNCTS = ("。", ".", ";", "!", ":")

_SYLLABLES = [c + v for c in "bdgkmnrstz" for v in "aeiou"]  # 50

# disjoint index ranges per vocabulary role
_DISEASE_BASE = 0
_SYMPTOM_BASE = 10_000
_DRUG_BASE = 30_000
_FILLER_BASE = 50_000
_HABIT_BASE = 70_000

_SPLIT_TAG = 0x5B


class CorpusSpecError(ValueError):
    pass


def _word(index: int) -> str:
    """Pronounceable word from a base-50 syllable encoding; injective."""
    s = len(_SYLLABLES)
    return _SYLLABLES[index // (s * s) % s] + _SYLLABLES[index // s % s] + _SYLLABLES[index % s]


@dataclass(frozen=True)
class TermSet:
    disease: str
    symptoms: Tuple[str, ...]
    drugs: Tuple[str, ...]

    def all_terms(self) -> Tuple[str, ...]:
        return (self.disease, *self.symptoms, *self.drugs)


@dataclass
class CorpusSpec:
    """Recipe binding metadata values to lexical/stylistic summary effects."""

    n_cases: int = 4000
    n_hospitals: int = 5
    n_physicians: int = 120
    n_diseases: int = 40
    n_fillers: int = 150
    habits_per_hospital: int = 3
    stay_median: float = 9.0
    stay_sigma: float = 1.0
    hospital_coupling: float = 1.0
    physician_coupling: float = 1.0
    disease_coupling: float = 1.0
    stay_coupling: float = 1.0
    icd_missing_rate: float = 0.10
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.n_hospitals <= len(HOSPITAL_BULLETS):
            raise CorpusSpecError(
                f"n_hospitals must be in [1, {len(HOSPITAL_BULLETS)}]")
        if self.n_physicians < self.n_hospitals:
            raise CorpusSpecError("need at least one physician per hospital")
        if self.n_diseases < 3:
            raise CorpusSpecError("need >= 3 diseases for differential distractors")
        if self.n_hospitals * self.habits_per_hospital < 1:
            raise CorpusSpecError("need at least one physician habit")
        for name in ("hospital_coupling", "physician_coupling",
                     "disease_coupling", "stay_coupling", "icd_missing_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise CorpusSpecError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        return cls(**d)

    # derived, deterministic vocabulary -----------------------------------

    def hospital_style(self, hospital: int) -> Tuple[str, str]:
        return HOSPITAL_BULLETS[hospital - 1], HOSPITAL_PUNCTS[hospital - 1]

    def term_set(self, disease: int) -> TermSet:
        return TermSet(
            disease=_word(_DISEASE_BASE + disease),
            symptoms=tuple(_word(_SYMPTOM_BASE + 3 * disease + k) for k in range(3)),
            drugs=tuple(_word(_DRUG_BASE + 2 * disease + k) for k in range(2)),
        )

    def filler(self, index: int) -> str:
        return _word(_FILLER_BASE + index % self.n_fillers)

    def n_habits(self) -> int:
        return self.n_hospitals * self.habits_per_hospital

    def habit(self, habit_id: int) -> Tuple[Tuple[str, str], bool]:
        """(header phrase, numbered-lines flag) for one habit id."""
        phrase = (_word(_HABIT_BASE + 2 * habit_id),
                  _word(_HABIT_BASE + 2 * habit_id + 1))
        return phrase, habit_id % 2 == 0

    def physician_home(self, physician: int) -> int:
        return (physician - 1) % self.n_hospitals + 1

    def physician_habit_id(self, physician: int) -> int:
        hospital = self.physician_home(physician)
        local = (physician - 1) // self.n_hospitals % self.habits_per_hospital
        return (hospital - 1) * self.habits_per_hospital + local

    def icd_code(self, disease: int) -> str:
        prefix = decode_icd10((disease * 61 + 7) % 2600 + 1)
        return prefix + (f".{disease % 10}" if disease % 3 == 0 else "")


@dataclass
class Case:
    """One hospitalization record: notes, gold summary and metadata fields."""

    case_id: int
    hospital_id: int
    physician_id: int
    disease_name: str
    icd10: Optional[str]
    stay_days: int
    source: str
    summary: str

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Case":
        return cls(**d)


def _gen_case(spec: CorpusSpec, case_id: int) -> Case:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, case_id]))

    hospital = int(rng.integers(1, spec.n_hospitals + 1))
    pool = [p for p in range(1, spec.n_physicians + 1)
            if spec.physician_home(p) == hospital]
    physician = pool[int(rng.integers(len(pool)))]
    disease = int(rng.integers(spec.n_diseases))
    stay = max(1, int(round(rng.lognormal(np.log(spec.stay_median), spec.stay_sigma))))

    others = [d for d in range(spec.n_diseases) if d != disease]
    distractors = [int(i) for i in rng.choice(others, size=2, replace=False)]
    true_terms = spec.term_set(disease)
    alt_terms = [spec.term_set(d) for d in distractors]

    # --- source notes: the facts, with an unresolved differential ---------
    # Every construction below is order-symmetric between the true disease
    # and its distractors, so the primary disease is decidable only from the
    # metadata, never from source positions or frequencies.
    candidates = [true_terms, *alt_terms]
    mention_cycle = [t for ts in candidates for t in (ts.disease, *ts.symptoms)]
    mention_cycle = [mention_cycle[i] for i in rng.permutation(len(mention_cycle))]
    drug_cycle = [d for ts in candidates for d in ts.drugs]
    drug_cycle = [drug_cycle[i] for i in rng.permutation(len(drug_cycle))]
    differential = [ts.disease for ts in candidates]
    differential = [differential[i] for i in rng.permutation(3)]
    all_symptoms = [s for ts in candidates for s in ts.symptoms]
    presenting = all_symptoms[int(rng.integers(len(all_symptoms)))]

    def fillers(k: int) -> List[str]:
        return [spec.filler(int(i)) for i in rng.integers(0, spec.n_fillers, size=k)]

    lines = []
    first = fillers(2)
    lines.append(" ".join(["admitted", "with", presenting, "suspect",
                           differential[0], "vs", differential[1], "vs",
                           differential[2], ",", *first]))
    note_days = min(max(stay, 3), 6)
    for day in range(1, note_days + 1):
        drug = drug_cycle[(day - 1) % len(drug_cycle)]
        dose = int(rng.choice([5, 10, 20, 25, 50, 100, 250, 500]))
        mention = mention_cycle[(day - 1) % len(mention_cycle)]
        mention2 = mention_cycle[(day + 4) % len(mention_cycle)]
        lines.append(" ".join(["day", str(day), drug, str(dose), "mg",
                               fillers(1)[0], mention, mention2]))
    lines.append(" ".join(["course", "lab", str(int(rng.integers(40, 400))),
                           fillers(1)[0], "discharge", "after", str(stay), "day"]))
    source = "\n".join(lines)

    # --- summary: metadata-coupled style and content -----------------------
    style_h = hospital if rng.random() < spec.hospital_coupling \
        else int(rng.integers(1, spec.n_hospitals + 1))
    bullet, punct = spec.hospital_style(style_h)

    habit_id = spec.physician_habit_id(physician) \
        if rng.random() < spec.physician_coupling \
        else int(rng.integers(spec.n_habits()))
    (phrase_a, phrase_b), numbered = spec.habit(habit_id)

    summary_terms = true_terms if rng.random() < spec.disease_coupling \
        else spec.term_set(int(rng.integers(spec.n_diseases)))
    syms = [summary_terms.symptoms[int(i)]
            for i in rng.choice(3, size=2, replace=False)]
    drug = summary_terms.drugs[int(rng.integers(2))]

    days_shown = stay if rng.random() < spec.stay_coupling \
        else max(1, int(round(rng.lognormal(np.log(spec.stay_median),
                                            spec.stay_sigma))))

    # three lines, at most 31 tokens with whitespace: fits the desk decoder
    head = [str(1)] if numbered else []
    slines = [
        " ".join([bullet, phrase_a, phrase_b, punct]),
        " ".join([*head, summary_terms.disease, "with", syms[0], syms[1], punct]),
        " ".join([bullet, drug, "for", str(days_shown), "day", punct]),
    ]
    summary = "\n".join(slines)

    icd = None if rng.random() < spec.icd_missing_rate else spec.icd_code(disease)
    return Case(case_id=case_id, hospital_id=hospital, physician_id=physician,
                disease_name=true_terms.disease, icd10=icd, stay_days=stay,
                source=source, summary=summary)


def build_tag_lexicon(spec: CorpusSpec) -> TagLexicon:
    """Every disease and symptom term the generator can emit, tagged."""
    lex = TagLexicon()
    for d in range(spec.n_diseases):
        ts = spec.term_set(d)
        lex.add(ts.disease, DISEASE)
        for s in ts.symptoms:
            lex.add(s, SYMPTOM)
    return lex


def build_icd_lexicon(spec: CorpusSpec) -> Dict[str, str]:
    """disease name -> full ICD-10 code, for the name-fallback encoding path."""
    return {spec.term_set(d).disease: spec.icd_code(d)
            for d in range(spec.n_diseases)}


def make_splits(spec: CorpusSpec) -> Dict[str, List[int]]:
    """Disjoint, covering train/valid/test ids at roughly 18:1:1."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _SPLIT_TAG]))
    order = [int(i) for i in rng.permutation(spec.n_cases)]
    n_eval = int(round(spec.n_cases * 0.05))
    return {"valid": sorted(order[:n_eval]),
            "test": sorted(order[n_eval:2 * n_eval]),
            "train": sorted(order[2 * n_eval:])}


def generate_corpus(spec: CorpusSpec):
    """All cases plus the tag lexicon, name->code lexicon, and splits."""
    cases = [_gen_case(spec, i) for i in range(spec.n_cases)]
    return cases, build_tag_lexicon(spec), build_icd_lexicon(spec), make_splits(spec)


@dataclass
class CorpusStats:
    n_cases: int
    mean_source_words: float
    mean_summary_words: float
    n_hospitals: int
    n_physicians: int
    n_diseases: int
    stay_mean: float
    stay_median: float
    stay_std: float

    @property
    def source_summary_ratio(self) -> float:
        return self.mean_source_words / self.mean_summary_words

    def render(self) -> str:
        rows = [
            ("Number of cases", f"{self.n_cases}"),
            ("Average num of words in source", f"{self.mean_source_words:.1f}"),
            ("Average num of words in summary", f"{self.mean_summary_words:.1f}"),
            ("Source/summary ratio", f"{self.source_summary_ratio:.2f}"),
            ("Number of hospitals", f"{self.n_hospitals}"),
            ("Number of physicians", f"{self.n_physicians}"),
            ("Number of diseases", f"{self.n_diseases}"),
            ("Length of stay mean", f"{self.stay_mean:.1f}"),
            ("Length of stay median", f"{self.stay_median:.1f}"),
            ("Length of stay std", f"{self.stay_std:.1f}"),
        ]
        width = max(len(k) for k, _ in rows) + 2
        return "\n".join(k.ljust(width) + v for k, v in rows)


def corpus_stats(cases: List[Case]) -> CorpusStats:
    if not cases:
        raise ValueError("empty corpus")
    stays = [c.stay_days for c in cases]
    return CorpusStats(
        n_cases=len(cases),
        mean_source_words=float(np.mean([len(c.source.split()) for c in cases])),
        mean_summary_words=float(np.mean([len(c.summary.split()) for c in cases])),
        n_hospitals=len({c.hospital_id for c in cases}),
        n_physicians=len({c.physician_id for c in cases}),
        n_diseases=len({c.disease_name for c in cases}),
        stay_mean=float(np.mean(stays)),
        stay_median=float(statistics.median(stays)),
        stay_std=float(np.std(stays, ddof=1)) if len(stays) > 1 else 0.0,
    )


# ---------------------------------------------------------------------------
# corpus directory layout
# ---------------------------------------------------------------------------

def write_corpus(out_dir, spec: CorpusSpec) -> CorpusStats:
    """Write corpus.jsonl, lexicon.tsv, icd10_names.tsv, splits.json, spec.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases, tag_lex, icd_lex, splits = generate_corpus(spec)
    with open(out / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for case in cases:
            fh.write(json.dumps(case.to_dict(), ensure_ascii=False,
                                sort_keys=True) + "\n")
    tag_lex.save(out / "lexicon.tsv")
    with open(out / "icd10_names.tsv", "w", encoding="utf-8") as fh:
        for name in sorted(icd_lex):
            fh.write(f"{name}\t{icd_lex[name]}\n")
    with open(out / "splits.json", "w", encoding="utf-8") as fh:
        json.dump(splits, fh, sort_keys=True)
    with open(out / "spec.json", "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, sort_keys=True, indent=2)
    return corpus_stats(cases)


def read_corpus(corpus_dir):
    """Load (cases, tag_lexicon, icd_lexicon, splits) written by write_corpus."""
    from .metadata import load_icd_lexicon
    cdir = Path(corpus_dir)
    cases = []
    with open(cdir / "corpus.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                cases.append(Case.from_dict(json.loads(line)))
    tag_lex = TagLexicon.load(cdir / "lexicon.tsv")
    icd_lex = load_icd_lexicon(cdir / "icd10_names.tsv")
    with open(cdir / "splits.json", encoding="utf-8") as fh:
        splits = json.load(fh)
    return cases, tag_lex, icd_lex, splits
