"""Metadata feature encoding: hospital, physician group, disease, length of stay.

Each feature kind has a fixed cardinality and an embedding table with one
extra reserved row (id 0) for padding/unknown values. Everything here is
pure id arithmetic plus the physician grouping procedure; the learnable
tables themselves live with the model parameters.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Optional

import numpy as np


class FeatureKind(Enum):
    VANILLA = "vanilla"
    HOSPITAL = "hospital"
    PHYSICIAN = "physician"
    DISEASE = "disease"
    LENGTH_OF_STAY = "stay"
    ALL_FEATURES = "all"

    @classmethod
    def parse(cls, name: str) -> "FeatureKind":
        for kind in cls:
            if kind.value == name.lower():
                return kind
        raise ValueError(f"unknown feature kind {name!r}; "
                         f"expected one of {[k.value for k in cls]}")


# Number of distinct values per single-feature kind. id 0 is reserved in
# every table for padding/unknown, so a table has CARDINALITY[kind]+1 rows.
CARDINALITY = {
    FeatureKind.VANILLA: 1,
    FeatureKind.HOSPITAL: 5,
    FeatureKind.PHYSICIAN: 485,
    FeatureKind.DISEASE: 2600,
    FeatureKind.LENGTH_OF_STAY: 1000,
}

# The combined variant applies these four tables simultaneously.
ALL_FEATURE_KINDS = (FeatureKind.HOSPITAL, FeatureKind.PHYSICIAN,
                     FeatureKind.DISEASE, FeatureKind.LENGTH_OF_STAY)

PHYSICIAN_GROUP_COUNT = CARDINALITY[FeatureKind.PHYSICIAN]
STAY_CAP = CARDINALITY[FeatureKind.LENGTH_OF_STAY]
DISEASE_CODES = CARDINALITY[FeatureKind.DISEASE]


class Icd10FormatError(ValueError):
    """Input looked like a code but is not letter-digit-digit shaped."""


class StayDomainError(ValueError):
    """Length of stay below one day."""


class GroupCapacityError(ValueError):
    """More distinct physicians (or groups) than the table can hold."""


@dataclass
class FeatureTable:
    """Embedding table descriptor for one feature kind.

    ``rows`` holds (cardinality + 1) x d entries; row 0 is the reserved
    padding/unknown row.
    """

    kind: FeatureKind
    cardinality: int
    rows: object  # anything with .shape; in practice a tensor.Tensor

    def __post_init__(self) -> None:
        expected = CARDINALITY[self.kind]
        if self.cardinality != expected:
            raise ValueError(
                f"{self.kind.value} cardinality must be {expected}, got {self.cardinality}")
        if self.rows.shape[0] != self.cardinality + 1:
            raise ValueError(
                f"{self.kind.value} table needs {self.cardinality + 1} rows "
                f"(one reserved), got {self.rows.shape[0]}")


@dataclass(frozen=True)
class FeatureAssignment:
    """Resolved per-case feature ids; 0 means unknown/missing."""

    hospital_id: int = 0
    physician_group: int = 0
    disease_code: int = 0
    stay_id: int = 0

    def __post_init__(self) -> None:
        bounds = (
            ("hospital_id", self.hospital_id, CARDINALITY[FeatureKind.HOSPITAL]),
            ("physician_group", self.physician_group, CARDINALITY[FeatureKind.PHYSICIAN]),
            ("disease_code", self.disease_code, CARDINALITY[FeatureKind.DISEASE]),
            ("stay_id", self.stay_id, CARDINALITY[FeatureKind.LENGTH_OF_STAY]),
        )
        for name, value, cap in bounds:
            if not 0 <= value <= cap:
                raise ValueError(f"{name}={value} outside [0, {cap}]")

    def id_for(self, kind: FeatureKind) -> int:
        if kind == FeatureKind.VANILLA:
            return 1
        return {
            FeatureKind.HOSPITAL: self.hospital_id,
            FeatureKind.PHYSICIAN: self.physician_group,
            FeatureKind.DISEASE: self.disease_code,
            FeatureKind.LENGTH_OF_STAY: self.stay_id,
        }[kind]


class PhysicianGroupMap:
    """Partition of physician ids into hospital-pure groups of <= group_size."""

    def __init__(self, group_size: int) -> None:
        self.group_size = group_size
        self.group_of: dict = {}
        self.hospital_of_group: dict = {}
        self.members: dict = {}

    @property
    def n_groups(self) -> int:
        return len(self.members)

    def lookup(self, physician_id) -> int:
        """Group id for a physician, or 0 if never seen (test-time unknown)."""
        return self.group_of.get(physician_id, 0)

    def _add(self, physician_id, group: int, hospital) -> None:
        self.group_of[physician_id] = group
        self.hospital_of_group[group] = hospital
        self.members.setdefault(group, []).append(physician_id)

    def to_json(self) -> str:
        payload = {
            "group_size": self.group_size,
            "groups": {
                str(g): {"hospital": self.hospital_of_group[g],
                         "members": list(self.members[g])}
                for g in sorted(self.members)
            },
        }
        return json.dumps(payload, ensure_ascii=False, indent=2, default=str)

    @classmethod
    def from_json(cls, text: str) -> "PhysicianGroupMap":
        payload = json.loads(text)
        gmap = cls(payload["group_size"])
        for g_str, entry in payload["groups"].items():
            g = int(g_str)
            for pid in entry["members"]:
                gmap._add(pid, g, entry["hospital"])
        return gmap


def group_physicians(cases: Iterable, group_size: int = 10, seed: int = 0) -> PhysicianGroupMap:
    """Hash physician ids into hospital-pure groups of at most ``group_size``.

    Within each hospital (processed in sorted order) the case list is shuffled
    by ``seed``, then distinct physician ids are assigned to groups in order
    of first appearance; group numbering is contiguous across hospitals.
    Deterministic for a fixed seed.
    """
    by_hospital: dict = {}
    for case in cases:
        by_hospital.setdefault(case.hospital_id, []).append(case.physician_id)
    n_distinct = len({p for pids in by_hospital.values() for p in pids})
    if n_distinct > PHYSICIAN_GROUP_COUNT * group_size:
        raise GroupCapacityError(
            f"{n_distinct} distinct physicians exceed capacity "
            f"{PHYSICIAN_GROUP_COUNT} groups x {group_size}")

    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    gmap = PhysicianGroupMap(group_size)
    group = 0
    for hospital in sorted(by_hospital):
        pids = by_hospital[hospital]
        order = rng.permutation(len(pids))
        fill = group_size  # force a fresh group at each hospital boundary
        for i in order:
            pid = pids[i]
            if pid in gmap.group_of:
                continue
            if fill == group_size:
                group += 1
                fill = 0
                if group > PHYSICIAN_GROUP_COUNT:
                    raise GroupCapacityError(
                        f"grouping requires more than {PHYSICIAN_GROUP_COUNT} groups")
            gmap._add(pid, group, hospital)
            fill += 1
    return gmap


_CODE_PREFIX = re.compile(r"[A-Z][0-9][0-9]")


def _normalize_half_width(s: str) -> str:
    # local copy of the width rule to avoid importing the text module
    out = []
    for ch in s:
        o = ord(ch)
        if 0xFF01 <= o <= 0xFF5E:
            out.append(chr(o - 0xFEE0))
        elif o == 0x3000:
            out.append(" ")
        else:
            out.append(ch)
    return "".join(out)


def encode_icd10(disease: str, lexicon: Optional[Mapping[str, str]] = None) -> int:
    """Map an ICD-10 code (or a disease name via ``lexicon``) to a feature id.

    Only the first three characters of the code matter (letter-digit-digit);
    the 2,600 possible prefixes map bijectively, letter-major, onto
    [1, 2600]: A00 -> 1, ..., Z99 -> 2600. A name missing from the lexicon
    resolves to 0 (unknown). A digit-bearing string that is not a valid code
    raises Icd10FormatError.
    """
    s = _normalize_half_width(str(disease)).strip()
    if not s:
        return 0
    cand = s.upper()
    if _CODE_PREFIX.match(cand):
        letter = ord(cand[0]) - ord("A")
        return letter * 100 + int(cand[1]) * 10 + int(cand[2]) + 1
    if any(c.isdigit() for c in cand):
        raise Icd10FormatError(f"malformed ICD-10 code {disease!r}")
    if lexicon:
        for key in (s, s.lower()):
            if key in lexicon:
                return encode_icd10(lexicon[key])
    return 0


def decode_icd10(feature_id: int) -> str:
    """Inverse of encode_icd10 over [1, 2600], back to the 3-char prefix."""
    if not 1 <= feature_id <= DISEASE_CODES:
        raise ValueError(f"disease feature id {feature_id} outside [1, {DISEASE_CODES}]")
    k = feature_id - 1
    return chr(ord("A") + k // 100) + f"{k % 100:02d}"


def encode_stay(days: int) -> int:
    """Length-of-stay feature id: identity up to the 1,000-day cap, clamped above."""
    if days < 1:
        raise StayDomainError(f"length of stay must be >= 1 day, got {days}")
    return min(int(days), STAY_CAP)


def encode_hospital(hospital) -> int:
    """Hospital feature id from an int in [1,5] or a letter A..E; else 0."""
    if hospital is None:
        return 0
    if isinstance(hospital, (int, np.integer)):
        return int(hospital) if 1 <= hospital <= CARDINALITY[FeatureKind.HOSPITAL] else 0
    s = str(hospital).strip().upper()
    if len(s) == 1 and "A" <= s <= "E":
        return ord(s) - ord("A") + 1
    if s.isdigit():
        return encode_hospital(int(s))
    return 0


def resolve_features(case, groups: Optional[PhysicianGroupMap] = None,
                     lexicon: Optional[Mapping[str, str]] = None) -> FeatureAssignment:
    """Resolve one case's metadata to feature ids; missing or bad fields map to 0."""
    hospital = encode_hospital(getattr(case, "hospital_id", None))

    physician = getattr(case, "physician_id", None)
    group = groups.lookup(physician) if (groups and physician is not None) else 0

    disease = 0
    icd = getattr(case, "icd10", None)
    name = getattr(case, "disease_name", None)
    try:
        if icd:
            disease = encode_icd10(icd, lexicon)
        elif name:
            disease = encode_icd10(name, lexicon)
    except Icd10FormatError:
        disease = 0

    days = getattr(case, "stay_days", None)
    stay = encode_stay(days) if (days is not None and days >= 1) else 0

    return FeatureAssignment(hospital, group, disease, stay)


def load_icd_lexicon(path) -> dict:
    """Read a name<TAB>icd10_code lexicon file (UTF-8, one entry per line)."""
    lexicon = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            name, _, code = line.partition("\t")
            lexicon[name] = code
    return lexicon


def save_icd_lexicon(lexicon: Mapping[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name in sorted(lexicon):
            fh.write(f"{name}\t{lexicon[name]}\n")
