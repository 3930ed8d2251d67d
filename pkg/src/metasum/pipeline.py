"""Corpus -> model-ready datasets: vocabulary, physician groups, token ids."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping

import numpy as np

from .metadata import PhysicianGroupMap, group_physicians, resolve_features
from .synthgen import Case
from .text import BOS, EOS, TagLexicon, Vocab, tokenize
from .training import EncodedCase

DEFAULT_VOCAB_SIZE = 800


@dataclass
class DataBundle:
    """Everything training and evaluation need, derived once per corpus."""

    vocab: Vocab
    tag_lexicon: TagLexicon
    icd_lexicon: Mapping[str, str]
    groups: PhysicianGroupMap
    train: List[EncodedCase] = field(default_factory=list)
    valid: List[EncodedCase] = field(default_factory=list)
    test: List[EncodedCase] = field(default_factory=list)


def encode_case(case: Case, vocab: Vocab, groups: PhysicianGroupMap,
                icd_lexicon: Mapping[str, str], max_input_len: int,
                max_output_len: int) -> EncodedCase:
    src = np.asarray(tokenize(case.source, vocab)[:max_input_len], dtype=np.int64)
    content = tokenize(case.summary, vocab)[:max_output_len - 1]
    tgt = np.asarray([BOS, *content, EOS], dtype=np.int64)
    feats = resolve_features(case, groups, icd_lexicon)
    return EncodedCase(case.case_id, src, tgt, feats, case.summary)


def prepare(cases: List[Case], splits: Dict[str, List[int]],
            tag_lexicon: TagLexicon, icd_lexicon: Mapping[str, str],
            max_input_len: int, max_output_len: int,
            vocab_size: int = DEFAULT_VOCAB_SIZE,
            group_seed: int = 0) -> DataBundle:
    """Build vocab and physician groups from the train split, encode all splits.

    Physician groups are derived from training cases only, so genuinely
    unseen test-time physicians resolve to the unknown id instead of failing.
    """
    by_id = {c.case_id: c for c in cases}
    train_cases = [by_id[i] for i in splits["train"]]
    vocab = Vocab.build(
        [t for c in train_cases for t in (c.source, c.summary)], vocab_size)
    groups = group_physicians(train_cases, seed=group_seed)
    bundle = DataBundle(vocab, tag_lexicon, icd_lexicon, groups)
    for split_name in ("train", "valid", "test"):
        encoded = [encode_case(by_id[i], vocab, groups, icd_lexicon,
                               max_input_len, max_output_len)
                   for i in splits[split_name]]
        setattr(bundle, split_name, encoded)
    return bundle
