"""Organ-tag vocabulary: synonym normalization, tag matching and multi-hot labels.

Matching is whole-token and case-insensitive. Tokens are maximal runs of
alphanumeric characters; multi-word phrases match across any separator run
and the longest phrase starting at a token wins.
"""

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

_TOKEN_RE = re.compile(r"[0-9a-z]+")


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class TagEntry:
    canonical: str
    synonyms: frozenset = field(default_factory=frozenset)
    abbreviations: frozenset = field(default_factory=frozenset)

    def surface_forms(self):
        return sorted(self.synonyms | self.abbreviations)


def _phrase(text):
    return tuple(_TOKEN_RE.findall(text.lower()))


class TagVocabulary:
    """Ordered, immutable list of canonical organ tags.

    The index of an entry in ``entries`` is its label position.
    """

    def __init__(self, entries: Sequence[TagEntry]):
        if len(entries) < 1:
            raise VocabularyError("vocabulary needs at least one tag")
        self.entries = tuple(entries)
        self._index = {}
        # phrase (token tuple) -> canonical name
        self._phrases = {}
        for k, entry in enumerate(self.entries):
            name = entry.canonical
            if not name or name != name.lower() or name.strip() != name:
                raise VocabularyError(f"canonical name must be non-empty lowercase: {name!r}")
            if _phrase(name) != tuple(name.split()):
                raise VocabularyError(f"canonical name must be alphanumeric words: {name!r}")
            if name in self._index:
                raise VocabularyError(f"duplicate canonical name {name!r}")
            self._index[name] = k
        for entry in self.entries:
            for form in [entry.canonical, *entry.synonyms, *entry.abbreviations]:
                key = _phrase(form)
                if not key:
                    raise VocabularyError(f"empty surface form for {entry.canonical!r}")
                owner = self._phrases.get(key)
                if owner is not None and owner != entry.canonical:
                    raise VocabularyError(
                        f"surface form {form!r} maps to both {owner!r} and {entry.canonical!r}"
                    )
                self._phrases[key] = entry.canonical
        self._max_len = max(len(p) for p in self._phrases)

    @property
    def K(self):
        return len(self.entries)

    @property
    def names(self):
        return [e.canonical for e in self.entries]

    def index(self, name):
        return self._index[name]

    def __len__(self):
        return self.K

    def __eq__(self, other):
        return isinstance(other, TagVocabulary) and self.entries == other.entries

    # -- matching ---------------------------------------------------------

    def _scan(self, text):
        """Yield (start, end, canonical) for every longest-first phrase match."""
        lowered = text.lower()
        tokens = list(_TOKEN_RE.finditer(lowered))
        i = 0
        while i < len(tokens):
            for n in range(min(self._max_len, len(tokens) - i), 0, -1):
                key = tuple(m.group() for m in tokens[i:i + n])
                canonical = self._phrases.get(key)
                if canonical is not None:
                    yield tokens[i].start(), tokens[i + n - 1].end(), canonical
                    i += n
                    break
            else:
                i += 1

    # -- (de)serialization -------------------------------------------------

    def to_json(self):
        return [
            {
                "canonical": e.canonical,
                "synonyms": sorted(e.synonyms),
                "abbreviations": sorted(e.abbreviations),
            }
            for e in self.entries
        ]

    @classmethod
    def from_json(cls, data):
        entries = []
        for item in data:
            entries.append(
                TagEntry(
                    canonical=item["canonical"],
                    synonyms=frozenset(s.lower() for s in item.get("synonyms", [])),
                    abbreviations=frozenset(s.lower() for s in item.get("abbreviations", [])),
                )
            )
        return cls(entries)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))

    @classmethod
    def from_names(cls, names: Iterable[str]):
        return cls([TagEntry(n) for n in names])


def normalize_report(text: str, vocab: TagVocabulary) -> str:
    """Lowercase ``text`` and rewrite every synonym/abbreviation to its canonical tag."""
    lowered = text.lower()
    out = []
    pos = 0
    for start, end, canonical in vocab._scan(lowered):
        out.append(lowered[pos:start])
        out.append(canonical)
        pos = end
    out.append(lowered[pos:])
    return "".join(out)


def extract_tags(text: str, vocab: TagVocabulary) -> np.ndarray:
    """Multi-hot label vector of length K; repeated mentions collapse to one.

    Negated mentions still count.
    """
    bits = np.zeros(vocab.K, dtype=np.int64)
    for _, _, canonical in vocab._scan(normalize_report(text, vocab)):
        bits[vocab.index(canonical)] = 1
    return bits


def extract_tags_batch(texts, vocab):
    return np.stack([extract_tags(t, vocab) for t in texts]) if texts else np.zeros((0, vocab.K), np.int64)


# K=20 default organ list. Plurals must be listed explicitly.
DEFAULT_TAGS = [
    ("liver", ["hepatic"], []),
    ("spleen", ["splenic"], []),
    ("kidney", ["renal", "kidneys"], []),
    ("pancreas", ["pancreatic"], []),
    ("stomach", ["gastric"], []),
    ("gallbladder", ["gall bladder"], ["gb"]),
    ("esophagus", ["oesophagus", "esophageal"], []),
    ("aorta", ["aortic"], []),
    ("heart", ["cardiac"], []),
    ("lung", ["pulmonary", "lungs"], []),
    ("brain", ["cerebral"], []),
    ("bladder", ["urinary bladder", "vesical"], []),
    ("colon", ["colonic", "large bowel"], []),
    ("small intestine", ["small bowel"], ["sb"]),
    ("bone", ["osseous", "bones"], []),
    ("spine", ["spinal", "vertebral column"], []),
    ("thyroid", ["thyroid gland"], []),
    ("prostate", ["prostatic"], []),
    ("left ventricle", [], ["lv"]),
    ("inferior vena cava", [], ["ivc"]),
]


def default_vocabulary() -> TagVocabulary:
    return TagVocabulary(
        [TagEntry(c, frozenset(s), frozenset(a)) for c, s, a in DEFAULT_TAGS]
    )
