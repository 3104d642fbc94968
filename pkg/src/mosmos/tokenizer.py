"""Closed-vocabulary word-level tokenizer."""

import json
import re
from pathlib import Path

PAD, SOT, EOT, UNK = "<pad>", "<sot>", "<eot>", "<unk>"
SPECIALS = (PAD, SOT, EOT, UNK)

_WORD_RE = re.compile(r"[0-9a-z]+|[^\s0-9a-z]")


def words(text):
    return _WORD_RE.findall(text.lower())


class Tokenizer:
    def __init__(self, vocab):
        self.itos = list(vocab)
        if tuple(self.itos[:4]) != SPECIALS:
            raise ValueError("tokenizer vocabulary must start with the special tokens")
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        self.pad_id, self.sot_id, self.eot_id, self.unk_id = range(4)

    @classmethod
    def build(cls, texts):
        seen = sorted({w for t in texts for w in words(t)})
        return cls(list(SPECIALS) + seen)

    def __len__(self):
        return len(self.itos)

    def ids(self, text):
        return [self.stoi.get(w, self.unk_id) for w in words(text)]

    def encode_report(self, text, length):
        """[sot] words [eot] padded to ``length``; words are truncated to fit."""
        body = self.ids(text)[: length - 2]
        seq = [self.sot_id] + body + [self.eot_id]
        return seq + [self.pad_id] * (length - len(seq))

    def encode_tag(self, name, length):
        """words [eot] padded to ``length``; no start token (a prompt precedes it)."""
        body = self.ids(name)[: length - 1]
        seq = body + [self.eot_id]
        return seq + [self.pad_id] * (length - len(seq))

    def to_json(self):
        return self.itos

    def save(self, path):
        Path(path).write_text(json.dumps(self.itos))

    @classmethod
    def load(cls, path):
        return cls(json.loads(Path(path).read_text()))
