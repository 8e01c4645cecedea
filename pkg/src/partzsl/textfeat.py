"""Turn per-class text articles into a term-frequency / inverse-document-frequency matrix.

One document per class. Tokenization keeps maximal runs of alphabetic
characters (hyphens split tokens), folds case, and drops stopwords.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import InputError
from .model import TfIdfMatrix

IDF_VARIANTS = ("smoothed", "plain")
DEFAULT_TOKEN_PATTERN = r"[^\W\d_]+"


@dataclass(frozen=True)
class TextCorpus:
    """Raw per-class articles plus the stopword set used to clean them."""

    documents: dict
    stopwords: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "documents", dict(self.documents))
        object.__setattr__(self, "stopwords", frozenset(self.stopwords))


@dataclass(frozen=True)
class FeaturizerConfig:
    lowercase: bool = True
    token_pattern: str = DEFAULT_TOKEN_PATTERN
    min_df: int = 1
    idf_variant: str = "smoothed"
    l2_normalize: bool = True

    def __post_init__(self):
        if self.min_df < 1:
            raise InputError("min_df must be >= 1")
        if self.idf_variant not in IDF_VARIANTS:
            raise InputError(
                f"idf_variant must be one of {IDF_VARIANTS}, got {self.idf_variant!r}")
        try:
            re.compile(self.token_pattern)
        except re.error as exc:
            raise InputError(f"invalid token pattern: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "lowercase": self.lowercase,
            "token_pattern": self.token_pattern,
            "min_df": self.min_df,
            "idf_variant": self.idf_variant,
            "l2_normalize": self.l2_normalize,
        }


def tokenize(text: str, config: FeaturizerConfig = FeaturizerConfig(),
             stopwords: Iterable[str] = frozenset()) -> list:
    """Split text into clean tokens, preserving their original order."""
    stopset = frozenset(stopwords)
    tokens = re.findall(config.token_pattern, text)
    if config.lowercase:
        tokens = [t.lower() for t in tokens]
    return [t for t in tokens if t.lower() not in stopset]


def default_stopwords() -> frozenset:
    """The English stopword list shipped with the package."""
    data = resources.files("partzsl.data").joinpath("stopwords_english.txt")
    return load_stopwords_text(data.read_text(encoding="utf-8"))


def load_stopwords_text(text: str) -> frozenset:
    return frozenset(line.strip().lower() for line in text.splitlines() if line.strip())


def load_stopwords(path) -> frozenset:
    return load_stopwords_text(Path(path).read_text(encoding="utf-8"))


class TfidfFeaturizer:
    """Fits a vocabulary and idf weights on a corpus, then featurizes documents.

    The idf statistics are learned once from the fitted corpus; later
    ``transform`` calls reuse them, so text for classes unseen at fit time
    is represented in the fitted term space (out-of-vocabulary terms drop).
    """

    def __init__(self, config: FeaturizerConfig = FeaturizerConfig()):
        self.config = config
        self.vocab_ = None
        self.idf_ = None
        self._index = None

    @property
    def fitted(self) -> bool:
        return self.vocab_ is not None

    def fit_transform(self, corpus: TextCorpus) -> TfIdfMatrix:
        """Learn vocabulary + idf from the corpus and featurize it."""
        if self.config.min_df > len(corpus.documents):
            raise InputError(
                f"min_df={self.config.min_df} exceeds corpus size "
                f"{len(corpus.documents)}")
        token_lists = {cid: tokenize(text, self.config, corpus.stopwords)
                       for cid, text in corpus.documents.items()}
        if not any(token_lists.values()):
            raise InputError("all documents are empty after tokenization")
        df = Counter()
        for tokens in token_lists.values():
            df.update(set(tokens))
        vocab = sorted(t for t, n in df.items() if n >= self.config.min_df)
        if not vocab:
            raise InputError("no term meets the min_df threshold")
        self.vocab_ = vocab
        self._index = {t: i for i, t in enumerate(vocab)}
        n_docs = len(corpus.documents)
        dfv = np.array([df[t] for t in vocab], dtype=np.float64)
        if self.config.idf_variant == "smoothed":
            self.idf_ = np.log((1.0 + n_docs) / (1.0 + dfv)) + 1.0
        else:
            self.idf_ = np.log(n_docs / dfv)
        return self._featurize(token_lists)

    def transform(self, documents: Mapping[str, str],
                  stopwords: Iterable[str] = frozenset()) -> TfIdfMatrix:
        """Featurize new documents with the fitted vocabulary and idf."""
        if not self.fitted:
            raise InputError("featurizer has not been fitted")
        token_lists = {cid: tokenize(text, self.config, stopwords)
                       for cid, text in documents.items()}
        return self._featurize(token_lists)

    def _featurize(self, token_lists: Mapping[str, list]) -> TfIdfMatrix:
        values = np.zeros((len(self.vocab_), len(token_lists)))
        for k, tokens in enumerate(token_lists.values()):
            counts = Counter(tokens)
            for term, tf in counts.items():
                i = self._index.get(term)
                if i is not None:
                    values[i, k] = tf * self.idf_[i]
        if self.config.l2_normalize:
            norms = np.linalg.norm(values, axis=0)
            nonzero = norms > 0
            values[:, nonzero] /= norms[nonzero]
        return TfIdfMatrix(values, tuple(self.vocab_), tuple(token_lists.keys()))

    # Persistence: vocab as one term per line, idf + config as JSON.

    def save(self, out_dir) -> None:
        if not self.fitted:
            raise InputError("cannot save an unfitted featurizer")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "vocab.txt").write_text(
            "".join(t + "\n" for t in self.vocab_), encoding="utf-8")
        state = {"config": self.config.to_dict(), "idf": list(self.idf_)}
        (out / "featurizer.json").write_text(
            json.dumps(state, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, in_dir) -> "TfidfFeaturizer":
        src = Path(in_dir)
        vocab_path = src / "vocab.txt"
        state_path = src / "featurizer.json"
        if not vocab_path.exists() or not state_path.exists():
            raise InputError(f"no fitted featurizer found in {src}")
        state = json.loads(state_path.read_text(encoding="utf-8"))
        feat = cls(FeaturizerConfig(**state["config"]))
        feat.vocab_ = [line for line in
                       vocab_path.read_text(encoding="utf-8").splitlines() if line]
        feat._index = {t: i for i, t in enumerate(feat.vocab_)}
        feat.idf_ = np.asarray(state["idf"], dtype=np.float64)
        if feat.idf_.shape != (len(feat.vocab_),):
            raise InputError("featurizer idf length does not match vocabulary")
        return feat


def read_corpus_dir(corpus_dir, stopwords: frozenset = frozenset()) -> TextCorpus:
    """Load a directory of ``<class_id>.txt`` files as a corpus, sorted by id."""
    root = Path(corpus_dir)
    if not root.is_dir():
        raise InputError(f"corpus directory {root} does not exist")
    docs = {}
    for path in sorted(root.glob("*.txt")):
        docs[path.stem] = path.read_text(encoding="utf-8")
    if not docs:
        raise InputError(f"no *.txt documents found in {root}")
    return TextCorpus(docs, stopwords)


def read_corpus_json(path, stopwords: frozenset = frozenset()) -> TextCorpus:
    """Load a JSON map of class_id -> article text as a corpus."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict) or not raw:
        raise InputError(f"{path} must hold a non-empty JSON object")
    return TextCorpus({str(k): str(v) for k, v in raw.items()}, stopwords)
