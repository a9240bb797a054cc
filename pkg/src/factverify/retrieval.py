"""Sparse evidence retrieval: CJK-aware tokenization, an inverted index and
Okapi BM25 ranking with optional exclusion of evidence published after the claim."""

from __future__ import annotations

import datetime as dt
import heapq
import json
import math
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Optional, Protocol, Sequence

from .corpus import ClaimSample, EvidenceDoc

INDEX_FORMAT = "factverify-bm25"
INDEX_VERSION = 1

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DATE_MODES = ("off", "filter")

_CJK_RANGES = (
    (0x3040, 0x30FF),  # hiragana, katakana
    (0x3400, 0x4DBF),
    (0x4E00, 0x9FFF),
    (0xAC00, 0xD7AF),  # hangul syllables
    (0xF900, 0xFAFF),
    (0x20000, 0x2FA1F),
)
_ALNUM_RUN = re.compile(r"[^\W_]+")


def is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


def tokenize(text: str) -> list[str]:
    """Split text into index terms.

    CJK runs yield every character plus every overlapping character bigram
    (emitted positionally: c0, c0c1, c1, c1c2, ...). Everything else is
    NFKC-folded, lowercased and split on non-alphanumerics.
    """
    terms: list[str] = []
    text = unicodedata.normalize("NFKC", text)
    run: list[str] = []
    other: list[str] = []

    def flush_cjk():
        for i, ch in enumerate(run):
            terms.append(ch)
            if i + 1 < len(run):
                terms.append(ch + run[i + 1])
        run.clear()

    def flush_other():
        if other:
            terms.extend(m.lower() for m in _ALNUM_RUN.findall("".join(other)))
            other.clear()

    for ch in text:
        if is_cjk(ch):
            flush_other()
            run.append(ch)
        else:
            flush_cjk()
            other.append(ch)
    flush_cjk()
    flush_other()
    return terms


@dataclass(frozen=True)
class RetrievalIndex:
    postings: Mapping[str, tuple[tuple[str, int], ...]]
    doc_lengths: Mapping[str, int]
    avg_doc_length: float
    doc_dates: Mapping[str, Optional[dt.date]]
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B
    date_mode: str = "off"
    _tf: Mapping[str, Mapping[str, int]] = field(default=MappingProxyType({}), repr=False, compare=False)

    @property
    def corpus_size(self) -> int:
        return len(self.doc_lengths)

    def doc_freq(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        df = self.doc_freq(term)
        n = self.corpus_size
        return math.log((n - df + 0.5) / (df + 0.5) + 1.0)

    def term_frequency(self, term: str, doc_id: str) -> int:
        return self._tf.get(term, {}).get(doc_id, 0)


class IndexFormatError(ValueError):
    pass


def _freeze(postings: dict[str, list[tuple[str, int]]], doc_lengths: dict[str, int],
            doc_dates: dict[str, Optional[dt.date]], k1: float, b: float, date_mode: str) -> RetrievalIndex:
    if not doc_lengths:
        raise IndexFormatError("cannot build an index over an empty corpus")
    if date_mode not in DATE_MODES:
        raise IndexFormatError(f"date_mode must be one of {DATE_MODES}, got {date_mode!r}")
    total = math.fsum(doc_lengths.values())
    frozen = {t: tuple(p) for t, p in postings.items()}
    tf = {t: MappingProxyType(dict(p)) for t, p in frozen.items()}
    return RetrievalIndex(
        postings=MappingProxyType(frozen),
        doc_lengths=MappingProxyType(dict(doc_lengths)),
        avg_doc_length=total / len(doc_lengths),
        doc_dates=MappingProxyType(dict(doc_dates)),
        k1=k1,
        b=b,
        date_mode=date_mode,
        _tf=MappingProxyType(tf),
    )


def build_index(docs: Iterable[EvidenceDoc], k1: float = DEFAULT_K1, b: float = DEFAULT_B,
                date_mode: str = "off") -> RetrievalIndex:
    postings: dict[str, list[tuple[str, int]]] = {}
    doc_lengths: dict[str, int] = {}
    doc_dates: dict[str, Optional[dt.date]] = {}
    for doc in docs:
        if doc.id in doc_lengths:
            raise IndexFormatError(f"duplicate document id {doc.id!r}")
        terms = tokenize(doc.text)
        doc_lengths[doc.id] = len(terms)
        doc_dates[doc.id] = doc.published
        for term, count in Counter(terms).items():
            postings.setdefault(term, []).append((doc.id, count))
    return _freeze(postings, doc_lengths, doc_dates, k1, b, date_mode)


def _term_score(idf: float, tf: int, length: int, avg: float, k1: float, b: float) -> float:
    return idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * length / avg))


def bm25_score(index: RetrievalIndex, query: str, doc: str, k1: Optional[float] = None,
               b: Optional[float] = None) -> float:
    """BM25 score of one document; every query term occurrence contributes once."""
    if doc not in index.doc_lengths:
        raise KeyError(doc)
    k1 = index.k1 if k1 is None else k1
    b = index.b if b is None else b
    length = index.doc_lengths[doc]
    score = 0.0
    for term in tokenize(query):
        tf = index.term_frequency(term, doc)
        if tf:
            score += _term_score(index.idf(term), tf, length, index.avg_doc_length, k1, b)
    return score


@dataclass(frozen=True)
class RankedList:
    query_id: str
    entries: tuple[tuple[str, float], ...]

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.entries]

    def to_json(self) -> dict:
        return {"id": self.query_id, "entries": [[d, s] for d, s in self.entries]}

    @classmethod
    def from_json(cls, row: dict) -> "RankedList":
        return cls(row["id"], tuple((str(d), float(s)) for d, s in row["entries"]))


def search(index: RetrievalIndex, query: str, k: int, date_mode: Optional[str] = None,
           as_of: Optional[dt.date] = None, query_id: str = "",
           k1: Optional[float] = None, b: Optional[float] = None) -> RankedList:
    """Top-k documents by BM25, ties broken by ascending doc id.

    Only documents sharing at least one term with the query are ranked, so
    fewer than k entries may come back. With ``date_mode="filter"`` and an
    ``as_of`` date, documents published after ``as_of`` are dropped before
    ranking; undated documents always stay eligible.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    mode = index.date_mode if date_mode is None else date_mode
    if mode not in DATE_MODES:
        raise ValueError(f"date_mode must be one of {DATE_MODES}, got {mode!r}")
    k1 = index.k1 if k1 is None else k1
    b = index.b if b is None else b
    filtering = mode == "filter" and as_of is not None

    scores: dict[str, float] = {}
    avg = index.avg_doc_length
    for term in tokenize(query):
        postings = index.postings.get(term)
        if not postings:
            continue
        idf = index.idf(term)
        for doc_id, tf in postings:
            if filtering:
                published = index.doc_dates.get(doc_id)
                if published is not None and published > as_of:
                    continue
            s = _term_score(idf, tf, index.doc_lengths[doc_id], avg, k1, b)
            scores[doc_id] = scores.get(doc_id, 0.0) + s
    top = heapq.nsmallest(k, scores.items(), key=lambda item: (-item[1], item[0]))
    return RankedList(query_id, tuple(top))


class Retriever(Protocol):
    """Anything that ranks evidence for a claim; dense retrievers plug in here."""

    def retrieve(self, claim: ClaimSample, k: int) -> RankedList: ...


@dataclass
class BM25Retriever:
    index: RetrievalIndex
    date_mode: Optional[str] = None

    def retrieve(self, claim: ClaimSample, k: int) -> RankedList:
        return search(self.index, claim.claim, k, self.date_mode, claim.claim_date, query_id=claim.id)


def recall_at_k(rankings: Mapping[str, RankedList], samples: Sequence[ClaimSample], k: int,
                strict: bool = False) -> float:
    """Fraction of samples with a gold id in the top k (all golds when ``strict``)."""
    if not samples:
        raise ValueError("recall_at_k needs at least one sample")
    hits = 0
    for sample in samples:
        if sample.id not in rankings:
            raise KeyError(f"no ranking for sample {sample.id!r}")
        top = set(rankings[sample.id].doc_ids[:k])
        golds = sample.gold_evidence_ids
        hit = all(g in top for g in golds) if strict else any(g in top for g in golds)
        hits += hit
    return hits / len(samples)


def save_index(index: RetrievalIndex, path) -> None:
    """Write the index as JSON lines: header, one row per doc, one row per term."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "k1": index.k1,
            "b": index.b,
            "date_mode": index.date_mode,
            "corpus_size": index.corpus_size,
            "terms": len(index.postings),
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for doc_id, length in index.doc_lengths.items():
            date = index.doc_dates.get(doc_id)
            row = {"doc": doc_id, "len": length, "date": date.isoformat() if date else None}
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
        for term, plist in index.postings.items():
            fh.write(json.dumps({"t": term, "p": [list(p) for p in plist]}, ensure_ascii=False) + "\n")


def load_index(path) -> RetrievalIndex:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline() or "null")
        if not isinstance(header, dict) or header.get("format") != INDEX_FORMAT:
            raise IndexFormatError(f"{path}: not a {INDEX_FORMAT} index file")
        if header.get("version") != INDEX_VERSION:
            raise IndexFormatError(f"{path}: unsupported index version {header.get('version')!r}")
        doc_lengths: dict[str, int] = {}
        doc_dates: dict[str, Optional[dt.date]] = {}
        postings: dict[str, list[tuple[str, int]]] = {}
        for line in fh:
            row = json.loads(line)
            if "doc" in row:
                doc_lengths[row["doc"]] = row["len"]
                doc_dates[row["doc"]] = dt.date.fromisoformat(row["date"]) if row["date"] else None
            else:
                postings[row["t"]] = [(d, tf) for d, tf in row["p"]]
    if len(doc_lengths) != header["corpus_size"] or len(postings) != header["terms"]:
        raise IndexFormatError(f"{path}: truncated index file")
    return _freeze(postings, doc_lengths, doc_dates, header["k1"], header["b"], header["date_mode"])
