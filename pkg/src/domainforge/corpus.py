"""Corpus ingestion, rule-based cleaning and de-duplication.

Cleaning is a pure per-document function, so it can be fanned out to worker
processes; de-duplication is order-sensitive and always runs sequentially in
input order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

log = logging.getLogger(__name__)

SOURCES = ("book", "paper", "general")
RULES_VERSION = 1


@dataclass
class RawDocument:
    id: str
    source: str
    text: str
    pmc_id: str | None = None
    title: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("document id must be nonempty")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r} for document {self.id}")
        if not isinstance(self.text, str):
            raise ValueError(f"text of document {self.id} is not a string")


@dataclass
class CleanDocument:
    id: str
    source: str
    text: str
    removed_spans: dict[str, int] = field(default_factory=dict)
    pmc_id: str | None = None
    title: str | None = None

    @property
    def token_estimate(self) -> int:
        return len(self.text.split())

    def to_json(self) -> dict:
        out = {"id": self.id, "source": self.source}
        if self.pmc_id is not None:
            out["pmc_id"] = self.pmc_id
        if self.title is not None:
            out["title"] = self.title
        out["text"] = self.text
        out["removed"] = dict(self.removed_spans)
        return out


@dataclass
class CleaningReport:
    documents_in: int = 0
    documents_out: int = 0
    removed: dict[str, int] = field(default_factory=lambda: {r: 0 for r in RULE_IDS})
    duplicates_dropped: int = 0
    near_duplicates_dropped: int = 0
    empty_after_cleaning: int = 0

    def check_conservation(self) -> None:
        dropped = self.duplicates_dropped + self.near_duplicates_dropped + self.empty_after_cleaning
        if self.documents_in != self.documents_out + dropped:
            raise AssertionError(
                f"report does not balance: {self.documents_in} in, "
                f"{self.documents_out} out, {dropped} dropped"
            )

    def to_json(self) -> dict:
        return {
            "documents_in": self.documents_in,
            "documents_out": self.documents_out,
            "removed": dict(self.removed),
            "duplicates_dropped": self.duplicates_dropped,
            "near_duplicates_dropped": self.near_duplicates_dropped,
            "empty_after_cleaning": self.empty_after_cleaning,
            "rules_version": RULES_VERSION,
        }


@dataclass
class Diagnostic:
    line: int | None
    doc_id: str | None
    message: str


# --- cleaning rules -------------------------------------------------------

_URL = re.compile(r"\b[A-Za-z][A-Za-z0-9+.\-]*://[^\s/?#]+[^\s]*")
_BRACKET_CITE = re.compile(r"\[\s*\d+(?:\s*[,–\-]\s*\d+)*\s*\]")
_AUTHOR_CITE = re.compile(
    r"\(\s*[A-Z][A-Za-z'’\-]+(?:\s+(?:et\s+al\.?|(?:and|&)\s+[A-Z][A-Za-z'’\-]+))?"
    r",\s*(?:1[5-9]|20)\d\d[a-z]?"
    r"(?:\s*;\s*[A-Z][A-Za-z'’\-]+(?:\s+(?:et\s+al\.?|(?:and|&)\s+[A-Z][A-Za-z'’\-]+))?"
    r",\s*(?:1[5-9]|20)\d\d[a-z]?)*\s*\)"
)
_FIGREF_BODY = r"(?:Figure|Fig|Table|Tab)s?\.?\s?\d+(?:\.\d+)*[A-Za-z]?\b"
_FIGREF = re.compile(r"\(\s*" + _FIGREF_BODY + r"\s*\)|\b" + _FIGREF_BODY)
_TAIL_HEADING = re.compile(r"^[ \t]*(?:references|bibliography)[ \t]*:?[ \t]*$", re.I | re.M)
_HEADER_WORD = re.compile(r"^(?:[A-Z][\w.'’\-]*,?|\d[\d.,:\-]*|[A-Z]\.|and|&)$")

RULES = {
    "R1": "URL with scheme and authority",
    "R2": "numeric [n] / (Author, year) citation",
    "R3": "figure or table reference",
    "R4": "reference-section tail",
    "R5": "author-list / contents header line",
}
RULE_IDS = tuple(RULES)


def _is_header_line(line: str) -> bool:
    words = line.split()
    return 0 < len(words) < 4 and all(_HEADER_WORD.match(w) for w in words)


def _strip_tail(text: str) -> tuple[str, int]:
    m = _TAIL_HEADING.search(text)
    if m is None:
        return text, 0
    return text[: m.start()], 1


def _strip_header(text: str) -> tuple[str, int]:
    lines = text.split("\n")
    i = removed = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
        elif _is_header_line(lines[i]):
            i += 1
            removed += 1
        else:
            break
    if removed == 0:
        return text, 0
    return "\n".join(lines[i:]), removed


def _normalize_space(text: str) -> str:
    lines = [re.sub(r"[ \t\f\v\r]+", " ", ln).strip() for ln in text.split("\n")]
    out = re.sub(r"\n{3,}", "\n\n", "\n".join(lines))
    return out.strip()


def _one_pass(text: str, counts: Counter) -> str:
    text, n = _strip_tail(text)
    counts["R4"] += n
    for rid, pattern in (("R1", _URL), ("R2", _BRACKET_CITE), ("R2", _AUTHOR_CITE), ("R3", _FIGREF)):
        text, n = pattern.subn(" ", text)
        counts[rid] += n
    text = _normalize_space(text)
    text, n = _strip_header(text)
    counts["R5"] += n
    return _normalize_space(text)


def clean_text(text: str) -> tuple[str, dict[str, int]]:
    """Apply rules R1-R5 and collapse whitespace, iterating to a fixed point.

    Removing one span can expose another (``"Fig Fig. 1 1"``), so passes
    repeat until the text stops changing; that is what makes the function
    idempotent.  Each pass strictly shortens the text or stops.
    """
    counts: Counter = Counter({r: 0 for r in RULE_IDS})
    while True:
        new = _one_pass(text, counts)
        if new == text:
            return new, {r: counts[r] for r in RULE_IDS}
        text = new


def rule_violations(text: str) -> list[str]:
    """Rule ids whose pattern still matches ``text``; empty for cleaned output."""
    bad = []
    if _URL.search(text):
        bad.append("R1")
    if _BRACKET_CITE.search(text) or _AUTHOR_CITE.search(text):
        bad.append("R2")
    if _FIGREF.search(text):
        bad.append("R3")
    if _TAIL_HEADING.search(text):
        bad.append("R4")
    if _strip_header(text)[1]:
        bad.append("R5")
    return bad


def clean_document(doc: RawDocument) -> CleanDocument:
    text, counts = clean_text(doc.text)
    return CleanDocument(doc.id, doc.source, text, counts, doc.pmc_id, doc.title)


# --- de-duplication -------------------------------------------------------

_MERSENNE_LIKE = np.uint64(4294967311)  # smallest prime above 2**32


def normalize_for_hash(text: str) -> str:
    return " ".join(text.lower().split())


def shingles(text: str, width: int = 5) -> set[str]:
    """Character ``width``-gram shingles of the normalized text."""
    t = normalize_for_hash(text)
    if not t:
        return set()
    if len(t) <= width:
        return {t}
    return {t[i : i + width] for i in range(len(t) - width + 1)}


class DedupIndex:
    """Exact-hash set plus a min-hash signature table.

    Near-duplicate lookups scan every stored signature; the Jaccard estimate
    is the fraction of agreeing min-hash slots.  Hash functions are
    ``(a*x + b) mod p`` with ``p`` just above 2**32, so the product fits in
    uint64 without overflow.
    """

    def __init__(self, width: int = 5, num_perm: int = 64, threshold: float = 0.9, seed: int = 0):
        if width < 1 or num_perm < 1 or not 0.0 < threshold <= 1.0:
            raise ValueError("invalid dedup parameters")
        self.width = width
        self.num_perm = num_perm
        self.threshold = threshold
        self.seed = seed
        rng = np.random.default_rng(seed)
        self._a = rng.integers(1, 2**32, size=num_perm, dtype=np.uint64)
        self._b = rng.integers(0, 2**32, size=num_perm, dtype=np.uint64)
        self._exact: set[str] = set()
        self._sigs: list[np.ndarray] = []

    def signature(self, text: str) -> np.ndarray | None:
        sh = shingles(text, self.width)
        if not sh:
            return None
        x = np.fromiter(
            (int.from_bytes(hashlib.blake2b(s.encode("utf-8"), digest_size=4).digest(), "little") for s in sorted(sh)),
            dtype=np.uint64,
            count=len(sh),
        )
        hv = (x[:, None] * self._a[None, :] + self._b[None, :]) % _MERSENNE_LIKE
        return hv.min(axis=0)

    def similarity(self, sig_a: np.ndarray, sig_b: np.ndarray) -> float:
        return float(np.mean(sig_a == sig_b))

    def query(self, text: str) -> str | None:
        """Return ``"exact"``, ``"near"`` or None for a not-yet-seen text."""
        key = hashlib.sha256(normalize_for_hash(text).encode("utf-8")).hexdigest()
        if key in self._exact:
            return "exact"
        sig = self.signature(text)
        if sig is not None and self._sigs:
            table = np.stack(self._sigs)
            if np.max(np.mean(table == sig[None, :], axis=1)) >= self.threshold:
                return "near"
        return None

    def insert(self, text: str) -> None:
        self._exact.add(hashlib.sha256(normalize_for_hash(text).encode("utf-8")).hexdigest())
        sig = self.signature(text)
        if sig is not None:
            self._sigs.append(sig)

    def __len__(self) -> int:
        return len(self._exact)


def dedup(docs: Iterable[CleanDocument], index: DedupIndex, report: CleaningReport | None = None) -> Iterator[CleanDocument]:
    for doc in docs:
        verdict = index.query(doc.text)
        if verdict is None:
            index.insert(doc.text)
            yield doc
        elif report is not None:
            if verdict == "exact":
                report.duplicates_dropped += 1
            else:
                report.near_duplicates_dropped += 1


# --- streams --------------------------------------------------------------


def filter_papers(docs: Iterable[RawDocument], errors: list[Diagnostic] | None = None) -> Iterator[RawDocument]:
    """Keep papers that carry a nonempty PMC id, in input order.

    Non-paper documents are rejected into ``errors`` and the stream continues.
    """
    for doc in docs:
        if doc.source != "paper":
            if errors is not None:
                errors.append(Diagnostic(None, doc.id, f"expected source=paper, got {doc.source}"))
            continue
        if doc.pmc_id and doc.pmc_id.strip():
            yield doc


def ingest(path: str | os.PathLike, diagnostics: list[Diagnostic] | None = None) -> Iterator[RawDocument]:
    """Yield documents from a JSON-Lines corpus file.

    The file is opened eagerly so a missing path fails at call time; bad
    lines are skipped and reported with their 1-based line number.
    """
    fh = open(path, "r", encoding="utf-8")
    return _ingest_lines(fh, diagnostics)


def _ingest_lines(fh, diagnostics):
    def note(lineno, doc_id, msg):
        log.warning("line %d: %s", lineno, msg)
        if diagnostics is not None:
            diagnostics.append(Diagnostic(lineno, doc_id, msg))

    seen: set[str] = set()
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("not a JSON object")
                doc = RawDocument(
                    id=obj["id"],
                    source=obj["source"],
                    text=obj["text"],
                    pmc_id=obj.get("pmc_id"),
                    title=obj.get("title"),
                )
            except (ValueError, KeyError, TypeError) as exc:
                note(lineno, None, f"malformed record: {exc}")
                continue
            if doc.id in seen:
                note(lineno, doc.id, f"duplicate id {doc.id!r}")
                continue
            seen.add(doc.id)
            if not doc.text:
                note(lineno, doc.id, "empty text")
            yield doc


def worker_count(default: int = 1) -> int:
    raw = os.environ.get("DOMAINFORGE_THREADS")
    if not raw:
        return default
    n = int(raw)
    if n < 1:
        raise ValueError("DOMAINFORGE_THREADS must be >= 1")
    return n


def clean_documents(docs: list[RawDocument], workers: int = 1) -> list[CleanDocument]:
    if workers <= 1 or len(docs) < 2:
        return [clean_document(d) for d in docs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # Executor.map yields in submission order whatever the completion order.
        return list(pool.map(clean_document, docs, chunksize=max(1, len(docs) // (4 * workers))))


def clean_corpus(
    docs: Iterable[RawDocument],
    workers: int = 1,
    dedup_enabled: bool = True,
    index: DedupIndex | None = None,
) -> tuple[list[CleanDocument], CleaningReport]:
    docs = list(docs)
    report = CleaningReport(documents_in=len(docs))
    cleaned = clean_documents(docs, workers)
    kept = []
    for doc in cleaned:
        for rid, n in doc.removed_spans.items():
            report.removed[rid] += n
        if doc.text:
            kept.append(doc)
        else:
            report.empty_after_cleaning += 1
    if dedup_enabled:
        kept = list(dedup(kept, index or DedupIndex(), report))
    report.documents_out = len(kept)
    report.check_conservation()
    return kept, report


def write_clean(path: str | os.PathLike, docs: Iterable[CleanDocument]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for doc in docs:
            fh.write(json.dumps(doc.to_json(), ensure_ascii=False) + "\n")


def read_clean(path: str | os.PathLike) -> list[CleanDocument]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out.append(
                    CleanDocument(
                        obj["id"], obj["source"], obj["text"], obj.get("removed", {}), obj.get("pmc_id"), obj.get("title")
                    )
                )
    return out


def write_raw(path: str | os.PathLike, docs: Iterable[RawDocument]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in docs:
            obj = {"id": d.id, "source": d.source}
            if d.pmc_id is not None:
                obj["pmc_id"] = d.pmc_id
            if d.title is not None:
                obj["title"] = d.title
            obj["text"] = d.text
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
