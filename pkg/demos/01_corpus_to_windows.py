"""
From raw corpus lines to packed training windows
================================================

Walks the fixture corpus through ingestion, the PMC-id filter, rule-based
cleaning, deduplication and packing.  Run from the repository root.
"""

from pathlib import Path

import numpy as np

from domainforge.corpus import clean_corpus, clean_text, filter_papers, ingest
from domainforge.mixer import pack
from domainforge.tokenizer import EOS, PAD, decode

root = Path(__file__).resolve().parents[1] / "fixtures" / "corpus"

# Three sources.  Papers without a PMC id are dropped before anything else.
books = list(ingest(root / "books.jsonl"))
papers = list(ingest(root / "papers.jsonl"))
general = list(ingest(root / "general.jsonl"))
kept_papers = list(filter_papers(papers))
print(len(books), "books,", len(papers), "papers ->", len(kept_papers), "with a PMC id,", len(general), "general")

# One noisy book page before and after cleaning.
raw = books[0].text
print("--- raw ---")
print(raw)
text, counts = clean_text(raw)
print("--- clean ---")
print(text)
print("removed per rule:", counts)

# Cleaning is a fixed point: a second pass removes nothing.
print("second pass removes:", sum(clean_text(text)[1].values()))

# The whole corpus, with exact and near-duplicate removal.
docs, report = clean_corpus(books + kept_papers + general)
print(report.to_json())

# Pack each source into 128-token windows joined by EOS.
for source in ("book", "paper", "general"):
    p = pack([d.text for d in docs if d.source == source], 128)
    print(f"{source:8s} windows={len(p):3d} tokens={int(p.mask.sum()):5d} pad={int((p.tokens == PAD).sum())}")

# The tail of the last book window shows the EOS separators and PAD fill.
p = pack([d.text for d in docs if d.source == "book"], 128)
last = p.tokens[-1]
print("EOS in last window:", int(np.sum(last == EOS)), "| text:", decode(last[p.mask[-1]])[:80], "...")
