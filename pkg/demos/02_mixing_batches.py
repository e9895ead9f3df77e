"""
Ratio-exact batches
===================

Every batch of 20 rows holds 15 book, 4 paper and 1 general window.  An
epoch is one full pass over the book stream; the smaller streams wrap.
"""

import numpy as np

from domainforge.mixer import Mixer, MixRatio, Packed


def toy_stream(n, ctx=8, offset=0):
    # Row i starts with token offset+i so rows are easy to recognise.
    t = np.zeros((n, ctx), dtype=np.uint32)
    t[:, 0] = offset + np.arange(n)
    return Packed(t, np.ones_like(t, dtype=bool))


mixer = Mixer(
    {"book": toy_stream(30), "paper": toy_stream(6, offset=100), "general": toy_stream(2, offset=200)},
    batch_size=20,
    ratio=MixRatio(15, 4, 1),
    seed=0,
)

for step in range(5):
    batch, epoch = mixer.next_batch()
    counts = {s: batch.sources.count(s) for s in ("book", "paper", "general")}
    print(f"batch {step}: {counts}  book epoch={epoch.epoch}  book tokens this epoch={epoch.book_tokens_consumed}")

# 30 book windows at 15 per batch: the counter moves on every second batch.

# Mixer state is plain JSON-able data, so a run can stop and resume exactly.
state = mixer.state()
a, _ = mixer.next_batch()
mixer.restore(state)
b, _ = mixer.next_batch()
print("resumed batch identical:", bool((a.tokens == b.tokens).all()))

# A ratio that does not divide the batch is rejected up front.
try:
    Mixer({"book": toy_stream(4), "paper": toy_stream(4), "general": toy_stream(4)}, batch_size=21)
except ValueError as err:
    print("config error:", err)
