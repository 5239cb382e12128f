"""
Real or fake?
=============

The real/fake task asks whether a sentence is as written or has had a few
pairs of its words swapped.  Every fake keeps the exact multiset of words
of a real source sentence, so word counts give nothing away.
"""

import argparse
from collections import Counter

import numpy as np

from stilts_lab import datakit as D

parser = argparse.ArgumentParser(description="inspect generated real/fake sentences")
parser.add_argument("-n", type=int, default=2000, help="examples to generate (even)")
parser.add_argument("--show", type=int, default=5)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

corpus = D.book_corpus(args.n, args.seed)
sources = {}
ds = D.gen_fake_sentences(corpus, args.n, args.seed, sources=sources)
print("labels:", dict(Counter(ex.label for ex in ds.train)))

fakes = [ex for ex in ds.train if ex.label == 0]
diffs = np.array([sum(a != b for a, b in zip(ex.text_a, sources[ex.guid])) for ex in fakes])
print("positions changed per fake:", dict(sorted(Counter(diffs.tolist()).items())))

# swapped words are upper-cased
for ex in fakes[:args.show]:
    src = sources[ex.guid]
    print("  real:", " ".join(src))
    print("  fake:", " ".join(w.upper() if w != s else w for w, s in zip(ex.text_a, src)))
