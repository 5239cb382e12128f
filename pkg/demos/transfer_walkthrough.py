"""
Intermediate-task transfer, one run at a time
=============================================

Pretrain a small encoder as a masked LM, then train a pair classifier on
200 target examples twice: straight from the pretrained weights, and after
an intermediate phase on a related task with plenty of data.  The two
tasks share a grammar but no content words, so whatever carries over is
structure, not vocabulary.

Takes about a minute on one CPU core.
"""

import argparse
import time

from stilts_lab import datakit as D
from stilts_lab import pipeline as P
from stilts_lab.encoder import EncoderConfig, param_count

parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
parser.add_argument("--seed", type=int, default=0, help="run seed for the target phase")
parser.add_argument("--cap", type=int, default=200, help="target training examples")
args = parser.parse_args()

# The related intermediate task labels a pair 1 when every content word of
# the second sentence appears in the first.  The target task asks the
# same question over a disjoint vocabulary.
inter, target = D.gen_synthetic_pair_tasks(7, "related")
ex = target.train[0]
print("target example:", " ".join(ex.text_a), "|", " ".join(ex.text_b), "->", ex.label)
print(f"intermediate: {len(inter.train)} train, target: {len(target.train)} train (capped to {args.cap})")

corpus = D.synthetic_lm_corpus(7, 4000)
vocab = D.build_vocab([corpus, D.example_texts(target.train), D.example_texts(inter.train)], 512)
config = EncoderConfig(vocab_size=len(vocab), dropout_rate=0.0)
print(f"encoder: {param_count(config)} parameters, vocab {len(vocab)}")

t0 = time.perf_counter()
losses = []
pretrained = P.pretrain_lm(config, vocab, corpus, P.PhaseConfig(objective="lm_only", epochs=3, seed=0),
                           history=losses)
print("LM loss per epoch:", " ".join(f"{x:.3f}" for x in losses), f"({time.perf_counter() - t0:.0f}s)")

# Every phase starts with a fresh optimizer and a fresh task head; only the
# encoder weights move from one phase to the next.
phases = {"intermediate": P.PhaseConfig(epochs=3, seed=0), "target": P.PhaseConfig()}
for regime, mid in (("baseline", None), ("stilts", inter)):
    plan = P.RegimePlan(regime, target, mid, phases, train_cap=args.cap)
    rec = P.run_regime(plan, pretrained, config, vocab, args.seed)
    trace = " ".join(f"{t['accuracy']:.1f}" for t in rec.dev_trace)
    flag = " (near chance)" if rec.degenerate else ""
    print(f"{plan.label:28s} dev accuracy by epoch: {trace}{flag}  [{rec.wall_time:.0f}s]")
