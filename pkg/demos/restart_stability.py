"""
How much do random restarts matter?
===================================

With only a couple of hundred target examples, fine-tuning from the
pretrained encoder often stalls at chance, and which restarts stall is
down to the seed.  This script runs the same plan under many seeds,
with and without the intermediate phase, counts the runs that end
within epsilon of chance, and writes one CSV row per run for a strip
plot.
"""

import argparse
from pathlib import Path

from stilts_lab import datakit as D
from stilts_lab import harness as H
from stilts_lab import pipeline as P
from stilts_lab.encoder import EncoderConfig

parser = argparse.ArgumentParser(description="restart stability on the synthetic pair")
parser.add_argument("--restarts", type=int, default=20)
parser.add_argument("--cap", type=int, default=200)
parser.add_argument("--workers", type=int, default=1)
parser.add_argument("--out", default="stability.csv")
args = parser.parse_args()

inter, target = D.gen_synthetic_pair_tasks(7, "related")
corpus = D.synthetic_lm_corpus(7, 4000)
vocab = D.build_vocab([corpus, D.example_texts(target.train), D.example_texts(inter.train)], 512)
config = EncoderConfig(vocab_size=len(vocab), dropout_rate=0.0)
pretrained = P.pretrain_lm(config, vocab, corpus, P.PhaseConfig(objective="lm_only", epochs=3, seed=0))

# The intermediate phase has a fixed seed, so it is trained once and every
# restart continues from the same weights.
phases = {"intermediate": P.PhaseConfig(epochs=3, seed=0), "target": P.PhaseConfig()}
cache = {}
sweeps = []
for regime, mid in (("baseline", None), ("stilts", inter)):
    plan = P.RegimePlan(regime, target, mid, phases, train_cap=args.cap)
    s = H.run_restarts(plan, args.restarts, 0, pretrained=pretrained, config=config, vocab=vocab,
                       workers=args.workers, cache=cache)
    sweeps.append(s)
    print(f"{s.label}: mean {s.mean:.1f} std {s.std:.2f} best {s.best.primary:.1f} (seed {s.best_seed}), "
          f"{s.degenerate}/{len(s.records)} within {s.epsilon:g} of chance")

    # a text strip plot: one mark per run on a 50..100 axis
    line = [" "] * 51
    for x in s.scores:
        line[min(50, max(0, int(round(x - 50))))] = "|"
    print("  50 " + "".join(line) + " 100")

Path(args.out).write_text(H.stability_export(sweeps), encoding="utf-8")
print(f"per-run scores: {args.out}")
