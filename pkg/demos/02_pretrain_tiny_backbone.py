"""Pretrain a miniature encoder-decoder on the synthetic grammar and watch
it pick up the templates.

Runs a few hundred optimizer steps (about half a minute); the loss drops
fast because the grammar has only five sentence shapes. At the end the model
completes sentence prefixes it has never seen.
"""

from tunelab import backbone as B
from tunelab import corpus as C
from tunelab import tensor as T
from tunelab import training as TR

import numpy as np


def main():
    vocab = C.build_vocab()
    corpus = C.gen_pretrain_corpus(grammar_seed=1, size=3000, vocab=vocab)
    print(f"corpus: {len(corpus)} prefix/continuation pairs, e.g.")
    for sx, sy in corpus.surface_pairs()[:3]:
        print(f"  {sx!r} -> {sy!r}")

    bb = B.init_backbone(B.BackboneConfig(
        arch="encoder_decoder", vocab_size=len(vocab), embed_dim=32,
        layers=1, heads=2, ffn_dim=64, max_positions=64, seed=0))
    n_params = sum(p.data.size for p in bb.params.values())
    print(f"\nbackbone: {n_params} parameters")

    cfg = TR.TrainConfig("fine_tune", batch_size=8, learning_rate=3e-3,
                         total_steps=600, eval_every=100)
    log = []
    TR.pretrain(bb, corpus, cfg, loss_log=log)
    print("train loss by step:")
    for step, loss in log:
        print(f"  step {step:>4}: {loss:.4f}")

    print("\nall parameters frozen now:", all(bb.frozen_mask.values()))

    print("\ncompletions of unseen prefixes (greedy decode):")
    for prefix in ("the fresh bread", "river is", "the garden"):
        ids = vocab.encode(prefix)
        src = T.embedding(bb.embedding_table, np.asarray(ids))
        out = B.decode(bb, src, beam=1, max_len=8)
        print(f"  {prefix!r} -> {vocab.decode(out)!r}")


if __name__ == "__main__":
    main()
