"""Shared fixtures-support code for the acceptance suite.

Builds (or loads from a disk cache) the frozen small backbone that the
directional acceptance tests tune against. The cache key is the hash of
everything that determines the artifact bit-for-bit: backbone config,
training recipe and corpus origin. Delete .cache/ to force a rebuild.
"""

import os

from tunelab.backbone import config_for_size, init_backbone, load_backbone, save_backbone
from tunelab.checkpoint import config_hash
from tunelab.corpus import build_vocab, gen_pretrain_corpus
from tunelab.ngrams import build_bigram_table, load_bigram_table, save_bigram_table
from tunelab.training import TrainConfig, pretrain

CACHE_ROOT = os.path.join(os.path.dirname(__file__), os.pardir, ".cache", "acceptance")

PRETRAIN_GRAMMAR_SEED = 11
PRETRAIN_CORPUS_SIZE = 20_000

PRETRAIN_TRAIN_KW = dict(
    batch_size=8,
    learning_rate=1e-3,
    weight_decay=1e-2,
    scheduler="linear_warmup",
    warmup_ratio=0.1,
    total_steps=20_000,
    eval_every=1_000,
    seed=0,
)


def backbone_recipe():
    vocab = build_vocab()
    config = config_for_size("small", len(vocab), "encoder_decoder", seed=0)
    key = config_hash({
        "backbone": config.__dict__,
        "train": PRETRAIN_TRAIN_KW,
        "corpus": {"generator": "pretrain_grammar",
                   "seed": PRETRAIN_GRAMMAR_SEED,
                   "size": PRETRAIN_CORPUS_SIZE},
    })
    return vocab, config, key


def pretrained_paths():
    _, _, key = backbone_recipe()
    root = os.path.join(CACHE_ROOT, key[:16])
    return (os.path.join(root, "backbone_small.ckpt"),
            os.path.join(root, "bigrams.tsv"))


def build_or_load_pretrained(log_fn=print):
    """Returns (backbone, bigram_table); trains once per cache key."""
    vocab, config, _ = backbone_recipe()
    ckpt, bigrams = pretrained_paths()
    if os.path.exists(ckpt) and os.path.exists(bigrams):
        return load_backbone(ckpt), load_bigram_table(bigrams, vocab)
    os.makedirs(os.path.dirname(ckpt), exist_ok=True)
    corpus = gen_pretrain_corpus(PRETRAIN_GRAMMAR_SEED, PRETRAIN_CORPUS_SIZE, vocab)
    backbone = init_backbone(config)
    cfg = TrainConfig("fine_tune", **PRETRAIN_TRAIN_KW)
    log = []
    log_fn(f"building acceptance backbone: {cfg.total_steps} steps "
           f"on {len(corpus)} sequences (one-time, cached afterwards)")
    pretrain(backbone, corpus, cfg, loss_log=log)
    log_fn(f"pretrain loss {log[0][1]:.4f} -> {log[-1][1]:.4f}")
    save_backbone(backbone, ckpt)
    table = build_bigram_table(corpus)
    save_bigram_table(table, vocab, bigrams)
    return backbone, table


if __name__ == "__main__":
    build_or_load_pretrained()
    print("cache ready:", pretrained_paths()[0])
