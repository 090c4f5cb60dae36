"""Head-to-head on unfamiliar inputs: soft prompt alone versus soft prompt
plus a token-wise input adapter, against the same frozen backbone.

The separation is a threshold effect: against a briefly-pretrained backbone
both modes flatline at zero BLEU, so this demo uses the full desk-scale
recipe (a 20k-step pretrain) to show the real gap. The first run takes
about ten minutes to build the backbone; it is cached under demos/.cache/
and later runs go straight to the two tuning runs (~3 minutes).
"""

import os

from tunelab import backbone as B
from tunelab import corpus as C
from tunelab import training as TR

CKPT = os.path.join(os.path.dirname(os.path.abspath(__file__)),
                    ".cache", "small_backbone.ckpt")


def pretrained_backbone():
    if os.path.exists(CKPT):
        print(f"loading cached backbone from {CKPT}")
        return B.load_backbone(CKPT)
    vocab = C.build_vocab()
    print("pretraining a small backbone for 20k steps (~10 minutes, once)...")
    bb = B.init_backbone(B.config_for_size("small", len(vocab), seed=0))
    TR.pretrain(bb, C.gen_pretrain_corpus(11, 20000, vocab), TR.TrainConfig(
        "fine_tune", batch_size=8, learning_rate=1e-3, weight_decay=1e-2,
        scheduler="linear_warmup", warmup_ratio=0.1, total_steps=20000,
        eval_every=1000, seed=0))
    os.makedirs(os.path.dirname(CKPT), exist_ok=True)
    B.save_backbone(bb, CKPT)
    return bb


def main():
    bb = pretrained_backbone()

    task = C.gen_task("table_to_text", size=500, seed=7)
    spec = C.plan_transform("unfamiliar_remap_all", task, seed=5)
    task = C.transform_inputs(task, spec)
    print("task inputs after remap_all:", task.surface_pairs()[0][0])

    results = {}
    for mode in ("prompt_tune", "input_tune"):
        cfg = TR.TrainConfig(mode, batch_size=8, learning_rate=5e-3,
                             total_steps=2000, eval_every=250,
                             prompt_length=20, decode_max_len=24, seed=0)
        res = TR.tune(bb, task, cfg)
        results[mode] = res.record
        print(f"{mode}: best dev BLEU {res.record.best_dev_bleu:.4f} "
              f"at step {res.record.best_step}")

    gap = (results["input_tune"].best_dev_bleu
           - results["prompt_tune"].best_dev_bleu)
    print(f"\ninput_tune - prompt_tune = {gap:+.4f} BLEU")
    print("the adapter rewrites each foreign embedding before the frozen "
          "encoder reads it; a prompt alone cannot do that per token.")


if __name__ == "__main__":
    main()