"""Drive the experiment harness end to end on tiny settings: pretrain via
config, sweep the design axis, and print the report.

Mirrors what the CLI does (tunelab pretrain / sweep / report) but calls the
harness functions directly so the intermediate objects are visible. Output
lands in a temporary directory. Runs in about a minute.
"""

import os
import tempfile

from tunelab import harness


def main():
    root = tempfile.mkdtemp(prefix="tunelab-demo-")
    print(f"working under {root}\n")

    pre = harness.ExperimentConfig(
        name="demo-pre", output_dir=os.path.join(root, "pre"),
        pretrain_seed=11, pretrain_size=2000,
        train={"batch_size": 8, "learning_rate": 1.0e-3,
               "total_steps": 400, "eval_every": 200})
    paths = harness.run_pretrain(pre)

    sweep = harness.ExperimentConfig(
        name="demo-sweep", output_dir=os.path.join(root, "sweep"),
        backbone_path=paths["checkpoint"], bigram_path=paths["bigrams"],
        task_kind="table_to_text", task_size=80, task_seed=7,
        train={"batch_size": 4, "learning_rate": 5.0e-3, "total_steps": 100,
               "eval_every": 50, "prompt_length": 4, "decode_max_len": 20},
        seeds=[0], values=["prompt_tune", "input_tune", "adapter_only"])
    csv_path = harness.run_sweep("design", sweep)

    print()
    harness.run_report([csv_path])
    print("\nper-run artifacts (config.json / metrics.jsonl / timing.json / "
          "adaptation.ckpt) live beside the CSV:")
    for dirpath, _, files in sorted(os.walk(sweep.output_dir)):
        for f in sorted(files):
            print(" ", os.path.relpath(os.path.join(dirpath, f), root))


if __name__ == "__main__":
    main()
