"""Training engine: desk-scale pretraining and frozen-backbone tuning.

One run owns one backbone (fine-tuning operates on a private copy so the
frozen snapshot survives), an adaptation bundle for its mode, and an
adaptive-moment optimizer with decoupled weight decay applied strictly to
the mode's trainable set. Dev-set decoding happens every ``eval_every``
steps; the best checkpoint is chosen by dev BLEU with earliest-step
tie-breaking. Identical config, seeds and corpus reproduce the metric
trajectory bit-for-bit.
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .adaptation import (
    Adaptation,
    backbone_fingerprint,
    compose_source,
    make_adaptation,
    save_adaptation,
    trainable_set,
    MODES,
)
from .backbone import Backbone, decode, forward, save_backbone
from .checkpoint import atomic_write_text, canonical_json
from .corpus import EOS, Corpus, split_corpus
from .errors import ConfigError, TrainingDivergedError
from .metrics import EvalBatch, bleu, rouge_l

SCHEDULERS = ("constant", "linear_warmup")


@dataclass
class TrainConfig:
    mode: str
    batch_size: int = 8
    learning_rate: float = 5e-3
    weight_decay: float = 1e-2
    scheduler: str = "constant"
    warmup_ratio: float = 0.1
    total_steps: int = 2000
    eval_every: int = 500
    seed: int = 0
    beam: int = 1
    no_repeat_ngram: int = 0
    prompt_length: int = 20
    adapter_hidden: int | None = None
    prompt_reparam: bool = True
    decode_max_len: int = 24

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown tuning mode {self.mode!r}")
        if not 1e-6 <= self.learning_rate <= 1e-2:
            raise ConfigError("learning_rate must lie in [1e-6, 1e-2]")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError("warmup_ratio must lie in [0, 1)")
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"unknown scheduler {self.scheduler!r}")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be positive")
        if self.eval_every < 1 or self.total_steps % self.eval_every != 0:
            raise ConfigError("eval_every must divide total_steps")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(scheduler: str, step: int, cfg: TrainConfig) -> float:
    if not 0 <= step <= cfg.total_steps:
        raise ConfigError(f"step {step} outside [0, {cfg.total_steps}]")
    if scheduler == "constant":
        return cfg.learning_rate
    warm = cfg.warmup_ratio * cfg.total_steps
    if step <= warm and warm > 0:
        return cfg.learning_rate * step / warm
    return cfg.learning_rate * (cfg.total_steps - step) / (cfg.total_steps - warm)


class AdamW:
    """Adaptive-moment estimation with decoupled weight decay.

    beta1=0.9, beta2=0.999, eps=1e-8; decay multiplies the raw parameter,
    not the gradient, and touches only the parameters handed in here.
    """

    def __init__(self, params: dict, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for n, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[n]
            v = self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def _batch_stream(n: int, batch_size: int, seed: int):
    rng = random.Random(seed)
    buf: list = []
    while True:
        while len(buf) < batch_size:
            order = list(range(n))
            rng.shuffle(order)
            buf.extend(order)
        yield buf[:batch_size]
        del buf[:batch_size]


def example_loss(backbone: Backbone, adaptation: Adaptation | None, x, y,
                 train: bool = False, rng=None) -> T.Tensor:
    """Token-mean cross entropy of one (x, y) pair; EOS closes the target."""
    if adaptation is None:
        src = T.embedding(backbone.embedding_table, np.asarray(x, dtype=np.int64))
    else:
        src = compose_source(adaptation, backbone, x)
    targets = list(y) + [EOS]
    logits = forward(backbone, src, targets, train=train, rng=rng)
    return T.cross_entropy(logits, targets, "mean")


def group_references(corpus: Corpus):
    """Collapse duplicate inputs into one hypothesis slot with all outputs
    as references, preserving first-appearance order."""
    xs: list = []
    refs: list = []
    index: dict = {}
    for x, y in corpus.pairs:
        key = tuple(x)
        if key not in index:
            index[key] = len(xs)
            xs.append(list(x))
            refs.append([])
        refs[index[key]].append(list(y))
    return xs, refs


def evaluate(backbone: Backbone, adaptation: Adaptation | None, corpus: Corpus,
             cfg: TrainConfig) -> dict:
    """Loss, BLEU and ROUGE-L of decoded outputs on a corpus split."""
    with T.no_grad():
        total = 0.0
        for x, y in corpus.pairs:
            total += example_loss(backbone, adaptation, x, y).item()
        xs, refs = group_references(corpus)
        hyps = []
        for x in xs:
            if adaptation is None:
                src = T.embedding(backbone.embedding_table,
                                  np.asarray(x, dtype=np.int64))
            else:
                src = compose_source(adaptation, backbone, x)
            hyps.append(decode(backbone, src, beam=cfg.beam,
                               max_len=cfg.decode_max_len,
                               no_repeat_ngram=cfg.no_repeat_ngram))
    batch = EvalBatch(hyps, refs)
    return {
        "loss": total / len(corpus.pairs),
        "bleu": bleu(batch),
        "rouge_l": rouge_l(batch),
    }


@dataclass
class RunRecord:
    """Append-only record of one training run.

    The canonical byte representation covers the config header and the
    metric rows; wall-clock time lives in a sidecar field that is excluded
    so that repeated runs can be compared byte-for-byte.
    """

    config: dict
    origin: dict
    backbone_hash: str
    rows: list = field(default_factory=list)
    best_step: int = 0
    best_dev_bleu: float = 0.0
    checkpoint_path: str | None = None
    wall_clock_s: float = 0.0

    def append(self, row: dict) -> None:
        if "step" not in row:
            raise ConfigError("metric rows must carry a step number")
        self.rows.append(row)

    def header(self) -> dict:
        return {
            "config": self.config,
            "origin": self.origin,
            "backbone_hash": self.backbone_hash,
            "best_step": self.best_step,
            "best_dev_bleu": self.best_dev_bleu,
        }

    def canonical_bytes(self) -> bytes:
        lines = [canonical_json(self.header())]
        lines += [canonical_json(r) for r in self.rows]
        return ("\n".join(lines) + "\n").encode("utf-8")

    def save(self, directory) -> None:
        import os

        os.makedirs(directory, exist_ok=True)
        atomic_write_text(os.path.join(directory, "config.json"),
                          canonical_json(self.header()) + "\n")
        atomic_write_text(
            os.path.join(directory, "metrics.jsonl"),
            "".join(canonical_json(r) + "\n" for r in self.rows),
        )
        atomic_write_text(
            os.path.join(directory, "timing.json"),
            canonical_json({"wall_clock_s": self.wall_clock_s}) + "\n",
        )


def _train_steps(backbone, adaptation, optimizer, pairs, cfg, on_eval):
    """Shared minibatch loop; calls on_eval(step, mean_train_loss)."""
    stream = _batch_stream(len(pairs), cfg.batch_size, cfg.seed)
    drop_rng = (np.random.default_rng(cfg.seed ^ 0xD0) if backbone.config.dropout > 0
                else None)
    on_eval(0, None)
    window: list = []
    for step in range(1, cfg.total_steps + 1):
        batch = next(stream)
        with T.Graph() as g:
            total = None
            for i in batch:
                x, y = pairs[i]
                le = example_loss(backbone, adaptation, x, y, train=True, rng=drop_rng)
                total = le if total is None else T.add(total, le)
            loss = T.scale(total, 1.0 / len(batch))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"loss became non-finite ({value}) at step {step}")
            g.backward(loss)
        optimizer.step(lr_at(cfg.scheduler, step, cfg))
        optimizer.zero_grad()
        window.append(value)
        if step % cfg.eval_every == 0:
            on_eval(step, sum(window) / len(window))
            window.clear()


def pretrain(backbone: Backbone, corpus: Corpus, cfg: TrainConfig,
             loss_log: list | None = None) -> Backbone:
    """Full-model training on the grammar corpus, then freeze everything."""
    if cfg.mode != "fine_tune":
        raise ConfigError("pretraining requires mode=fine_tune")
    backbone.unfreeze_all()
    optimizer = AdamW(backbone.params, cfg.weight_decay)

    def on_eval(step, train_loss):
        if loss_log is not None and train_loss is not None:
            loss_log.append((step, train_loss))

    _train_steps(backbone, None, optimizer, corpus.pairs, cfg, on_eval)
    backbone.freeze_all()
    return backbone


def perplexity(backbone: Backbone, pairs) -> float:
    """exp of the per-token cross entropy over (x, y) pairs, EOS included."""
    total = 0.0
    tokens = 0
    with T.no_grad():
        for x, y in pairs:
            src = T.embedding(backbone.embedding_table, np.asarray(x, dtype=np.int64))
            targets = list(y) + [EOS]
            logits = forward(backbone, src, targets)
            total += T.cross_entropy(logits, targets, "sum").item()
            tokens += len(targets)
    return math.exp(total / tokens)


@dataclass
class TuneResult:
    record: RunRecord
    backbone: Backbone
    adaptation: Adaptation | None
    splits: tuple  # (train, dev, test) corpora


def tune(backbone: Backbone, task: Corpus, cfg: TrainConfig,
         workdir=None) -> TuneResult:
    """Optimize one tuning mode against a frozen backbone snapshot."""
    t0 = time.monotonic()
    if cfg.mode == "fine_tune":
        work = backbone.copy()
        work.unfreeze_all()
        adaptation = None
    else:
        if not all(backbone.frozen_mask.values()):
            raise ConfigError("frozen-backbone modes need a fully frozen backbone")
        work = backbone
        adaptation = make_adaptation(
            cfg.mode, work, k=cfg.prompt_length, seed=cfg.seed,
            reparam=cfg.prompt_reparam, hidden=cfg.adapter_hidden)
    params = (dict(work.params) if cfg.mode == "fine_tune"
              else trainable_set(adaptation, work))
    if not params:
        raise ConfigError(f"mode {cfg.mode} has an empty trainable set")
    optimizer = AdamW(params, cfg.weight_decay)
    train_c, dev_c, test_c = split_corpus(task)

    record = RunRecord(
        config=cfg.to_dict(),
        origin={"generator": task.origin.generator, "seed": task.origin.seed,
                "transforms": list(task.origin.transforms)},
        backbone_hash=backbone_fingerprint(backbone),
    )
    best = {"bleu": -1.0, "step": 0, "params": None}

    def on_eval(step, train_loss):
        scores = evaluate(work, adaptation, dev_c, cfg)
        record.append({
            "step": step, "train_loss": train_loss, "dev_loss": scores["loss"],
            "dev_bleu": scores["bleu"], "dev_rouge_l": scores["rouge_l"],
        })
        if scores["bleu"] > best["bleu"]:  # strict: earliest step wins ties
            best["bleu"] = scores["bleu"]
            best["step"] = step
            best["params"] = {n: p.data.copy() for n, p in params.items()}

    _train_steps(work, adaptation, optimizer, train_c.pairs, cfg, on_eval)

    if best["params"] is not None:
        for n, arr in best["params"].items():
            params[n].data[...] = arr
    record.best_step = best["step"]
    record.best_dev_bleu = best["bleu"]
    record.wall_clock_s = time.monotonic() - t0

    if workdir is not None:
        import os

        os.makedirs(workdir, exist_ok=True)
        if cfg.mode == "fine_tune":
            path = os.path.join(workdir, "backbone_tuned.ckpt")
            save_backbone(work, path)
        else:
            path = os.path.join(workdir, "adaptation.ckpt")
            save_adaptation(path, adaptation, work,
                            extra={"train_config": cfg.to_dict()})
        record.checkpoint_path = path
        record.save(workdir)
    return TuneResult(record, work, adaptation, (train_c, dev_c, test_c))
