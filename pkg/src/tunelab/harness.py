"""Experiment harness: reproducible multi-seed runs driven by config files.

Wires the corpus generators, backbone, adaptation modes and training engine
into five entry points (pretrain / tune / eval / sweep / familiarity plus the
transform and report utilities behind the CLI). Every output directory gets a
manifest embedding the experiment config hash, sweep CSVs use fixed column
sets per axis, and sub-run failures land in a status column instead of
aborting the sweep.

Step budgets in the shipped config files are the reference recipe divided by
DESK_STEP_FACTOR; reports print that factor so numbers are read at the right
scale.
"""

from __future__ import annotations

import csv
import io
import json
import os
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields as dc_fields, asdict

import yaml

from .adaptation import MODES, load_adaptation
from .backbone import config_for_size, init_backbone, load_backbone, save_backbone
from .checkpoint import atomic_write_text, canonical_json, config_hash
from .corpus import (
    TRANSFORM_KINDS,
    FN_NAMES,
    KEY_TOKENS,
    VALUE_ADJS,
    VALUE_NOUNS,
    VERBS,
    Corpus,
    Origin,
    build_vocab,
    gen_pretrain_corpus,
    gen_task,
    load_corpus,
    plan_transform,
    save_corpus,
    split_corpus,
    transform_inputs,
)
from .errors import ConfigError, TransformSpecError
from .metrics import relative_performance
from .ngrams import (
    build_bigram_table,
    corpus_familiarity,
    load_bigram_table,
    save_bigram_table,
)
from .training import TrainConfig, evaluate, pretrain, tune

# reference recipe trains for 100k steps evaluating every 10k; desk runs
# divide both by this factor
DESK_STEP_FACTOR = 20

SWEEP_AXES = ("prompt_length", "data_scale", "backbone_size", "design", "familiarity")

# fixed CSV schemas, one per sweep axis family
SWEEP_COLUMNS = ["axis", "value", "mode", "seed", "dev_bleu", "test_bleu",
                 "status", "config_hash"]
FAMILIARITY_COLUMNS = ["axis", "value", "mode", "seed", "dev_bleu", "test_bleu",
                       "fam", "rp", "status", "config_hash"]
FIGURE_COLUMNS = ["value", "mode", "runs", "mean_dev_bleu", "mean_test_bleu"]
FAMILIARITY_FIGURE_COLUMNS = FIGURE_COLUMNS + ["mean_fam", "mean_rp"]

_FLOAT_TRAIN_FIELDS = {"learning_rate", "weight_decay", "warmup_ratio"}
_TASK_META = {
    "table_to_text": {
        "key_tokens": list(KEY_TOKENS),
        "value_tokens": sorted(set(VALUE_ADJS) | set(VALUE_NOUNS)),
    },
    "logic_to_text": {
        "key_tokens": list(FN_NAMES),
        "value_tokens": sorted(set(VALUE_NOUNS) | set(VERBS)),
    },
}


@dataclass
class ExperimentConfig:
    """One experiment: what to run, on which task, under which seeds."""

    name: str
    output_dir: str
    arch: str = "encoder_decoder"
    backbone_size: str = "small"
    backbone_overrides: dict = field(default_factory=dict)  # e.g. max_positions
    backbone_path: str | None = None
    backbone_paths: dict = field(default_factory=dict)  # size tag -> checkpoint
    adaptation_path: str | None = None
    bigram_path: str | None = None
    pretrain_seed: int = 11
    pretrain_size: int = 20000
    task_kind: str = "table_to_text"
    task_size: int = 1000
    task_seed: int = 7
    transforms: list = field(default_factory=list)  # [{kind, seed}, ...]
    train: dict = field(default_factory=dict)  # TrainConfig fields minus mode
    modes: list = field(default_factory=lambda: ["input_tune"])
    seeds: list = field(default_factory=lambda: [0])
    values: list = field(default_factory=list)  # sweep axis values
    workers: int = 1

    def __post_init__(self):
        if not self.name or not self.output_dir:
            raise ConfigError("experiment needs a name and an output_dir")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"unknown tuning mode {m!r}")
        if not self.seeds:
            raise ConfigError("seeds list must be nonempty")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        for t in self.transforms:
            if not isinstance(t, dict) or "kind" not in t:
                raise ConfigError("each transform needs at least a kind")
            if t["kind"] not in TRANSFORM_KINDS:
                raise ConfigError(f"unknown transform kind {t['kind']!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        # where results land and how many workers ran must not change what
        # the experiment *is*, so reruns elsewhere stay comparable
        payload = {k: v for k, v in self.to_dict().items()
                   if k not in ("output_dir", "workers")}
        return config_hash(payload)


def load_experiment(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    known = {f.name for f in dc_fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**raw)


def make_train_config(cfg: ExperimentConfig, mode: str, seed: int,
                      **overrides) -> TrainConfig:
    kw = dict(cfg.train)
    kw.update(overrides)
    allowed = {f.name for f in dc_fields(TrainConfig)} - {"mode", "seed"}
    unknown = set(kw) - allowed
    if unknown:
        raise ConfigError(f"unknown train fields: {sorted(unknown)}")
    for k in list(kw):
        # YAML reads shorthand scientific notation like 5e-3 as a string
        kw[k] = float(kw[k]) if k in _FLOAT_TRAIN_FIELDS else kw[k]
    return TrainConfig(mode=mode, seed=seed, **kw)


def make_task(cfg: ExperimentConfig, pairs_limit: int | None = None) -> Corpus:
    corpus = gen_task(cfg.task_kind, cfg.task_size, cfg.task_seed)
    if pairs_limit is not None:
        corpus = _subsample(corpus, pairs_limit)
    for t in cfg.transforms:
        spec = plan_transform(t["kind"], corpus, int(t.get("seed", 0)))
        corpus = transform_inputs(corpus, spec)
    return corpus


def _subsample(corpus: Corpus, keep: int) -> Corpus:
    if not 1 <= keep <= len(corpus):
        raise ConfigError(f"cannot keep {keep} of {len(corpus)} pairs")
    order = list(range(len(corpus)))
    random.Random(corpus.origin.seed ^ 0x5CA1E ^ keep).shuffle(order)
    picked = sorted(order[:keep])
    pairs = [corpus.pairs[i] for i in picked]
    origin = Origin(corpus.origin.generator, corpus.origin.seed,
                    corpus.origin.transforms + (f"subsample:{keep}",))
    return Corpus(pairs, corpus.vocab, origin, dict(corpus.meta))


def write_manifest(cfg: ExperimentConfig, directory, artifacts: list) -> None:
    atomic_write_text(
        os.path.join(directory, "manifest.json"),
        canonical_json({
            "experiment": cfg.name,
            "config_hash": cfg.hash,
            "desk_step_factor": DESK_STEP_FACTOR,
            "artifacts": sorted(artifacts),
        }) + "\n",
    )


def _println(quiet, *parts):
    if not quiet:
        print(*parts)


def rescale_note() -> str:
    return (f"step budget = reference recipe / {DESK_STEP_FACTOR} "
            f"(100k steps -> {100_000 // DESK_STEP_FACTOR}, "
            f"eval every 10k -> {10_000 // DESK_STEP_FACTOR})")


# ---------------------------------------------------------------------------
# pretrain / tune / eval


def run_pretrain(cfg: ExperimentConfig, quiet: bool = False) -> dict:
    """Generate the grammar corpus, train a backbone on it, freeze it, and
    write the checkpoint plus the corpus's bigram table."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    vocab = build_vocab()
    corpus = gen_pretrain_corpus(cfg.pretrain_seed, cfg.pretrain_size, vocab)
    backbone = init_backbone(config_for_size(
        cfg.backbone_size, len(vocab), cfg.arch, **cfg.backbone_overrides))
    tc = make_train_config(cfg, "fine_tune", 0)
    _println(quiet, f"[{cfg.name}] pretraining {cfg.backbone_size} {cfg.arch} "
                    f"for {tc.total_steps} steps on {len(corpus)} sequences")
    _println(quiet, rescale_note())
    log: list = []
    pretrain(backbone, corpus, tc, loss_log=log)
    if log:
        _println(quiet, f"train loss {log[0][1]:.4f} -> {log[-1][1]:.4f}")
    ckpt = os.path.join(cfg.output_dir, f"backbone_{cfg.backbone_size}.ckpt")
    save_backbone(backbone, ckpt)
    table = build_bigram_table(corpus)
    bigrams = os.path.join(cfg.output_dir, "bigrams.tsv")
    save_bigram_table(table, vocab, bigrams)
    write_manifest(cfg, cfg.output_dir,
                   [os.path.basename(ckpt), os.path.basename(bigrams)])
    return {"checkpoint": ckpt, "bigrams": bigrams}


def _require_backbone(cfg: ExperimentConfig):
    if not cfg.backbone_path:
        raise ConfigError("config needs backbone_path (a pretrained checkpoint)")
    if not os.path.exists(cfg.backbone_path):
        raise ConfigError(f"backbone checkpoint not found: {cfg.backbone_path}")
    return load_backbone(cfg.backbone_path)


def run_tune(cfg: ExperimentConfig, quiet: bool = False) -> list:
    """Tune every configured mode under every seed; one run directory and
    RunRecord per (mode, seed), plus a summary CSV over the cross product."""
    backbone = _require_backbone(cfg)
    task = make_task(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    rows = []
    for mode in cfg.modes:
        for seed in cfg.seeds:
            tc = make_train_config(cfg, mode, seed)
            run_dir = os.path.join(cfg.output_dir, mode, f"seed{seed}")
            result = tune(backbone, task, tc, workdir=run_dir)
            test_scores = evaluate(result.backbone, result.adaptation,
                                   result.splits[2], tc)
            rows.append({
                "mode": mode, "seed": seed,
                "best_step": result.record.best_step,
                "dev_bleu": result.record.best_dev_bleu,
                "test_bleu": test_scores["bleu"],
                "test_rouge_l": test_scores["rouge_l"],
                "config_hash": cfg.hash,
            })
    path = os.path.join(cfg.output_dir, "summary.csv")
    _write_csv(path, list(rows[0].keys()), rows)
    write_manifest(cfg, cfg.output_dir, ["summary.csv"])
    _println(quiet, f"[{cfg.name}] tuned {len(rows)} runs; {rescale_note()}")
    _println(quiet, f"{'mode':<16}{'seed':<6}{'dev_bleu':<10}{'test_bleu':<10}")
    for r in rows:
        _println(quiet, f"{r['mode']:<16}{r['seed']:<6}"
                        f"{r['dev_bleu']:<10.4f}{r['test_bleu']:<10.4f}")
    return rows


def run_eval(cfg: ExperimentConfig, quiet: bool = False) -> dict:
    """Score a checkpoint (with optional tuned adaptation) on the task's
    held-out test split."""
    backbone = _require_backbone(cfg)
    adaptation = None
    mode = "fine_tune"
    if cfg.adaptation_path:
        if not os.path.exists(cfg.adaptation_path):
            raise ConfigError(f"adaptation not found: {cfg.adaptation_path}")
        adaptation = load_adaptation(cfg.adaptation_path, backbone)
        mode = adaptation.mode
    tc = make_train_config(cfg, mode, cfg.seeds[0])
    task = make_task(cfg)
    test = split_corpus(task)[2]
    scores = evaluate(backbone, adaptation, test, tc)
    _println(quiet, f"[{cfg.name}] test loss {scores['loss']:.4f}  "
                    f"bleu {scores['bleu']:.4f}  rouge_l {scores['rouge_l']:.4f}")
    if cfg.output_dir:
        os.makedirs(cfg.output_dir, exist_ok=True)
        atomic_write_text(
            os.path.join(cfg.output_dir, "eval.json"),
            canonical_json({"config_hash": cfg.hash, "mode": mode, **scores}) + "\n")
    return scores


# ---------------------------------------------------------------------------
# sweeps


def _axis_combos(axis: str, cfg: ExperimentConfig) -> list:
    """Expand (value, mode, overrides) tuples for one sweep axis."""
    values = list(cfg.values)
    if not values:
        raise ConfigError(f"sweep over {axis} needs a nonempty values list")
    combos = []
    if axis == "prompt_length":
        for v in values:
            k = int(v)
            if k < 0:
                raise ConfigError("prompt lengths must be nonnegative")
            for mode in cfg.modes:
                # zero-length rows only exist for modes that still train
                # something (an adapter); pure prompt tuning would be empty
                if k == 0 and mode == "prompt_tune":
                    continue
                combos.append((v, mode, {"prompt_length": k}))
    elif axis == "data_scale":
        for v in values:
            frac = float(v)
            if not 0.0 < frac <= 1.0:
                raise ConfigError("data_scale values must lie in (0, 1]")
            keep = max(10, round(frac * cfg.task_size))
            for mode in cfg.modes:
                combos.append((v, mode, {"pairs_limit": keep}))
    elif axis == "backbone_size":
        for v in values:
            if v not in ("small", "base", "large"):
                raise ConfigError(f"unknown backbone size {v!r}")
            for mode in cfg.modes:
                combos.append((v, mode, {"backbone_size": v}))
    elif axis == "design":
        for v in values:
            if v not in MODES:
                raise ConfigError(f"unknown design (tuning mode) {v!r}")
            combos.append((v, v, {}))
    elif axis == "familiarity":
        if not cfg.bigram_path:
            raise ConfigError("familiarity sweep needs bigram_path")
        for v in values:
            if v not in TRANSFORM_KINDS:
                raise ConfigError(f"unknown transform kind {v!r}")
            for mode in cfg.modes:
                combos.append((v, mode, {"transform": v}))
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; pick from {SWEEP_AXES}")
    return combos


def _sweep_subrun(payload: dict) -> dict:
    """One isolated sweep cell; runs in a worker process.

    Receives only paths and primitives so it can cross a process boundary,
    and returns the finished CSV row.
    """
    cfg = ExperimentConfig(**payload["config"])
    axis, value = payload["axis"], payload["value"]
    mode, seed, over = payload["mode"], payload["seed"], payload["overrides"]
    row = {"axis": axis, "value": value, "mode": mode, "seed": seed,
           "dev_bleu": "", "test_bleu": "", "status": "ok",
           "config_hash": cfg.hash}
    if axis == "familiarity":
        row.update({"fam": "", "rp": ""})
    try:
        if "backbone_size" in over:
            path = cfg.backbone_paths.get(over["backbone_size"])
            if not path or not os.path.exists(path):
                raise ConfigError(
                    f"no checkpoint configured for size {over['backbone_size']!r}")
            cfg.backbone_path = path
        backbone = _require_backbone(cfg)
        task = make_task(cfg, pairs_limit=over.get("pairs_limit"))
        if "transform" in over and over["transform"] != "identity":
            spec = plan_transform(over["transform"], task, int(payload["tseed"]))
            task = transform_inputs(task, spec)
        tc_over = {k: v for k, v in over.items()
                   if k in {"prompt_length"}}
        tc = make_train_config(cfg, mode, seed, **tc_over)
        run_dir = os.path.join(cfg.output_dir, f"{axis}={value}", mode,
                               f"seed{seed}")
        result = tune(backbone, task, tc, workdir=run_dir)
        test_scores = evaluate(result.backbone, result.adaptation,
                               result.splits[2], tc)
        row["dev_bleu"] = f"{result.record.best_dev_bleu:.6f}"
        row["test_bleu"] = f"{test_scores['bleu']:.6f}"
        if axis == "familiarity":
            table = load_bigram_table(cfg.bigram_path, task.vocab)
            row["fam"] = f"{corpus_familiarity(task, table):.6f}"
    except Exception as e:  # any sub-run failure becomes a status row
        row["status"] = f"{type(e).__name__}: {e}"
    return row


def run_sweep(axis: str, cfg: ExperimentConfig, quiet: bool = False) -> str:
    """Cross product of axis values x modes x seeds -> one CSV row per run.

    Sub-runs execute in a process pool (workers=1 runs inline); aggregation
    is single-threaded and ordered by axis value then seed. Returns the CSV
    path; a *_figure.csv companion holds per-(value, mode) means over rows
    whose status is ok.
    """
    combos = _axis_combos(axis, cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    payloads = []
    for value, mode, over in combos:
        for seed in cfg.seeds:
            payloads.append({
                "config": cfg.to_dict(), "axis": axis, "value": value,
                "mode": mode, "seed": seed, "overrides": over,
                "tseed": cfg.task_seed,
            })
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(_sweep_subrun, payloads))
    else:
        rows = [_sweep_subrun(p) for p in payloads]

    value_order = {v: i for i, v in enumerate(cfg.values)}
    rows.sort(key=lambda r: (value_order[r["value"]], str(r["mode"]), r["seed"]))
    if axis == "familiarity":
        _fill_rp(rows)
    columns = FAMILIARITY_COLUMNS if axis == "familiarity" else SWEEP_COLUMNS
    path = os.path.join(cfg.output_dir, f"sweep_{axis}.csv")
    _write_csv(path, columns, rows)
    fig_path = os.path.join(cfg.output_dir, f"sweep_{axis}_figure.csv")
    _write_figure_data(fig_path, axis, cfg, rows)
    write_manifest(cfg, cfg.output_dir,
                   [os.path.basename(path), os.path.basename(fig_path)])
    bad = sum(r["status"] != "ok" for r in rows)
    _println(quiet, f"[{cfg.name}] sweep {axis}: {len(rows)} runs "
                    f"({bad} failed); {rescale_note()}")
    _println(quiet, f"wrote {path}")
    return path


def _fill_rp(rows) -> None:
    """Relative performance per row: test BLEU over the mean full-tuning
    test BLEU under the same axis value."""
    base: dict = {}
    for r in rows:
        if r["mode"] == "fine_tune" and r["status"] == "ok":
            base.setdefault(r["value"], []).append(float(r["test_bleu"]))
    for r in rows:
        ref = base.get(r["value"])
        if r["status"] == "ok" and ref and sum(ref) > 0:
            r["rp"] = f"{float(r['test_bleu']) / (sum(ref) / len(ref)):.6f}"


def _write_csv(path, columns, rows) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({c: r.get(c, "") for c in columns})
    atomic_write_text(path, buf.getvalue())


def _write_figure_data(path, axis, cfg, rows) -> None:
    groups: dict = {}
    for r in rows:
        if r["status"] != "ok":
            continue
        groups.setdefault((r["value"], r["mode"]), []).append(r)
    out = []
    for (value, mode), cell in groups.items():
        n = len(cell)
        rec = {
            "value": value, "mode": mode, "runs": n,
            "mean_dev_bleu": f"{sum(float(r['dev_bleu']) for r in cell) / n:.6f}",
            "mean_test_bleu": f"{sum(float(r['test_bleu']) for r in cell) / n:.6f}",
        }
        if axis == "familiarity":
            rec["mean_fam"] = f"{sum(float(r['fam']) for r in cell) / n:.6f}"
            rps = [float(r["rp"]) for r in cell if r["rp"] != ""]
            rec["mean_rp"] = f"{sum(rps) / len(rps):.6f}" if rps else ""
        out.append(rec)
    value_order = {v: i for i, v in enumerate(cfg.values)}
    out.sort(key=lambda r: (value_order[r["value"]], str(r["mode"])))
    columns = FAMILIARITY_FIGURE_COLUMNS if axis == "familiarity" else FIGURE_COLUMNS
    _write_csv(path, columns, out)


# ---------------------------------------------------------------------------
# familiarity reports, transforms, run summaries


def _read_record_header(run_dir) -> dict:
    path = os.path.join(run_dir, "config.json")
    if not os.path.exists(path):
        raise ConfigError(f"no run record at {run_dir}")
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def run_familiarity(bigram_path, corpus_path=None, run_dir=None,
                    baseline_dir=None, out_path=None, quiet=False) -> dict:
    """Familiarity of a corpus's inputs against a bigram table, and (given a
    run plus a full-tuning baseline) the relative-performance ratio.

    Writes a small report whose columns are variant, RP(%), Fam.
    """
    vocab = build_vocab()
    if not os.path.exists(bigram_path):
        raise ConfigError(f"bigram table not found: {bigram_path}")
    table = load_bigram_table(bigram_path, vocab)
    report = {}
    if corpus_path is not None:
        if not os.path.exists(corpus_path):
            raise ConfigError(f"corpus not found: {corpus_path}")
        corpus = load_corpus(corpus_path, vocab)
        report["fam"] = corpus_familiarity(corpus, table)
        _println(quiet, f"familiarity({os.path.basename(corpus_path)}) = "
                        f"{report['fam']:.4f} nats")
    if run_dir is not None:
        header = _read_record_header(run_dir)
        variant = header["config"].get("mode", "run")
        report["variant"] = variant
        report["variant_bleu"] = header["best_dev_bleu"]
        if baseline_dir is not None:
            base = _read_record_header(baseline_dir)
            if base["backbone_hash"] != header["backbone_hash"]:
                raise ConfigError(
                    "refusing to compare runs tuned against different backbones "
                    f"({header['backbone_hash'][:12]} vs {base['backbone_hash'][:12]})")
            report["rp"] = relative_performance(header["best_dev_bleu"],
                                                base["best_dev_bleu"])
            _println(quiet, f"relative performance({variant}) = "
                            f"{100 * report['rp']:.1f}%")
    if out_path is not None:
        rp = report.get("rp")
        name = report.get("variant")
        if name is None:
            name = os.path.basename(corpus_path) if corpus_path else "corpus"
        row = ",".join([
            name,
            f"{100 * rp:.1f}" if rp is not None else "",
            f"{report['fam']:.4f}" if "fam" in report else "",
        ])
        atomic_write_text(out_path, "variant,rp_percent,fam\n" + row + "\n")
    return report


def run_transform(in_path, out_path, kind: str, seed: int = 0,
                  task_kind: str = "table_to_text", quiet=False) -> str:
    """Rewrite a corpus file's input side with one transformation."""
    vocab = build_vocab()
    if not os.path.exists(in_path):
        raise ConfigError(f"corpus not found: {in_path}")
    if task_kind not in _TASK_META:
        raise TransformSpecError(f"unknown task kind {task_kind!r}")
    corpus = load_corpus(in_path, vocab, meta=dict(_TASK_META[task_kind]))
    spec = plan_transform(kind, corpus, seed)
    out = transform_inputs(corpus, spec)
    save_corpus(out, out_path)
    n_remap = len(spec.remap) if spec.remap else 0
    _println(quiet, f"wrote {out_path} ({kind}, {n_remap} tokens remapped)")
    return out_path


def run_report(paths, out_path=None, quiet=False) -> str:
    """Human-readable summary of run directories and sweep CSVs."""
    lines = [f"desk-scale report; {rescale_note()}"]
    for p in paths:
        if os.path.isdir(p):
            header = _read_record_header(p)
            cfg = header["config"]
            lines.append(
                f"run {p}: mode={cfg.get('mode')} steps={cfg.get('total_steps')} "
                f"best_step={header['best_step']} "
                f"best_dev_bleu={header['best_dev_bleu']:.4f}")
        elif p.endswith(".csv"):
            with open(p, newline="", encoding="utf-8") as f:
                rows = list(csv.DictReader(f))
            lines.append(f"sweep {p}: {len(rows)} rows")
            for r in rows:
                cells = [f"{k}={r[k]}" for k in r if r[k] != ""]
                lines.append("  " + " ".join(cells))
        else:
            raise ConfigError(f"report input must be a run dir or CSV: {p}")
    text = "\n".join(lines) + "\n"
    _println(quiet, text.rstrip())
    if out_path is not None:
        atomic_write_text(out_path, text)
    return text
