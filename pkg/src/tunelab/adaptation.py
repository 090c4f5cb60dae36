"""Tuning mechanisms around a frozen backbone.

A soft prompt is a trainable matrix of k pseudo-token embeddings prepended
to the input; optionally it is reparameterized through a small residual
perceptron over a frozen sampled base. An input adapter rewrites the source
embedding rows before they enter the backbone: the token-wise kind applies
an identical residual two-layer map to every row independently, the
sequence-wise ablation kind applies one self-attention layer with residual.
Both start as exact identities so freshly attached adapters never change
step-0 behavior.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Backbone
from .checkpoint import canonical_json, config_hash, read_checkpoint, write_checkpoint
from .errors import ConfigError, LengthError, ShapeError

DEFAULT_PROMPT_LENGTH = 100

MODES = ("fine_tune", "prompt_tune", "input_tune", "adapter_only", "input_tune_seq")
ADAPTER_KINDS = ("token_wise", "sequence_wise")


def backbone_fingerprint(backbone: Backbone) -> str:
    """Hash of the backbone config plus every parameter value, so artifacts
    tuned against different frozen snapshots can never be mixed up."""
    h = hashlib.sha256(canonical_json(backbone.config.to_dict()).encode())
    for name in sorted(backbone.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(backbone.params[name].data, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class SoftPrompt:
    k: int
    direct: T.Tensor | None = None
    base: T.Tensor | None = None       # frozen sampled rows (reparam form)
    core: T.Tensor | None = None
    mlp_in: T.Tensor | None = None
    mlp_out: T.Tensor | None = None

    @property
    def is_reparam(self) -> bool:
        return self.core is not None

    def trainable(self) -> dict:
        if self.k == 0:
            return {}
        if self.is_reparam:
            return {"prompt.core": self.core, "prompt.mlp_in": self.mlp_in,
                    "prompt.mlp_out": self.mlp_out}
        return {"prompt.rows": self.direct}

    def all_params(self) -> dict:
        if self.k == 0:
            return {}
        if self.is_reparam:
            return {"prompt.base": self.base, **self.trainable()}
        return self.trainable()

    def materialize(self) -> T.Tensor | None:
        """Prompt matrix as graph ops, so gradients reach the live form."""
        if self.k == 0:
            return None
        if not self.is_reparam:
            return self.direct
        branch = T.matmul(T.relu(T.matmul(self.core, self.mlp_in)), self.mlp_out)
        return T.add(self.base, branch)


def make_soft_prompt(backbone: Backbone, k: int = DEFAULT_PROMPT_LENGTH,
                     seed: int = 0, reparam: bool = True) -> SoftPrompt:
    """Prompt rows start as k embedding-table rows sampled with replacement."""
    if k < 0:
        raise ShapeError("prompt length must be nonnegative")
    if k > backbone.config.max_positions:
        raise LengthError(
            f"prompt length {k} exceeds max_positions={backbone.config.max_positions}")
    if k == 0:
        return SoftPrompt(0)
    e = backbone.config.embed_dim
    rng = np.random.default_rng(seed)
    rows = backbone.embedding_table.data[
        rng.integers(0, backbone.config.vocab_size, size=k)
    ].copy()
    if not reparam:
        return SoftPrompt(k, direct=T.Tensor(rows, True, "prompt.rows"))
    h = 2 * e
    return SoftPrompt(
        k,
        base=T.Tensor(rows, False, "prompt.base"),
        core=T.Tensor(rows.copy(), True, "prompt.core"),
        mlp_in=T.Tensor(rng.normal(0.0, 0.02, (e, h)), True, "prompt.mlp_in"),
        mlp_out=T.Tensor(np.zeros((h, e)), True, "prompt.mlp_out"),
    )


def collapse_reparam(prompt: SoftPrompt) -> SoftPrompt:
    """Fold the reparameterization into a direct prompt for export."""
    if not prompt.is_reparam:
        return prompt
    with T.no_grad():
        rows = prompt.materialize().data.copy()
    return SoftPrompt(prompt.k, direct=T.Tensor(rows, True, "prompt.rows"))


@dataclass
class InputAdapter:
    kind: str
    params: dict  # name -> Tensor

    def trainable(self) -> dict:
        return dict(self.params)

    def apply(self, X: T.Tensor) -> T.Tensor:
        if self.kind == "token_wise":
            w_in, w_out = self.params["adapter.w_in"], self.params["adapter.w_out"]
            if X.shape[1] != w_in.shape[0]:
                raise ShapeError(
                    f"adapter expects {w_in.shape[0]} columns, got {X.shape[1]}")
            return T.add(X, T.matmul(T.relu(T.matmul(X, w_in)), w_out))
        wq, wk = self.params["adapter.wq"], self.params["adapter.wk"]
        wv, wo = self.params["adapter.wv"], self.params["adapter.wo"]
        if X.shape[1] != wq.shape[0]:
            raise ShapeError(f"adapter expects {wq.shape[0]} columns, got {X.shape[1]}")
        scores = T.scale(T.matmul(T.matmul(X, wq), T.transpose(T.matmul(X, wk))),
                         1.0 / np.sqrt(X.shape[1]))
        ctx = T.matmul(T.softmax_rows(scores), T.matmul(X, wv))
        return T.add(X, T.matmul(ctx, wo))


def make_input_adapter(embed_dim: int, kind: str = "token_wise",
                       hidden: int | None = None, seed: int = 0) -> InputAdapter:
    """Residual adapters; the residual branch output matrix starts at zero."""
    if kind not in ADAPTER_KINDS:
        raise ConfigError(f"unknown adapter kind {kind!r}")
    rng = np.random.default_rng(seed)
    e = embed_dim
    if kind == "token_wise":
        h = 2 * e if hidden is None else hidden
        if h <= 0:
            raise ConfigError("adapter hidden width must be positive")
        params = {
            "adapter.w_in": T.Tensor(rng.normal(0.0, 0.02, (e, h)), True, "adapter.w_in"),
            "adapter.w_out": T.Tensor(np.zeros((h, e)), True, "adapter.w_out"),
        }
    else:
        params = {
            "adapter.wq": T.Tensor(rng.normal(0.0, 0.02, (e, e)), True, "adapter.wq"),
            "adapter.wk": T.Tensor(rng.normal(0.0, 0.02, (e, e)), True, "adapter.wk"),
            "adapter.wv": T.Tensor(rng.normal(0.0, 0.02, (e, e)), True, "adapter.wv"),
            "adapter.wo": T.Tensor(np.zeros((e, e)), True, "adapter.wo"),
        }
    return InputAdapter(kind, params)


def compose_input(prompt: SoftPrompt | None, adapted: T.Tensor) -> T.Tensor:
    """[prompt rows; adapted rows] with the prompt materialized first."""
    if prompt is None or prompt.k == 0:
        return adapted
    rows = prompt.materialize()
    if rows.shape[1] != adapted.shape[1]:
        raise ShapeError(
            f"prompt width {rows.shape[1]} vs input width {adapted.shape[1]}")
    return T.concat_rows([rows, adapted])


# ---------------------------------------------------------------------------
# tuning modes


@dataclass
class Adaptation:
    """Everything a tuning mode attaches around the backbone."""

    mode: str
    prompt: SoftPrompt | None = None
    adapter: InputAdapter | None = None

    def named_params(self) -> dict:
        out = {}
        if self.prompt is not None:
            out.update(self.prompt.all_params())
        if self.adapter is not None:
            out.update(self.adapter.trainable())
        return out


def make_adaptation(mode: str, backbone: Backbone, k: int = DEFAULT_PROMPT_LENGTH,
                    seed: int = 0, reparam: bool = True,
                    hidden: int | None = None) -> Adaptation:
    if mode not in MODES:
        raise ConfigError(f"unknown tuning mode {mode!r}")
    e = backbone.config.embed_dim
    if mode == "fine_tune":
        return Adaptation(mode)
    if mode == "adapter_only":
        return Adaptation(mode, adapter=make_input_adapter(e, "token_wise", hidden, seed))
    if k == 0 and mode == "prompt_tune":
        raise ConfigError("prompt_tune with an empty prompt has nothing to train")
    prompt = make_soft_prompt(backbone, k, seed, reparam)
    if mode == "prompt_tune":
        return Adaptation(mode, prompt=prompt)
    kind = "sequence_wise" if mode == "input_tune_seq" else "token_wise"
    return Adaptation(mode, prompt=prompt, adapter=make_input_adapter(e, kind, hidden, seed))


def trainable_set(adaptation: Adaptation, backbone: Backbone) -> dict:
    """Exactly the parameters the mode is allowed to update."""
    mode = adaptation.mode
    if mode == "fine_tune":
        return dict(backbone.params)
    out: dict = {}
    if mode in ("prompt_tune", "input_tune", "input_tune_seq"):
        out.update(adaptation.prompt.trainable())
    if mode in ("input_tune", "input_tune_seq", "adapter_only"):
        out.update(adaptation.adapter.trainable())
    return out


def compose_source(adaptation: Adaptation, backbone: Backbone, source_ids) -> T.Tensor:
    """Embed source tokens, pass them through the adapter, prepend the prompt."""
    X = T.embedding(backbone.embedding_table, np.asarray(source_ids, dtype=np.int64))
    if adaptation.adapter is not None:
        X = adaptation.adapter.apply(X)
    return compose_input(adaptation.prompt, X)


# ---------------------------------------------------------------------------
# persistence (same container as backbone checkpoints)


def save_adaptation(path, adaptation: Adaptation, backbone: Backbone,
                    extra: dict | None = None) -> None:
    cfg = {
        "mode": adaptation.mode,
        "backbone_fingerprint": backbone_fingerprint(backbone),
        "backbone_config_hash": config_hash(backbone.config.to_dict()),
        "prompt_length": adaptation.prompt.k if adaptation.prompt else 0,
        "prompt_reparam": bool(adaptation.prompt and adaptation.prompt.is_reparam),
        "adapter_kind": adaptation.adapter.kind if adaptation.adapter else None,
        "adapter_hidden": (
            adaptation.adapter.params["adapter.w_in"].shape[1]
            if adaptation.adapter and adaptation.adapter.kind == "token_wise" else None
        ),
    }
    if extra:
        cfg.update(extra)
    entries = [(n, p.data, not p.requires_grad)
               for n, p in sorted(adaptation.named_params().items())]
    write_checkpoint(path, "adaptation", cfg, entries)


def load_adaptation(path, backbone: Backbone,
                    expect_matching_backbone: bool = True) -> Adaptation:
    kind, cfg, entries = read_checkpoint(path)
    if kind != "adaptation":
        raise ConfigError(f"{path}: expected an adaptation checkpoint, found {kind!r}")
    if expect_matching_backbone:
        fp = backbone_fingerprint(backbone)
        if cfg["backbone_fingerprint"] != fp:
            raise ConfigError(
                f"{path}: artifact was tuned against a different frozen backbone")
    adaptation = make_adaptation(
        cfg["mode"], backbone, k=cfg["prompt_length"],
        reparam=cfg["prompt_reparam"], hidden=cfg.get("adapter_hidden"),
    )
    named = adaptation.named_params()
    for name, arr, frozen in entries:
        if name not in named:
            raise ConfigError(f"{path}: unexpected parameter {name!r}")
        if named[name].data.shape != arr.shape:
            raise ShapeError(f"{path}: shape mismatch for {name!r}")
        named[name].data[...] = arr
        named[name].requires_grad = not frozen
    return adaptation
