"""Compact transformer backbones with freezable parameters.

Two architectures share one forward signature: an encoder-decoder and a
decoder-only model. Source text always arrives pre-embedded as a (k+n, e)
matrix so that prompt rows and adapted input rows can be composed upstream;
target tokens are embedded internally. The output projection is weight-tied
to the embedding table. Pre-layer-norm residual blocks throughout, learned
absolute positions, bias-free linear maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import read_checkpoint, write_checkpoint
from .corpus import BOS, EOS, PAD, SEP
from .errors import ConfigError, LengthError, ShapeError

NEG_MASK = -1e30

ARCHES = ("encoder_decoder", "decoder_only")

# desk-scale size ladder; head width stays 16 across sizes
SIZE_PRESETS = {
    "small": dict(embed_dim=64, layers=2, heads=4, ffn_dim=256),
    "base": dict(embed_dim=128, layers=4, heads=8, ffn_dim=512),
    "large": dict(embed_dim=256, layers=6, heads=16, ffn_dim=1024),
}


@dataclass(frozen=True)
class BackboneConfig:
    arch: str
    vocab_size: int
    embed_dim: int
    layers: int
    heads: int
    ffn_dim: int
    max_positions: int = 160
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHES:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.vocab_size <= 0 or self.embed_dim <= 0 or self.ffn_dim <= 0:
            raise ConfigError("vocab_size, embed_dim and ffn_dim must be positive")
        if self.layers < 0:
            raise ConfigError("layers must be nonnegative (0 selects the degenerate model)")
        if self.heads <= 0 or self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"heads ({self.heads}) must divide embed_dim ({self.embed_dim})"
            )
        if self.max_positions <= 0:
            raise ConfigError("max_positions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "arch": self.arch, "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim, "layers": self.layers,
            "heads": self.heads, "ffn_dim": self.ffn_dim,
            "max_positions": self.max_positions, "dropout": self.dropout,
            "seed": self.seed,
        }


def config_for_size(size: str, vocab_size: int, arch: str = "encoder_decoder",
                    **overrides) -> BackboneConfig:
    if size not in SIZE_PRESETS:
        raise ConfigError(f"unknown size preset {size!r}")
    kw = dict(SIZE_PRESETS[size])
    kw.update(overrides)
    return BackboneConfig(arch=arch, vocab_size=vocab_size, **kw)


@dataclass
class Backbone:
    config: BackboneConfig
    params: dict  # name -> Tensor
    frozen_mask: dict = field(default_factory=dict)  # name -> bool

    @property
    def embedding_table(self) -> T.Tensor:
        return self.params["embed"]

    def set_frozen(self, name: str, flag: bool) -> None:
        self.frozen_mask[name] = flag
        self.params[name].requires_grad = not flag

    def freeze_all(self) -> None:
        for name in self.params:
            self.set_frozen(name, True)

    def unfreeze_all(self) -> None:
        for name in self.params:
            self.set_frozen(name, False)

    def trainable(self) -> dict:
        return {n: p for n, p in self.params.items() if not self.frozen_mask[n]}

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def snapshot(self) -> dict:
        return {n: p.data.copy() for n, p in self.params.items()}

    def copy(self) -> "Backbone":
        clone = Backbone(self.config, {n: T.Tensor(p.data.copy(), p.requires_grad, p.name)
                                       for n, p in self.params.items()},
                         dict(self.frozen_mask))
        return clone


def _ln_params(params, name, e):
    params[f"{name}.gain"] = T.Tensor(np.ones(e), requires_grad=True, name=f"{name}.gain")
    params[f"{name}.bias"] = T.Tensor(np.zeros(e), requires_grad=True, name=f"{name}.bias")


def _attn_params(params, name, e, heads, rng):
    d = e // heads
    for h in range(heads):
        for mat, shape in (("q", (e, d)), ("k", (e, d)), ("v", (e, d)), ("o", (d, e))):
            key = f"{name}.{mat}{h}"
            params[key] = T.Tensor(rng.normal(0.0, 0.02, shape), True, key)


def init_backbone(config: BackboneConfig) -> Backbone:
    """Seeded scaled-normal initialization; all frozen flags start false."""
    rng = np.random.default_rng(config.seed)
    e, f = config.embed_dim, config.ffn_dim
    params: dict = {}
    params["embed"] = T.Tensor(
        rng.normal(0.0, 0.02, (config.vocab_size, e)), True, "embed"
    )
    if config.arch == "encoder_decoder":
        params["enc_pos"] = T.Tensor(
            rng.normal(0.0, 0.02, (config.max_positions, e)), True, "enc_pos")
        params["dec_pos"] = T.Tensor(
            rng.normal(0.0, 0.02, (config.max_positions, e)), True, "dec_pos")
        for i in range(config.layers):
            _ln_params(params, f"enc{i}.ln1", e)
            _attn_params(params, f"enc{i}.attn", e, config.heads, rng)
            _ln_params(params, f"enc{i}.ln2", e)
            params[f"enc{i}.ffn.w1"] = T.Tensor(
                rng.normal(0.0, 0.02, (e, f)), True, f"enc{i}.ffn.w1")
            params[f"enc{i}.ffn.w2"] = T.Tensor(
                rng.normal(0.0, 0.02, (f, e)), True, f"enc{i}.ffn.w2")
        for i in range(config.layers):
            _ln_params(params, f"dec{i}.ln1", e)
            _attn_params(params, f"dec{i}.self", e, config.heads, rng)
            _ln_params(params, f"dec{i}.ln2", e)
            _attn_params(params, f"dec{i}.cross", e, config.heads, rng)
            _ln_params(params, f"dec{i}.ln3", e)
            params[f"dec{i}.ffn.w1"] = T.Tensor(
                rng.normal(0.0, 0.02, (e, f)), True, f"dec{i}.ffn.w1")
            params[f"dec{i}.ffn.w2"] = T.Tensor(
                rng.normal(0.0, 0.02, (f, e)), True, f"dec{i}.ffn.w2")
        if config.layers > 0:
            _ln_params(params, "enc_final", e)
            _ln_params(params, "dec_final", e)
    else:
        params["pos"] = T.Tensor(
            rng.normal(0.0, 0.02, (config.max_positions, e)), True, "pos")
        for i in range(config.layers):
            _ln_params(params, f"dec{i}.ln1", e)
            _attn_params(params, f"dec{i}.self", e, config.heads, rng)
            _ln_params(params, f"dec{i}.ln2", e)
            params[f"dec{i}.ffn.w1"] = T.Tensor(
                rng.normal(0.0, 0.02, (e, f)), True, f"dec{i}.ffn.w1")
            params[f"dec{i}.ffn.w2"] = T.Tensor(
                rng.normal(0.0, 0.02, (f, e)), True, f"dec{i}.ffn.w2")
        if config.layers > 0:
            _ln_params(params, "final", e)
    bb = Backbone(config, params, {n: False for n in params})
    return bb


def save_backbone(backbone: Backbone, path) -> None:
    write_checkpoint(
        path, "backbone", backbone.config.to_dict(),
        [(n, p.data, backbone.frozen_mask[n]) for n, p in backbone.params.items()],
    )


def load_backbone(path) -> Backbone:
    kind, config, entries = read_checkpoint(path)
    if kind != "backbone":
        raise ConfigError(f"{path}: expected a backbone checkpoint, found {kind!r}")
    cfg = BackboneConfig(**config)
    params = {}
    frozen = {}
    for name, arr, fr in entries:
        params[name] = T.Tensor(arr, requires_grad=not fr, name=name)
        frozen[name] = fr
    return Backbone(cfg, params, frozen)


# ---------------------------------------------------------------------------
# forward


def _multihead(params, prefix, heads, q_in, kv_in, mask=None):
    d = q_in.shape[1] // heads
    inv = 1.0 / math.sqrt(d)
    out = None
    for h in range(heads):
        q = T.matmul(q_in, params[f"{prefix}.q{h}"])
        k = T.matmul(kv_in, params[f"{prefix}.k{h}"])
        v = T.matmul(kv_in, params[f"{prefix}.v{h}"])
        scores = T.scale(T.matmul(q, T.transpose(k)), inv)
        if mask is not None:
            scores = T.add(scores, mask)
        ctx = T.matmul(T.softmax_rows(scores), v)
        head_out = T.matmul(ctx, params[f"{prefix}.o{h}"])
        out = head_out if out is None else T.add(out, head_out)
    return out


def _causal_mask(n: int) -> T.Tensor:
    return T.Tensor(np.triu(np.full((n, n), NEG_MASK), k=1))


def _maybe_dropout(x, p, rng):
    if p > 0.0 and rng is not None:
        return T.dropout(x, p, rng)
    return x


def _positions(params, name, n):
    return T.embedding(params[name], np.arange(n))


def _block(params, prefix, heads, h, mask, p, rng, memory=None):
    a = T.layer_norm(h, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    att_name = f"{prefix}.self" if f"{prefix}.self.q0" in params else f"{prefix}.attn"
    h = T.add(h, _maybe_dropout(_multihead(params, att_name, heads, a, a, mask), p, rng))
    if memory is not None:
        c = T.layer_norm(h, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
        h = T.add(h, _maybe_dropout(
            _multihead(params, f"{prefix}.cross", heads, c, memory), p, rng))
        ffn_ln = "ln3"
    else:
        ffn_ln = "ln2"
    g = T.layer_norm(h, params[f"{prefix}.{ffn_ln}.gain"], params[f"{prefix}.{ffn_ln}.bias"])
    ff = T.matmul(T.relu(T.matmul(g, params[f"{prefix}.ffn.w1"])), params[f"{prefix}.ffn.w2"])
    return T.add(h, _maybe_dropout(ff, p, rng))


def _as_tensor(x) -> T.Tensor:
    return x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=np.float64))


def forward(backbone: Backbone, source_embeds, target_tokens,
            train: bool = False, rng=None) -> T.Tensor:
    """Teacher-forced logits: row i is the next-token distribution for
    target position i given the source and targets before i."""
    cfg = backbone.config
    params = backbone.params
    src = _as_tensor(source_embeds)
    targets = np.asarray(target_tokens, dtype=np.int64)
    if src.data.ndim != 2 or src.data.shape[1] != cfg.embed_dim:
        raise ShapeError(f"source embeddings must be (rows, {cfg.embed_dim})")
    m = targets.shape[0]
    if m < 1:
        raise ShapeError("need at least one target token")
    p = cfg.dropout if train else 0.0
    e_table = params["embed"]

    if cfg.arch == "encoder_decoder":
        if src.shape[0] > cfg.max_positions or m > cfg.max_positions:
            raise LengthError(
                f"sequence too long for max_positions={cfg.max_positions}")
        dec_in = np.concatenate(([BOS], targets[:-1]))
        if cfg.layers == 0:
            return T.matmul(T.embedding(e_table, dec_in), T.transpose(e_table))
        h = T.add(src, _positions(params, "enc_pos", src.shape[0]))
        for i in range(cfg.layers):
            h = _block(params, f"enc{i}", cfg.heads, h, None, p, rng)
        memory = T.layer_norm(h, params["enc_final.gain"], params["enc_final.bias"])
        d = T.add(T.embedding(e_table, dec_in), _positions(params, "dec_pos", m))
        mask = _causal_mask(m)
        for i in range(cfg.layers):
            d = _block(params, f"dec{i}", cfg.heads, d, mask, p, rng, memory=memory)
        d = T.layer_norm(d, params["dec_final.gain"], params["dec_final.bias"])
        return T.matmul(d, T.transpose(e_table))

    # decoder-only: pack [source rows; SEP; shifted target embeddings]
    dec_in = np.concatenate(([SEP], targets[:-1]))
    if cfg.layers == 0:
        return T.matmul(T.embedding(e_table, dec_in), T.transpose(e_table))
    total = src.shape[0] + m
    if total > cfg.max_positions:
        raise LengthError(f"packed length {total} exceeds max_positions={cfg.max_positions}")
    h = T.concat_rows([src, T.embedding(e_table, dec_in)])
    h = T.add(h, _positions(params, "pos", total))
    mask = _causal_mask(total)
    for i in range(cfg.layers):
        h = _block(params, f"dec{i}", cfg.heads, h, mask, p, rng)
    h = T.layer_norm(h, params["final.gain"], params["final.bias"])
    # keep only target-position rows via a constant selection matrix
    sel = np.zeros((m, total))
    sel[np.arange(m), src.shape[0] + np.arange(m)] = 1.0
    picked = T.matmul(T.Tensor(sel), h)
    return T.matmul(picked, T.transpose(e_table))


# ---------------------------------------------------------------------------
# decoding


def _log_softmax(row: np.ndarray) -> np.ndarray:
    s = row - row.max()
    return s - math.log(np.exp(s).sum())


def _banned_continuations(tokens: list, g: int) -> set:
    if g <= 0 or len(tokens) < g - 1:
        return set()
    prefix = tuple(tokens[len(tokens) - (g - 1):])
    banned = set()
    for i in range(len(tokens) - g + 1):
        if tuple(tokens[i:i + g - 1]) == prefix:
            banned.add(tokens[i + g - 1])
    return banned


def decode(backbone: Backbone, source_embeds, beam: int = 1, max_len: int = 32,
           no_repeat_ngram: int = 0, eos: int = EOS) -> list:
    """Beam decoding with length penalty exponent 1.0.

    beam=1 reduces to greedy argmax. Hypotheses end at ``eos`` (dropped from
    the returned sequence) or at ``max_len``. With no_repeat_ngram = g > 0,
    any continuation that would repeat a g-gram already in the hypothesis is
    scored at -inf.
    """
    if beam < 1 or max_len < 1:
        raise ShapeError("beam and max_len must be at least 1")
    src = _as_tensor(source_embeds)
    # (tokens, summed logprob); finished list holds (tokens, normalized score)
    active = [([], 0.0)]
    finished = []
    with T.no_grad():
        for _ in range(max_len):
            candidates = []
            for tokens, score in active:
                logits = forward(backbone, src, tokens + [PAD]).data
                logp = _log_softmax(logits[-1])
                for b in _banned_continuations(tokens, no_repeat_ngram):
                    logp[b] = -np.inf
                order = np.argsort(logp)[::-1][:beam]
                for tok in order:
                    candidates.append((tokens + [int(tok)], score + logp[tok]))
            candidates.sort(key=lambda c: -c[1])
            active = []
            for tokens, score in candidates:
                if tokens[-1] == eos:
                    finished.append((tokens[:-1], score / len(tokens)))
                elif len(active) < beam:
                    active.append((tokens, score))
                if len(active) == beam and len(finished) >= beam:
                    break
            if not active:
                break
        for tokens, score in active:
            finished.append((tokens, score / max(len(tokens), 1)))
    best = max(finished, key=lambda c: c[1])
    return best[0]
