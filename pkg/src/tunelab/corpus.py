"""Synthetic corpus laboratory.

Provides a seeded probabilistic template grammar for pretraining text, two
downstream task generators (linearized tables and nested prefix calls), and
controllable input transformations that push task inputs toward or away
from the pretraining distribution by rewriting or remapping tokens.

The vocabulary is split into a "natural" partition (everything the grammar
and task generators can emit) and a disjoint "foreign" partition reserved
as the target space for unfamiliarity remaps.
"""

from __future__ import annotations

import random
import warnings
from dataclasses import dataclass, field, replace

from .errors import CorpusSizeError, NumericDomainError, ShapeError, TransformSpecError

# reserved control tokens at fixed low indices
PAD, BOS, EOS, SEP, UNK = 0, 1, 2, 3, 4
RESERVED = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"]
N_RESERVED = len(RESERVED)

NOUNS = [
    "name", "food", "area", "price", "rating", "type",
    "place", "house", "garden", "market", "coffee", "bread",
    "river", "stone", "teacher", "doctor", "child", "friend",
    "city", "book", "song", "road", "cloud", "tree",
    "bird", "fish", "horse", "cheese", "winter", "morning",
]
ADJS = [
    "cheap", "fine", "quiet", "busy", "fresh", "warm",
    "cold", "small", "large", "bright", "dark", "happy",
    "old", "new", "tall", "short", "green", "plain",
]
VERBS = [
    "runs", "sits", "opens", "closes", "sells", "moves",
    "grows", "sings", "waits", "works", "helps", "stands",
]
FUNCTION_WORDS = ["the", "a", "is", "and", ",", "."]
STRUCTURAL = ["[", "]", "(", ")"]
FN_NAMES = ["f_find", "f_count", "f_filter", "f_sort", "f_merge"]
CALL = "call"
FOREIGN = [
    "zarn", "blik", "vome", "trug", "quil", "snad", "prew",
    "glon", "femp", "drax", "yurt", "clev", "mabo", "rint",
    "suqa", "wexo", "hib", "nolf", "karv",
]

# task lexica: keys and values are small disjoint slices of the grammar lexicon
KEY_TOKENS = NOUNS[:6]
VALUE_NOUNS = NOUNS[6:12]
VALUE_ADJS = ADJS[:6]

# weighted fixed-length templates; slots are ("lit", token) or ("cat", N/A/V)
TEMPLATES = [
    (0.25, (("lit", "the"), ("cat", "A"), ("cat", "N"), ("cat", "V"),
            ("lit", "the"), ("cat", "N"), ("lit", "."))),
    (0.25, (("cat", "N"), ("lit", "is"), ("cat", "A"), ("cat", "N"), ("lit", "."))),
    (0.20, (("cat", "N"), ("lit", ","), ("cat", "N"), ("lit", "and"),
            ("cat", "N"), ("cat", "V"), ("lit", "."))),
    (0.15, (("lit", "the"), ("cat", "N"), ("lit", "is"), ("cat", "A"), ("lit", "."))),
    (0.15, (("lit", "the"), ("cat", "N"), ("cat", "V"), ("lit", "a"),
            ("cat", "A"), ("cat", "N"), ("lit", "."))),
]
CATEGORIES = {"N": NOUNS, "A": ADJS, "V": VERBS}

MAX_PRETRAIN_SIZE = 1_000_000


class Vocab:
    """Bijective token/index map with reserved, natural and foreign regions."""

    def __init__(self, tokens: list[str], foreign_start: int):
        if len(set(tokens)) != len(tokens):
            raise ShapeError("vocabulary tokens must be unique")
        if tokens[:N_RESERVED] != RESERVED:
            raise ShapeError("reserved control tokens must occupy the lowest indices")
        self.tokens = list(tokens)
        self.foreign_start = foreign_start
        self._index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return (isinstance(other, Vocab) and self.tokens == other.tokens
                and self.foreign_start == other.foreign_start)

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    @property
    def natural_ids(self) -> range:
        return range(N_RESERVED, self.foreign_start)

    @property
    def foreign_ids(self) -> range:
        return range(self.foreign_start, len(self.tokens))

    def encode(self, text: str) -> list[int]:
        return [self.id_of(t) for t in tokenize(text)]

    def decode(self, ids) -> str:
        return detokenize([self.token_of(i) for i in ids])


def tokenize(text: str) -> list[str]:
    return text.split()


def detokenize(tokens) -> str:
    return " ".join(tokens)


def build_vocab() -> Vocab:
    """The lab's standard 100-token vocabulary (80/20 natural/foreign)."""
    natural = (FUNCTION_WORDS + NOUNS + ADJS + VERBS + STRUCTURAL + [CALL] + FN_NAMES)
    tokens = RESERVED + natural + FOREIGN
    return Vocab(tokens, foreign_start=N_RESERVED + len(natural))


@dataclass(frozen=True)
class Origin:
    """Provenance: which generator produced the corpus, under which seed,
    followed by the chain of input transformations applied since."""

    generator: str
    seed: int
    transforms: tuple = ()


@dataclass
class Corpus:
    pairs: list  # (x ids, y ids) tuples
    vocab: Vocab
    origin: Origin
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = len(self.vocab)
        for x, y in self.pairs:
            if len(x) == 0 or len(y) == 0:
                raise ShapeError("corpus pairs must have nonempty input and output")
            for i in list(x) + list(y):
                if not 0 <= i < v:
                    raise IndexError(f"token index {i} outside vocabulary")

    def __len__(self):
        return len(self.pairs)

    def surface_pairs(self):
        v = self.vocab
        return [(v.decode(x), v.decode(y)) for x, y in self.pairs]


def _sample_sentence(rng: random.Random) -> list[str]:
    r = rng.random()
    acc = 0.0
    chosen = TEMPLATES[-1][1]
    for w, slots in TEMPLATES:
        acc += w
        if r < acc:
            chosen = slots
            break
    out = []
    for kind, val in chosen:
        out.append(val if kind == "lit" else rng.choice(CATEGORIES[val]))
    return out


def gen_pretrain_corpus(grammar_seed: int, size: int, vocab: Vocab | None = None) -> Corpus:
    """Seeded grammar sample split into (prefix, continuation) pairs."""
    if size < 1:
        raise ShapeError("corpus size must be at least 1")
    if size > MAX_PRETRAIN_SIZE:
        raise CorpusSizeError(f"pretraining corpus cap is {MAX_PRETRAIN_SIZE} sequences")
    vocab = vocab or build_vocab()
    rng = random.Random(grammar_seed)
    pairs = []
    for _ in range(size):
        sent = _sample_sentence(rng)
        cut = rng.randint(1, len(sent) - 1)
        pairs.append((
            [vocab.id_of(t) for t in sent[:cut]],
            [vocab.id_of(t) for t in sent[cut:]],
        ))
    return Corpus(pairs, vocab, Origin("pretrain_grammar", grammar_seed))


def _gen_table_pair(rng: random.Random, vocab: Vocab):
    m = rng.choice([2, 3])
    keys = rng.sample(KEY_TOKENS, m)
    values = [(rng.choice(VALUE_ADJS), rng.choice(VALUE_NOUNS)) for _ in range(m)]
    x, y = [], []
    for j, (k, (a, n)) in enumerate(zip(keys, values)):
        if j:
            x.append(",")
            y.append("and")
        x += [k, "[", a, n, "]"]
        y += ["the", k, "is", a, n]
    y.append(".")
    return [vocab.id_of(t) for t in x], [vocab.id_of(t) for t in y]


def _gen_logic_exprs(rng: random.Random, max_depth: int):
    fns = [rng.choice(FN_NAMES)]
    depth = 0
    while depth < max_depth and rng.random() < 0.5:
        fns.append(rng.choice(FN_NAMES))
        depth += 1
    noun = rng.choice(VALUE_NOUNS)
    x = []
    for f in fns:
        x += ["(", CALL, f]
    x.append(noun)
    x += [")"] * len(fns)
    verbs = [VERBS[FN_NAMES.index(f)] for f in fns]
    y1 = " and ".join(verbs).split() + ["the", noun, "."]
    y2 = " and ".join(reversed(verbs)).split() + ["the", noun, "."]
    return x, y1, y2


def gen_task(kind: str, size: int, seed: int, vocab: Vocab | None = None,
             max_depth: int = 2) -> Corpus:
    """Downstream task corpora over the natural vocabulary partition.

    table_to_text: x is a linearized attribute table like
    "name [ fresh coffee ] , food [ cheap bread ]"; y is a clause-per-attribute
    realization preserving attribute order. logic_to_text: x is a nested prefix
    call expression with balanced parentheses; y describes the call chain, and
    some inputs repeat with an alternative phrasing (multi-reference data).
    """
    if size < 1:
        raise ShapeError("task size must be at least 1")
    vocab = vocab or build_vocab()
    rng = random.Random(seed)
    pairs = []
    meta: dict = {}
    if kind == "table_to_text":
        meta["key_tokens"] = list(KEY_TOKENS)
        meta["value_tokens"] = sorted(set(VALUE_ADJS) | set(VALUE_NOUNS))
        while len(pairs) < size:
            pairs.append(_gen_table_pair(rng, vocab))
    elif kind == "logic_to_text":
        meta["key_tokens"] = list(FN_NAMES)
        meta["value_tokens"] = list(VALUE_NOUNS)
        while len(pairs) < size:
            x, y1, y2 = _gen_logic_exprs(rng, max_depth)
            xi = [vocab.id_of(t) for t in x]
            pairs.append((xi, [vocab.id_of(t) for t in y1]))
            if len(pairs) < size and rng.random() < 0.3:
                pairs.append((xi, [vocab.id_of(t) for t in y2]))
    else:
        raise TransformSpecError(f"unknown task kind {kind!r}")
    return Corpus(pairs, vocab, Origin(kind, seed), meta)


# ---------------------------------------------------------------------------
# input transformations


TRANSFORM_KINDS = ("identity", "familiar_plus", "unfamiliar_remap_keys",
                   "unfamiliar_remap_all")


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    remap: dict | None = None  # surface token -> surface token
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise TransformSpecError(f"unknown transform kind {self.kind!r}")
        if self.remap is not None:
            targets = list(self.remap.values())
            if len(set(targets)) != len(targets):
                raise TransformSpecError("remap must be injective (target collision)")


def plan_transform(kind: str, corpus: Corpus, seed: int = 0) -> TransformSpec:
    """Build a TransformSpec for a corpus, sampling remap targets from the
    foreign vocabulary partition for the unfamiliarity kinds."""
    if kind in ("identity", "familiar_plus"):
        return TransformSpec(kind, None, seed)
    if "key_tokens" not in corpus.meta:
        raise TransformSpecError("corpus does not declare key/value token sets")
    domain = list(corpus.meta["key_tokens"])
    if kind == "unfamiliar_remap_all":
        domain += [t for t in corpus.meta.get("value_tokens", []) if t not in domain]
    present = {t for x, _ in corpus.pairs for t in x}
    domain = sorted(t for t in domain if corpus.vocab.id_of(t) in present)
    foreign = [corpus.vocab.token_of(i) for i in corpus.vocab.foreign_ids]
    if len(domain) > len(foreign):
        raise TransformSpecError(
            f"remap needs {len(domain)} targets but only {len(foreign)} foreign tokens exist"
        )
    targets = random.Random(seed).sample(foreign, len(domain))
    return TransformSpec(kind, dict(zip(domain, targets)), seed)


def transform_inputs(corpus: Corpus, spec: TransformSpec) -> Corpus:
    """Apply a transformation to every input sequence; outputs are untouched."""
    v = corpus.vocab
    tag = f"{spec.kind}#{spec.seed}"
    if spec.kind == "identity":
        new_pairs = [(list(x), list(y)) for x, y in corpus.pairs]
    elif spec.kind == "familiar_plus":
        if "is" not in v.tokens or "." not in v.tokens:
            raise TransformSpecError("familiar_plus needs 'is' and '.' in the vocabulary")
        is_id, dot_id = v.id_of("is"), v.id_of(".")
        lb = v.id_of("[") if "[" in v.tokens else -1
        rb = v.id_of("]") if "]" in v.tokens else -1
        new_pairs = []
        for x, y in corpus.pairs:
            nx = [is_id if t == lb else t for t in x if t != rb]
            nx.append(dot_id)
            new_pairs.append((nx, list(y)))
    else:
        if spec.remap is None:
            raise TransformSpecError(f"{spec.kind} requires a remap table")
        present = {t for x, _ in corpus.pairs for t in x}
        id_map = {}
        for src, dst in spec.remap.items():
            si = v.id_of(src)
            if si == UNK or si not in present:
                raise TransformSpecError(f"remap source {src!r} absent from corpus inputs")
            if dst not in v.tokens:
                raise TransformSpecError(f"remap target {dst!r} not in vocabulary")
            id_map[si] = v.id_of(dst)
        new_pairs = [([id_map.get(t, t) for t in x], list(y)) for x, y in corpus.pairs]
    origin = replace(corpus.origin, transforms=corpus.origin.transforms + (tag,))
    return Corpus(new_pairs, v, origin, dict(corpus.meta))


# ---------------------------------------------------------------------------
# deterministic splitting


def split_corpus(corpus: Corpus, ratios=(0.8, 0.1, 0.1)):
    """Shuffle by the origin seed and cut into train/dev/test corpora.

    The permutation depends only on the origin seed and corpus length, so
    transformed variants of one corpus split identically pair-for-pair.
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise ShapeError("ratios must be three fractions summing to 1")
    order = list(range(len(corpus)))
    random.Random(corpus.origin.seed ^ 0x5EED).shuffle(order)
    n = len(order)
    n_train = int(ratios[0] * n)
    n_dev = int(ratios[1] * n)
    cuts = (order[:n_train], order[n_train:n_train + n_dev], order[n_train + n_dev:])
    out = []
    for part, name in zip(cuts, ("train", "dev", "test")):
        if not part:
            raise CorpusSizeError(f"{name} split is empty for corpus of {n} pairs")
        pairs = [corpus.pairs[i] for i in part]
        origin = replace(corpus.origin, transforms=corpus.origin.transforms + (f"split:{name}",))
        out.append(Corpus(pairs, corpus.vocab, origin, dict(corpus.meta)))
    return tuple(out)


# ---------------------------------------------------------------------------
# file formats


def save_vocab(vocab: Vocab, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in vocab.tokens:
            f.write(t + "\n")


def load_vocab(path, foreign_start: int | None = None) -> Vocab:
    with open(path, encoding="utf-8") as f:
        tokens = [line.rstrip("\n") for line in f if line.strip()]
    if foreign_start is None:
        foreign = set(FOREIGN)
        foreign_start = next(
            (i for i, t in enumerate(tokens) if t in foreign), len(tokens)
        )
    return Vocab(tokens, foreign_start)


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for sx, sy in corpus.surface_pairs():
            f.write(f"{sx}\t{sy}\n")


def load_corpus(path, vocab: Vocab, origin: Origin | None = None,
                meta: dict | None = None) -> Corpus:
    pairs = []
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ShapeError(f"line {ln}: expected tab-separated pair")
            sx, sy = line.split("\t", 1)
            pairs.append((vocab.encode(sx), vocab.encode(sy)))
    return Corpus(pairs, vocab, origin or Origin("loaded", 0), meta or {})
