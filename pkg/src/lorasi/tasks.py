"""Synthetic general/domain task pairs.

Two generators are registered:

``grammar-shift``
    The general task samples sentences from a broad probabilistic grammar; the
    domain task samples from a narrow sub-grammar with a restricted lexicon and
    a trailing prepositional phrase the broad grammar rarely produces. Both are
    next-token modelling tasks; domain accuracy is top-1 next-token accuracy.

``mc-rules``
    The general task is next-token modelling over sequences built from a mix of
    counting/repetition rules. The domain task asks two-choice questions whose
    answer is decided by a rule never seen in the general data (recall the
    first prompt symbol).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Example",
    "Vocabulary",
    "TaskSpec",
    "TaskPair",
    "GENERATORS",
    "gen_task_pair",
    "batches",
    "export_task_pair",
    "import_task_pair",
]

CONTEXT_LEN = 64


@dataclass(frozen=True)
class Example:
    """One training/eval sequence.

    ``targets`` is aligned with ``inputs``; ``-1`` marks positions that are not
    scored. Multiple-choice examples carry the candidate token ids in
    ``choices`` and the index of the right one in ``answer``.
    """

    inputs: tuple[int, ...]
    targets: tuple[int, ...]
    choices: tuple[int, ...] = ()
    answer: int = -1

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets must be aligned")
        if not any(t >= 0 for t in self.targets):
            raise ValueError("example has no scored target")
        if self.choices and not 0 <= self.answer < len(self.choices):
            raise ValueError(f"answer {self.answer} outside {len(self.choices)} choices")

    @property
    def choice_count(self) -> int:
        return len(self.choices)

    @classmethod
    def next_token(cls, tokens: Sequence[int]) -> "Example":
        return cls(tuple(tokens[:-1]), tuple(tokens[1:]))

    def to_dict(self) -> dict:
        return {
            "inputs": list(self.inputs),
            "targets": list(self.targets),
            "choices": list(self.choices),
            "answer": self.answer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Example":
        return cls(tuple(d["inputs"]), tuple(d["targets"]), tuple(d.get("choices", ())), d.get("answer", -1))


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self._index[w] for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class TaskSpec:
    generator: str = "grammar-shift"
    params: dict = field(default_factory=dict)
    seed: int = 0


@dataclass
class TaskPair:
    nu_train: list[Example]
    nu_eval: list[Example]
    mu_train: list[Example]
    mu_eval: list[Example]
    vocab: Vocabulary
    spec: TaskSpec

    def splits(self) -> dict[str, list[Example]]:
        return {
            "nu_train": self.nu_train,
            "nu_eval": self.nu_eval,
            "mu_train": self.mu_train,
            "mu_eval": self.mu_eval,
        }


def _draw_unique(rng, sample: Callable, n: int, exclude: set, limit: int = 200) -> list[tuple]:
    """Draw ``n`` distinct sequences not in ``exclude`` (which is extended in place)."""
    out = []
    misses = 0
    while len(out) < n:
        s = tuple(sample(rng))
        if s in exclude:
            misses += 1
            if misses > limit * max(n, 1):
                raise RuntimeError(f"generator exhausted after {len(out)} of {n} distinct sequences")
            continue
        exclude.add(s)
        out.append(s)
    return out


# -- grammar-shift -------------------------------------------------------

_LEXICON = {
    "DET": ["the", "a", "this", "that", "every", "some"],
    "ADJ": ["big", "small", "red", "blue", "old", "new", "quiet", "loud"],
    "N": ["cat", "dog", "bird", "fish", "tree", "car", "house", "child", "river", "stone", "book", "ship"],
    "V": ["sees", "likes", "finds", "takes", "moves", "holds", "needs", "wants"],
    "PREP": ["on", "near", "under", "with"],
    "ADV": ["slowly", "often", "today"],
    "CONJ": ["and"],
}

_DOMAIN_LEXICON = {
    "DET": ["the"],
    "ADJ": ["old", "quiet", "red"],
    "N": ["river", "stone", "ship", "fish", "tree", "book"],
    "V": ["moves", "holds", "finds"],
    "PREP": ["near", "under"],
}


def _grammar_vocab() -> Vocabulary:
    words = ["<bos>", "<eos>"]
    for cat in _LEXICON.values():
        words.extend(cat)
    return Vocabulary(words)


def _choice(rng, items):
    return items[rng.integers(len(items))]


def _broad_np(rng, lex, allow_pp=True):
    r = rng.random()
    words = [_choice(rng, lex["DET"])]
    if r >= 0.5:
        words.append(_choice(rng, lex["ADJ"]))
    words.append(_choice(rng, lex["N"]))
    if allow_pp and r >= 0.85:
        words += [_choice(rng, lex["PREP"]), _choice(rng, lex["DET"]), _choice(rng, lex["N"])]
    return words


def _broad_vp(rng, lex):
    r = rng.random()
    v = [_choice(rng, lex["V"])]
    if r < 0.6:
        return v + _broad_np(rng, lex)
    if r < 0.8:
        return v + [_choice(rng, lex["ADV"])]
    return v + _broad_np(rng, lex) + [_choice(rng, lex["ADV"])]


def _broad_sentence(rng):
    words = _broad_np(rng, _LEXICON) + _broad_vp(rng, _LEXICON)
    if rng.random() < 0.2:
        words += ["and"] + _broad_np(rng, _LEXICON) + _broad_vp(rng, _LEXICON)
    return ["<bos>"] + words + ["<eos>"]


def _domain_sentence(rng):
    lex = _DOMAIN_LEXICON

    def np_():
        return [lex["DET"][0], _choice(rng, lex["ADJ"]), _choice(rng, lex["N"])]

    words = np_() + [_choice(rng, lex["V"])] + np_()
    words += [_choice(rng, lex["PREP"]), lex["DET"][0], _choice(rng, lex["N"])]
    return ["<bos>"] + words + ["<eos>"]


def _gen_grammar_shift(
    rng,
    n_nu_train: int = 2000,
    n_nu_eval: int = 200,
    n_mu_train: int = 2000,
    n_mu_eval: int = 200,
    overlap: float = 0.0,
):
    vocab = _grammar_vocab()
    encode = vocab.encode
    seen: set = set()
    nu = _draw_unique(rng, lambda r: encode(_broad_sentence(r)), n_nu_train + n_nu_eval, seen)
    nu_train, nu_eval = nu[:n_nu_train], nu[n_nu_train:]
    # domain sentences are drawn after the general ones, so ``seen`` keeps them disjoint
    mu = _draw_unique(rng, lambda r: encode(_domain_sentence(r)), n_mu_train + n_mu_eval, seen)
    mu_train, mu_eval = mu[:n_mu_train], mu[n_mu_train:]
    if overlap > 0:
        k = int(round(overlap * n_mu_train))
        picks = rng.choice(n_nu_train, size=k, replace=False)
        mu_train = mu_train[: n_mu_train - k] + [nu_train[i] for i in picks]
    to_ex = lambda seqs: [Example.next_token(s) for s in seqs]
    return to_ex(nu_train), to_ex(nu_eval), to_ex(mu_train), to_ex(mu_eval), vocab


# -- mc-rules ------------------------------------------------------------

_N_SYMBOLS = 16


def _mc_vocab() -> Vocabulary:
    return Vocabulary(["<bos>", "<eos>", "<sep>", "<ask>"] + [f"s{i}" for i in range(_N_SYMBOLS)])


def _rule_sequence(rng) -> list[int]:
    n = _N_SYMBOLS
    x = int(rng.integers(n))
    length = int(rng.integers(5, 10))
    rule = rng.integers(4)
    if rule == 0:  # ascending run
        syms = [(x + i) % n for i in range(length)]
    elif rule == 1:  # descending run
        syms = [(x - i) % n for i in range(length)]
    elif rule == 2:  # repetition
        syms = [x] * length
    else:  # alternation
        y = int((x + rng.integers(1, n)) % n)
        syms = [x if i % 2 == 0 else y for i in range(length)]
    return [0] + [4 + s for s in syms] + [1]


def _question(rng) -> tuple:
    prompt = rng.choice(_N_SYMBOLS, size=5, replace=False) + 4
    correct = int(prompt[0])
    distractor = int(prompt[rng.integers(1, 5)])
    answer = int(rng.integers(2))
    choices = (correct, distractor) if answer == 0 else (distractor, correct)
    inputs = (0, *map(int, prompt), 2, *choices, 3)
    return inputs, choices, answer


def _gen_mc_rules(
    rng,
    n_nu_train: int = 800,
    n_nu_eval: int = 200,
    n_mu_train: int = 400,
    n_mu_eval: int = 200,
):
    vocab = _mc_vocab()
    seen: set = set()
    nu = _draw_unique(rng, _rule_sequence, n_nu_train + n_nu_eval, seen)
    nu_ex = [Example.next_token(s) for s in nu]
    mu_ex = []
    seen_q: set = set()
    while len(mu_ex) < n_mu_train + n_mu_eval:
        inputs, choices, answer = _question(rng)
        if inputs in seen_q:
            continue
        seen_q.add(inputs)
        targets = (-1,) * (len(inputs) - 1) + (choices[answer],)
        mu_ex.append(Example(inputs, targets, choices, answer))
    return (
        nu_ex[:n_nu_train],
        nu_ex[n_nu_train:],
        mu_ex[:n_mu_train],
        mu_ex[n_mu_train:],
        vocab,
    )


GENERATORS: dict[str, Callable] = {
    "grammar-shift": _gen_grammar_shift,
    "mc-rules": _gen_mc_rules,
}


def gen_task_pair(spec: TaskSpec | str = "grammar-shift", seed: int | None = None) -> TaskPair:
    if isinstance(spec, str):
        spec = TaskSpec(spec)
    if seed is not None:
        spec = TaskSpec(spec.generator, dict(spec.params), seed)
    try:
        gen = GENERATORS[spec.generator]
    except KeyError:
        raise ValueError(
            f"unknown task generator {spec.generator!r}; known: {', '.join(sorted(GENERATORS))}"
        ) from None
    rng = np.random.default_rng(spec.seed)
    nu_train, nu_eval, mu_train, mu_eval, vocab = gen(rng, **spec.params)
    for ex in (*nu_train, *nu_eval, *mu_train, *mu_eval):
        if len(ex.inputs) > CONTEXT_LEN:
            raise ValueError(f"sequence of length {len(ex.inputs)} exceeds context {CONTEXT_LEN}")
    return TaskPair(nu_train, nu_eval, mu_train, mu_eval, vocab, spec)


def batches(dataset: Sequence[Example], batch_size: int, epoch_seed: int) -> Iterator[list[Example]]:
    """Shuffle once per epoch and yield consecutive slices; the last one may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(epoch_seed).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        yield [dataset[i] for i in order[start : start + batch_size]]


def n_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


# -- line-delimited export ----------------------------------------------


def export_task_pair(pair: TaskPair, path: str | Path) -> None:
    """One JSON record per line: a header with vocabulary and spec, then examples."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        header = {"vocab": pair.vocab.tokens, "spec": asdict(pair.spec)}
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for split, examples in pair.splits().items():
            for ex in examples:
                f.write(json.dumps({"split": split, **ex.to_dict()}, sort_keys=True) + "\n")


def import_task_pair(path: str | Path) -> TaskPair:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    splits: dict[str, list[Example]] = {k: [] for k in ("nu_train", "nu_eval", "mu_train", "mu_eval")}
    for line in lines[1:]:
        rec = json.loads(line)
        splits[rec.pop("split")].append(Example.from_dict(rec))
    spec = TaskSpec(**header["spec"])
    return TaskPair(vocab=Vocabulary(header["vocab"]), spec=spec, **splits)
