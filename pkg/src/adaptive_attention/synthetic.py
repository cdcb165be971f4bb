"""Small templated entailment corpus in the SNLI record layout.

Premises describe one or two coloured entities doing something somewhere;
hypotheses restate, contradict (wrong colour binding, conflicting action,
other place) or extend (extra detail) one of them. Resolving colour binding
with two entities needs the hypothesis noun to be matched to the right
premise entity before its colour can be checked.

Used for tests and desk-scale demos when the real corpus is not at hand.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Example, tokenize

NOUNS = ("man", "woman", "dog", "cat", "child", "girl", "boy", "bird", "horse", "cow")
COLORS = ("red", "blue", "green", "yellow", "black", "white")
# verbs in the same pair cannot both hold
VERBS = (("sleeps", "runs"), ("sits", "jumps"), ("eats", "swims"), ("waits", "dances"))
PLACES = ("park", "beach", "street", "field", "yard")
EXTRAS = ("near a tree", "with a ball", "at noon", "for fun", "in the rain")


def _choice(rng: np.random.Generator, seq, exclude=()):
    options = [x for x in seq if x not in exclude]
    return options[int(rng.integers(len(options)))]


def generate_example(rng: np.random.Generator) -> Example:
    two = rng.random() < 0.5
    n1 = _choice(rng, NOUNS)
    n2 = _choice(rng, NOUNS, exclude=(n1,))
    c1 = _choice(rng, COLORS)
    c2 = _choice(rng, COLORS, exclude=(c1,))
    pair = VERBS[int(rng.integers(len(VERBS)))]
    verb = pair[int(rng.integers(2))]
    other_verb = pair[1] if verb == pair[0] else pair[0]
    place = _choice(rng, PLACES)

    if two:
        premise = f"a {c1} {n1} and a {c2} {n2} {verb.rstrip('s')} in the {place} ."
        pick = int(rng.integers(2))
        noun, color = (n1, c1) if pick == 0 else (n2, c2)
    else:
        premise = f"a {c1} {n1} {verb} in the {place} ."
        noun, color = n1, c1

    label = ("entailment", "contradiction", "neutral")[int(rng.integers(3))]
    kind = int(rng.integers(3))
    if label == "entailment":
        hyp = (
            f"a {color} {noun} {verb} .",
            f"a {noun} {verb} in the {place} .",
            f"a {color} {noun} is in the {place} .",
        )[kind]
    elif label == "contradiction":
        wrong = _choice(rng, COLORS, exclude=(color,))
        hyp = (
            f"a {wrong} {noun} {verb} .",
            f"a {color} {noun} {other_verb} .",
            f"a {noun} {verb} in the {_choice(rng, PLACES, exclude=(place,))} .",
        )[kind]
    else:
        extra = _choice(rng, EXTRAS)
        hyp = (
            f"a {color} {noun} {verb} {extra} .",
            f"a {noun} {verb} in the {place} {extra} .",
            f"a {color} {noun} {verb} {extra} .",
        )[kind]
    return Example(tuple(tokenize(premise)), tuple(tokenize(hyp)), label)


def generate_corpus(n: int, seed: int = 0) -> list[Example]:
    rng = np.random.default_rng(seed)
    return [generate_example(rng) for _ in range(n)]


def write_random_vectors(tokens, path: str | Path, dim: int = 50, seed: int = 0, scale: float = 1.0):
    """Write a GloVe-style text file of random vectors for ``tokens``."""
    rng = np.random.default_rng(seed)
    with Path(path).open("w", encoding="utf-8") as fh:
        for tok in tokens:
            vec = rng.normal(0.0, scale / np.sqrt(dim), dim)
            fh.write(tok + " " + " ".join(f"{v:.6f}" for v in vec) + "\n")
