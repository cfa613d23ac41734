"""Deterministic synthetic text corpus with learnable character statistics.

Sentences are sampled from a small template grammar, giving a 2-layer
character model plenty of structure to pick up (word shapes, agreement
between templates, punctuation rhythm) without shipping external data.
"""

from __future__ import annotations

import random

SUBJECTS = [
    "the old sailor", "a young fox", "the quiet river", "a tired clockmaker",
    "the northern wind", "a small lantern", "the grey heron", "a patient gardener",
    "the last train", "a wandering comet",
]
VERBS = [
    "watches", "follows", "remembers", "crosses", "carries", "circles",
    "greets", "measures", "awakens", "shelters",
]
OBJECTS = [
    "the silver harbour", "a distant mountain", "the open meadow",
    "a narrow bridge", "the frozen orchard", "a hidden valley",
    "the amber coast", "a sleeping village", "the winter sky", "a quiet garden",
]
TAILS = [
    "at dawn", "after the storm", "before sunset", "in early spring",
    "under a pale moon", "beside the old mill", "through the fog",
    "without a sound", "again and again", "as the tide turns",
]


def make_corpus(n_sentences: int, seed: int = 0) -> str:
    rng = random.Random(seed)
    parts = []
    for _ in range(n_sentences):
        s = f"{rng.choice(SUBJECTS)} {rng.choice(VERBS)} {rng.choice(OBJECTS)} {rng.choice(TAILS)}."
        parts.append(s)
    return " ".join(parts)
