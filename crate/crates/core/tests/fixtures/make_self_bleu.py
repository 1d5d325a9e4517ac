# SPDX-License-Identifier: Apache-2.0
"""Regenerates self_bleu.txt with NLTK's BLEU as the reference implementation."""
import random

from nltk.translate.bleu_score import SmoothingFunction, sentence_bleu

EPS = 1e-9


def self_bleu(corpus, n):
    weights = tuple([1.0 / n] * n)
    smooth = SmoothingFunction(epsilon=EPS).method1
    total = 0.0
    for i, hyp in enumerate(corpus):
        refs = corpus[:i] + corpus[i + 1:]
        total += sentence_bleu(refs, hyp, weights=weights, smoothing_function=smooth)
    return total / len(corpus)


def corpora():
    yield "hand", [[4, 5, 6, 7], [4, 5, 7], [6, 5, 4, 4]]
    yield "repeats", [[4, 4, 5], [4, 4, 5], [5, 6, 7, 8, 9], [7], [4, 5, 6, 7, 8], [9, 9, 9, 9]]
    yield "short", [[4], [5, 6], [4], [6, 5, 4], [5, 5]]
    rng = random.Random(17)
    yield "random", [[rng.randrange(4, 12) for _ in range(rng.randrange(1, 10))] for _ in range(40)]


with open("self_bleu.txt", "w") as f:
    for name, c in corpora():
        f.write(f"corpus {name}\n")
        for s in c:
            f.write("s " + " ".join(map(str, s)) + "\n")
        f.write("bleu " + " ".join(repr(self_bleu(c, n)) for n in (2, 3, 4)) + "\n")
