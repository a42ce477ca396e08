"""Shared test fixtures: a seeded synthetic byte corpus with learnable
structure at two levels (character statistics within an invented lexicon,
word-level bigram structure from a sparse Markov chain). Entropy sits well
below the uniform 8 bits/byte but far enough above zero that tiny models
keep descending for hundreds of steps instead of saturating instantly."""

import numpy as np

from trustquant.tensor import Rng

_CONSONANTS = "b c d f g h k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()


def _lexicon(rng: Rng, size: int = 160) -> list[str]:
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    order = rng.permutation(len(syllables))
    words = []
    while len(words) < size:
        k = 2 + int(rng.uniform() * 2)  # 2-3 syllables
        picks = (rng.uniform((k,)) * len(syllables)).astype(int)
        word = "".join(syllables[order[p]] for p in picks)
        if word not in words:
            words.append(word)
    return words


def synthetic_corpus(n_bytes: int, seed: int = 0) -> bytes:
    rng = Rng(seed)
    words = _lexicon(rng)
    k = len(words)
    ranks = np.arange(1, k + 1, dtype=np.float64)
    zipf = 1.0 / ranks ** 1.1
    zipf /= zipf.sum()
    cdf = np.cumsum(zipf)
    successor = rng.permutation(k)  # sparse bigram structure

    n_words = n_bytes // 5 + 16
    iid = np.searchsorted(cdf, rng.uniform((n_words,)))
    follow = rng.uniform((n_words,)) < 0.5
    seq = np.empty(n_words, dtype=np.int64)
    seq[0] = iid[0]
    for t in range(1, n_words):
        seq[t] = successor[seq[t - 1]] if follow[t] else iid[t]
    text = " ".join(words[i] for i in seq)
    return text.encode()[:n_bytes]


def write_corpus(path, n_bytes: int, seed: int = 0):
    data = synthetic_corpus(n_bytes, seed)
    with open(path, "wb") as f:
        f.write(data)
    return path
