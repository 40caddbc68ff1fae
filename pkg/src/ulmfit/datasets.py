"""Bundled desk-scale dataset: generator script with checksum verification.

Produces two files: ``pretrain.txt``, roughly a megabyte of contiguous
English-like prose for LM pretraining, and ``labeled.tsv`` with a few
thousand short review-style documents labeled ``pos``/``neg`` (one per
line, label TAB text). Generation is fully deterministic for a given seed
and size, and the default outputs are pinned by SHA-256 so every machine
trains on identical bytes.

Usage: ``python3 -m ulmfit.datasets OUTDIR [--size N] [--per-class N]``
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from .text import write_labeled

DEFAULT_SEED = 20260809
DEFAULT_SIZE = 1_000_000
DEFAULT_PER_CLASS = 1200

# sha256 of the files produced with the defaults above
CHECKSUMS = {
    "pretrain.txt": "5fb0e93f1e68d43ef1205f1f23bfc92f07d3bf1e950ebdc3402d8c039bf3bd97",
    "labeled.tsv": "3c7118e81071c68cc05ef9e9451a09079e4af85ab18c9d6cc67f823840d819b5",
}

SUBJECTS = [
    "the film", "this movie", "the play", "her novel", "his memoir",
    "the series", "that concert", "the recording", "this adaptation",
    "the documentary", "the sequel", "their debut", "the staging",
    "the screenplay", "this production", "the ensemble", "the soundtrack",
    "the premiere", "the revival", "his lecture",
]

LINKERS = ["was", "felt", "seemed", "remained", "proved", "looked", "sounded"]

INTENSIFIERS = ["truly", "quite", "rather", "somewhat", "remarkably",
                "plainly", "utterly", "fairly", "almost", "deeply"]

POSITIVE = [
    "superb", "delightful", "charming", "brilliant", "graceful", "vivid",
    "tender", "stirring", "elegant", "radiant", "inventive", "gripping",
    "luminous", "polished", "warm", "splendid", "moving", "assured",
    "engaging", "masterful", "joyful", "lively", "witty", "generous",
    "absorbing", "memorable", "exquisite", "rousing", "fresh", "sublime",
]

NEGATIVE = [
    "dreadful", "tedious", "clumsy", "hollow", "lifeless", "muddled",
    "grating", "shallow", "dismal", "plodding", "stale", "awkward",
    "dreary", "laborious", "turgid", "wooden", "strained", "sour",
    "bloated", "listless", "garbled", "feeble", "murky", "joyless",
    "wearying", "forgettable", "lumbering", "brittle", "vapid", "leaden",
]

NEUTRAL_NOUNS = [
    "harbor", "meadow", "lantern", "orchard", "valley", "market", "bridge",
    "library", "garden", "village", "river", "workshop", "station",
    "harvest", "forest", "museum", "kitchen", "mountain", "causeway",
    "archive", "island", "mill", "quarry", "lighthouse", "granary",
]

NEUTRAL_VERBS = [
    "stood beside", "opened toward", "waited near", "stretched past",
    "leaned against", "drifted through", "settled into", "curved around",
    "rose above", "faded behind", "turned toward", "rested upon",
]

TIME_PHRASES = [
    "in early spring", "after the long rains", "by late evening",
    "through the winter", "before the harvest", "at first light",
    "during the festival", "under a pale sky", "in the dry season",
    "after the thaw", "toward the solstice", "past midnight",
]


def _review_sentence(rng: np.random.Generator, pool: list[str]) -> str:
    subject = SUBJECTS[rng.integers(len(SUBJECTS))]
    linker = LINKERS[rng.integers(len(LINKERS))]
    first = pool[rng.integers(len(pool))]
    second = pool[rng.integers(len(pool))]
    form = rng.integers(3)
    if form == 0:
        return f"{subject} {linker} {first} and {second}."
    adverb = INTENSIFIERS[rng.integers(len(INTENSIFIERS))]
    if form == 1:
        return f"{subject} {linker} {adverb} {first}."
    return f"{subject} {linker} {first} and {adverb} {second}."


def _neutral_sentence(rng: np.random.Generator) -> str:
    noun = NEUTRAL_NOUNS[rng.integers(len(NEUTRAL_NOUNS))]
    verb = NEUTRAL_VERBS[rng.integers(len(NEUTRAL_VERBS))]
    other = NEUTRAL_NOUNS[rng.integers(len(NEUTRAL_NOUNS))]
    when = TIME_PHRASES[rng.integers(len(TIME_PHRASES))]
    if rng.integers(2):
        return f"the {noun} {verb} the {other} {when}."
    return f"{when} the {noun} {verb} the {other}."


def generate_pretrain(rng: np.random.Generator, n_bytes: int) -> str:
    """Mixed prose: mostly neutral sentences, some unlabeled review talk."""
    parts: list[str] = []
    total = 0
    while total < n_bytes:
        kind = rng.random()
        if kind < 0.55:
            sentence = _neutral_sentence(rng)
        elif kind < 0.775:
            sentence = _review_sentence(rng, POSITIVE)
        else:
            sentence = _review_sentence(rng, NEGATIVE)
        parts.append(sentence)
        total += len(sentence) + 1
    return " ".join(parts)[:n_bytes]


def generate_labeled(rng: np.random.Generator,
                     per_class: int) -> list[tuple[str, str]]:
    """Balanced pos/neg review documents of one or two sentences.

    Every sentence carries the class's vocabulary, so the label signal
    survives pooling over the whole character sequence.
    """
    rows: list[tuple[str, str]] = []
    for label, pool in (("pos", POSITIVE), ("neg", NEGATIVE)):
        for _ in range(per_class):
            n_sent = 2 + rng.integers(2)
            sentences = [_review_sentence(rng, pool) for _ in range(n_sent)]
            rows.append((label, " ".join(sentences)))
    order = rng.permutation(len(rows))
    return [rows[i] for i in order]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_dataset(outdir, size: int = DEFAULT_SIZE,
                  per_class: int = DEFAULT_PER_CLASS,
                  seed: int = DEFAULT_SEED, verify: bool = True) -> dict:
    """Write pretrain.txt and labeled.tsv; verify checksums for defaults."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    pretrain_path = outdir / "pretrain.txt"
    labeled_path = outdir / "labeled.tsv"
    pretrain_path.write_text(generate_pretrain(rng, size), encoding="utf-8")
    write_labeled(labeled_path, generate_labeled(rng, per_class))
    digests = {"pretrain.txt": sha256_file(pretrain_path),
               "labeled.tsv": sha256_file(labeled_path)}
    is_default = (size == DEFAULT_SIZE and per_class == DEFAULT_PER_CLASS
                  and seed == DEFAULT_SEED)
    if verify and is_default and "PENDING" not in CHECKSUMS.values():
        for name, want in CHECKSUMS.items():
            if digests[name] != want:
                raise RuntimeError(
                    f"{name}: checksum {digests[name]} != expected {want}")
    return {"pretrain": pretrain_path, "labeled": labeled_path,
            "sha256": digests}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="Generate the bundled desk-scale corpus and labeled set.")
    parser.add_argument("outdir", help="output directory")
    parser.add_argument("--size", type=int, default=DEFAULT_SIZE,
                        help="pretraining corpus size in bytes")
    parser.add_argument("--per-class", type=int, default=DEFAULT_PER_CLASS,
                        help="labeled examples per class")
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED)
    args = parser.parse_args(argv)
    result = write_dataset(args.outdir, args.size, args.per_class, args.seed)
    for name, digest in result["sha256"].items():
        print(f"{digest}  {name}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
