#!/usr/bin/env python3
"""Generate a deterministic synthetic text corpus for desk-scale runs.

The text is template-grammar English with a Zipf-weighted lexicon: enough
byte-level structure (word shapes, agreement patterns, punctuation rhythm)
for a small context-window model to learn, while staying fully reproducible
from a seed. Output is plain UTF-8 (ASCII subset).

Usage:
    python scripts/make_corpus.py --out corpus.txt --size-mb 1.5 --seed 0
"""

import argparse
import re
from pathlib import Path

import numpy as np

NOUNS = """river valley harbor engine signal garden lantern meadow circuit anchor
forest needle spiral market tunnel glacier compass furnace island ledger
mirror orchard pendulum quarry raven saddle thicket turbine vessel willow
archive beacon cistern dynamo estuary foundry granary hollow ingot junction
keystone lattice mill nursery outpost prairie reservoir summit terrace
upland viaduct warren axle bastion cargo dovetail ember flume gasket hull
""".split()

VERBS = """carries measures follows crosses gathers lifts turns settles guards
reaches holds shapes divides warms filters spans anchors drains circles
feeds marks mends cools traces splits stores tilts binds clears drives
""".split()

ADJECTIVES = """quiet narrow steady bright hollow distant broad pale worn early
frozen gentle heavy iron little mossy northern old rough silver southern
steep still sunken tall tidal upper western wide wooden young
""".split()

ADVERBS = "slowly often rarely quietly evenly twice again soon finally nearly".split()

PLACES = """Harwick Eldenmoor Bracken Dunfell Larkspur Mirefield Northgate
Ostbridge Pellworth Quarrydown Redmarsh Stonevale Tarnbeck Umberly Westhollow
""".split()

TEMPLATES = [
    "The {adj} {noun} {verb} the {noun} near the {noun}.",
    "A {noun} {adverb} {verb} the {adj} {noun}.",
    "In {place}, the {noun} {verb} the {noun} before the {adj} {noun}.",
    "The {noun} of {place} {adverb} {verb} its {adj} {noun}.",
    "When the {adj} {noun} {verb} the {noun}, the {noun} {verb} {adverb}.",
    "Every {noun} {verb} a {adj} {noun}, and every {noun} {verb} the {noun}.",
    "The {noun} {verb} {count} {noun}s along the {adj} {noun}.",
    "Between the {noun} and the {noun} lies a {adj} {noun}.",
    "No {noun} {verb} the {noun} without a {adj} {noun}.",
    "By the {adj} {noun}, the {noun} of {place} {verb} the {noun}.",
]


def _zipf_choice(rng, items):
    weights = 1.0 / (np.arange(len(items)) + 2.0)
    weights /= weights.sum()
    return items[rng.choice(len(items), p=weights)]


_POOLS = {"noun": NOUNS, "adj": ADJECTIVES, "verb": VERBS,
          "adverb": ADVERBS, "place": PLACES}


def _fill(template: str, rng) -> str:
    def sub(match):
        tag = match.group(1)
        if tag == "count":
            return str(int(rng.integers(2, 90)))
        return _zipf_choice(rng, _POOLS[tag])

    return re.sub(r"\{(\w+)\}", sub, template)


def generate_text(size_bytes: int, seed: int = 0) -> str:
    rng = np.random.Generator(np.random.PCG64(seed))
    pieces = []
    total = 0
    sentences_in_paragraph = 0
    while total < size_bytes:
        sentence = _fill(TEMPLATES[rng.integers(len(TEMPLATES))], rng)
        pieces.append(sentence)
        total += len(sentence) + 1
        sentences_in_paragraph += 1
        if sentences_in_paragraph >= rng.integers(3, 7):
            pieces.append("\n")
            sentences_in_paragraph = 0
        else:
            pieces.append(" ")
    return "".join(pieces)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, help="output text file")
    parser.add_argument("--size-mb", type=float, default=1.5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    text = generate_text(int(args.size_mb * 1024 * 1024), args.seed)
    Path(args.out).write_text(text, encoding="utf-8")
    print(f"wrote {len(text)} bytes to {args.out}")


if __name__ == "__main__":
    main()
