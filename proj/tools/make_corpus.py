#!/usr/bin/env python3
"""Generate the byte-level fixture corpora under data/.

The text is produced from a small seeded grammar so it is public domain by
construction and has a mix of easy (mid-word, fixed phrase) and hard (word
choice) next-byte decisions.
"""
import argparse
import random

NOUNS = """river stone garden window lantern market letter harbor forest bridge
candle mountain teacher farmer sailor child kitten horse village castle road
basket meadow storm island library clock wagon orchard miller baker""".split()
ADJS = """quiet old small bright green heavy gentle cold warm tall narrow
golden silent busy empty wild""".split()
VERBS_PAST = """found carried watched opened painted followed crossed built
mended counted closed visited""".split()
PLACES = """town hill valley shore field square tower""".split()
NAMES = """anna tom lucy peter mary john clara henry""".split()
ADVERBS = """slowly quietly early often never always""".split()
NUMBERS = """two three four five seven ten""".split()


def sentence(rng: random.Random) -> str:
    n = lambda: rng.choice(NOUNS)
    a = lambda: rng.choice(ADJS)
    v = lambda: rng.choice(VERBS_PAST)
    templates = [
        lambda: f"the {a()} {n()} {v()} the {n()} .",
        lambda: f"{rng.choice(NAMES)} {v()} the {a()} {n()} near the {rng.choice(PLACES)} .",
        lambda: f"a {n()} is {a()} when the {n()} is {a()} .",
        lambda: f"in the {rng.choice(PLACES)} , {rng.choice(NAMES)} saw {rng.choice(NUMBERS)} {n()}s .",
        lambda: f"{rng.choice(NAMES)} {rng.choice(ADVERBS)} {v()} the {n()} and the {n()} .",
        lambda: f"every morning the {n()} {v()} a {a()} {n()} .",
        lambda: "once upon a time there was a " + f"{a()} {n()} .",
    ]
    return rng.choice(templates)()


def corpus(seed: int, size: int) -> str:
    rng = random.Random(seed)
    out = []
    total = 0
    while total < size:
        para = " ".join(sentence(rng) for _ in range(rng.randint(3, 6))) + "\n"
        out.append(para)
        total += len(para)
    return "".join(out)[:size]


def main() -> None:
    p = argparse.ArgumentParser()
    p.add_argument("--out-dir", default="data")
    args = p.parse_args()
    for name, seed, size in (("corpus.txt", 1, 65536), ("heldout.txt", 2, 16384)):
        with open(f"{args.out_dir}/{name}", "w", encoding="ascii", newline="\n") as f:
            f.write(corpus(seed, size))


if __name__ == "__main__":
    main()
