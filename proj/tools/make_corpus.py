#!/usr/bin/env python3
"""Generate the bundled toy corpus.

A small probabilistic grammar produces English-like sentences with enough
regularity (agreement, fixed phrases, recurring names) that a character-level
masked LM has something to learn at desk scale. Output is deterministic for a
given seed.
"""

import argparse
import random

NAMES = ["Ada", "Boris", "Clara", "Dmitri", "Elena", "Farid", "Greta", "Hugo", "Ines", "Jonas",
         "Kira", "Lars", "Mira", "Nils", "Olga", "Pablo"]
PLACES = ["the harbor", "the old mill", "the market", "the library", "the north road", "the valley",
          "the station", "the garden", "the river bank", "the workshop", "the school", "the bridge"]
NOUNS = ["lamp", "letter", "basket", "compass", "ladder", "kettle", "map", "violin", "hammer",
         "blanket", "clock", "notebook", "bicycle", "lantern", "rope", "mirror"]
ADJS = ["small", "heavy", "bright", "broken", "quiet", "green", "ancient", "narrow", "warm",
        "strange", "yellow", "careful", "tired", "curious"]
VERBS_T = [("carried", "carries"), ("found", "finds"), ("repaired", "repairs"), ("painted", "paints"),
           ("sold", "sells"), ("borrowed", "borrows"), ("opened", "opens"), ("cleaned", "cleans")]
VERBS_I = [("waited", "waits"), ("laughed", "laughs"), ("slept", "sleeps"), ("wandered", "wanders"),
           ("listened", "listens"), ("worked", "works")]
TIMES = ["in the morning", "at noon", "before dawn", "after supper", "on Sunday", "every winter",
         "late at night", "during the storm"]
CONNECT = ["because", "although", "while", "so", "and then"]
WEATHER = ["The rain fell on {p}.", "A cold wind blew across {p}.", "The sun rose over {p}.",
           "Fog covered {p} until noon."]


def noun_phrase(rng):
    n = rng.choice(NOUNS)
    if rng.random() < 0.6:
        a = rng.choice(ADJS)
        art = "an" if a[0] in "aeiou" else "a"
        return f"{art} {a} {n}"
    return f"the {n}"


def clause(rng, tense):
    who = rng.choice(NAMES)
    k = 0 if tense == "past" else 1
    r = rng.random()
    if r < 0.55:
        v = rng.choice(VERBS_T)[k]
        s = f"{who} {v} {noun_phrase(rng)}"
    elif r < 0.8:
        v = rng.choice(VERBS_I)[k]
        s = f"{who} {v} at {rng.choice(PLACES)}"
    else:
        v = rng.choice(VERBS_I)[k]
        s = f"{who} {v} with {rng.choice(NAMES)}"
    if rng.random() < 0.4:
        s += " " + rng.choice(TIMES)
    return s


def sentence(rng):
    if rng.random() < 0.08:
        return rng.choice(WEATHER).format(p=rng.choice(PLACES))
    tense = "past" if rng.random() < 0.7 else "present"
    s = clause(rng, tense)
    if rng.random() < 0.35:
        s += f" {rng.choice(CONNECT)} {clause(rng, tense)}"
    return s[0].upper() + s[1:] + "."


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/corpus.txt")
    ap.add_argument("--bytes", type=int, default=300_000)
    ap.add_argument("--seed", type=int, default=20201022)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    paragraphs, size = [], 0
    while size < args.bytes:
        para = " ".join(sentence(rng) for _ in range(rng.randint(3, 7)))
        paragraphs.append(para)
        size += len(para) + 1
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("\n".join(paragraphs) + "\n")


if __name__ == "__main__":
    main()
