#!/usr/bin/env python3
"""Regenerates the JSONL fixtures under fixtures/.

    python3 scripts/make_fixtures.py

Output is deterministic; rerunning it must leave the checked-in files unchanged.
"""

import json
import os
import random
import re
from pathlib import Path

ROOT = Path(os.environ.get("OUT", Path(__file__).resolve().parent.parent / "fixtures"))

KINDS = ["river", "canal", "valley", "tower", "bridge", "harbor", "glacier", "forest", "lake", "castle"]

PREDICATES = [
    "was first mapped by traveling surveyors long ago",
    "appears on many regional maps and old postcards",
    "draws steady crowds of visitors every summer season",
    "sits close to a quiet village with narrow lanes",
    "has a small museum run by local volunteers",
    "was restored after a harsh winter storm decades ago",
    "inspired several folk songs sung at harvest fairs",
    "is protected under a regional heritage program today",
    "attracts painters who admire its changing morning light",
    "hosts a lantern festival each autumn near dusk",
    "was once a busy stop on an old trade route",
    "shelters rare birds that nest along its edges",
    "gave its name to a nearby railway station",
    "features in a popular children's book from that region",
    "is surrounded by orchards that bloom in early spring",
    "served as a meeting point for rival merchant guilds",
]

# Token-disjoint from every query: none of the query template words, entity
# names or kind words.
OFF_TOPIC = [
    "Copper kettles whistle loudly when water boils over a high flame on cold early winter mornings.",
    "Many chess openings reward patient players who develop minor pieces early, then keep kings safe behind pawns.",
    "Sourdough bread needs a lively starter, warm kitchens, plus several hours of slow rising before baking begins.",
    "Marathon runners usually train by logging long easy miles at conversational pace during every single training week.",
    "Modern compilers reorder instructions aggressively while still preserving observable program behavior under fairly strict language rules.",
    "Violin strings made from gut produce warmer tones than steel strings do during quiet evening chamber recitals.",
    "Spreadsheet formulas can reference cells on other sheets by using an exclamation mark as their separator.",
    "Good espresso depends on fresh beans, fine grinding, steady pressure, plus carefully controlled brewing water temperature throughout.",
    "Jigsaw puzzles with a thousand pieces usually take several long evenings to finish completely at home.",
    "Wool sweaters shrink badly if washed in hot water then dried on very high dryer heat settings.",
    "Origami cranes require precise creases, patient hands, plus one square sheet of thin brightly colored paper.",
    "Tennis rackets strung tightly give players more control but noticeably less power on nearly every serve.",
]

# Segment lengths in words: open-ended prompt 4, on-topic sentence ~12,
# closed-ended prompt 15, off-topic sentence 16-17 (the longest segment).
OE_TEMPLATE = "Describe {s}."
CE_TEMPLATE = "What is {s} known for, and which people visit it most often today?"
NUM_TASKS = 50
NUM_OPEN_ENDED = 12

SYLLABLES = [
    "zor", "vel", "mar", "quin", "tal", "bri", "dov", "ren", "sul", "kae", "lom", "tor",
    "fen", "gal", "hir", "jun", "nax", "pel", "rud", "syl", "thal", "ur", "vix", "wen",
    "yar", "oph", "cresh", "dra", "elb", "isk",
]

ADJECTIVES = [
    "renowned", "reclusive", "prolific", "celebrated", "obscure", "innovative", "retired",
    "wandering", "meticulous", "ambitious", "humble", "eccentric",
]
ROLES = [
    "cartographer", "glassblower", "astronomer", "playwright", "botanist", "clockmaker",
    "sculptor", "linguist", "shipwright", "beekeeper", "composer", "archivist",
]
PLACES = [
    "a coastal town", "a mountain village", "an inland city", "a river port", "a desert oasis",
    "an island colony", "a border province", "a farming valley",
]
EXTRAS = [
    "best remembered for a series of detailed winter sketches",
    "the author of a treatise on tidal patterns",
    "a founding member of a regional guild of artisans",
    "the recipient of an early award for craftsmanship",
    "a teacher to many apprentices over three decades",
    "the subject of a short documentary film",
]

WORD = re.compile(r"[^\W_]+")


def words(s):
    return [w.lower() for w in WORD.findall(s)]


DIM = 1024


def fnv1a64(data):
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def hashed_cosine(a, b):
    """Cosine under the built-in hashed unigram+bigram embedder."""
    def counts(s):
        w = words(s)
        feats = [f"1:{x}" for x in w] + [f"2:{x} {y}" for x, y in zip(w, w[1:])]
        c = {}
        for f in feats:
            k = fnv1a64(f.encode()) % DIM
            c[k] = c.get(k, 0) + 1
        return c
    ca, cb = counts(a), counts(b)
    dot = sum(v * cb.get(k, 0) for k, v in ca.items())
    na = sum(v * v for v in ca.values()) ** 0.5
    nb = sum(v * v for v in cb.values()) ** 0.5
    return dot / (na * nb) if na and nb else 0.0


def made_up_name(rng, used, parts):
    while True:
        tokens = []
        for _ in range(parts):
            n = rng.choice([2, 2, 3])
            tokens.append("".join(rng.choice(SYLLABLES) for _ in range(n)).capitalize())
        key = tuple(t.lower() for t in tokens)
        if any(t in used for t in key) or len(set(key)) < parts:
            continue
        used.update(key)
        return " ".join(tokens)


def ppo_tasks(rng):
    used = set()
    tasks = []
    for i in range(NUM_TASKS):
        name = made_up_name(rng, used, 1)
        kind = KINDS[i % len(KINDS)]
        subject = f"the {name} {kind}"
        if i < NUM_OPEN_ENDED:
            query = OE_TEMPLATE.format(s=subject)
            qtype = "OPEN-ENDED"
        else:
            query = CE_TEMPLATE.format(s=subject)
            qtype = "CLOSED-ENDED"
        preds = rng.sample(PREDICATES, 10)
        relevant = [f"The {name} {kind} {p}." for p in preds]
        qw = set(words(query))
        # Resample until hash collisions leave every off-topic sentence well
        # below the 0.05 relevance threshold.
        while True:
            irrelevant = rng.sample(OFF_TOPIC, 3)
            if all(hashed_cosine(query, s) < 0.04 for s in irrelevant):
                break
        assert all(not (set(words(s)) & qw) for s in irrelevant), (query, irrelevant)
        tasks.append({
            "query": query,
            "query_type": qtype,
            "relevant_bank": relevant,
            "irrelevant_bank": irrelevant,
            "reference": " ".join(relevant[:3]),
        })
    return tasks


def entities(rng):
    used = set()
    out = []
    for _ in range(1000):
        name = made_up_name(rng, used, 2)
        props = []
        for _ in range(rng.randint(1, 4)):
            kind = rng.random()
            if kind < 0.5:
                adj = rng.choice(ADJECTIVES)
                article = "an" if adj[0] in "aeiou" else "a"
                props.append(f"{article} {adj} {rng.choice(ROLES)} from {rng.choice(PLACES)}")
            else:
                props.append(rng.choice(EXTRAS))
        out.append({"entity": name, "properties": props})
    return out


def labeled(tasks):
    rows = []
    for t in tasks[:40]:
        for s in t["relevant_bank"][:3]:
            rows.append({"query": t["query"], "sentence": s, "relevant": True})
        for s in t["irrelevant_bank"][:2]:
            rows.append({"query": t["query"], "sentence": s, "relevant": False})
    return rows


def write(name, rows):
    path = ROOT / name
    with path.open("w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, ensure_ascii=False) + "\n")
    print(f"{path.relative_to(ROOT.parent)}: {len(rows)} lines")


def main():
    ROOT.mkdir(exist_ok=True)
    tasks = ppo_tasks(random.Random(20240601))
    write("ppo_tasks.jsonl", tasks)
    write("entities.jsonl", entities(random.Random(530)))
    write("relevance_labels.jsonl", labeled(tasks))


if __name__ == "__main__":
    main()
