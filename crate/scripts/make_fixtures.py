"""Regenerates the bundled fixtures under data/. Deterministic."""
import csv
import random
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent / "data"

GOEMOTIONS = [
    "admiration", "amusement", "anger", "annoyance", "approval", "caring",
    "confusion", "curiosity", "desire", "disappointment", "disapproval",
    "disgust", "embarrassment", "excitement", "fear", "gratitude", "grief",
    "joy", "love", "nervousness", "optimism", "pride", "realization",
    "relief", "remorse", "sadness", "surprise", "neutral",
]

SYN_LABELS = {
    "joy": ("positive", "happiness", "joy",
            ["cheerful", "delighted", "glad", "thrilled", "happy", "overjoyed", "elated", "merry"]),
    "love": ("positive", "affection", "love",
             ["adore", "cherish", "treasure", "admire", "fancy", "worship", "embrace", "dote on"]),
    "anger": ("negative", "rage", "anger",
              ["furious", "outraged", "irritated", "livid", "mad", "enraged", "annoyed", "fuming"]),
    "sadness": ("negative", "sorrow", "sadness",
                ["heartbroken", "gloomy", "miserable", "lonely", "depressed", "downcast", "tearful", "hopeless"]),
}
OPENERS = ["today", "honestly", "this morning", "right now", "tonight", "all week", "after lunch", "at the party"]
CLOSERS = ["about my job", "with my family", "after the game", "because of the news",
           "at work", "about the trip", "with my neighbors", "about the weather"]


def synthetic_sentence(rng, label, keyword=None):
    keyword = keyword or rng.choice(SYN_LABELS[label][3])
    opener = rng.choice(OPENERS)
    closer = rng.choice(CLOSERS)
    if label == "love":
        body = f"i {keyword} everyone"
    else:
        body = f"i feel {keyword}"
    return f"{opener} {body} {closer}{rng.choice(['.', '!'])}"


def write_synthetic():
    rng = random.Random(20240331)
    out = ROOT / "synthetic"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "schema.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["label", "verbalizer_word", "basic", "secondary", "tertiary"])
        for name, (basic, secondary, tertiary, _) in SYN_LABELS.items():
            w.writerow([name, name, basic, secondary, tertiary])
    for split, n_per in (("train", 10), ("test", 10)):
        seen = set()
        rows = []
        for label in SYN_LABELS:
            made = 0
            # the training split uses every keyword at least once so the
            # closed vocabulary covers the test keywords
            keywords = list(SYN_LABELS[label][3]) if split == "train" else []
            rng.shuffle(keywords)
            while made < n_per:
                s = synthetic_sentence(rng, label, keywords[made] if made < len(keywords) else None)
                if s in seen:
                    continue
                seen.add(s)
                rows.append((s, label))
                made += 1
        rng.shuffle(rows)
        with open(out / f"{split}.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["text", "labels", "id"])
            for i, (s, label) in enumerate(rows):
                w.writerow([s, label, f"syn-{split}-{i:03d}"])
    # Mean rater scores: positive pair and negative pair co-occur, polarities oppose.
    with open(out / "judgments.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(SYN_LABELS))
        for _ in range(24):
            polarity = rng.choice([1.0, -1.0])
            pos = max(polarity, 0.0)
            neg = max(-polarity, 0.0)
            vals = [
                pos * rng.uniform(0.5, 1.0) + rng.uniform(0.0, 0.2),
                pos * rng.uniform(0.3, 1.0) + rng.uniform(0.0, 0.2),
                neg * rng.uniform(0.5, 1.0) + rng.uniform(0.0, 0.2),
                neg * rng.uniform(0.3, 1.0) + rng.uniform(0.0, 0.2),
            ]
            w.writerow([f"{v:.3f}" for v in vals])


def write_goemotions():
    rng = random.Random(58009)
    out = ROOT / "goemotions_fixture"
    out.mkdir(parents=True, exist_ok=True)
    with open(ROOT / "goemotions_schema.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["label", "verbalizer_word", "basic", "secondary", "tertiary"])
        for name in GOEMOTIONS:
            w.writerow([name, name, "", "", ""])
    for split, per_class, multi in (("train", 45, 40), ("test", 15, 12)):
        rows = []
        for idx, name in enumerate(GOEMOTIONS):
            for j in range(per_class):
                rows.append((f"comment {j} expressing {name}", str(idx)))
        for j in range(multi):
            a, b = rng.sample(range(len(GOEMOTIONS)), 2)
            rows.append((f"mixed comment {j}", f"{a},{b}"))
        rng.shuffle(rows)
        with open(out / f"{split}.tsv", "w", newline="") as f:
            for i, (text, labels) in enumerate(rows):
                f.write(f"{text}\t{labels}\tge{split[:2]}{i:05d}\n")


if __name__ == "__main__":
    write_synthetic()
    write_goemotions()
