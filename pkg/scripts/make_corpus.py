"""Regenerate the bundled sample corpus (src/eigenattn/data/sample.txt)."""
import random
from pathlib import Path

SUBJECTS = ["the old miller", "a young fox", "the river", "my sister", "the baker", "a small bird",
            "the quiet town", "our teacher", "the tired horse", "a stranger", "the north wind",
            "the captain", "every child", "the garden cat", "a farmer"]
VERBS = ["watched", "found", "followed", "carried", "painted", "remembered", "visited", "crossed",
         "opened", "heard", "built", "lost", "counted", "praised", "forgot"]
OBJECTS = ["the red door", "a wooden box", "the long road", "seven apples", "the morning bell",
           "a letter", "the broken bridge", "the green hill", "a silver coin", "the evening lamp",
           "the empty barn", "a stone wall", "the market square", "the winter field"]
PLACES = ["near the mill", "by the sea", "in the forest", "after the rain", "before dawn",
          "at the harbour", "under the old tree", "across the valley", "during the fair",
          "on the first day of spring"]
CONNECT = ["and then", "but later", "so", "because", "while", "although"]


def clause(rng):
    s = f"{rng.choice(SUBJECTS)} {rng.choice(VERBS)} {rng.choice(OBJECTS)}"
    if rng.random() < 0.6:
        s += f" {rng.choice(PLACES)}"
    return s


def sentence(rng):
    s = clause(rng)
    if rng.random() < 0.4:
        s += f" {rng.choice(CONNECT)} {clause(rng)}"
    return s[0].upper() + s[1:] + rng.choice([".", ".", ".", "!", "?"])


def main(n_chars=120_000, seed=7):
    rng = random.Random(seed)
    paras, size = [], 0
    while size < n_chars:
        p = " ".join(sentence(rng) for _ in range(rng.randint(3, 7)))
        paras.append(p)
        size += len(p) + 2
    out = Path(__file__).resolve().parents[1] / "src" / "eigenattn" / "data" / "sample.txt"
    out.write_text("\n\n".join(paras) + "\n", encoding="utf-8")
    print(out, size)


if __name__ == "__main__":
    main()
