"""Generate byte-level BPE golden fixtures with the HuggingFace `tokenizers` package.

Trains a small byte-level BPE vocabulary, writes it in the engine's vocab/merges
formats, and records reference token ids for a fixed set of strings. Run once;
outputs are committed next to this script.
"""
import json
import random
from pathlib import Path

from tokenizers import ByteLevelBPETokenizer

HERE = Path(__file__).resolve().parent
ROOT = HERE.parents[2]

templates = [t.strip() for t in (ROOT / "data" / "templates.txt").read_text().splitlines() if t.strip()]
words = ("nurse teacher doctor farmer secretary baker dancer lawyer man woman person "
         "she he they was caring screaming examined injuries because said that").split()

corpus = []
for t in templates:
    for w in words:
        corpus.append(t.replace("<occupation>", w) + " she was happy. He said they're fine, it's 42!")
corpus += ["The nurse examined the farmer for injuries because she was caring."] * 50

tok = ByteLevelBPETokenizer(add_prefix_space=False)
tok.train_from_iterator(corpus, vocab_size=600, min_frequency=2, show_progress=False)

vocab = tok.get_vocab()
with open(HERE / "vocab.tsv", "w", encoding="utf-8", newline="\n") as f:
    for token, idx in sorted(vocab.items(), key=lambda kv: kv[1]):
        f.write(f"{token}\t{idx}\n")

model = json.loads(tok._tokenizer.to_str())["model"]
with open(HERE / "merges.txt", "w", encoding="utf-8", newline="\n") as f:
    for m in model["merges"]:
        pair = m if isinstance(m, str) else " ".join(m)
        f.write(pair + "\n")

rng = random.Random(1234)
alphabet = [chr(c) for c in range(32, 127)] + ["\n", "\t", "  "]
samples = [
    "",
    "The nurse said that",
    " nurse",
    "The nurse examined the farmer for injuries because she",
    "He said they're fine, it's 42!",
    "  leading and trailing  ",
    "unicode: café naïve über 中文 \U0001F600",
    "tabs\tand\nnewlines\n\n  x",
]
samples += ["".join(rng.choice(alphabet) for _ in range(rng.randint(0, 40))) for _ in range(200)]

with open(HERE / "golden.jsonl", "w", encoding="utf-8", newline="\n") as f:
    for s in samples:
        f.write(json.dumps({"text": s, "ids": tok.encode(s).ids}, ensure_ascii=True) + "\n")

single = {w: len(tok.encode(" " + w).ids) == 1 for w in ["nurse", "farmer", "xylophonist"]}
(HERE / "single_token.json").write_text(json.dumps(single, indent=1) + "\n")
print(len(vocab), "tokens;", single)
