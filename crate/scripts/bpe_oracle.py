"""Reference token ids for the shipped tiny vocabulary.

Encodes fixed sentences with the HF `tokenizers` byte-level BPE (an
independent implementation) and writes them as JSON for the Rust tests.

Usage: python3 scripts/bpe_oracle.py crates/core/assets/tiny_tokenizer crates/core/tests/fixtures/bpe_oracle.json
"""
import json
import sys
from pathlib import Path

from tokenizers import ByteLevelBPETokenizer

SENTENCES = [
    "What is in the image?",
    "a red apple on a wooden table next to a glass of water",
    "A man riding a bicycle down a city street, holding his phone.",
    "two cats sleeping on a bed near a window",
    "It's 3:45 pm and the cup isn't on the shelf anymore!",
    "the quick brown fox jumps over the lazy dog near the river bank today",
    "  leading spaces and trailing spaces   ",
    "tabs\tand\nnewlines\n\nin between",
    "how many books are on the table? 12 or 13?",
    "Café crème brûlée — naïve résumé",
    "東京タワー is a tall tower in Tokyo",
    "emoji test \U0001F680\U0001F34E and symbols #$%&*()",
    "where is the remote control? it was on the blue blanket",
    "I'll say we're done; you've seen they'd left, I'm sure.",
    "a stack of books on a shelf in a library with 1000 pages",
    "UPPER lower MiXeD case Words",
    "trailing newline\n",
    "multiple   internal    spaces here",
    "a clock hanging on a brick wall, reading 10:10",
    "What color is this object? Is it red, green, or blue?",
]


def main(tok_dir: str, out_path: str) -> None:
    d = Path(tok_dir)
    tok = ByteLevelBPETokenizer(str(d / "vocab.json"), str(d / "merges.txt"), add_prefix_space=False)
    cases = [{"text": s, "ids": tok.encode(s).ids} for s in SENTENCES]
    Path(out_path).write_text(json.dumps({"generator": "tokenizers " + __import__("tokenizers").__version__, "cases": cases}, ensure_ascii=False, indent=1) + "\n")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
