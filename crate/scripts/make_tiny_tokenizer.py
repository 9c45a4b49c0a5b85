"""Train the small byte-level BPE vocabulary shipped with the test bundle.

Usage: python3 scripts/make_tiny_tokenizer.py crates/core/assets/tiny_tokenizer
"""
import sys
from pathlib import Path

from tokenizers import ByteLevelBPETokenizer

CORPUS = """
a red apple on a wooden table next to a glass of water
a cup of coffee sitting on top of a white plate
a man riding a bicycle down a city street
a woman holding an umbrella in the rain
a dog lying on a couch in a living room
two cats sleeping on a bed near a window
a book cover with a picture of a mountain and the title in large letters
a close up of a keyboard and a computer mouse on a desk
a bowl of fruit with bananas oranges and grapes
a kitchen with a stove a sink and a refrigerator
a group of people standing around a table with food
a plant in a pot next to a lamp
a bottle of wine and two glasses on a counter
a remote control lying on a blue blanket
a pair of scissors and a roll of tape
a stack of books on a shelf in a library
a clock hanging on a brick wall
what is in the image
what is this
what color is this object
where is the cup
how many books are on the table
""".strip().splitlines()


def main(out_dir: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tok = ByteLevelBPETokenizer(add_prefix_space=False)
    tok.train_from_iterator(
        CORPUS * 4,
        vocab_size=400,
        min_frequency=2,
        special_tokens=["<|endoftext|>"],
        show_progress=False,
    )
    tok.save_model(str(out))


if __name__ == "__main__":
    main(sys.argv[1])
