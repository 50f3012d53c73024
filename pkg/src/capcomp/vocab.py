"""Fixed word-level vocabulary shared by the toy LVLM, captioner and selector."""

from __future__ import annotations

PAD, BOS, EOS = 0, 1, 2
VOCAB_SIZE = 256

COLORS = ("red", "green", "blue", "yellow")
KINDS = ("square", "circle", "cross", "triangle")
N_CELLS = 16
CELLS = tuple(f"c{i}" for i in range(N_CELLS))
NUMBERS = ("0", "1", "2", "3", "4")
ANSWER_WORDS = ("yes", "no")
FUNCTION_WORDS = ("is", "there", "a", "what", "color", "the", "how", "many", "shapes",
                  "left", "of", "above", "?", "in", "top", "half")

_WORDS = (("<pad>", "<bos>", "<eos>") + COLORS + KINDS + CELLS + NUMBERS + ANSWER_WORDS
          + FUNCTION_WORDS)
WORDS = _WORDS + tuple(f"<unused{i}>" for i in range(VOCAB_SIZE - len(_WORDS)))
assert len(WORDS) == VOCAB_SIZE

TOKEN_ID = {w: i for i, w in enumerate(WORDS)}


class VocabError(KeyError):
    pass


def encode(text: str | list[str]) -> list[int]:
    words = text.split() if isinstance(text, str) else text
    try:
        return [TOKEN_ID[w] for w in words]
    except KeyError as exc:
        raise VocabError(f"unknown word {exc.args[0]!r}") from None


def decode(ids) -> str:
    return " ".join(WORDS[int(i)] for i in ids)


def check_ids(ids, vocab_size: int = VOCAB_SIZE) -> None:
    for i in ids:
        if not 0 <= int(i) < vocab_size:
            raise VocabError(f"token id {i} outside vocabulary of size {vocab_size}")


def strip_eos(ids) -> list[int]:
    ids = list(ids)
    return ids[:-1] if ids and ids[-1] == EOS else ids
