"""Synthetic word-level vocabulary shared by the data, needle, and model code.

Fixed 1024-id layout:
  0..511    text side: specials, digit characters, punctuation, template
            words, city names, filler prose words (unused slots reserved)
  512..1021 vision codebook entries
  1022      end-of-frame delimiter (vision range)
  1023      end-of-vision delimiter (vision range)

The codec is reversible at the token level: decode renders digits as
contiguous runs and punctuation without a leading space, and encode splits
text back into exactly the same ids, so string matching on decoded output
(city names, digit runs) agrees with the underlying tokens.
"""

from __future__ import annotations

import re

VOCAB_SIZE = 1024
TEXT_SIZE = 512
VISION_CODE_START = 512
VISION_CODE_COUNT = 510
EOF_ID = 1022
EOV_ID = 1023
FRAME_TOKENS = 256

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
VISION_OPEN_ID = 3
VISION_CLOSE_ID = 4

_SPECIAL_STRINGS = ["<pad>", "<bos>", "<eos>", "<vision>", "</vision>"]
_DIGITS = [str(d) for d in range(10)]
_PUNCT = [".", ",", "?", ":", ";", "!"]

_TEMPLATE_WORDS = [
    "the", "magic", "number", "numbers", "for", "is", "are", "what",
    "and", "user", "assistant", "red", "blue",
]

_CITIES = [
    "amsterdam", "paris", "london", "tokyo", "berlin", "madrid", "rome", "vienna",
    "lisbon", "dublin", "oslo", "stockholm", "helsinki", "copenhagen", "warsaw", "prague",
    "budapest", "athens", "cairo", "nairobi", "lagos", "accra", "tunis", "rabat",
    "dakar", "kampala", "lusaka", "harare", "beijing", "shanghai", "delhi", "mumbai",
    "bangkok", "hanoi", "jakarta", "manila", "seoul", "osaka", "taipei", "singapore",
    "sydney", "melbourne", "auckland", "perth", "brisbane", "toronto", "vancouver", "montreal",
    "chicago", "boston", "denver", "seattle", "houston", "dallas", "phoenix", "atlanta",
    "miami", "detroit", "portland", "oakland", "sacramento", "columbus", "austin", "nashville",
]

_FILLER_WORDS = [
    "a", "about", "above", "after", "again", "air", "all", "almost", "along", "also",
    "always", "an", "animal", "another", "answer", "any", "around", "as", "ask", "at",
    "away", "back", "be", "because", "been", "before", "began", "begin", "being", "below",
    "between", "big", "book", "both", "boy", "but", "by", "call", "came", "can",
    "car", "carry", "change", "children", "city", "close", "cold", "come", "could", "country",
    "cut", "day", "did", "different", "do", "does", "down", "each", "earth", "eat",
    "end", "enough", "even", "every", "example", "eye", "face", "family", "far", "father",
    "feet", "few", "find", "first", "follow", "food", "form", "found", "four", "from",
    "get", "girl", "give", "go", "good", "got", "great", "group", "grow", "had",
    "hand", "hard", "has", "have", "he", "head", "hear", "help", "her", "here",
    "high", "him", "his", "home", "house", "how", "idea", "if", "important", "in",
    "into", "it", "its", "just", "keep", "kind", "know", "land", "large", "last",
    "later", "learn", "leave", "left", "let", "letter", "life", "light", "like", "line",
    "list", "little", "live", "long", "look", "made", "make", "man", "many", "may",
    "me", "mean", "men", "might", "mile", "miss", "more", "most", "mother", "mountain",
    "move", "much", "must", "my", "name", "near", "need", "never", "new", "next",
    "night", "no", "not", "now", "of", "off", "often", "old", "on", "once",
    "one", "only", "open", "or", "other", "our", "out", "over", "own", "page",
    "paper", "part", "people", "picture", "place", "plant", "play", "point", "put", "question",
    "quick", "quite", "rain", "read", "right", "river", "run", "said", "same", "saw",
    "say", "school", "sea", "second", "see", "seem", "sentence", "set", "she", "should",
    "show", "side", "small", "so", "some", "something", "song", "soon", "sound", "spell",
    "start", "state", "still", "stop", "story", "study", "such", "sun", "take", "talk",
    "tell", "than", "that", "them", "then", "there", "these", "they", "thing", "think",
    "this", "those", "thought", "three", "through", "time", "to", "together", "too", "took",
    "tree", "try", "turn", "two", "under", "until", "up", "us", "use", "very",
    "walk", "want", "was", "watch", "water", "way", "we", "well", "went", "were",
    "when", "where", "which", "while", "white", "who", "why", "will", "with", "word",
    "work", "world", "would", "write", "year", "you", "young", "your",
]

_WORD_RE = re.compile(r"[a-z]+|[0-9]|[.,?:;!]")


class VocabError(ValueError):
    """Unknown word at encode time or a non-text id at decode time."""


class Vocab:
    """Bidirectional id <-> string table over the fixed layout above."""

    def __init__(self):
        strings = list(_SPECIAL_STRINGS) + _DIGITS + _PUNCT + _TEMPLATE_WORDS + _CITIES + _FILLER_WORDS
        if len(strings) != len(set(strings)):
            seen, dup = set(), []
            for s in strings:
                if s in seen:
                    dup.append(s)
                seen.add(s)
            raise VocabError(f"duplicate vocab entries: {dup}")
        if len(strings) > TEXT_SIZE:
            raise VocabError(f"text vocab overflow: {len(strings)} > {TEXT_SIZE}")
        self._id_to_str = {i: s for i, s in enumerate(strings)}
        self._str_to_id = {s: i for i, s in enumerate(strings)}
        self.text_used = len(strings)
        self.digit_ids = frozenset(self._str_to_id[d] for d in _DIGITS)
        self.punct_ids = frozenset(self._str_to_id[p] for p in _PUNCT)
        self.city_ids = tuple(self._str_to_id[c] for c in _CITIES)
        self.filler_ids = tuple(self._str_to_id[w] for w in _FILLER_WORDS)
        self.cities = tuple(_CITIES)

    # --- encode / decode -------------------------------------------------

    def encode(self, text: str) -> list:
        """Text to ids. Words must exist in the table; digits split to chars."""
        out = []
        for piece in _WORD_RE.findall(text.lower()):
            wid = self._str_to_id.get(piece)
            if wid is None:
                raise VocabError(f"word not in vocabulary: {piece!r}")
            out.append(wid)
        return out

    def decode(self, ids) -> str:
        """Ids to text. Digit runs stay contiguous; punctuation binds left.

        Non-text ids render as bracketed markers so model output containing
        specials or vision codes still decodes to something scannable.
        """
        pieces = []
        prev_digit = False
        for t in ids:
            t = int(t)
            s = self._render(t)
            is_digit = t in self.digit_ids
            if not pieces:
                pieces.append(s)
            elif t in self.punct_ids or (is_digit and prev_digit):
                pieces.append(s)
            else:
                pieces.append(" " + s)
            prev_digit = is_digit
        return "".join(pieces)

    def _render(self, t: int) -> str:
        s = self._id_to_str.get(t)
        if s is not None:
            return s
        if VISION_CODE_START <= t < VISION_CODE_START + VISION_CODE_COUNT:
            return f"<v{t - VISION_CODE_START}>"
        if t == EOF_ID:
            return "<eof>"
        if t == EOV_ID:
            return "<eov>"
        if 0 <= t < VOCAB_SIZE:
            return f"<unused{t}>"
        raise VocabError(f"id out of range: {t}")

    def word_id(self, word: str) -> int:
        wid = self._str_to_id.get(word)
        if wid is None:
            raise VocabError(f"word not in vocabulary: {word!r}")
        return wid

    def encode_number(self, n: int) -> list:
        return [self._str_to_id[c] for c in str(n)]

    def is_text_id(self, t: int) -> bool:
        return 0 <= t < TEXT_SIZE

    def is_vision_id(self, t: int) -> bool:
        return VISION_CODE_START <= t < VOCAB_SIZE


DEFAULT_VOCAB = Vocab()
