"""Fixed symbolic vocabulary and action grammar shared by every stage."""

from __future__ import annotations

import numpy as np

SPECIALS = ["PAD", "MASK", "SEP", "NOTHING"]
OUTCOME_LEVELS = 10
OUTCOMES = [f"OUTCOME_{i}" for i in range(OUTCOME_LEVELS + 1)]
ATOMS = ["TASK", "AT", "CONTAINS", "CLOSED", "OPEN", "HOLDING", "EMPTY", "CLEAN", "HOT", "COLD", "PLACED"]
VERBS = ["go", "open", "take", "put", "clean", "heat", "cool", "look"]
OBJECTS = [
    "apple", "bowl", "cup", "mug", "plate", "potato", "egg", "bread",
    "lettuce", "tomato", "knife", "spoon", "soapbar", "cloth", "pot", "pan",
]
RECEPTACLES = ["fridge", "microwave", "sinkbasin", "countertop", "cabinet", "drawer", "shelf", "stoveburner"]

# Unused ids keep the vocabulary at 64 entries.
RESERVED = [f"RESERVED_{i}" for i in range(6)]

SYMBOLS = SPECIALS + OUTCOMES + ATOMS + VERBS + OBJECTS + RECEPTACLES + RESERVED
VOCAB_SIZE = len(SYMBOLS)
ID = {s: i for i, s in enumerate(SYMBOLS)}

PAD, MASK, SEP, NOTHING = (ID[s] for s in SPECIALS)
VERB_IDS = [ID[v] for v in VERBS]
OBJECT_IDS = [ID[o] for o in OBJECTS]
RECEPTACLE_IDS = [ID[r] for r in RECEPTACLES]

# Argument slots following each verb.
VERB_SLOTS: dict[str, tuple[str, ...]] = {
    "go": ("rec",),
    "open": ("rec",),
    "take": ("obj", "rec"),
    "put": ("obj", "rec"),
    "clean": ("obj", "rec"),
    "heat": ("obj", "rec"),
    "cool": ("obj", "rec"),
    "look": (),
}

VERB_CLASS = {
    "go": "navigate",
    "look": "navigate",
    "open": "manipulate",
    "take": "manipulate",
    "clean": "transform",
    "heat": "transform",
    "cool": "transform",
    "put": "deposit",
}

OPENABLE = frozenset(ID[r] for r in ("fridge", "microwave", "cabinet", "drawer"))
TRANSFORM_SITE = {ID["clean"]: ID["sinkbasin"], ID["heat"]: ID["microwave"], ID["cool"]: ID["fridge"]}
TRANSFORM_ATOM = {ID["clean"]: ID["CLEAN"], ID["heat"]: ID["HOT"], ID["cool"]: ID["COLD"]}

_SLOT_IDS = {"obj": OBJECT_IDS, "rec": RECEPTACLE_IDS}


def _mask(ids_) -> np.ndarray:
    m = np.zeros(VOCAB_SIZE, dtype=bool)
    m[list(ids_)] = True
    m.setflags(write=False)
    return m


_MASKS = {"verb": _mask(VERB_IDS), "obj": _mask(OBJECT_IDS), "rec": _mask(RECEPTACLE_IDS), None: _mask([])}


def sym(i: int) -> str:
    return SYMBOLS[i]


def ids(words: str | list[str]) -> tuple[int, ...]:
    """Translate whitespace-separated symbols (or a list of them) into ids."""
    if isinstance(words, str):
        words = words.split()
    return tuple(ID[w] for w in words)


def render(tokens) -> str:
    return " ".join(SYMBOLS[t] for t in tokens)


def outcome_token(r: float) -> int:
    """Quantize an outcome in [0, 1] to the nearest OUTCOME_i token."""
    level = int(round(min(max(r, 0.0), 1.0) * OUTCOME_LEVELS))
    return ID[OUTCOMES[level]]


def action_arity(verb_id: int) -> int:
    return 1 + len(VERB_SLOTS[SYMBOLS[verb_id]])


def allowed_next(prefix) -> list[int]:
    """Token ids admissible at the next slot of a partially decoded action.

    Returns an empty list once the action is complete.
    """
    if not prefix:
        return VERB_IDS
    slots = VERB_SLOTS[SYMBOLS[prefix[0]]]
    pos = len(prefix) - 1
    if pos >= len(slots):
        return []
    return _SLOT_IDS[slots[pos]]


def allowed_mask(prefix) -> np.ndarray:
    """Boolean vocabulary mask of ``allowed_next(prefix)``."""
    slots = () if not prefix else VERB_SLOTS[SYMBOLS[prefix[0]]]
    key = "verb" if not prefix else (slots[len(prefix) - 1] if len(prefix) - 1 < len(slots) else None)
    return _MASKS[key]


def is_grammatical(action) -> bool:
    action = tuple(action)
    if not 1 <= len(action) <= 3 or action[0] not in VERB_IDS:
        return False
    slots = VERB_SLOTS[SYMBOLS[action[0]]]
    if len(action) != 1 + len(slots):
        return False
    return all(t in _SLOT_IDS[s] for t, s in zip(action[1:], slots))


def verb_class(action) -> str:
    return VERB_CLASS[SYMBOLS[action[0]]]
