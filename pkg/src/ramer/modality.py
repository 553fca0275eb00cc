"""Modality names and the short codes used in condition strings."""

MODALITIES = ("audio", "video", "text")
SHORT = {"audio": "a", "video": "v", "text": "l"}
FROM_SHORT = {v: k for k, v in SHORT.items()}
CODE = {"audio": 0, "video": 1, "text": 2}
FROM_CODE = {v: k for k, v in CODE.items()}

DEFAULT_DIMS = {"audio": 1024, "video": 768, "text": 5120}
HIDDEN = 256
N_CLASSES = 6


def check_modality(m: str) -> str:
    if m not in CODE:
        raise ValueError(f"unknown modality {m!r}; expected one of {MODALITIES}")
    return m
