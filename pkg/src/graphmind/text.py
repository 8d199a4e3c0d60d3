from __future__ import annotations


def normalize_label(text: str) -> str:
    # "LiverProblem", "liver problem" and "liver_problem" share one key.
    pieces: list[str] = []
    pending_space = False
    previous = ""
    for index, char in enumerate(text):
        if not char.isalnum():
            pending_space = bool(pieces)
            previous = ""
            continue
        if previous and _is_camel_boundary(previous, char, text[index + 1 : index + 2]):
            pending_space = True
        if pending_space:
            pieces.append(" ")
            pending_space = False
        pieces.append(char)
        previous = char
    return "".join(pieces).casefold()


def tokenize(text: str) -> list[str]:
    return normalize_label(text).split()


def _is_camel_boundary(previous: str, current: str, following: str) -> bool:
    if not current.isupper():
        return False
    if previous.islower() or previous.isdigit():
        return True
    # "HTTPServer": split before the last capital of an acronym run
    return previous.isupper() and following.islower()
