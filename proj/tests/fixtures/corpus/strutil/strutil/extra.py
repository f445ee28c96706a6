import re

_WORD = re.compile(r"[A-Za-z]+")


def slugify(text):
    return "-".join(w.lower() for w in _WORD.findall(text))


def title_case(text):
    return " ".join(w.capitalize() for w in text.split())
