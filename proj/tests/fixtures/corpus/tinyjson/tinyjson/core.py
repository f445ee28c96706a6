import json


def load_settings(path):
    with open(path) as fh:
        return json.load(fh)


def merge(base, override):
    out = dict(base)
    out.update(override)
    return out
