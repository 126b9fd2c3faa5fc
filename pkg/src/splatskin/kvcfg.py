"""Flat `key = value` text files with dotted keys for nesting.

Values are parsed as int, then float, then bool literals, falling back to
the raw string; whitespace-separated numeric lists come back as tuples.
Comments start with '#'. This covers manifests and train configs without
pulling in a markup language.
"""


def _parse_scalar(tok):
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        pass
    if tok in ("true", "false"):
        return tok == "true"
    return tok


def parse(text):
    out = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        toks = val.split()
        if not key or not toks:
            raise ValueError(f"line {ln}: empty key or value in {raw!r}")
        parsed = tuple(_parse_scalar(t) for t in toks)
        out[key] = parsed if len(parsed) > 1 else parsed[0]
    return out


def load(path):
    with open(path) as f:
        return parse(f.read())


def fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return " ".join(fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump(path, mapping):
    with open(path, "w") as f:
        for k, v in mapping.items():
            f.write(f"{k} = {fmt(v)}\n")
