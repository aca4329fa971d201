"""Flat ``section.key = value`` configuration files.

Example::

    # comments start with '#'
    model.variant = ukan_ep_eca_after_pfa
    model.encoder_channels = (8, 16, 32)
    train.epochs = 50
    data.manifest = phantoms/manifest.csv

Values are Python literals where they parse as one (numbers, tuples,
booleans, ``None``); anything else is kept as a bare string.
"""

from __future__ import annotations

import ast

SECTIONS = ("model", "train", "data")


class ConfigError(ValueError):
    pass


def parse_value(text):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config(text, source="<string>"):
    """Return ``{section: {key: value}}`` for every known section."""
    out = {s: {} for s in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {raw!r}")
        lhs, rhs = line.split("=", 1)
        section, dot, key = lhs.strip().partition(".")
        if not dot or section not in out or not key:
            raise ConfigError(f"{source}:{lineno}: key {lhs.strip()!r} must be one of {', '.join(s + '.*' for s in SECTIONS)}")
        if key in out[section]:
            raise ConfigError(f"{source}:{lineno}: duplicate key {lhs.strip()!r}")
        out[section][key] = parse_value(rhs)
    return out


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read(), source=str(path))


def format_config(sections):
    lines = []
    for section in SECTIONS:
        for key, value in sections.get(section, {}).items():
            lines.append(f"{section}.{key} = {value!r}" if not isinstance(value, str) else f"{section}.{key} = {value}")
    return "\n".join(lines) + "\n"
