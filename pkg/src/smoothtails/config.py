"""Flat ``key=value`` model configuration files.

One assignment per line; ``#`` starts a comment; blank lines are ignored.
``family``, ``d`` and ``N`` are required, ``s_max`` is the optional
user-declared moment bound.  Every other key must appear in
:data:`smoothtails.models.SCHEMA` and be valid for the chosen family;
anything else is rejected with :class:`~smoothtails.errors.ConfigError`.

Example::

    family=maxwell
    d=3
    N=2
    u.dist=lognormal
    u.sigma=0.4
"""
import hashlib

from .errors import ConfigError
from .models import ModelSpec

_TOP = ("family", "d", "N", "s_max")


def parse_config(text):
    """Parse configuration text into a :class:`ModelSpec`."""
    top, params = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value")
        target = top if key in _TOP else params
        if key in target:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        target[key] = value
    missing = [k for k in ("family", "d", "N") if k not in top]
    if missing:
        raise ConfigError(f"missing required keys {missing}")
    return ModelSpec(top["family"], top["d"], top["N"], params, top.get("s_max"))


def load_config(path):
    """Read a config file; returns ``(spec, sha256 of the file bytes)``."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise ConfigError(f"config {path} is not UTF-8") from None
    return parse_config(text), hashlib.sha256(raw).hexdigest()
