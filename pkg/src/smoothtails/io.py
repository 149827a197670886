"""Bit-stable serialization helpers.

Floats are written with 17 significant digits (``'%.17g'``), enough to
round-trip any double; ``nan``/``inf`` are written as ``NaN``,
``Infinity`` and ``-Infinity``.  All writes go to a temporary file in the
target directory and are renamed into place, so an interrupted command
never leaves a partial output behind.
"""
import io as _io
import json
import math
import os
import tempfile

import numpy as np


def fmt(x):
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return "%.17g" % x


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def _iterencode(o, indent, level=0):
    pad = "" if indent is None else "\n" + " " * (indent * (level + 1))
    end = "" if indent is None else "\n" + " " * (indent * level)
    sep = ","
    if isinstance(o, dict):
        if not o:
            yield "{}"
            return
        yield "{"
        for i, (k, v) in enumerate(o.items()):
            yield (sep if i else "") + pad + json.dumps(k) + ": "
            yield from _iterencode(v, indent, level + 1)
        yield end + "}"
    elif isinstance(o, list):
        if not o:
            yield "[]"
            return
        yield "["
        for i, v in enumerate(o):
            yield (sep if i else "") + pad
            yield from _iterencode(v, indent, level + 1)
        yield end + "]"
    elif isinstance(o, float) and not isinstance(o, bool):
        yield fmt(o)
    else:
        yield json.dumps(o)


def dumps(obj, indent=1):
    return "".join(_iterencode(_plain(obj), indent)) + "\n"


def atomic_write(path, data):
    """Write ``data`` (str or bytes) to ``path`` via temp file + rename."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write(path, dumps(obj))


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def csv_text(columns, rows, comments=None):
    buf = _io.StringIO()
    for c in comments or ():
        buf.write(f"# {c}\n")
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(fmt(v) if not isinstance(v, str) else v for v in row) + "\n")
    return buf.getvalue()


def write_csv(path, columns, rows, comments=None):
    """Write rows under a header line, preceded by optional ``# ...`` comment lines."""
    atomic_write(path, csv_text(columns, rows, comments))


def read_csv(path):
    """Read a numeric CSV written by :func:`write_csv`; returns (columns, array)."""
    with open(path, "r", encoding="utf-8") as fh:
        line = fh.readline()
        while line.startswith("#"):
            line = fh.readline()
        header = line.strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return header, data
