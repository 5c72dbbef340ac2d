"""Small file formats: CSV tables, key/value text, and the binary array container.

Binary container layout (used for checkpoints and exported models)::

    koopman-lora-arrays 1\n
    <key> = <value>\n            (any number of header lines, UTF-8)
    array <name> <d0>x<d1>...\n  (one line per array, in storage order; scalars use "-")
    end_header\n
    <raw little-endian float64 data of every array, concatenated in order>

Header values are plain strings; callers decide how to parse them.
"""
from __future__ import annotations

import csv
import os

import numpy as np

from .errors import InvalidInputError

MAGIC = "koopman-lora-arrays 1"
END = "end_header"


def _shape_str(shape):
    return "x".join(str(int(d)) for d in shape) if len(shape) else "-"


def _parse_shape(text):
    return () if text == "-" else tuple(int(d) for d in text.split("x"))


def save_arrays(path, header, arrays):
    """Write ``arrays`` (name -> ndarray) with a text ``header`` to ``path``."""
    lines = [MAGIC]
    for key, value in header.items():
        key = str(key)
        value = str(value)
        if "\n" in value or "=" in key or not key.strip():
            raise InvalidInputError(f"header entry {key!r} cannot be stored")
        lines.append(f"{key} = {value}")
    payload = []
    for name, arr in arrays.items():
        if " " in name:
            raise InvalidInputError(f"array name {name!r} contains a space")
        arr = np.asarray(arr, dtype="<f8")
        lines.append(f"array {name} {_shape_str(arr.shape)}")
        payload.append(np.ascontiguousarray(arr).tobytes())
    lines.append(END)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for chunk in payload:
            fh.write(chunk)
    os.replace(tmp, path)


def load_arrays(path):
    """Inverse of :func:`save_arrays`; returns ``(header, arrays)``."""
    with open(path, "rb") as fh:
        first = fh.readline().decode("utf-8").rstrip("\n")
        if first != MAGIC:
            raise InvalidInputError(f"{path} is not a koopman-lora array file")
        header, specs = {}, []
        while True:
            raw = fh.readline()
            if not raw:
                raise InvalidInputError(f"{path}: missing {END} marker")
            line = raw.decode("utf-8").rstrip("\n")
            if line == END:
                break
            if line.startswith("array "):
                _, name, shape = line.split(" ")
                specs.append((name, _parse_shape(shape)))
            else:
                key, _, value = line.partition(" = ")
                header[key] = value
        arrays = {}
        for name, shape in specs:
            count = int(np.prod(shape)) if shape else 1
            data = fh.read(8 * count)
            if len(data) != 8 * count:
                raise InvalidInputError(f"{path}: truncated data for {name}")
            arrays[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
    return header, arrays


def write_csv(path, header, rows):
    """Write rows with ``repr``-exact floats so files round-trip bit-for-bit."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_value(v) for v in row])


def format_value(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def read_csv(path):
    """Return ``(header, rows)`` with every cell as a string."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InvalidInputError(f"{path} is empty")
    return rows[0], rows[1:]


def write_keyvalue(path, items):
    with open(path, "w") as fh:
        for key, value in items.items():
            fh.write(f"{key} = {value}\n")


def read_keyvalue(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out
