"""Serialization helpers: lossless JSON, JSON Lines, atomic writes, hashing."""

import hashlib
import json
import math
import os
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError


def fmt_real(x):
    """17 significant digits, enough for a lossless float64 round trip."""
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite real {x!r}")
    return format(x, ".17g")


def dumps17(obj, indent=None, _level=0):
    """JSON encoder writing every float at 17 significant digits.

    Keys are emitted in insertion order; callers sort when they need a
    canonical form.
    """
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_real(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        items = [f"{json.dumps(str(k))}: {dumps17(v, indent, _level + 1)}" for k, v in obj.items()]
        return _join(items, "{", "}", indent, _level)
    if isinstance(obj, (list, tuple)):
        items = [dumps17(v, indent, _level + 1) for v in obj]
        # matrices stay one row per line
        if indent is not None and items and all(not isinstance(v, (list, tuple, dict, np.ndarray)) for v in obj):
            return "[" + ", ".join(items) + "]"
        return _join(items, "[", "]", indent, _level)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _join(items, left, right, indent, level):
    if not items:
        return left + right
    if indent is None:
        return left + ", ".join(items) + right
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    return left + "\n" + ",\n".join(pad + s for s in items) + "\n" + end + right


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write_text(path, dumps17(obj, indent=1) + "\n")


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"missing artifact: {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from None


def write_jsonl(path, rows):
    atomic_write_text(path, "".join(dumps17(r) + "\n" for r in rows))


def read_jsonl(path):
    rows = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from None
    except FileNotFoundError:
        raise FormatError(f"missing artifact: {path}") from None
    return rows


def write_sequences(path, seqs):
    write_jsonl(path, ({"tokens": [int(t) for t in s]} for s in seqs))


def read_sequences(path):
    seqs = []
    for i, row in enumerate(read_jsonl(path)):
        if not isinstance(row, dict) or not isinstance(row.get("tokens"), list):
            raise FormatError(f"{path}: line {i + 1} lacks a 'tokens' list")
        toks = row["tokens"]
        if not all(isinstance(t, int) and not isinstance(t, bool) for t in toks):
            raise FormatError(f"{path}: line {i + 1} has non-integer tokens")
        seqs.append(toks)
    return seqs


def write_csv(path, header, rows):
    def cell(v):
        if v is None:
            return ""
        if isinstance(v, (bool, np.bool_)):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            return fmt_real(v)
        return str(v)

    lines = [",".join(header)]
    lines += [",".join(cell(v) for v in row) for row in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def rng_stream(seed, name):
    """Independent deterministic substream per purpose."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))
