"""Text formats for frame pairs and flow fields.

Pair file::

    BIFLOW-PAIR v1 <n_source> <n_target> <n_feat>
    S x y z f1 .. fC        (n_source lines)
    T x y z f1 .. fC        (n_target lines)

Flow file::

    BIFLOW-FLOW v1 <n> [mask]
    vx vy vz [m]            (n lines; m in {0, 1} when the header says mask)

Lines starting with '#' and blank lines are ignored.  Floats are written with
17 significant digits so a write/read cycle is lossless.
"""

from __future__ import annotations

import math
import os
import tempfile
from pathlib import Path
from typing import Iterator

import numpy as np

from .geometry import FramePair, PointCloud

PAIR_MAGIC = "BIFLOW-PAIR"
FLOW_MAGIC = "BIFLOW-FLOW"


class FormatError(ValueError):
    def __init__(self, path, lineno: int | None, msg: str):
        where = f"{path}:{lineno}" if lineno is not None else str(path)
        super().__init__(f"{where}: {msg}")
        self.lineno = lineno


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _content_lines(path) -> Iterator[tuple[int, list[str]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            yield lineno, s.split()


def _floats(path, lineno, tokens) -> list[float]:
    out = []
    for t in tokens:
        try:
            v = float(t)
        except ValueError:
            raise FormatError(path, lineno, f"not a number: {t!r}") from None
        if not math.isfinite(v):
            raise FormatError(path, lineno, f"non-finite value {t!r}")
        out.append(v)
    return out


def _count(path, lineno, token, what) -> int:
    try:
        v = int(token)
    except ValueError:
        raise FormatError(path, lineno, f"bad {what} {token!r}") from None
    if v < 0:
        raise FormatError(path, lineno, f"negative {what} {v}")
    return v


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the same directory so failures leave nothing behind."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_pair(pair: FramePair) -> str:
    src_c, src_f = np.asarray(pair.source.coords), np.asarray(pair.source.feats)
    tgt_c, tgt_f = np.asarray(pair.target.coords), np.asarray(pair.target.feats)
    if src_f.shape[1] != tgt_f.shape[1]:
        raise ValueError("write_pair: source and target feature widths differ")
    lines = [f"{PAIR_MAGIC} v1 {len(src_c)} {len(tgt_c)} {src_f.shape[1]}"]
    for tag, c, f in (("S", src_c, src_f), ("T", tgt_c, tgt_f)):
        for row_c, row_f in zip(c, f):
            lines.append(" ".join([tag, *map(_fmt, row_c), *map(_fmt, row_f)]))
    return "\n".join(lines) + "\n"


def write_pair(pair: FramePair, path) -> None:
    atomic_write_text(path, format_pair(pair))


def read_pair(path) -> FramePair:
    lines = _content_lines(path)
    try:
        lineno, head = next(lines)
    except StopIteration:
        raise FormatError(path, None, "empty file") from None
    if len(head) != 5 or head[0] != PAIR_MAGIC or head[1] != "v1":
        raise FormatError(path, lineno, f"expected '{PAIR_MAGIC} v1 n_source n_target n_feat'")
    n_s, n_t, n_f = (_count(path, lineno, t, "count") for t in head[2:])
    rows = {"S": [], "T": []}
    expected = n_s + n_t
    seen = 0
    last = lineno
    for lineno, tok in lines:
        last = lineno
        seen += 1
        if seen > expected:
            raise FormatError(path, lineno, f"more than the {expected} point lines declared")
        tag = "S" if seen <= n_s else "T"
        if tok[0] != tag:
            raise FormatError(path, lineno, f"expected a '{tag}' line, got {tok[0]!r}")
        if len(tok) != 4 + n_f:
            raise FormatError(path, lineno, f"expected {4 + n_f} fields, got {len(tok)}")
        rows[tag].append(_floats(path, lineno, tok[1:]))
    if seen < expected:
        missing = seen + 1
        tag = "S" if missing <= n_s else "T"
        idx = missing if tag == "S" else missing - n_s
        raise FormatError(
            path, last, f"truncated: missing point line {missing} of {expected} ({tag} point {idx})"
        )
    if n_s == 0 or n_t == 0:
        raise FormatError(path, None, "both frames need at least one point")
    s = np.array(rows["S"], dtype=np.float64).reshape(n_s, 3 + n_f)
    t = np.array(rows["T"], dtype=np.float64).reshape(n_t, 3 + n_f)
    return FramePair(PointCloud(s[:, :3], s[:, 3:]), PointCloud(t[:, :3], t[:, 3:]))


def format_flow(flow: np.ndarray, mask: np.ndarray | None = None) -> str:
    flow = np.asarray(flow)
    if flow.ndim != 2 or flow.shape[1] != 3:
        raise ValueError(f"write_flow: expected (n, 3), got {flow.shape}")
    head = f"{FLOW_MAGIC} v1 {len(flow)}" + (" mask" if mask is not None else "")
    lines = [head]
    for i, v in enumerate(flow):
        row = " ".join(map(_fmt, v))
        if mask is not None:
            row += f" {int(bool(mask[i]))}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def write_flow(flow, path, mask=None) -> None:
    atomic_write_text(path, format_flow(flow, mask))


def read_flow(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Returns (flow, mask); mask is None when the file carries no mask column."""
    lines = _content_lines(path)
    try:
        lineno, head = next(lines)
    except StopIteration:
        raise FormatError(path, None, "empty file") from None
    if len(head) not in (3, 4) or head[0] != FLOW_MAGIC or head[1] != "v1":
        raise FormatError(path, lineno, f"expected '{FLOW_MAGIC} v1 n [mask]'")
    if len(head) == 4 and head[3] != "mask":
        raise FormatError(path, lineno, f"unknown header flag {head[3]!r}")
    n = _count(path, lineno, head[2], "count")
    has_mask = len(head) == 4
    width = 4 if has_mask else 3
    vecs, bits = [], []
    last = lineno
    for lineno, tok in lines:
        last = lineno
        if len(vecs) == n:
            raise FormatError(path, lineno, f"more than the {n} rows declared")
        if len(tok) != width:
            raise FormatError(path, lineno, f"expected {width} fields, got {len(tok)}")
        vecs.append(_floats(path, lineno, tok[:3]))
        if has_mask:
            if tok[3] not in ("0", "1"):
                raise FormatError(path, lineno, f"mask bit must be 0 or 1, got {tok[3]!r}")
            bits.append(tok[3] == "1")
    if len(vecs) < n:
        raise FormatError(path, last, f"truncated: missing row {len(vecs) + 1} of {n}")
    flow = np.array(vecs, dtype=np.float64).reshape(n, 3)
    return flow, (np.array(bits, dtype=bool) if has_mask else None)
