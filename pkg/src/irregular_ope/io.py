"""Trajectory CSV format.

First line ``d,m``; then one row per observation ``k,T_k,X_k,S_k[0..d-1],A_k,R(T_k)``
with R(T_0) left blank (and A_K blank when the final action is absent).
Each trajectory is a block of rows starting again at k = 0. Floats are
written with ``repr`` so a write/read round trip is exact.
"""

from __future__ import annotations

import csv
import io

import numpy as np

from .core import Dataset, Trajectory


class FormatError(ValueError):
    pass


def _fmt(v) -> str:
    return repr(float(v))


def write_trajectories(dataset: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(dumps_trajectories(dataset))


def dumps_trajectories(dataset: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([dataset.d, dataset.m])
    for tr in dataset.trajectories:
        for k in range(tr.K + 1):
            a = str(int(tr.actions[k])) if k < len(tr.actions) else ""
            r = _fmt(tr.rewards[k - 1]) if k >= 1 else ""
            w.writerow([k, _fmt(tr.times[k]), _fmt(tr.gaps[k]), *map(_fmt, tr.states[k]), a, r])
    return buf.getvalue()


def read_trajectories(path) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        return loads_trajectories(fh.read())


def loads_trajectories(text: str) -> Dataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise FormatError("empty trajectory file")
    try:
        d, m = int(rows[0][0]), int(rows[0][1])
    except (ValueError, IndexError):
        raise FormatError("first line must be 'd,m'") from None
    width = 5 + d
    blocks, cur = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise FormatError(f"line {lineno}: expected {width} fields, got {len(row)}")
        try:
            k = int(row[0])
        except ValueError:
            raise FormatError(f"line {lineno}: bad index {row[0]!r}") from None
        if k == 0:
            if cur:
                blocks.append(cur)
            cur = []
        elif k != len(cur):
            raise FormatError(f"line {lineno}: index {k} out of sequence")
        cur.append(row)
    if cur:
        blocks.append(cur)
    trajs = []
    for block in blocks:
        T = [float(r[1]) for r in block]
        X = [float(r[2]) for r in block]
        S = [[float(v) for v in r[3:3 + d]] for r in block]
        A = [int(r[3 + d]) for r in block if r[3 + d] != ""]
        R = [float(r[4 + d]) for r in block[1:]]
        if block[0][4 + d] != "":
            raise FormatError("R(T_0) must be blank")
        trajs.append(Trajectory(np.array(T), np.array(X), np.array(S).reshape(len(T), d),
                                np.array(A, dtype=np.int64), np.array(R)))
    if not trajs:
        raise FormatError("no trajectories")
    return Dataset(trajs, d=d, m=m)
