"""Text formats: KITTI pose files, correspondence and result CSVs, key=value configs."""

from __future__ import annotations

import csv
import io
from dataclasses import fields
from pathlib import Path

import numpy as np

from ..geometry import MotionParams, motion_from_pose, rotation_from_angles, translation_from_polar
from ..prior import PoseSequence
from ..tracking import Status
from .metrics import TrialRecord

DEGENERATE_STEP = 1e-9


class ParseError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class DegenerateStep(UserWarning):
    """A pose transition without translation; it cannot define a direction."""


def _read_lines(path):
    return Path(path).read_text().splitlines()


def read_kitti_poses(path) -> list:
    """Absolute camera-to-world poses as (R, o) pairs; blank lines are ignored."""
    poses = []
    for no, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 12:
            raise ParseError(f"expected 12 values, found {len(parts)}", no)
        try:
            vals = np.array([float(v) for v in parts])
        except ValueError as exc:
            raise ParseError(str(exc), no) from None
        if not np.all(np.isfinite(vals)):
            raise ParseError("non-finite value", no)
        T = vals.reshape(3, 4)
        poses.append((T[:, :3].copy(), T[:, 3].copy()))
    return poses


def relative_motion(R1, o1, R2, o2):
    """(R, t_scaled) with X2 = R X1 - t_scaled for camera-to-world poses (R_i, o_i)."""
    return R2.T @ R1, R2.T @ (o2 - o1)


def load_kitti_poses(path) -> PoseSequence:
    """Consecutive relative motions of a KITTI odometry pose file.

    Transitions with (near) zero translation are skipped; their positions are
    recorded in ``breaks`` and in ``degenerate_steps`` (index of the first pose
    of the pair).
    """
    poses = read_kitti_poses(path)
    params, breaks, skipped = [], [], []
    pending_break = False
    for i in range(len(poses) - 1):
        R, t = relative_motion(*poses[i], *poses[i + 1])
        n = np.linalg.norm(t)
        if n < DEGENERATE_STEP:
            skipped.append(i)
            pending_break = bool(params)
            continue
        if pending_break:
            breaks.append(len(params))
            pending_break = False
        params.append(motion_from_pose(R, t / n))
    seq = PoseSequence(params, source=str(path), breaks=tuple(breaks))
    seq.degenerate_steps = tuple(skipped)
    return seq


def poses_from_motion(params, steps=1.0, R0=None, o0=None) -> list:
    """Integrate relative motions into camera-to-world poses (inverse of load_kitti_poses)."""
    R = np.eye(3) if R0 is None else np.asarray(R0, dtype=float)
    o = np.zeros(3) if o0 is None else np.asarray(o0, dtype=float)
    steps = np.broadcast_to(np.asarray(steps, dtype=float), (len(params),))
    out = [(R, o)]
    for p, s in zip(params, steps):
        Rr = rotation_from_angles(p)
        t = translation_from_polar(p.alpha, p.beta) if isinstance(p, MotionParams) else translation_from_polar(p[3], p[4])
        R2 = R @ Rr.T
        o = o + s * (R2 @ t)
        R = R2
        out.append((R, o))
    return out


def write_kitti_poses(path, poses) -> None:
    with open(path, "w") as fh:
        for R, o in poses:
            T = np.column_stack([R, o])
            fh.write(" ".join(repr(float(v)) for v in T.ravel()) + "\n")


CORRESPONDENCE_HEADER = ["k", "x0", "x1", "y0", "y1", "status"]


def write_correspondences(path, xs, ys, status=None) -> None:
    xs = np.asarray(xs, dtype=float).reshape(-1, 2)
    ys = np.asarray(ys, dtype=float).reshape(-1, 2)
    status = np.zeros(len(xs), int) if status is None else np.asarray(status, int)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CORRESPONDENCE_HEADER)
        for k in range(len(xs)):
            w.writerow([k, repr(float(xs[k, 0])), repr(float(xs[k, 1])), repr(float(ys[k, 0])),
                        repr(float(ys[k, 1])), Status(int(status[k])).name])


def _parse_status(text, line):
    text = text.strip()
    if text.upper() in Status.__members__:
        return int(Status[text.upper()])
    try:
        return int(Status(int(text)))
    except ValueError:
        raise ParseError(f"unknown status {text!r}", line) from None


def read_correspondences(path):
    """Returns (xs, ys, status) sorted by k."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != CORRESPONDENCE_HEADER:
        raise ParseError(f"expected header {','.join(CORRESPONDENCE_HEADER)}", 1)
    ks, xs, ys, st = [], [], [], []
    for no, row in enumerate(rows[1:], start=2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 6:
            raise ParseError(f"expected 6 fields, found {len(row)}", no)
        try:
            ks.append(int(row[0]))
            xs.append((float(row[1]), float(row[2])))
            ys.append((float(row[3]), float(row[4])))
        except ValueError as exc:
            raise ParseError(str(exc), no) from None
        st.append(_parse_status(row[5], no))
    order = np.argsort(ks, kind="stable")
    if len(set(ks)) != len(ks):
        raise ParseError("duplicate feature index")
    return (np.array(xs, float).reshape(-1, 2)[order], np.array(ys, float).reshape(-1, 2)[order],
            np.array(st, int)[order])


_RESULT_TYPES = {f.name: f.type for f in fields(TrialRecord)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def results_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = TrialRecord.columns()
    w.writerow(cols)
    for r in records:
        w.writerow([_format(getattr(r, c)) for c in cols])
    return buf.getvalue()


def write_results(path, records) -> None:
    Path(path).write_text(results_csv(records))


def _parse_field(name, text, line):
    kind = _RESULT_TYPES[name]
    try:
        if kind in ("bool", bool):
            if text not in ("0", "1"):
                raise ValueError(f"expected 0 or 1, got {text!r}")
            return text == "1"
        if kind in ("int", int):
            return int(text)
        if kind in ("float", float):
            return float(text)
        return text
    except ValueError as exc:
        raise ParseError(f"{name}: {exc}", line) from None


def read_results(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    cols = TrialRecord.columns()
    if not rows or rows[0] != cols:
        raise ParseError("unexpected results header", 1)
    out = []
    for no, row in enumerate(rows[1:], start=2):
        if len(row) != len(cols):
            raise ParseError(f"expected {len(cols)} fields, found {len(row)}", no)
        try:
            out.append(TrialRecord(**{c: _parse_field(c, v, no) for c, v in zip(cols, row)}))
        except ParseError:
            raise
        except ValueError as exc:
            raise ParseError(str(exc), no) from None
    return out


def read_kv(path) -> dict:
    """Flat ``key = value`` text; '#' starts a comment."""
    out = {}
    for no, line in enumerate(_read_lines(path), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected key = value", no)
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ParseError("empty key", no)
        if k in out:
            raise ParseError(f"duplicate key {k!r}", no)
        out[k] = v
    return out


def write_kv(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
