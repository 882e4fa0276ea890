"""Plain-text storage for segments, match results and forecasts.

Segments and matches are JSON lines (floats round-trip exactly through
``repr``); forecasts are tab-separated with one segment per row.
"""

import hashlib
import json
import os

import numpy as np

from .iob import InsulinEvent
from .matching import MatchResult
from .segments import Segment

SEGMENTS_FILE = "segments.jsonl"
MATCHES_FILE = "matches.jsonl"
PREDICTIONS_FILE = "predictions.tsv"


class MissingArtifact(FileNotFoundError):
    """A predecessor stage has not produced its output yet."""

    def __init__(self, path, stage):
        super().__init__(f"{path} not found; run the '{stage}' stage first")
        self.path = path
        self.stage = stage


def require(path, stage):
    if not os.path.exists(path):
        raise MissingArtifact(path, stage)
    return path


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, inputs):
    """Record sha256 hashes of the files a stage consumed."""
    with open(os.path.join(out_dir, "manifest.tsv"), "w") as fh:
        fh.write("input\tsha256\n")
        for path in sorted(inputs):
            fh.write(f"{os.path.relpath(path, out_dir)}\t{sha256(path)}\n")


def _floats(a):
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def segment_to_dict(seg, split=None):
    rec = {
        "patient_id": seg.patient_id,
        "decision_time": seg.decision_time,
        "history_cgm": _floats(seg.history_cgm),
        "history_mask": [int(v) for v in seg.history_mask],
        "history_observed": [int(v) for v in seg.history_observed],
        "future_cgm": _floats(seg.future_cgm),
        "insulin_context": [[e.kind, e.time, e.amount, e.duration] for e in seg.insulin_context],
        "qc_flags": sorted(seg.qc_flags),
        "iob_hist": None if seg.iob_hist is None else _floats(seg.iob_hist),
        "iob_fut": None if seg.iob_fut is None else _floats(seg.iob_fut),
    }
    if split is not None:
        rec["split"] = split
    return rec


def segment_from_dict(rec):
    seg = Segment(
        patient_id=rec["patient_id"],
        decision_time=float(rec["decision_time"]),
        history_cgm=np.array(rec["history_cgm"], dtype=float),
        history_mask=np.array(rec["history_mask"], dtype=bool),
        history_observed=np.array(rec["history_observed"], dtype=bool),
        future_cgm=np.array(rec["future_cgm"], dtype=float),
        insulin_context=[InsulinEvent(*e) for e in rec["insulin_context"]],
        qc_flags=frozenset(rec["qc_flags"]),
        iob_hist=None if rec["iob_hist"] is None else np.array(rec["iob_hist"], dtype=float),
        iob_fut=None if rec["iob_fut"] is None else np.array(rec["iob_fut"], dtype=float),
    )
    return seg, rec.get("split")


def write_segments(path, segments, splits=None):
    with open(path, "w") as fh:
        for seg in segments:
            split = None if splits is None else splits[seg.patient_id]
            fh.write(json.dumps(segment_to_dict(seg, split)) + "\n")


def read_segments(path):
    """Returns ``(segments, splits)`` with ``splits`` aligned to ``segments``."""
    segs, splits = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                seg, split = segment_from_dict(json.loads(line))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            segs.append(seg)
            splits.append(split)
    return segs, splits


def write_matches(path, results):
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps({
                "segment_id": r.segment_id, "twin_id": r.twin_id, "rmse": r.rmse,
                "u_basal_mean": r.u_basal_mean,
                "X_hist": np.asarray(r.X_hist).tolist(), "X_fut": np.asarray(r.X_fut).tolist(),
            }) + "\n")


def read_matches(path):
    """``{segment_id: MatchResult}``."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                rec = json.loads(line)
                out[rec["segment_id"]] = MatchResult(
                    twin_id=int(rec["twin_id"]), rmse=float(rec["rmse"]),
                    X_hist=np.array(rec["X_hist"], dtype=float),
                    X_fut=np.array(rec["X_fut"], dtype=float),
                    u_basal_mean=float(rec["u_basal_mean"]), segment_id=rec["segment_id"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_predictions(path, ids, predictions):
    predictions = np.asarray(predictions, dtype=float)
    with open(path, "w") as fh:
        fh.write("segment_id\t" + "\t".join(f"h{i}" for i in range(1, predictions.shape[1] + 1))
                 + "\n")
        for sid, row in zip(ids, predictions):
            fh.write(sid + "\t" + "\t".join(format(v, ".17g") for v in row) + "\n")


def read_predictions(path):
    """``{segment_id: (48,) array}``."""
    out = {}
    with open(path) as fh:
        fh.readline()
        for lineno, line in enumerate(fh, start=2):
            cells = line.rstrip("\n").split("\t")
            try:
                out[cells[0]] = np.array([float(v) for v in cells[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out
