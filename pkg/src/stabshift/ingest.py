"""External trajectory datasets: CSV ingestion, export, and the resampled batch protocol.

Data file columns: ``traj_id, step, t, <feature columns...>, label`` with one row
per (trajectory, step); ``label`` is 1 for a stable trajectory and 0 otherwise.
Manifest columns: ``traj_id, split`` with split in {train, holdout, test}.
The context of a trajectory is its first-step feature row.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError
from .latent_tests import TestResult

SPLITS = ("train", "holdout", "test")
STD_FLOOR = 1e-8


@dataclass
class IngestedDataset:
    traj_ids: list[str]
    feature_names: list[str]
    contexts: np.ndarray  # (n, k) raw first-step rows
    trajectories: list[np.ndarray]  # each (K_i, k), raw
    times: list[np.ndarray]
    labels: np.ndarray  # bool, True = stable
    splits: np.ndarray  # str
    mean: np.ndarray  # fitted on the train split
    std: np.ndarray

    def __post_init__(self):
        n = len(self.traj_ids)
        if not (len(self.contexts) == len(self.trajectories) == len(self.labels) == len(self.splits) == n):
            raise ValueError("contexts, trajectories, labels and splits must have equal counts")

    def standardize(self, a) -> np.ndarray:
        return (np.asarray(a, dtype=float) - self.mean) / self.std

    @property
    def contexts_std(self) -> np.ndarray:
        return self.standardize(self.contexts)

    def split_index(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return np.flatnonzero(self.splits == split)

    def stacked(self, idx=None) -> np.ndarray:
        """Trajectories as one ``(n, K, k)`` array (requires equal lengths)."""
        idx = np.arange(len(self.traj_ids)) if idx is None else idx
        lengths = {len(self.trajectories[i]) for i in idx}
        if len(lengths) != 1:
            raise ValueError("trajectories have different lengths")
        return np.stack([self.trajectories[i] for i in idx])


def _float(cell: str, path, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"non-numeric value {cell!r} in column {col!r}", path, row) from None
    if not np.isfinite(v):
        raise ParseError(f"non-finite value in column {col!r}", path, row)
    return v


def read_manifest(path) -> dict[str, str]:
    path = str(path)
    out: dict[str, str] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header[:2] != ["traj_id", "split"] or len(header) != 2:
            raise ParseError("manifest header must be 'traj_id, split'", path, 1)
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(f"expected 2 columns, found {len(row)}", path, row_no)
            tid, split = row[0].strip(), row[1].strip()
            if split not in SPLITS:
                raise ParseError(f"unknown split {split!r}", path, row_no)
            if tid in out:
                raise ParseError(f"duplicate trajectory id {tid!r}", path, row_no)
            out[tid] = split
    return out


def ingest_trajectory_csv(data_path, manifest_path) -> IngestedDataset:
    data_path = str(data_path)
    manifest = read_manifest(manifest_path)
    rows: dict[str, list] = {}
    labels: dict[str, float] = {}
    with open(data_path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header[:3] != ["traj_id", "step", "t"]:
            raise ParseError("header must start with 'traj_id, step, t'", data_path, 1)
        if header[-1] != "label":
            raise ParseError("missing 'label' column (must be last)", data_path, 1)
        features = header[3:-1]
        if not features:
            raise ParseError("no feature columns", data_path, 1)
        ncol = len(header)
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != ncol:
                raise ParseError(f"expected {ncol} columns, found {len(row)}", data_path, row_no)
            tid = row[0].strip()
            step = _float(row[1], data_path, row_no, "step")
            if step != int(step):
                raise ParseError("step must be an integer", data_path, row_no)
            t = _float(row[2], data_path, row_no, "t")
            feats = [_float(c, data_path, row_no, name) for c, name in zip(row[3:-1], features)]
            lab = _float(row[-1], data_path, row_no, "label")
            if lab not in (0.0, 1.0):
                raise ParseError("label must be 0 or 1", data_path, row_no)
            if tid in labels and labels[tid] != lab:
                raise ParseError(f"label changes within trajectory {tid!r}", data_path, row_no)
            labels[tid] = lab
            rows.setdefault(tid, []).append((int(step), t, feats, row_no))

    ids = list(rows)
    missing = [tid for tid in ids if tid not in manifest]
    if missing:
        raise ParseError(f"trajectory {missing[0]!r} is not in the manifest", str(manifest_path))
    extra = [tid for tid in manifest if tid not in rows]
    if extra:
        raise ParseError(f"manifest lists unknown trajectory {extra[0]!r}", str(manifest_path))

    trajs, times, ctxs = [], [], []
    for tid in ids:
        recs = sorted(rows[tid], key=lambda r: r[0])
        if len(recs) < 2:
            raise ParseError(f"trajectory {tid!r} has fewer than 2 steps", data_path, recs[0][3])
        steps = [r[0] for r in recs]
        if len(set(steps)) != len(steps):
            dup = next(r for r in recs if steps.count(r[0]) > 1)
            raise ParseError(f"duplicate step in trajectory {tid!r}", data_path, dup[3])
        arr = np.array([r[2] for r in recs], dtype=float)
        trajs.append(arr)
        times.append(np.array([r[1] for r in recs]))
        ctxs.append(arr[0])
    splits = np.array([manifest[tid] for tid in ids])
    contexts = np.array(ctxs)
    train = np.flatnonzero(splits == "train")
    if len(train) == 0:
        raise ParseError("manifest has no training trajectories", str(manifest_path))
    # standardization statistics from every recorded step of the training split
    pooled = np.concatenate([trajs[i] for i in train])
    mean, std = pooled.mean(0), np.maximum(pooled.std(0), STD_FLOOR)
    return IngestedDataset(
        ids, features, contexts, trajs, times, np.array([labels[t] == 1.0 for t in ids]), splits, mean, std
    )


def export_trajectory_csv(
    data_path, manifest_path, trajectories, stable, splits, times=None, traj_ids=None, feature_names=None
) -> None:
    """Write trajectories ``(n, K, k)`` (or a list of ``(K_i, k)``) in the ingestion format.

    Values are written with round-trip precision, so ingesting the files back
    reproduces the arrays bit for bit.
    """
    n = len(trajectories)
    traj_ids = [f"traj{i:06d}" for i in range(n)] if traj_ids is None else [str(t) for t in traj_ids]
    k = np.shape(trajectories[0])[-1]
    feature_names = [f"f{j + 1}" for j in range(k)] if feature_names is None else list(feature_names)
    with open(data_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["traj_id", "step", "t", *feature_names, "label"])
        for i in range(n):
            tr = np.asarray(trajectories[i], dtype=float)
            ts = np.arange(len(tr), dtype=float) if times is None else np.asarray(times[i] if np.ndim(times) > 1 else times)
            lab = int(bool(stable[i]))
            for s in range(len(tr)):
                w.writerow([traj_ids[i], s, repr(float(ts[s])), *(repr(float(x)) for x in tr[s]), lab])
    with open(manifest_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["traj_id", "split"])
        for tid, sp in zip(traj_ids, splits):
            w.writerow([tid, sp])


@dataclass(frozen=True)
class BatchProtocolResult:
    method: str
    rejection_rate: float
    std_error: float
    repetitions: int
    batch_size: int
    results: tuple[TestResult, ...]


def batch_protocol(test_fn, reference, test, batch_size: int = 512, repetitions: int = 200, seed=None, method=""):
    """Repeatedly draw reference and test batches with replacement and apply
    ``test_fn(ref_batch, test_batch, seed) -> TestResult``."""
    reference = np.asarray(reference, dtype=float)
    test = np.asarray(test, dtype=float)
    ss = np.random.SeedSequence(seed)
    results = []
    for child in ss.spawn(repetitions):
        rng = np.random.default_rng(child)
        a = reference[rng.integers(0, len(reference), batch_size)]
        b = test[rng.integers(0, len(test), batch_size)]
        results.append(test_fn(a, b, int(rng.integers(2**31))))
    rate = float(np.mean([r.reject for r in results]))
    return BatchProtocolResult(
        method, rate, float(np.sqrt(rate * (1 - rate) / repetitions)), repetitions, batch_size, tuple(results)
    )
