"""Per-frame feature storage, dataset manifests, clip partitioning and pooling.

SMSF feature file layout (little-endian)::

    bytes 0-3   b"SMSF"
    u32         version (1)
    u32         m, number of frames
    u32         d, feature dimension
    f64 * m*d   rows, row-major

Manifests are JSON-lines, one ``{"video_id", "feature_path", "label",
"num_frames"}`` object per video; ``feature_path`` is relative to the
manifest's directory.  Synthetic sets also carry a ground-truth sidecar of
``{"video_id", "informative_frames"}`` lines.
"""

import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DataError, FormatError, IoError

MAGIC = b"SMSF"
VERSION = 1
_HEADER = struct.Struct("<4sIII")

MANIFEST_NAME = "manifest.jsonl"
GROUND_TRUTH_NAME = "ground_truth.jsonl"
CENTROIDS_NAME = "centroids.smsf"


@dataclass
class FeatureMatrix:
    video_id: str
    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise ArgumentError(f"feature matrix must be m x d with m, d >= 1, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise DataError(f"non-finite feature value in {self.video_id!r}")
        self.rows = rows

    @property
    def m(self):
        return self.rows.shape[0]

    @property
    def d(self):
        return self.rows.shape[1]


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    feature_path: str
    label: int
    num_frames: int


@dataclass(frozen=True)
class ClipPartition:
    clip_len: int
    ranges: tuple

    def __len__(self):
        return len(self.ranges)


@dataclass(frozen=True)
class SynthConfig:
    num_videos: int = 200
    classes: int = 5
    frames_per_video: int = 32
    dim: int = 16
    informative_per_video: int = 4
    noise_sigma: float = 0.3
    seed: int = 1
    # "scattered": informative frames drawn uniformly without replacement;
    # "contiguous": one run of informative frames at a uniformly drawn start
    layout: str = "scattered"

    def validate(self):
        if self.num_videos < 1:
            raise ArgumentError("num_videos must be >= 1")
        if self.classes < 2:
            raise ArgumentError("need at least 2 classes")
        if self.frames_per_video < 1 or self.dim < 1:
            raise ArgumentError("frames_per_video and dim must be >= 1")
        if not 1 <= self.informative_per_video <= self.frames_per_video:
            raise ArgumentError("informative_per_video must lie in [1, frames_per_video]")
        if not (self.noise_sigma >= 0 and math.isfinite(self.noise_sigma)):
            raise ArgumentError("noise_sigma must be a finite value >= 0")
        if self.layout not in ("scattered", "contiguous"):
            raise ArgumentError(f"unknown layout {self.layout!r}")


# --------------------------------------------------------------------------
# binary feature files

def write_features(path, matrix):
    rows = matrix.rows if isinstance(matrix, FeatureMatrix) else np.asarray(matrix, dtype=np.float64)
    m, d = rows.shape
    payload = np.ascontiguousarray(rows, dtype="<f8").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, m, d))
            fh.write(payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_features(path, video_id=None):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, m, d = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if m < 1 or d < 1:
        raise FormatError(f"{path}: empty matrix m={m} d={d}")
    need = m * d * 8
    have = len(blob) - _HEADER.size
    if have != need:
        raise FormatError(f"{path}: payload has {have} bytes, header m={m}, d={d} needs {need}")
    rows = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).reshape(m, d).astype(np.float64)
    if video_id is None:
        video_id = Path(path).stem
    return FeatureMatrix(video_id, rows)


# --------------------------------------------------------------------------
# clips and pooling

def split_clips(m, K):
    if m <= 0 or K <= 0:
        raise ArgumentError(f"split_clips needs m >= 1 and K >= 1, got m={m}, K={K}")
    ranges = tuple((start, min(start + K, m)) for start in range(0, m, K))
    return ClipPartition(K, ranges)


def mean_pool(vectors):
    """Component-wise mean of a non-empty list of equal-length vectors.

    Repeated vectors count once per occurrence.
    """
    if len(vectors) == 0:
        raise ArgumentError("mean_pool of an empty list")
    try:
        arr = np.asarray(vectors, dtype=np.float64)
    except ValueError as exc:
        raise ArgumentError(f"mean_pool: ragged input ({exc})") from exc
    if arr.ndim != 2:
        raise ArgumentError(f"mean_pool expects a list of vectors, got shape {arr.shape}")
    return arr.mean(axis=0)


def clip_feature(matrix, rng):
    start, end = rng
    if not 0 <= start < end <= matrix.m:
        raise ArgumentError(f"clip range [{start}, {end}) outside [0, {matrix.m})")
    return matrix.rows[start:end].mean(axis=0)


def clip_features(matrix, partition):
    return np.stack([clip_feature(matrix, r) for r in partition.ranges])


# --------------------------------------------------------------------------
# manifests

def write_manifest(path, entries):
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps({"video_id": e.video_id, "feature_path": e.feature_path,
                                 "label": e.label, "num_frames": e.num_frames}) + "\n")


def read_manifest(path):
    entries = []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                entry = ManifestEntry(str(obj["video_id"]), str(obj["feature_path"]),
                                      int(obj["label"]), int(obj["num_frames"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad manifest line ({exc})") from exc
            if entry.video_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate video_id {entry.video_id!r}")
            if entry.label < 0 or entry.num_frames < 1:
                raise DataError(f"{path}:{lineno}: invalid label or num_frames")
            seen.add(entry.video_id)
            entries.append(entry)
    return entries


def load_video(entry, root):
    """Read the features for one manifest entry, checking the frame count."""
    fm = read_features(os.path.join(root, entry.feature_path), entry.video_id)
    if fm.m != entry.num_frames:
        raise DataError(f"{entry.video_id}: manifest says {entry.num_frames} frames, file has {fm.m}")
    return fm


def split_train_heldout(entries, seed, train_fraction=0.8):
    """Seeded shuffle then cut; both halves come back sorted by video_id."""
    order = np.random.default_rng(seed).permutation(len(entries))
    cut = int(round(train_fraction * len(entries)))
    train = sorted((entries[i] for i in order[:cut]), key=lambda e: e.video_id)
    held = sorted((entries[i] for i in order[cut:]), key=lambda e: e.video_id)
    return train, held


def read_ground_truth(path):
    truth = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                truth[obj["video_id"]] = list(obj["informative_frames"])
    return truth


# --------------------------------------------------------------------------
# synthetic benchmark

def _sample_centroids(rng, classes, dim, max_cos=0.3, max_tries=100000):
    cents = []
    tries = 0
    while len(cents) < classes:
        tries += 1
        if tries > max_tries:
            raise ArgumentError(f"cannot place {classes} centroids in d={dim} with cosine <= {max_cos}")
        v = rng.standard_normal(dim)
        norm = np.linalg.norm(v)
        if norm == 0:
            continue
        v /= norm
        if all(float(v @ c) <= max_cos for c in cents):
            cents.append(v)
    return np.stack(cents)


def generate_synthetic(config, out_dir):
    """Write a planted-frame benchmark and return the manifest path.

    Each video gets a class ``c`` and one wrong class ``c' != c``.  Exactly
    ``informative_per_video`` frames sit at centroid ``c``; the rest sit at
    centroid ``c'``; every frame gets isotropic gaussian noise.
    """
    config.validate()
    out = Path(out_dir)
    try:
        (out / "features").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise IoError(f"{out} is not writable")

    rng = np.random.default_rng(config.seed)
    C, m, d, p = config.classes, config.frames_per_video, config.dim, config.informative_per_video
    cents = _sample_centroids(rng, C, d)
    write_features(out / CENTROIDS_NAME, cents)

    entries, truth = [], []
    for i in range(config.num_videos):
        vid = f"vid{i:05d}"
        label = int(rng.integers(C))
        wrong = int(rng.integers(C - 1))
        wrong += wrong >= label
        if config.layout == "contiguous":
            start = int(rng.integers(m - p + 1))
            informative = np.arange(start, start + p)
        else:
            informative = np.sort(rng.choice(m, size=p, replace=False))
        rows = np.repeat(cents[wrong][None, :], m, axis=0)
        rows[informative] = cents[label]
        if config.noise_sigma > 0:
            rows = rows + config.noise_sigma * rng.standard_normal((m, d))
        rel = f"features/{vid}.smsf"
        write_features(out / rel, rows)
        entries.append(ManifestEntry(vid, rel, label, m))
        truth.append({"video_id": vid, "informative_frames": [int(j) for j in informative]})

    manifest = out / MANIFEST_NAME
    write_manifest(manifest, entries)
    with open(out / GROUND_TRUTH_NAME, "w") as fh:
        for t in truth:
            fh.write(json.dumps(t) + "\n")
    return manifest
