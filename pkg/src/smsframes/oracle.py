"""Loss oracles: the frozen recognition model that scores frame combinations.

An oracle is any object with ``loss(video_id, frames) -> float``.  Oracles
that can also score a raw aggregated feature expose
``loss_vector(video_id, vector)``; the clip phase of hierarchical search
uses it to score clip mean-features directly.

The built-in oracle is a linear softmax probe over mean-pooled features.
``RemoteOracle`` talks to a child process over line-delimited JSON::

    request   {"id": 7, "video_id": "vid00003", "frames": [4, 4, 19]}
    response  {"id": 7, "loss": 0.4213}
"""

import json
import math
import shlex
import subprocess
import threading
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import ArgumentError, DataError, FormatError, OracleUnavailable, ProtocolError
from .features import load_video


@dataclass
class LinearProbe:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ArgumentError(f"probe shapes W{self.W.shape} b{self.b.shape} disagree")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise DataError("probe has non-finite weights")

    @property
    def classes(self):
        return self.W.shape[0]

    @property
    def d(self):
        return self.W.shape[1]

    def logits(self, x):
        return self.W @ x + self.b

    def vector_loss(self, x, label):
        z = self.logits(x)
        return max(float(logsumexp(z) - z[label]), 0.0)

    def predict(self, x):
        return int(np.argmax(self.logits(x)))

    def to_json(self):
        return {"C": self.classes, "d": self.d, "W": self.W.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_json(cls, obj):
        try:
            probe = cls(np.array(obj["W"], dtype=np.float64), np.array(obj["b"], dtype=np.float64))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad probe object: {exc}") from exc
        if probe.classes != obj["C"] or probe.d != obj["d"]:
            raise FormatError("probe header C/d disagree with weight shapes")
        return probe


def save_probe(path, probe):
    with open(path, "w") as fh:
        json.dump(probe.to_json(), fh)


def load_probe(path):
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    return LinearProbe.from_json(obj)


def fit_linear_probe(inputs, labels, classes=None, epochs=500, lr=1.0, seed=0, l2=0.0):
    """Multinomial logistic regression by full-batch gradient descent.

    ``inputs`` is an (N, d) array of pooled video features.
    """
    X = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) == 0:
        raise DataError("probe inputs must be a non-empty (N, d) array")
    if len(y) != len(X):
        raise DataError("inputs and labels differ in length")
    if classes is None:
        classes = int(y.max()) + 1
    if classes < 2:
        raise ArgumentError("a probe needs at least 2 classes")
    if y.min() < 0 or y.max() >= classes:
        raise DataError(f"labels must lie in [0, {classes})")
    if epochs < 1 or not lr > 0 or l2 < 0:
        raise ArgumentError("epochs >= 1, lr > 0 and l2 >= 0 required")

    rng = np.random.default_rng(seed)
    N, d = X.shape
    W = 0.01 * rng.standard_normal((classes, d))
    b = np.zeros(classes)
    onehot = np.eye(classes)[y]
    for _ in range(epochs):
        P = softmax(X @ W.T + b, axis=1)
        G = (P - onehot) / N
        W -= lr * (G.T @ X + l2 * W)
        b -= lr * G.sum(axis=0)
    return LinearProbe(W, b)


def probe_cross_entropy(probe, inputs, labels):
    return float(np.mean([probe.vector_loss(x, int(t)) for x, t in zip(inputs, labels)]))


def probe_loss(probe, features, combination, label):
    idx = np.asarray(combination, dtype=np.int64)
    if idx.size == 0:
        raise ArgumentError("empty combination")
    if idx.min() < 0 or idx.max() >= features.m:
        raise ArgumentError(f"frame index out of range [0, {features.m})")
    if not 0 <= label < probe.classes:
        raise ArgumentError(f"label {label} outside [0, {probe.classes})")
    return probe.vector_loss(features.rows[idx].mean(axis=0), label)


def pooled_training_set(entries, root, truth=None):
    """Pool each video into one vector for probe fitting.

    With a ground-truth map the informative frames are pooled, otherwise all
    frames.
    """
    X, y, d = [], [], None
    for e in entries:
        fm = load_video(e, root)
        if d is None:
            d = fm.d
        elif fm.d != d:
            raise DataError(f"{e.video_id}: feature dim {fm.d}, expected {d}")
        rows = fm.rows if truth is None else fm.rows[truth[e.video_id]]
        X.append(rows.mean(axis=0))
        y.append(e.label)
    return np.stack(X), np.array(y)


class ProbeOracle:
    """Linear-probe oracle over an in-memory set of videos."""

    def __init__(self, probe, videos):
        # videos: video_id -> (FeatureMatrix, label)
        self.probe = probe
        self.videos = videos

    @classmethod
    def single(cls, probe, features, label):
        return cls(probe, {features.video_id: (features, label)})

    def loss(self, video_id, frames):
        fm, label = self.videos[video_id]
        return probe_loss(self.probe, fm, frames, label)

    def loss_vector(self, video_id, vector):
        _, label = self.videos[video_id]
        return self.probe.vector_loss(np.asarray(vector, dtype=np.float64), label)


class CountingOracle:
    """Counts every loss call made through it.

    ``limit`` is a hard ceiling: a call past it is a search bug and raises
    ``AssertionError``.
    """

    def __init__(self, inner, limit=None):
        self.inner = inner
        self.limit = limit
        self.eval_count = 0
        self._lock = threading.Lock()

    def _tick(self):
        with self._lock:
            self.eval_count += 1
            assert self.limit is None or self.eval_count <= self.limit, (
                f"oracle budget {self.limit} exceeded")

    def loss(self, video_id, frames):
        self._tick()
        return self.inner.loss(video_id, frames)

    @property
    def supports_vectors(self):
        return hasattr(self.inner, "loss_vector")

    def loss_vector(self, video_id, vector):
        self._tick()
        return self.inner.loss_vector(video_id, vector)


class RemoteOracle:
    """Loss oracle served by a child process speaking the stdio protocol.

    One request is in flight at a time; use one instance per worker.
    """

    def __init__(self, command):
        if isinstance(command, str):
            command = shlex.split(command)
        try:
            self._proc = subprocess.Popen(
                command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, encoding="utf-8", bufsize=1)
        except OSError as exc:
            raise OracleUnavailable(f"cannot spawn {command!r}: {exc}") from exc
        self._next_id = 0

    def loss(self, video_id, frames):
        req_id = self._next_id
        self._next_id += 1
        msg = json.dumps({"id": req_id, "video_id": video_id, "frames": [int(f) for f in frames]})
        try:
            self._proc.stdin.write(msg + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, ValueError, OSError) as exc:
            raise OracleUnavailable(f"oracle process gone: {exc}") from exc
        line = self._proc.stdout.readline()
        if not line:
            raise OracleUnavailable(f"oracle closed its output (exit code {self._proc.poll()})")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"malformed response {line!r}") from exc
        if not isinstance(reply, dict) or "id" not in reply or "loss" not in reply:
            raise ProtocolError(f"response missing id/loss: {line!r}")
        if reply["id"] != req_id:
            raise ProtocolError(f"response id {reply['id']!r} does not match request id {req_id}")
        loss = reply["loss"]
        if isinstance(loss, bool) or not isinstance(loss, (int, float)) or not math.isfinite(loss):
            raise ProtocolError(f"non-finite or non-numeric loss {loss!r}")
        return float(loss)

    def close(self):
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
        for stream in (self._proc.stdout,):
            if stream is not None:
                stream.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def remote_oracle(command):
    return RemoteOracle(command)


def per_frame_losses(oracle, video_id, m):
    """Loss of every singleton combination ``[i]``."""
    if m < 1:
        raise ArgumentError("video must have at least one frame")
    return np.array([oracle.loss(video_id, [i]) for i in range(m)])


def per_clip_losses(oracle, features, partition):
    """Loss of every clip represented by its mean feature.

    Oracles without a vector entry point score the clip's full frame list;
    the vector is pooled the same way so both routes agree bit for bit.
    """
    losses = []
    for start, end in partition.ranges:
        if hasattr(oracle, "loss_vector") and getattr(oracle, "supports_vectors", True):
            losses.append(oracle.loss_vector(features.video_id, features.rows[list(range(start, end))].mean(axis=0)))
        else:
            losses.append(oracle.loss(features.video_id, list(range(start, end))))
    return np.array(losses)
