"""Small synthetic worlds shared by several test modules."""

from smsframes.features import (SynthConfig, generate_synthetic, load_video, read_ground_truth,
                                read_manifest)
from smsframes.oracle import CountingOracle, fit_linear_probe, pooled_training_set


def probe_world(tmp, num_videos=60, classes=4, m=10, d=8, p=2, sigma=0.3, seed=0, layout="scattered"):
    """Write synthetic videos to ``tmp`` and fit a probe on their planted frames.

    Returns (probe, videos, truth) with videos mapping id -> (FeatureMatrix, label).
    """
    cfg = SynthConfig(num_videos, classes, m, d, p, sigma, seed, layout)
    manifest = generate_synthetic(cfg, tmp)
    entries = read_manifest(manifest)
    truth = read_ground_truth(manifest.parent / "ground_truth.jsonl")
    X, y = pooled_training_set(entries, manifest.parent, truth)
    probe = fit_linear_probe(X, y, classes)
    videos = {e.video_id: (load_video(e, manifest.parent), e.label) for e in entries}
    return probe, videos, truth


def counted(oracle, limit):
    """Counting wrapper that fails the test when more than ``limit`` calls are made."""
    return CountingOracle(oracle, limit=limit)
