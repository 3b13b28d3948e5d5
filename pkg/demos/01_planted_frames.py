"""A first look at the frame-combination problem on a handful of planted videos.

Run: python3 demos/01_planted_frames.py
"""

import tempfile

import numpy as np

from smsframes.features import SynthConfig, generate_synthetic, load_video, read_ground_truth, read_manifest
from smsframes.oracle import CountingOracle, ProbeOracle, fit_linear_probe, per_frame_losses, pooled_training_set
from smsframes.search import GlsConfig, brute_force, count_multisets, hierarchical_search, uniform_baseline

out = tempfile.mkdtemp(prefix="planted-")
cfg = SynthConfig(num_videos=60, classes=4, frames_per_video=10, dim=8, informative_per_video=2, seed=42)
manifest = generate_synthetic(cfg, out)
entries = read_manifest(manifest)
truth = read_ground_truth(f"{out}/ground_truth.jsonl")

# the probe plays the frozen recognition model; it sees pooled planted frames
X, y = pooled_training_set(entries, out, truth)
probe = fit_linear_probe(X, y, cfg.classes)

entry = entries[0]
fm = load_video(entry, out)
oracle = ProbeOracle.single(probe, fm, entry.label)
print(f"{entry.video_id}: class {entry.label}, planted frames {truth[entry.video_id]}")
print("per-frame losses:", np.round(per_frame_losses(oracle, entry.video_id, fm.m), 3))

# ten frames, three slots, repetition allowed
print(f"{count_multisets(10, 3)} combinations to choose from")
best, exact = brute_force((10, 3), lambda c: oracle.loss(entry.video_id, c))
print(f"exhaustive optimum {best} loss {exact:.4f}")

counter = CountingOracle(oracle, limit=60)
found, trace = hierarchical_search(fm, counter, 30, 3, GlsConfig(max_evaluations=60))
print(f"guided local search {found} loss {trace.best_objective:.4f} after {counter.eval_count} oracle calls")

base = uniform_baseline(10, 3)
print(f"uniform sampling {base} loss {oracle.loss(entry.video_id, base):.4f}")

print("\nbest loss by evaluations used:")
for count, value in trace.best_objective_by_eval:
    print(f"  {count:3d}  {value:.4f}")
