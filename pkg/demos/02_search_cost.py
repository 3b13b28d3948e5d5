"""Clip-first search against frame-level search on long videos.

Planted frames sit in one contiguous run, so whole clips carry signal and
the clip phase can narrow the search before frames are touched.

Run: python3 demos/02_search_cost.py
"""

import tempfile

import numpy as np

from smsframes.features import SynthConfig, generate_synthetic, load_video, read_ground_truth, read_manifest
from smsframes.oracle import CountingOracle, ProbeOracle, fit_linear_probe, pooled_training_set
from smsframes.search import GlsConfig, flat_search, hierarchical_search, uniform_baseline

out = tempfile.mkdtemp(prefix="cost-")
cfg = SynthConfig(num_videos=20, classes=5, frames_per_video=120, dim=16, informative_per_video=8, seed=3,
                  layout="contiguous")
manifest = generate_synthetic(cfg, out)
entries = read_manifest(manifest)
X, y = pooled_training_set(entries, out, read_ground_truth(f"{out}/ground_truth.jsonl"))
probe = fit_linear_probe(X, y, cfg.classes)

budgets = [25, 50, 100, 200, 400]
curves = {"hier": np.zeros(len(budgets)), "flat": np.zeros(len(budgets))}
uniform = []
for i, e in enumerate(entries):
    fm = load_video(e, out)
    for name, search in [("hier", lambda o, c: hierarchical_search(fm, o, 30, 8, c)),
                         ("flat", lambda o, c: flat_search(fm, o, 8, c))]:
        counter = CountingOracle(ProbeOracle.single(probe, fm, e.label), limit=400)
        _, trace = search(counter, GlsConfig(max_evaluations=400, seed=i))
        # one run gives the whole anytime curve
        curves[name] += [trace.best_within(b) for b in budgets]
    uniform.append(ProbeOracle.single(probe, fm, e.label).loss(e.video_id, uniform_baseline(120, 8)))

print(f"mean loss of uniform sampling: {np.mean(uniform):.4f}\n")
print("evals    hier      flat")
for k, b in enumerate(budgets):
    h, f = curves["hier"][k] / len(entries), curves["flat"][k] / len(entries)
    print(f"{b:5d}  {h:8.4f}  {f:8.4f}")
# flat search needs 120 singleton losses before its first move, hence inf at small budgets
