"""Search, map, search: the three stages end to end on the default synthetic set.

Stage 1 searches the best combination per training video under the probe.
Stage 2 fits a network that predicts the pooled feature of that combination
from all frames.  Stage 3 picks, for an unseen video, the frames whose mean is
closest to the prediction, with no oracle calls at all.

Run: python3 demos/03_three_stages.py [transformer|mlp]
"""

import json
import sys
import tempfile
import time

from smsframes import pipeline as pl
from smsframes.features import SynthConfig

variant = sys.argv[1] if len(sys.argv) > 1 else "mlp"
out = tempfile.mkdtemp(prefix="sms-")
t0 = time.time()

manifest = pl.gen_synth(SynthConfig(), f"{out}/data")
pl.fit_probe(manifest, f"{out}/probe.json")

ok, failed = pl.search_labels(manifest, f"{out}/labels.jsonl", probe=f"{out}/probe.json")
print(f"stage 1: {len(ok)} videos labelled, {len(failed)} failed ({time.time() - t0:.0f}s)")

_, report = pl.train_mapper(manifest, f"{out}/labels.jsonl", f"{out}/model.smsm", variant=variant)
print(f"stage 2: {variant} held-out cosine distance {report.val_loss[0]:.3f} -> {report.val_loss[-1]:.3f} "
      f"({time.time() - t0:.0f}s)")

pl.select(manifest, f"{out}/sms.jsonl", "sms", model=f"{out}/model.smsm")
pl.select(manifest, f"{out}/base.jsonl", "base", probe=f"{out}/probe.json")
pl.select(manifest, f"{out}/random.jsonl", "random", probe=f"{out}/probe.json")
stats = pl.evaluate(manifest, {s: f"{out}/{s}.jsonl" for s in ("sms", "base", "random")},
                    f"{out}/probe.json")["strategies"]
print(f"stage 3 on held-out videos ({time.time() - t0:.0f}s):")
print(json.dumps(stats, indent=1, sort_keys=True))
