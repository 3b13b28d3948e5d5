"""Stdio loss server for a linear probe: ``python -m smsframes.serve PROBE MANIFEST``.

Answers one request line with one response line until stdin closes, which
makes it a drop-in ``--remote`` oracle for the batch commands.
"""

import json
import sys
from pathlib import Path

from .features import load_video, read_manifest
from .oracle import load_probe, probe_loss


def serve(probe, entries, root, stdin=sys.stdin, stdout=sys.stdout):
    by_id = {e.video_id: e for e in entries}
    loaded = {}
    for line in stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        vid = req["video_id"]
        if vid not in loaded:
            loaded[vid] = load_video(by_id[vid], root)
        loss = probe_loss(probe, loaded[vid], req["frames"], by_id[vid].label)
        stdout.write(json.dumps({"id": req["id"], "loss": loss}) + "\n")
        stdout.flush()


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 2:
        sys.stderr.write(__doc__.splitlines()[0] + "\n")
        return 2
    probe = load_probe(argv[0])
    manifest = Path(argv[1])
    serve(probe, read_manifest(manifest), manifest.parent)
    return 0


if __name__ == "__main__":
    sys.exit(main())
