"""Generate a small corpus and compare plain, unbatched and batched slope optimization."""
import sys
import tempfile

from relubab.cli import main

count = sys.argv[1] if len(sys.argv) > 1 else "20"
with tempfile.TemporaryDirectory() as d:
    main(["gen-corpus", "--seed", "0", "--count", count, "--out", d])
    main(["bench", "--manifest", f"{d}/manifest.json", "--modes", "plain,opt-nobatch,opt-batch",
          "--out", f"{d}/bench.csv"])
