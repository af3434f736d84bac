"""Run the staged recipe on the bundled fixture corpus, then rerun it to show stage reuse."""

import sys
import tempfile
import time

from multiner.cli import bundled_fixture
from multiner.pipeline import load_pipeline_config, run_pipeline

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="multiner-")
cfg = load_pipeline_config(bundled_fixture() / "pipeline.json")

for attempt in ("first run", "rerun"):
    t0 = time.perf_counter()
    records = run_pipeline(cfg, out)
    print(f"{attempt}: {time.perf_counter() - t0:.1f}s")
for r in records:
    print(f"  {r.name:16s} {r.macro_f1:.3f}  {r.directory}{'  (reused)' if r.skipped else ''}")
print("outputs in", out)
