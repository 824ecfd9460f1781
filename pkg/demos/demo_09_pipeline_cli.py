"""
The whole pipeline from the command line
========================================

``pitloc`` runs synth, train, build-db, eval and analyze from one flat
configuration and master seed. Each command writes its resolved
configuration next to its outputs. Here the commands run in-process on a
reduced world.
"""

# %%
import tempfile
from pathlib import Path

from pitloc.cli import main
from pitloc.synth import read_gps

work = Path(tempfile.mkdtemp()) / "run"
common = ["--seed", "7", "--set", f"workdir={work}", "--set", "extent=400", "--set", "pitch=100",
          "--set", "trips=5", "--set", "landmarks=150", "--set", "rings=16", "--set", "azimuth_steps=90",
          "--set", "n_queries=50", "--set", "train_max_iterations=200", "--set", "hidden=64",
          "--set", "output_dim=64"]

# %%
for command in ("synth", "train", "build-db", "eval", "analyze"):
    assert main([command, *common]) == 0

# %%
print(sorted(p.name for p in work.iterdir()))
print((work / "eval" / "gps" / "summary.txt").read_text())

# %%
# A single sweep is localized against the database, searching within tau of its GPS fix.
cloud = sorted((work / "clouds").glob("*.pitc"))[0]
fix = read_gps(work / "gps.csv")[int(cloud.stem)]
main(["query", str(cloud), f"--gps={fix.x},{fix.y}", *common])
