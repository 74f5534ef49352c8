"""
Command line tour
=================

The same stages are available as ``perceptflow <command>``; here they are
driven through ``main`` so the script runs anywhere.
"""

# %%
import tempfile
from pathlib import Path

from perceptflow.cli import main

d = Path(tempfile.mkdtemp(prefix="demo06_"))

# %%
# Embedded defaults, shape dry run for the full-scale profile, and the
# self-contained oracle checks.
main(["--print-config"])
main(["dry-run", "--profile", "paper-shape"])
main(["selftest"])

# %%
# Generate data and score ground truth against itself.  Exit codes: 0 ok,
# 1 runtime failure, 2 configuration error.
print(main(["datagen", "--clips", "2", "--seed", "0", "--out", str(d / "data")]))
print(main(["eval", "--oracle", "--data", str(d / "data"), "--out", str(d / "eval")]))
print(main(["infer", "--task", "albedo", "--in", "x", "--ckpt", "y", "--out", "z"]))
