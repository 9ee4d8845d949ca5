"""Train a small model for a few hundred steps, then evaluate and synthesise.

This is a scaled-down version of the toy run (about two minutes on one
core). Results are far from converged; the point is the workflow.

Run: python3 demos/short_run.py [out_dir]
"""

import json
import logging
import sys
import tempfile
from pathlib import Path

from sketchgan.cli import main as cli
from sketchgan.config import RunConfig, write_config
from sketchgan.data import generate_toy_dataset
from sketchgan.trainer import toy_config

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="sketchgan_run_"))

generate_toy_dataset(12, 4, (32, 32), seed=3, out_dir=out / "data")

cfg = toy_config(widths=(16, 32), fade_schedule=((16, 150), (32, 150)), checkpoint_every=100)
write_config(out / "short.cfg", RunConfig(cfg, {"manifest": str(out / "data"), "out": str(out / "run")}))

cli(["train", "--config", str(out / "short.cfg")])
ckpt = out / "run" / "checkpoints" / "step_000300"
cli(["eval", "--checkpoint", str(ckpt), "--manifest", str(out / "data"), "--out", str(out / "eval" / "report.json")])

report = json.loads((out / "eval" / "report.json").read_text())
print("cycle L1 %.3f, CMC rank-1 %.2f, ROC AUC %.2f" % (report["cycle_l1"], report["cmc"]["rank1"], report["roc"]["auc"]))

sketch = sorted((out / "data" / "images").glob("*.png"))[0]
cli(["synth", "--checkpoint", str(ckpt), "--sketch", str(sketch), "--out", str(out / "synth"),
     "--attrs", "black_hair=1,young=1", "--attrs", "blond_hair=1,young=0", "--attrs", "brown_hair=1,young=1"])
