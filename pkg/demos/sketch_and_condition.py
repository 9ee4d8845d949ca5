"""Render a few toy faces, sketch them and build generator inputs.

Run: python3 demos/sketch_and_condition.py [out_dir]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from sketchgan.conditioning import VOCAB, attrs_from_names, concat_condition
from sketchgan.data import DatasetManifest, generate_toy_dataset, save_image, sketch_manifest

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="sketchgan_demo_"))

manifest = generate_toy_dataset(4, 2, (64, 64), seed=1, out_dir=out)
print(f"toy set: {len(manifest.records)} images, hash {manifest.content_hash[:12]}")

manifest = sketch_manifest(manifest)
photos, sketches, attrs, ids = DatasetManifest.read(out).load_arrays("train")
print("photos", photos.shape, "sketches", sketches.shape)
print("first record:", {k: int(v) for k, v in zip(VOCAB, attrs[0])}, "subject", int(ids[0]))

# the same sketch with two different hair colours requested
target = np.stack([attrs_from_names("black_hair=1,young=1"), attrs_from_names("blond_hair=1,young=1")])
inp = concat_condition(np.repeat(sketches[:1], 2, axis=0), target)
print("generator input", tuple(inp.shape), "label planes per sample:", inp[:, 1:, 0, 0].tolist())

save_image(out / "sketch_strip.png", np.concatenate(list(np.repeat(sketches[:4], 3, axis=1)), axis=2)[None])
print("wrote", out / "sketch_strip.png")
