"""Image I/O, XDoG sketch synthesis and the procedural toy face dataset.

Images travel between modules as float32 arrays shaped ``(N, C, H, W)`` with
values in ``[-1, 1]``.
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .conditioning import HAIR_COLORS, VOCAB

LUMA = np.array([0.299, 0.587, 0.114])

MANIFEST_COLUMNS = ["path", "subject_id", *VOCAB, "split"]
MANIFEST_NAME = "manifest.csv"
META_NAME = "manifest.meta"


class DataError(ValueError):
    """Input data is missing, malformed or inconsistent."""


class DecodeError(DataError):
    """Raised when a file cannot be decoded as an 8-bit image."""


# --------------------------------------------------------------------------
# image tensors


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def check_image(x: np.ndarray, channels: Sequence[int] = (1, 3)) -> np.ndarray:
    """Validate an image batch and return it unchanged."""
    if x.ndim != 4:
        raise ValueError(f"expected a 4-D (N, C, H, W) array, got shape {x.shape}")
    if x.shape[1] not in channels:
        raise ValueError(f"expected {channels} channels, got {x.shape[1]}")
    if np.any(x < -1.0) or np.any(x > 1.0):
        raise ValueError("image values outside [-1, 1]")
    return x


def to_unit_range(u8: np.ndarray) -> np.ndarray:
    return (u8.astype(np.float32) / np.float32(255.0)) * np.float32(2.0) - np.float32(1.0)


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def load_image(path: str | os.PathLike, target_size: tuple[int, int] | None = None) -> np.ndarray:
    """Read an 8-bit image as a single-image batch in ``[-1, 1]``.

    Grayscale files give one channel, everything else is converted to RGB.
    ``target_size`` is ``(H, W)``; bilinear resampling is used when it differs
    from the stored size.
    """
    if target_size is not None and (target_size[0] <= 0 or target_size[1] <= 0):
        raise ValueError(f"target_size must be positive, got {target_size}")
    try:
        with Image.open(path) as im:
            im.load()
            im = im.convert("L") if im.mode in ("L", "1", "I;16", "I") else im.convert("RGB")
    except (OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    if target_size is not None and im.size != (target_size[1], target_size[0]):
        im = im.resize((target_size[1], target_size[0]), Image.BILINEAR)
    arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return to_unit_range(arr)[None]


def save_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write one image (``(C, H, W)`` or a batch of one) as an 8-bit PNG."""
    image = np.asarray(image)
    if image.ndim == 4:
        if image.shape[0] != 1:
            raise ValueError("save_image takes a single image")
        image = image[0]
    u8 = to_uint8(image)
    if u8.shape[0] == 1:
        Image.fromarray(u8[0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


# --------------------------------------------------------------------------
# XDoG


@dataclass(frozen=True)
class XdogParams:
    sigma: float = 1.0
    k: float = 1.6
    tau: float = 0.98
    epsilon_t: float = 0.0
    phi: float = 200.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not self.k > 1:
            raise ValueError(f"k must be > 1, got {self.k}")
        if not self.phi >= 0:
            raise ValueError(f"phi must be >= 0, got {self.phi}")


def grayscale(image: np.ndarray) -> np.ndarray:
    """Luma of an ``(N, 3, H, W)`` batch in ``[-1, 1]``, returned in ``[0, 1]``."""
    unit = (image.astype(np.float64) + 1.0) / 2.0
    return np.tensordot(LUMA, unit, axes=([0], [1]))


def xdog_sketch(image: np.ndarray, params: XdogParams = XdogParams()) -> np.ndarray:
    """Render an RGB batch as XDoG line drawings.

    Intensities are taken in ``[0, 1]``; flat regions map to white and
    edges to dark strokes. Output is ``(N, 1, H, W)`` float32 in ``[-1, 1]``.
    """
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"xdog_sketch needs an (N, 3, H, W) photo batch, got {image.shape}")
    out = np.empty((image.shape[0], 1) + image.shape[2:], dtype=np.float32)
    for n, gray in enumerate(grayscale(image)):
        narrow = ndimage.gaussian_filter(gray, params.sigma, mode="reflect")
        wide = ndimage.gaussian_filter(gray, params.k * params.sigma, mode="reflect")
        u = narrow - params.tau * wide
        soft = 1.0 + np.tanh(params.phi * (u - params.epsilon_t))
        t = np.where(u >= params.epsilon_t, 1.0, soft)
        out[n, 0] = np.clip(2.0 * t - 1.0, -1.0, 1.0)
    return out


# --------------------------------------------------------------------------
# toy faces

HAIR_RGB = {
    "black_hair": (0.12, 0.10, 0.10),
    "blond_hair": (0.93, 0.80, 0.42),
    "brown_hair": (0.52, 0.30, 0.14),
}
SKIN_YOUNG = np.array([0.95, 0.78, 0.64])
SKIN_OLD = np.array([0.76, 0.60, 0.50])
BACKGROUND = np.array([0.38, 0.45, 0.56])
RIM_WIDTH = 0.05
RIM_GAIN = 0.7

# (low, high) per identity parameter, in units of the half image width
IDENTITY_RANGES = {
    "head_w": (0.44, 0.66),
    "head_h": (0.60, 0.80),
    "hairline": (0.25, 0.60),
    "eye_dx": (0.14, 0.32),
    "eye_y": (-0.22, 0.02),
    "eye_r": (0.045, 0.10),
    "mouth_w": (0.10, 0.30),
    "mouth_y": (0.22, 0.46),
}


def sample_identity(rng: np.random.Generator) -> dict[str, float]:
    return {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in IDENTITY_RANGES.items()}


def sample_attributes(rng: np.random.Generator) -> np.ndarray:
    """Ground-truth attribute bits: one hair colour, a young flag, rec = 1."""
    bits = np.zeros(len(VOCAB), dtype=np.int64)
    bits[rng.integers(len(HAIR_COLORS))] = 1
    bits[3] = rng.integers(2)
    bits[4] = 1
    return bits


def render_face(
    identity: dict[str, float],
    attrs: Sequence[int],
    size: tuple[int, int],
    rng: np.random.Generator | None = None,
    supersample: int = 4,
) -> np.ndarray:
    """Draw one face as a ``(3, H, W)`` float32 array in ``[-1, 1]``.

    Geometry comes from ``identity`` only; hair colour and skin shading come
    from ``attrs``. ``rng`` adds a small shift, scale and brightness jitter.
    """
    h, w = size
    if rng is not None:
        dx, dy = rng.uniform(-0.03, 0.03, size=2)
        scale = rng.uniform(0.98, 1.02)
        gain = rng.uniform(-0.03, 0.03)
    else:
        dx = dy = gain = 0.0
        scale = 1.0
    ys = (np.arange(h * supersample) + 0.5) / (h * supersample) * 2.0 - 1.0
    xs = (np.arange(w * supersample) + 0.5) / (w * supersample) * 2.0 - 1.0
    y, x = np.meshgrid(ys, xs, indexing="ij")
    x = (x - dx) / scale
    y = (y - dy) / scale

    cy = 0.12
    a, b = identity["head_w"], identity["head_h"]
    head = (x / a) ** 2 + ((y - cy) / b) ** 2 <= 1.0
    hair_outer = ((x / (a * 1.16)) ** 2 + ((y - cy + 0.04) / (b * 1.12)) ** 2 <= 1.0) & (y <= cy + 0.1)
    hair_cap = head & (y <= cy - b * (1.0 - identity["hairline"]))

    young = bool(attrs[3])
    skin = SKIN_YOUNG if young else SKIN_OLD
    # old faces darken towards the jaw
    shade = 1.0 if young else 1.0 - 0.18 * np.clip((y - cy) / b, 0.0, 1.0)[..., None]
    hair_name = next(n for n, bit in zip(HAIR_COLORS, attrs[:3]) if bit)

    img = np.broadcast_to(BACKGROUND, y.shape + (3,)).copy()
    img[hair_outer] = HAIR_RGB[hair_name]
    face = head & ~hair_cap
    img[face] = (skin * shade)[face] if not young else skin
    img[hair_cap] = HAIR_RGB[hair_name]

    # contour shadows keep the outline visible whatever the colours
    head_r = np.sqrt((x / a) ** 2 + ((y - cy) / b) ** 2)
    hair_r = np.sqrt((x / (a * 1.16)) ** 2 + ((y - cy + 0.04) / (b * 1.12)) ** 2)
    rim = (head & (head_r > 1.0 - RIM_WIDTH / b)) | (hair_outer & (hair_r > 1.0 - RIM_WIDTH / b))
    img[rim] *= RIM_GAIN

    if not young:
        for k in (0, 1):
            wy = cy - b * (1.0 - identity["hairline"]) + 0.08 + 0.07 * k
            line = face & (np.abs(y - wy) < 0.012) & (np.abs(x) < a * 0.5)
            img[line] = skin * 0.6

    eye_y = cy + identity["eye_y"]
    for sx in (-1.0, 1.0):
        eye = ((x - sx * identity["eye_dx"]) ** 2 + (y - eye_y) ** 2) <= identity["eye_r"] ** 2
        img[eye & face] = (0.15, 0.12, 0.12)
    mouth = ((x / identity["mouth_w"]) ** 2 + ((y - cy - identity["mouth_y"]) / 0.035) ** 2) <= 1.0
    img[mouth & face] = (0.62, 0.22, 0.22)

    img = img.reshape(h, supersample, w, supersample, 3).mean(axis=(1, 3))
    img = np.clip(img + gain, 0.0, 1.0)
    return (img.transpose(2, 0, 1) * 2.0 - 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# manifest


@dataclass
class Record:
    path: str
    subject_id: int
    attrs: np.ndarray
    split: str
    sketch_path: str | None = None

    def row(self) -> dict[str, str]:
        out = {"path": self.path, "subject_id": str(self.subject_id)}
        out.update({name: str(int(bit)) for name, bit in zip(VOCAB, self.attrs)})
        out["split"] = self.split
        if self.sketch_path is not None:
            out["sketch_path"] = self.sketch_path
        return out


@dataclass
class DatasetManifest:
    """Records of a dataset on disk. Paths are relative to ``root``."""

    records: list[Record]
    seed: int
    root: Path
    content_hash: str = ""
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def num_subjects(self) -> int:
        return len({r.subject_id for r in self.records})

    @property
    def has_sketches(self) -> bool:
        return bool(self.records) and all(r.sketch_path is not None for r in self.records)

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def validate(self) -> None:
        ids = sorted({r.subject_id for r in self.records})
        if ids != list(range(len(ids))):
            raise ValueError("subject ids must be dense in [0, #subjects)")
        splits: dict[int, set[str]] = {}
        for r in self.records:
            if r.split not in ("train", "test"):
                raise ValueError(f"unknown split {r.split!r}")
            if int(np.sum(r.attrs[:3])) != 1:
                raise ValueError(f"{r.path}: exactly one hair bit must be set")
            splits.setdefault(r.subject_id, set()).add(r.split)
        mixed = [i for i, s in splits.items() if len(s) > 1]
        if mixed:
            raise ValueError(f"subjects {mixed} appear in more than one split")

    def compute_hash(self) -> str:
        """SHA-256 over the canonical record rows and the decoded pixels they point to."""
        digest = hashlib.sha256()
        digest.update(f"seed={self.seed}\n".encode())
        for r in self.records:
            digest.update(",".join(r.row().values()).encode() + b"\n")
            for rel in (r.path, r.sketch_path):
                if rel is None:
                    continue
                with Image.open(self.root / rel) as im:
                    digest.update(im.mode.encode())
                    digest.update(np.asarray(im).tobytes())
        return digest.hexdigest()

    def load_arrays(self, split: str | None = None, size: tuple[int, int] | None = None):
        """Return ``(photos, sketches_or_None, attrs, subject_ids)`` for one split."""
        recs = self.records if split is None else self.split(split)
        photos = np.concatenate([load_image(self.root / r.path, size) for r in recs])
        sketches = None
        if recs and all(r.sketch_path is not None for r in recs):
            sketches = np.concatenate([load_image(self.root / r.sketch_path, size) for r in recs])
        attrs = np.stack([r.attrs for r in recs]).astype(np.int64)
        ids = np.array([r.subject_id for r in recs], dtype=np.int64)
        return photos, sketches, attrs, ids

    def write(self, root: str | os.PathLike | None = None) -> Path:
        root = Path(root) if root is not None else self.root
        root.mkdir(parents=True, exist_ok=True)
        columns = list(MANIFEST_COLUMNS)
        if self.has_sketches:
            columns.append("sketch_path")
        with open(root / MANIFEST_NAME, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
            writer.writeheader()
            for r in self.records:
                writer.writerow(r.row())
        meta = {"seed": str(self.seed), "content_hash": self.content_hash, **self.meta}
        write_keyvalue(root / META_NAME, meta)
        return root / MANIFEST_NAME

    @classmethod
    def read(cls, path: str | os.PathLike) -> "DatasetManifest":
        """Load ``manifest.csv`` (or the directory holding it) plus its sidecar."""
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        records = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
            if missing:
                raise ValueError(f"{path}: missing columns {missing}")
            for row in reader:
                records.append(
                    Record(
                        path=row["path"],
                        subject_id=int(row["subject_id"]),
                        attrs=np.array([int(row[n]) for n in VOCAB], dtype=np.int64),
                        split=row["split"],
                        sketch_path=row.get("sketch_path") or None,
                    )
                )
        meta = read_keyvalue(path.parent / META_NAME) if (path.parent / META_NAME).exists() else {}
        seed = int(meta.pop("seed", 0))
        content_hash = meta.pop("content_hash", "")
        return cls(records=records, seed=seed, root=path.parent, content_hash=content_hash, meta=meta)


def write_keyvalue(path: str | os.PathLike, values: dict[str, object]) -> None:
    with open(path, "w") as fh:
        for key, value in values.items():
            fh.write(f"{key} = {value}\n")


def read_keyvalue(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def split_subjects(num_subjects: int, rng: np.random.Generator, test_fraction: float = 0.2) -> set[int]:
    n_test = min(num_subjects - 1, max(1, int(round(test_fraction * num_subjects))))
    return set(int(i) for i in rng.permutation(num_subjects)[:n_test])


def generate_toy_dataset(
    num_subjects: int,
    images_per_subject: int,
    size: tuple[int, int],
    seed: int,
    out_dir: str | os.PathLike,
    test_fraction: float = 0.2,
) -> DatasetManifest:
    """Render a reproducible face dataset and its manifest into ``out_dir``."""
    if num_subjects < 2:
        raise ValueError(f"num_subjects must be >= 2, got {num_subjects}")
    if images_per_subject < 1:
        raise ValueError(f"images_per_subject must be >= 1, got {images_per_subject}")
    h, w = size
    if not (is_power_of_two(h) and is_power_of_two(w)):
        raise ValueError(f"size must be powers of two, got {size}")

    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {img_dir}: {exc}") from exc
    if not os.access(img_dir, os.W_OK):
        raise OSError(f"output directory not writable: {img_dir}")

    rng = np.random.default_rng(seed)
    identities = [sample_identity(rng) for _ in range(num_subjects)]
    test_ids = split_subjects(num_subjects, rng, test_fraction)

    records = []
    for sid, ident in enumerate(identities):
        for j in range(images_per_subject):
            attrs = sample_attributes(rng)
            img = render_face(ident, attrs, (h, w), rng)
            rel = f"images/s{sid:04d}_{j:03d}.png"
            save_image(out_dir / rel, img)
            records.append(Record(rel, sid, attrs, "test" if sid in test_ids else "train"))

    manifest = DatasetManifest(
        records=records,
        seed=seed,
        root=out_dir,
        meta={
            "num_subjects": str(num_subjects),
            "images_per_subject": str(images_per_subject),
            "size": f"{h}x{w}",
        },
    )
    manifest.validate()
    manifest.content_hash = manifest.compute_hash()
    manifest.write()
    return manifest


def render_population(num_subjects: int, images_per_subject: int, size: tuple[int, int], seed: int):
    """In-memory variant of the toy generator, used to pretrain the frozen extractors.

    Returns ``(images, attrs, subject_ids)``.
    """
    rng = np.random.default_rng(seed)
    identities = [sample_identity(rng) for _ in range(num_subjects)]
    images, attrs, ids = [], [], []
    for sid, ident in enumerate(identities):
        for _ in range(images_per_subject):
            a = sample_attributes(rng)
            images.append(render_face(ident, a, size, rng))
            attrs.append(a)
            ids.append(sid)
    return np.stack(images), np.stack(attrs), np.array(ids, dtype=np.int64)


def sketch_manifest(
    manifest: DatasetManifest,
    params: XdogParams = XdogParams(),
    force: bool = False,
    sketch_dir: str = "sketches",
) -> DatasetManifest:
    """Write one XDoG sketch PNG per photo and return the augmented manifest.

    Existing sketch files are an error unless ``force`` is set; the error
    lists every colliding path.
    """
    targets = []
    for r in manifest.records:
        stem = Path(r.path).stem
        targets.append(f"{sketch_dir}/{stem}_sketch.png")
    collisions = [t for t in targets if (manifest.root / t).exists()]
    if collisions and not force:
        raise FileExistsError("refusing to overwrite existing sketches: " + ", ".join(collisions))
    (manifest.root / sketch_dir).mkdir(parents=True, exist_ok=True)
    records = []
    for r, rel in zip(manifest.records, targets):
        photo = load_image(manifest.root / r.path)
        if photo.shape[1] != 3:
            raise ValueError(f"{r.path}: expected an RGB photo")
        save_image(manifest.root / rel, xdog_sketch(photo, params))
        records.append(replace(r, sketch_path=rel))
    out = DatasetManifest(
        records=records,
        seed=manifest.seed,
        root=manifest.root,
        meta={**manifest.meta, **{f"xdog_{k}": str(v) for k, v in params.__dict__.items()}},
    )
    out.content_hash = out.compute_hash()
    out.write()
    return out

