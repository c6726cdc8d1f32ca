"""Datasets: Kaggle-style CSV ingestion, synthetic fundus-like data, splits."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    BadGrade,
    BadProportions,
    ClassTooSmall,
    EmptyDataset,
    MalformedCsv,
    MissingImage,
    ShapeMismatch,
)
from .provenance import atomic_write_bytes, atomic_write_text

NUM_GRADES = 5
GRADE_NAMES = ("No DR", "Mild", "Moderate", "Severe", "Proliferative DR")
ROLES = ("train", "test", "perturb_split", "robust_split", "validation", "all")

# Share of each grade in the two public DR corpora.
APTOS_PROPORTIONS = (0.493, 0.101, 0.273, 0.080, 0.053)
EYEPACS_PROPORTIONS = (0.735, 0.070, 0.150, 0.025, 0.020)


@dataclass
class LabeledDataset:
    """Images stacked as an (N, C, H, W) float32 array in [0, 1] plus grades and ids."""

    images: np.ndarray
    grades: np.ndarray
    ids: list
    role: str = "all"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.grades = np.asarray(self.grades, dtype=np.int64).reshape(-1)
        self.ids = [str(i) for i in self.ids]
        if self.images.ndim != 4:
            raise ShapeMismatch(f"images must be (N, C, H, W), got {self.images.shape}")
        if not (len(self.images) == len(self.grades) == len(self.ids)):
            raise ShapeMismatch("images, grades and ids differ in length")
        if self.grades.size and (self.grades.min() < 0 or self.grades.max() >= NUM_GRADES):
            raise BadGrade(f"grades must lie in 0..{NUM_GRADES - 1}")

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i):
        return self.images[i], int(self.grades[i]), self.ids[i]

    def items(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def class_counts(self, K: int = NUM_GRADES) -> np.ndarray:
        return np.bincount(self.grades, minlength=K)

    def subset(self, indices, role: str | None = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.grades[idx], [self.ids[i] for i in idx],
                              role or self.role, dict(self.meta))

    def with_images(self, images, role: str | None = None) -> "LabeledDataset":
        return LabeledDataset(images, self.grades.copy(), list(self.ids),
                              role or self.role, dict(self.meta))

    def sha256(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.grades, dtype="<i8").tobytes())
        h.update("\n".join(self.ids).encode("utf-8"))
        return h.hexdigest()


def concat(datasets, role: str = "all") -> LabeledDataset:
    return LabeledDataset(
        np.concatenate([d.images for d in datasets]),
        np.concatenate([d.grades for d in datasets]),
        [i for d in datasets for i in d.ids],
        role,
    )


# ---------------------------------------------------------------- image io

def read_image(path) -> np.ndarray:
    """Read a PNG as a C x H x W float array in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        return arr[None]
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path, image: np.ndarray) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    arr = np.round(img * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        pil = Image.fromarray(arr[0], mode="L")
    else:
        pil = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_labels_csv(csv_path) -> list[tuple[str, int]]:
    rows = []
    try:
        with open(csv_path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["id_code", "diagnosis"]:
                raise MalformedCsv(f"{csv_path}: header must be 'id_code,diagnosis'")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 2:
                    raise MalformedCsv(f"{csv_path}:{lineno}: expected 2 fields, got {len(row)}")
                ident, raw = row[0].strip(), row[1].strip()
                try:
                    grade = int(raw)
                except ValueError:
                    raise BadGrade(f"{csv_path}:{lineno}: grade {raw!r} is not an integer") from None
                if not 0 <= grade < NUM_GRADES:
                    raise BadGrade(f"{csv_path}:{lineno}: grade {grade} outside 0..4 for {ident}")
                rows.append((ident, grade))
    except OSError as exc:
        raise MalformedCsv(f"cannot read {csv_path}: {exc}") from exc
    return sorted(rows)


def _image_file(image_dir: Path, ident: str) -> Path:
    path = image_dir / f"{ident}.png"
    if not path.exists():
        raise MissingImage(f"no image file for id {ident!r} in {image_dir}")
    return path


def load_raw_images(csv_path, image_dir) -> list[tuple[str, int, np.ndarray, Path]]:
    """Parse the CSV and read every image without requiring a common shape."""
    image_dir = Path(image_dir)
    out = []
    for ident, grade in read_labels_csv(csv_path):
        path = _image_file(image_dir, ident)
        out.append((ident, grade, read_image(path), path))
    return out


def load_dataset_csv(csv_path, image_dir, role: str = "all") -> LabeledDataset:
    raw = load_raw_images(csv_path, image_dir)
    if not raw:
        raise EmptyDataset(f"{csv_path} lists no images")
    shapes = {img.shape for _, _, img, _ in raw}
    if len(shapes) != 1:
        raise ShapeMismatch(f"images have {len(shapes)} different shapes; run preprocess first")
    return LabeledDataset(np.stack([r[2] for r in raw]), [r[1] for r in raw],
                          [r[0] for r in raw], role)


def save_dataset_dir(dataset: LabeledDataset, out_dir, preprocess_hash: str | None = None,
                     source_paths=None) -> Path:
    """Write PNGs, ``labels.csv`` and ``manifest.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    lines = ["id_code,diagnosis"]
    items = []
    for i, (image, grade, ident) in enumerate(dataset.items()):
        write_image(img_dir / f"{ident}.png", image)
        lines.append(f"{ident},{grade}")
        src = str(source_paths[i]) if source_paths is not None else None
        items.append({"id": ident, "grade": grade, "source_path": src,
                      "preprocess_config_hash": preprocess_hash})
    atomic_write_text(out_dir / "labels.csv", "\n".join(lines) + "\n")
    manifest = {"items": items, "meta": dataset.meta}
    atomic_write_text(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out_dir


def load_dataset_dir(path, role: str = "all") -> LabeledDataset:
    """Read ``labels.csv`` plus either ``images/`` PNGs or an exact ``images.npy`` array."""
    path = Path(path)
    array = path / "images.npy"
    if array.exists():
        rows = read_labels_csv(path / "labels.csv")
        images = np.load(array, allow_pickle=False)
        if len(images) != len(rows):
            raise ShapeMismatch(f"{array} holds {len(images)} images for {len(rows)} labels")
        return LabeledDataset(images, [g for _, g in rows], [i for i, _ in rows], role)
    ds = load_dataset_csv(path / "labels.csv", path / "images", role)
    manifest = path / "manifest.json"
    if manifest.exists():
        ds.meta = json.loads(manifest.read_text()).get("meta", {})
    return ds


# ---------------------------------------------------------------- synthetic data

def class_counts_for(n: int, proportions) -> np.ndarray:
    """floor(n * p_i) per class, remainder to the largest fractional parts (lower index first)."""
    p = np.asarray(proportions, dtype=np.float64)
    raw = n * p
    counts = np.floor(raw + 1e-9).astype(np.int64)
    remainder = n - int(counts.sum())
    order = sorted(range(len(p)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def _render_fundus(rng: np.random.Generator, grade: int, size: int, channels: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    c = size / 2.0
    radius = size * rng.uniform(0.40, 0.46)
    cy, cx = c + rng.normal(0, 0.01 * size, 2)
    dist = np.hypot(yy - cy, xx - cx)
    disc = dist <= radius

    base = np.array([0.78, 0.38, 0.18]) * rng.uniform(0.85, 1.1)
    shade = 1.0 - 0.35 * (dist / radius) ** 2
    img = base[:, None, None] * shade[None]

    # vessels: a few smooth dark arcs
    for _ in range(rng.integers(2, 5)):
        theta = rng.uniform(0, 2 * np.pi)
        bend = rng.uniform(-0.08, 0.08)
        t = np.linspace(0.05, 0.95, 4 * size)
        ang = theta + bend * t * 10
        py = cy + t * radius * np.sin(ang)
        px = cx + t * radius * np.cos(ang)
        vy = np.clip(py.astype(int), 0, size - 1)
        vx = np.clip(px.astype(int), 0, size - 1)
        img[:, vy, vx] *= 0.65

    # lesions: `grade` bright yellow blobs, kept apart so they stay countable
    sigma = max(0.045 * size, 0.9)
    placed = []
    tries = 0
    while len(placed) < grade and tries < 1000:
        tries += 1
        rr = radius * 0.72 * np.sqrt(rng.uniform())
        aa = rng.uniform(0, 2 * np.pi)
        by, bx = cy + rr * np.sin(aa), cx + rr * np.cos(aa)
        if all(np.hypot(by - qy, bx - qx) > 4.5 * sigma for qy, qx in placed):
            placed.append((by, bx))
    lesion = np.array([1.0, 0.92, 0.45])
    for by, bx in placed:
        g = np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * sigma ** 2))
        amp = rng.uniform(0.6, 0.8)
        img = img * (1 - amp * g[None]) + lesion[:, None, None] * amp * g[None]

    img = img * disc[None]
    img = img + rng.normal(0, 0.015, img.shape) * disc[None]
    img = np.clip(img, 0.0, 1.0)
    if channels == 1:
        img = (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2])[None]
    return img.astype(np.float32)


def generate_synthetic_dataset(n: int, proportions=APTOS_PROPORTIONS, image_size: int = 32,
                               seed: int = 0, channels: int = 3, prefix: str = "syn") -> LabeledDataset:
    """Fundus-like images where grade g carries exactly g lesion blobs."""
    p = np.asarray(proportions, dtype=np.float64)
    if p.shape != (NUM_GRADES,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise BadProportions(f"need {NUM_GRADES} non-negative proportions summing to 1, got {proportions}")
    if n < NUM_GRADES:
        raise BadProportions(f"n must be at least {NUM_GRADES}")
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    rng = np.random.default_rng(seed)
    counts = class_counts_for(n, p)
    grades = np.repeat(np.arange(NUM_GRADES), counts)
    rng.shuffle(grades)
    images = np.stack([_render_fundus(rng, int(g), image_size, channels) for g in grades])
    ids = [f"{prefix}{i:05d}" for i in range(n)]
    meta = {"generator": {"n": n, "proportions": [float(x) for x in p],
                          "image_size": image_size, "seed": seed, "channels": channels}}
    return LabeledDataset(images, grades, ids, "all", meta)


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class FoldAssignment:
    k: int
    folds: np.ndarray

    def indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds == fold)

    def complement(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds != fold)


def stratified_kfold(dataset: LabeledDataset, k: int = 4, seed: int = 0) -> FoldAssignment:
    """Per-class round robin after a seeded shuffle.

    The round robin continues across classes so fold totals also stay within one.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    grades = dataset.grades
    rng = np.random.default_rng(seed)
    folds = np.full(len(grades), -1, dtype=np.int64)
    cursor = 0
    for c in np.unique(grades):
        members = np.flatnonzero(grades == c)
        if members.size < k:
            raise ClassTooSmall(f"class {int(c)} has {members.size} members, fewer than k={k}")
        members = rng.permutation(members)
        folds[members] = (cursor + np.arange(members.size)) % k
        cursor = (cursor + members.size) % k
    return FoldAssignment(k, folds)


def split_perturb_robust(train: LabeledDataset, fraction_p: float = 0.5,
                         seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified disjoint split into the perturbation-generation and robustness parts."""
    if not 0.0 < fraction_p < 1.0:
        raise ValueError("fraction_p must lie strictly between 0 and 1")
    grades = train.grades
    classes = np.unique(grades)
    members = {}
    for c in classes:
        m = np.flatnonzero(grades == c)
        if m.size < 2:
            raise ClassTooSmall(f"class {int(c)} has {m.size} member(s); cannot split")
        members[int(c)] = m
    sizes = np.array([members[int(c)].size for c in classes])
    raw = sizes * fraction_p
    take = np.floor(raw).astype(np.int64)
    total = int(round(len(train) * fraction_p))
    order = sorted(range(len(classes)), key=lambda i: (-(raw[i] - take[i]), i))
    for i in order[: max(0, total - int(take.sum()))]:
        take[i] += 1
    rng = np.random.default_rng(seed)
    p_idx, r_idx = [], []
    for i, c in enumerate(classes):
        m = rng.permutation(members[int(c)])
        t = int(np.clip(take[i], 1, m.size - 1))
        p_idx.extend(m[:t])
        r_idx.extend(m[t:])
    return (train.subset(np.sort(p_idx), "perturb_split"),
            train.subset(np.sort(r_idx), "robust_split"))

