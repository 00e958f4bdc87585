"""Datasets: CSV manifests, CURE-TSR directory scans, and a synthetic sign set.

Manifest CSV header: ``path,label,corruption,severity``. Relative paths are
resolved against the manifest's directory. Severity 0 rows are clean images
and carry the corruption tag ``clean``.
"""
from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .nuisance import SeveritySpace, corrupt, make_basis, sample_uniform, severity_rho

log = logging.getLogger(__name__)

MANIFEST_HEADER = ("path", "label", "corruption", "severity")
IMAGE_SIZE = 32
CURE_TSR_TRAIN_SIZE = 19_610
CURE_TSR_TEST_PER_SEVERITY = 3_334
IMAGE_SUFFIXES = {".bmp", ".png", ".jpg", ".jpeg", ".ppm", ".tif", ".tiff"}


class ManifestError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, 32, 32) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    corruption: np.ndarray = None  # (N,) str
    severity: np.ndarray = None  # (N,) int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if len(self.images) != n:
            raise ValueError(f"{len(self.images)} images but {n} labels")
        if self.corruption is None:
            self.corruption = np.full(n, "clean", dtype=object)
        if self.severity is None:
            self.severity = np.zeros(n, dtype=np.int64)
        self.corruption = np.asarray(self.corruption, dtype=object)
        self.severity = np.asarray(self.severity, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, mask) -> "Dataset":
        return Dataset(self.images[mask], self.labels[mask], self.corruption[mask], self.severity[mask])


@dataclass
class Benchmark:
    """A training set plus test sets keyed by corruption kind then severity (0 = clean)."""

    train: Dataset
    tests: dict[str, dict[int, Dataset]] = field(default_factory=dict)
    n_classes: int = 14


# synthetic signs

_PALETTE = np.array([
    [0.85, 0.10, 0.10], [0.10, 0.30, 0.80], [0.95, 0.80, 0.10], [0.10, 0.60, 0.25],
    [0.95, 0.50, 0.05], [0.55, 0.20, 0.65], [0.15, 0.70, 0.75],
])
_SHAPES = ("circle", "triangle", "inverted_triangle", "square", "diamond", "octagon", "hexagon")


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    n_classes: int = 14
    train_per_class: int = 100
    test_per_class: int = 30
    corruptions: tuple = ("snow", "rain")
    basis_dim: int = 16
    basis_seed: int = 0
    rho_unit: dict | None = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_classes > 2 * len(_SHAPES):
            raise ValueError(f"at most {2 * len(_SHAPES)} synthetic classes are available")
        object.__setattr__(self, "corruptions", tuple(self.corruptions))


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray, radius: float) -> np.ndarray:
    if shape == "circle":
        return u * u + v * v <= radius * radius
    sides, rot = {
        "triangle": (3, -np.pi / 2), "inverted_triangle": (3, np.pi / 2), "square": (4, np.pi / 4),
        "diamond": (4, 0.0), "octagon": (8, np.pi / 8), "hexagon": (6, 0.0),
    }[shape]
    inside = np.ones(u.shape, dtype=bool)
    apothem = radius * np.cos(np.pi / sides)
    for i in range(sides):
        # outward normal of edge i sits halfway between vertices i and i + 1
        a = rot + (2 * i + 1) * np.pi / sides
        inside &= u * np.cos(a) + v * np.sin(a) <= apothem
    return inside


def _render_sign(cls: int, rng: np.random.Generator, ss: int = 2) -> np.ndarray:
    n = IMAGE_SIZE * ss
    yy, xx = (np.mgrid[0:n, 0:n] + 0.5) / ss
    shape = _SHAPES[cls % len(_SHAPES)]
    variant = cls // len(_SHAPES)

    # smooth textured background
    bg_color = rng.uniform(0.2, 0.6, 3)
    tex = np.zeros_like(xx)
    for _ in range(3):
        fx, fy = rng.uniform(-3, 3, 2)
        tex += np.cos(2 * np.pi * (fx * xx + fy * yy) / IMAGE_SIZE + rng.uniform(0, 2 * np.pi)) / 3
    img = bg_color[:, None, None] * (1 + 0.25 * tex)[None]

    cy, cx = IMAGE_SIZE / 2 + rng.uniform(-2.5, 2.5, 2)
    radius = rng.uniform(10.5, 13.5)
    ang = rng.uniform(-0.2, 0.2)
    u0, v0 = xx - cx, yy - cy
    u = np.cos(ang) * u0 + np.sin(ang) * v0
    v = -np.sin(ang) * u0 + np.cos(ang) * v0

    body = _PALETTE[(cls % len(_SHAPES) + 3 * variant) % len(_PALETTE)] * rng.uniform(0.85, 1.1)
    rim = np.array([0.05, 0.05, 0.05]) if variant == 0 else np.array([0.95, 0.95, 0.95])
    outer = _shape_mask(shape, u, v, radius)
    inner = _shape_mask(shape, u, v, radius * 0.72)
    img = np.where(outer[None], rim[:, None, None], img)
    img = np.where(inner[None], body[:, None, None], img)

    half = radius * 0.3
    if variant == 0:
        glyph = (np.abs(v) <= 1.4) & (np.abs(u) <= half)
    else:
        glyph = ((np.abs(u) <= 1.4) & (np.abs(v) <= half)) | ((np.abs(v) <= 1.4) & (np.abs(u) <= half))
    img = np.where(glyph[None] & inner[None], rim[:, None, None], img)

    img = img.reshape(3, IMAGE_SIZE, ss, IMAGE_SIZE, ss).mean(axis=(2, 4))
    img = img * rng.uniform(0.8, 1.15) + rng.normal(0, 0.03, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _render_set(classes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([_render_sign(int(c), rng) for c in classes]) if len(classes) else \
        np.zeros((0, 3, IMAGE_SIZE, IMAGE_SIZE), np.float32)


def corruption_family(clean: Dataset, kind: str, levels, basis_dim: int = 16, basis_seed: int = 0,
                      rho_unit: float | None = None, seed: int = 0) -> dict[int, Dataset]:
    """Corrupted copies of ``clean`` at each level via the variation model (level 0 is ``clean``)."""
    basis = make_basis(kind, basis_dim, basis_seed, clean.images.shape[-1], clean.images.shape[1])
    out = {}
    for level in levels:
        if level == 0:
            out[0] = clean
            continue
        space = SeveritySpace(kind, severity_rho(kind, level, rho_unit), basis_dim, level)
        rng = np.random.default_rng([seed, 7919, level, basis.dim])
        z = sample_uniform(space, rng, len(clean))
        images = corrupt(basis, clean.images, z) if len(clean) else clean.images
        out[level] = Dataset(images, clean.labels, np.full(len(clean), kind, dtype=object),
                             np.full(len(clean), level))
    return out


def generate_synthetic(spec: SyntheticSpec) -> Benchmark:
    """Deterministic desk-scale benchmark: clean train set, clean + corrupted test sets."""
    rng = np.random.default_rng([spec.seed, 104729])
    train_y = np.repeat(np.arange(spec.n_classes), spec.train_per_class)
    test_y = np.repeat(np.arange(spec.n_classes), spec.test_per_class)
    train = Dataset(_render_set(train_y, rng), train_y)
    test = Dataset(_render_set(test_y, rng), test_y)
    units = spec.rho_unit or {}
    tests = {kind: corruption_family(test, kind, range(6), spec.basis_dim, spec.basis_seed,
                                     units.get(kind), spec.seed)
             for kind in spec.corruptions}
    if not tests:
        tests = {"clean": {0: test}}
    return Benchmark(train, tests, spec.n_classes)


# manifests


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: int
    corruption: str
    severity: int


def write_manifest(rows, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in rows:
            w.writerow([r.path, r.label, r.corruption, r.severity])


def read_manifest(path: str | Path, n_classes: int = 14) -> list[ManifestRow]:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    rows, seen = [], set()
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        if tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {','.join(header)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(rec)}")
            p, label, corr, sev = (f.strip() for f in rec)
            try:
                label_i, sev_i = int(label), int(sev)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: label and severity must be integers") from None
            if not 0 <= label_i < n_classes:
                raise ManifestError(f"{path}:{lineno}: label {label_i} outside [0, {n_classes})")
            if not 0 <= sev_i <= 5:
                raise ManifestError(f"{path}:{lineno}: severity {sev_i} outside 0..5")
            if (sev_i == 0) != (corr == "clean"):
                raise ManifestError(f"{path}:{lineno}: severity 0 must coincide with corruption 'clean'")
            if p in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate path {p}")
            seen.add(p)
            rows.append(ManifestRow(p, label_i, corr, sev_i))
    return rows


def load_image(path: str | Path, size: int = IMAGE_SIZE) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def load_manifest(path: str | Path, n_classes: int = 14) -> Dataset:
    """Load every row of a manifest into memory, resizing to 32x32 where needed."""
    path = Path(path)
    return load_rows(read_manifest(path, n_classes), path.parent)


def load_rows(rows, base: str | Path, n_classes: int = 14) -> Dataset:
    """Images for manifest rows; relative paths resolve against ``base``."""
    base = Path(base)
    if not rows:
        return Dataset(np.zeros((0, 3, IMAGE_SIZE, IMAGE_SIZE), np.float32), np.zeros(0, np.int64))
    bad = [r.label for r in rows if not 0 <= r.label < n_classes]
    if bad:
        raise ManifestError(f"label {bad[0]} outside [0, {n_classes})")
    images = []
    for r in rows:
        p = Path(r.path)
        images.append(load_image(p if p.is_absolute() else base / p))
    return Dataset(np.stack(images), [r.label for r in rows], [r.corruption for r in rows],
                   [r.severity for r in rows])


def group_tests(test: Dataset, corruptions=None) -> dict[str, dict[int, Dataset]]:
    """Split a mixed test set into families; clean rows become severity 0 of every family."""
    clean = test.subset(test.severity == 0)
    kinds = sorted({str(c) for c in test.corruption if c != "clean"})
    if corruptions is not None:
        kinds = [k for k in corruptions if k in kinds] or list(corruptions)
    out = {}
    for kind in kinds:
        fam = {0: clean} if len(clean) else {}
        for level in range(1, 6):
            m = (test.corruption == kind) & (test.severity == level)
            if m.any():
                fam[level] = test.subset(m)
        out[kind] = fam
    if not out and len(clean):
        out["clean"] = {0: clean}
    return out


# CURE-TSR layout

CURE_TSR_CHALLENGES = {
    0: "clean", 1: "decolorization", 2: "lens_blur", 3: "codec_error", 4: "darkening",
    5: "dirty_lens", 6: "exposure", 7: "gaussian_blur", 8: "noise", 9: "rain",
    10: "shadow", 11: "snow", 12: "haze",
}


@dataclass(frozen=True)
class CureTsrParser:
    """Field positions in ``sequenceType_signType_challengeType_challengeLevel_index``."""

    sign_field: int = 1
    challenge_field: int = 2
    level_field: int = 3
    n_fields: int = 5
    label_offset: int = 1  # sign types are numbered from 01
    challenges: dict = field(default_factory=lambda: dict(CURE_TSR_CHALLENGES))

    def parse(self, name: str) -> tuple[int, str, int] | None:
        stem = Path(name).stem
        parts = stem.split("_")
        if len(parts) != self.n_fields or not all(re.fullmatch(r"\d+", p) for p in parts):
            return None
        label = int(parts[self.sign_field]) - self.label_offset
        challenge = int(parts[self.challenge_field])
        level = int(parts[self.level_field])
        if challenge not in self.challenges or not 0 <= level <= 5 or label < 0:
            return None
        kind = self.challenges[challenge]
        if (kind == "clean") != (level == 0):
            return None
        return label, kind, level

    def code(self, kind: str) -> int:
        for k, v in self.challenges.items():
            if v == kind:
                return k
        raise KeyError(kind)


@dataclass
class ScanResult:
    rows: list[ManifestRow]
    skipped: int


def scan_cure_tsr(root_dir: str | Path, parser: CureTsrParser | None = None) -> ScanResult:
    """Parse every image file under ``root_dir`` into manifest rows (paths relative to root)."""
    root = Path(root_dir)
    if not root.is_dir():
        raise ManifestError(f"not a directory: {root}")
    parser = parser or CureTsrParser()
    rows, skipped = [], 0
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        parsed = parser.parse(p.name) if p.suffix.lower() in IMAGE_SUFFIXES else None
        if parsed is None:
            if p.suffix.lower() != ".csv":
                skipped += 1
            continue
        label, kind, level = parsed
        rows.append(ManifestRow(p.relative_to(root).as_posix(), label, kind, level))
    if skipped:
        log.warning("skipped %d unparseable files under %s", skipped, root)
    if not rows:
        raise ManifestError(f"no CURE-TSR style image files found under {root}")
    return ScanResult(rows, skipped)


def export_dataset(ds: Dataset, out_dir: str | Path, split: str, parser: CureTsrParser | None = None,
                   sequence: int = 2) -> list[ManifestRow]:
    """Write PNGs named in the CURE-TSR convention plus ``<split>_manifest.csv``."""
    parser = parser or CureTsrParser()
    out = Path(out_dir)
    img_dir = out / split
    img_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(ds)):
        kind, level = str(ds.corruption[i]), int(ds.severity[i])
        fields = [0] * parser.n_fields
        fields[0] = sequence
        fields[parser.sign_field] = int(ds.labels[i]) + parser.label_offset
        fields[parser.challenge_field] = parser.code(kind)
        fields[parser.level_field] = level
        fields[-1] = i + 1
        name = "_".join(f"{f:02d}" for f in fields[:-1]) + f"_{fields[-1]:05d}.png"
        arr = np.clip(np.rint(ds.images[i].transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(img_dir / name)
        rows.append(ManifestRow(f"{split}/{name}", int(ds.labels[i]), kind, level))
    write_manifest(rows, out / f"{split}_manifest.csv")
    return rows


def concat(datasets) -> Dataset:
    datasets = [d for d in datasets if len(d)]
    if not datasets:
        return Dataset(np.zeros((0, 3, IMAGE_SIZE, IMAGE_SIZE), np.float32), np.zeros(0, np.int64))
    return Dataset(np.concatenate([d.images for d in datasets]), np.concatenate([d.labels for d in datasets]),
                   np.concatenate([d.corruption for d in datasets]), np.concatenate([d.severity for d in datasets]))


def export_benchmark(bench: Benchmark, out_dir: str | Path) -> dict[str, list[ManifestRow]]:
    """Export train and test splits; the shared clean test set is written once."""
    families = list(bench.tests.values())
    test_parts = [families[0][0]] if families and 0 in families[0] else []
    for fam in families:
        test_parts += [ds for level, ds in sorted(fam.items()) if level > 0]
    return {"train": export_dataset(bench.train, out_dir, "train"),
            "test": export_dataset(concat(test_parts), out_dir, "test")}
