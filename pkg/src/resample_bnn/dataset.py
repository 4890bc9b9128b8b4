"""Dataset construction: synthetic textures, patch extraction, manifests.

Every source image yields two copies: the untouched original and one copy
rescaled by a factor drawn from {0.90 + 0.05k : k in 0..11, k != 2} (the
identity 1.00 is excluded). From each copy, N non-overlapping patches are
drawn by seeded rejection sampling. Per-image RNG substreams keyed by the
image index keep generation deterministic and embarrassingly parallel.

Manifest format: ``# cfg key = value`` lines, then a header line, then one
CSV record per patch: ``patch_path,source_id,split,label,scale,kernel,
jpeg_q,seed``. Patch blobs are raw little-endian float64, row-major, P*P
values, one file per patch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import coerce
from .images import load_gray, resample, save_gray
from .models import LABEL_ORIGINAL, LABEL_RESCALED
from .rng import substream

SPLITS = ("train", "val", "test")
EXCLUDED_K = 2
MANIFEST_HEADER = "patch_path,source_id,split,label,scale,kernel,jpeg_q,seed"
MANIFEST_NAME = "manifest.txt"
SOURCE_SUFFIXES = (".png", ".pgm", ".ppm")


def scale_factor_grid() -> list[float]:
    """Training rescale factors 0.90..1.45 step 0.05, identity excluded."""
    return [(90 + 5 * k) / 100.0 for k in range(12) if k != EXCLUDED_K]


@dataclass(frozen=True)
class PatchRecord:
    patch_path: str          # relative to the manifest directory
    source_id: str           # source image file name
    split: str
    label: str               # "original" | "rescaled"
    scale: float             # 1.0 for originals
    kernel: str              # resample kernel, "none" for originals
    jpeg_q: str              # "none" or the integer quality as text
    seed: int                # per-image extraction stream seed key

    @property
    def label_index(self) -> int:
        return LABEL_ORIGINAL if self.label == "original" else LABEL_RESCALED


@dataclass
class DatasetConfig:
    train_images: int = 40
    val_images: int = 5
    test_images: int = 5
    patches_per_copy: int = 8
    patch_size: int = 64
    kernel: str = "bilinear"
    seed: int = 0

    def __post_init__(self):
        if min(self.train_images, self.val_images, self.test_images) < 1:
            raise ValueError("every split needs at least one image")
        if self.patches_per_copy < 1 or self.patch_size < 1:
            raise ValueError("patch counts and size must be positive")

    @classmethod
    def from_mapping(cls, mapping: dict, **overrides) -> "DatasetConfig":
        types = {"train_images": int, "val_images": int, "test_images": int,
                 "patches_per_copy": int, "patch_size": int, "kernel": str,
                 "seed": int}
        kwargs = {}
        for key, value in mapping.items():
            if key not in types:
                raise ValueError(f"unknown dataset config key {key!r}")
            kwargs[key] = coerce(value, types[key])
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class DatasetManifest:
    records: list[PatchRecord]
    config: dict = field(default_factory=dict)
    root: Path | None = None

    def split_records(self, split: str) -> list[PatchRecord]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]

    def training_scales(self) -> list[float]:
        return sorted({r.scale for r in self.split_records("train")
                       if r.label == "rescaled"})


class PatchPlacementError(RuntimeError):
    """Could not place the requested non-overlapping patches."""


def draw_patch_positions(height: int, width: int, n: int, p: int,
                         rng: np.random.Generator,
                         max_attempts: int | None = None) -> list[tuple[int, int]]:
    """n pairwise non-overlapping p x p top-left corners, by rejection.

    A stuck placement (tight packings where early draws block the rest)
    discards the partial layout and restarts, so feasible configurations
    are found even when they require coordinated positions.
    """
    if height < p or width < p:
        raise PatchPlacementError(f"image {height}x{width} smaller than patch {p}")
    if max_attempts is None:
        max_attempts = 1000 * n
    per_patch_budget = 30
    taken: list[tuple[int, int]] = []
    attempts = 0
    stalled = 0
    while len(taken) < n:
        if attempts >= max_attempts:
            raise PatchPlacementError(
                f"placed only {len(taken)}/{n} non-overlapping {p}x{p} patches "
                f"in {height}x{width} after {attempts} attempts")
        y = int(rng.integers(0, height - p + 1))
        x = int(rng.integers(0, width - p + 1))
        attempts += 1
        if all(abs(y - ty) >= p or abs(x - tx) >= p for ty, tx in taken):
            taken.append((y, x))
            stalled = 0
        else:
            stalled += 1
            if stalled >= per_patch_budget:
                taken.clear()
                stalled = 0
    return taken


# -- synthetic source textures -------------------------------------------------

def synth_texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """One composite texture: colored Gaussian field + gradient + periodics.

    The spectral noise floor guarantees energy near Nyquist, which is what
    makes interpolation traces detectable in the first place.
    """
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    radius = np.hypot(fy, fx)
    slope = rng.uniform(0.8, 2.2)
    noise_floor = rng.uniform(0.05, 0.25)
    amplitude = (radius + 1.0 / size) ** (-slope) + noise_floor * size
    spectrum = np.fft.rfft2(rng.standard_normal((size, size))) * amplitude
    f = np.fft.irfft2(spectrum, s=(size, size))
    field = (f - f.mean()) / (f.std() + 1e-12)

    yy, xx = np.mgrid[0:size, 0:size] / size
    gdir = rng.uniform(0, 2 * np.pi)
    gradient = np.cos(gdir) * xx + np.sin(gdir) * yy

    pattern = np.zeros((size, size))
    for _ in range(rng.integers(1, 4)):
        freq = rng.uniform(2.0, size / 4.0)
        theta = rng.uniform(0, 2 * np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        pattern += np.sin(2 * np.pi * freq * (np.cos(theta) * xx
                                              + np.sin(theta) * yy) + phase)
    pattern /= max(np.abs(pattern).max(), 1e-12)

    w_field = rng.uniform(0.5, 1.0)
    w_grad = rng.uniform(0.0, 0.6)
    w_pat = rng.uniform(0.1, 0.5)
    img = w_field * field + w_grad * gradient * 2.0 + w_pat * pattern * 2.0
    lo, hi = img.min(), img.max()
    out = (img - lo) / max(hi - lo, 1e-12) * 235.0 + 10.0
    return out


def synth_textures(count: int, size: int, seed: int) -> list[np.ndarray]:
    return [synth_texture(size, substream(seed, 0xA, i)) for i in range(count)]


def write_textures(out_dir, images, prefix: str = "tex") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        path = out_dir / f"{prefix}_{i:04d}.png"
        save_gray(path, img)
        paths.append(path)
    return paths


# -- patch blobs ----------------------------------------------------------------

def save_patch(path, patch: np.ndarray) -> None:
    Path(path).write_bytes(np.ascontiguousarray(patch, dtype="<f8").tobytes())


def load_patch(path, patch_size: int) -> np.ndarray:
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f8")
    if data.size != patch_size * patch_size:
        raise ValueError(f"{path}: expected {patch_size * patch_size} values, "
                         f"got {data.size}")
    return data.reshape(patch_size, patch_size).astype(np.float64)


# -- manifest I/O ----------------------------------------------------------------

def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = ["# resample-bnn dataset manifest v1"]
    for key, value in manifest.config.items():
        lines.append(f"# cfg {key} = {value}")
    lines.append(MANIFEST_HEADER)
    for r in manifest.records:
        lines.append(f"{r.patch_path},{r.source_id},{r.split},{r.label},"
                     f"{r.scale!r},{r.kernel},{r.jpeg_q},{r.seed}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    config: dict[str, str] = {}
    records: list[PatchRecord] = []
    header_seen = False
    for ln, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if body.startswith("cfg "):
                key, _, value = body[4:].partition("=")
                config[key.strip()] = value.strip()
            continue
        if not header_seen:
            if line != MANIFEST_HEADER:
                raise ValueError(f"{path}:{ln}: bad manifest header {line!r}")
            header_seen = True
            continue
        parts = line.split(",")
        if len(parts) != 8:
            raise ValueError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
        records.append(PatchRecord(
            patch_path=parts[0], source_id=parts[1], split=parts[2],
            label=parts[3], scale=float(parts[4]), kernel=parts[5],
            jpeg_q=parts[6], seed=int(parts[7])))
    if not header_seen:
        raise ValueError(f"{path}: missing manifest header")
    return DatasetManifest(records=records, config=config, root=path.parent)


def load_split(manifest: DatasetManifest, split: str):
    """(x, y) arrays for one split: x is (n, 1, P, P), y is int labels."""
    records = manifest.split_records(split)
    if not records:
        raise ValueError(f"manifest has no records for split {split!r}")
    p = int(manifest.config["patch_size"])
    x = np.empty((len(records), 1, p, p))
    y = np.empty(len(records), dtype=np.intp)
    root = manifest.root or Path(".")
    for i, r in enumerate(records):
        x[i, 0] = load_patch(root / r.patch_path, p)
        y[i] = r.label_index
    return x, y


# -- dataset build ----------------------------------------------------------------

def list_source_images(source_dir) -> list[Path]:
    source_dir = Path(source_dir)
    paths = sorted(p for p in source_dir.iterdir()
                   if p.suffix.lower() in SOURCE_SUFFIXES)
    if not paths:
        raise ValueError(f"no PNG/PGM/PPM source images in {source_dir}")
    return paths


def build_dataset(source_dir, config: DatasetConfig, out_dir) -> DatasetManifest:
    """Generate patches and a manifest under out_dir from source images."""
    out_dir = Path(out_dir)
    paths = list_source_images(source_dir)
    need = config.train_images + config.val_images + config.test_images
    if len(paths) < need:
        raise ValueError(f"need {need} source images, found {len(paths)} "
                         f"in {source_dir}")
    order = substream(config.seed, 0x5).permutation(len(paths))
    assignment: list[tuple[Path, str]] = []
    cursor = 0
    for split, count in (("train", config.train_images),
                         ("val", config.val_images),
                         ("test", config.test_images)):
        for i in range(count):
            assignment.append((paths[order[cursor + i]], split))
        cursor += count

    factors = scale_factor_grid()
    records: list[PatchRecord] = []
    skipped: list[str] = []
    for index, (path, split) in enumerate(assignment):
        rng = substream(config.seed, 0x1, index)
        img = load_gray(path)
        k = int(rng.choice([k for k in range(12) if k != EXCLUDED_K]))
        s = (90 + 5 * k) / 100.0
        assert s in factors
        copies = (("original", 1.0, "none", img),
                  ("rescaled", s, config.kernel,
                   resample(img, s, config.kernel)))
        image_records = []
        try:
            for label, scale, kernel, copy in copies:
                positions = draw_patch_positions(copy.shape[0], copy.shape[1],
                                                 config.patches_per_copy,
                                                 config.patch_size, rng)
                for j, (y, x) in enumerate(positions):
                    rel = f"patches/{split}/{path.stem}_{label}_{j}.f64"
                    blob = out_dir / rel
                    blob.parent.mkdir(parents=True, exist_ok=True)
                    save_patch(blob, copy[y:y + config.patch_size,
                                          x:x + config.patch_size])
                    image_records.append(PatchRecord(
                        patch_path=rel, source_id=path.name, split=split,
                        label=label, scale=scale, kernel=kernel,
                        jpeg_q="none", seed=index))
        except PatchPlacementError as exc:
            skipped.append(path.name)
            warnings.warn(f"skipping {path.name}: {exc}")
            continue
        records.extend(image_records)

    manifest = DatasetManifest(records=records, config={
        "train_images": config.train_images,
        "val_images": config.val_images,
        "test_images": config.test_images,
        "patches_per_copy": config.patches_per_copy,
        "patch_size": config.patch_size,
        "kernel": config.kernel,
        "seed": config.seed,
        "source_dir": str(source_dir),
        "skipped": ";".join(skipped) if skipped else "none",
    }, root=out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    return manifest


def held_out_sources(manifest: DatasetManifest, source_dir=None) -> list[Path]:
    """Full paths of the held-out test-split source images."""
    base = Path(source_dir) if source_dir else Path(manifest.config["source_dir"])
    names = sorted({r.source_id for r in manifest.split_records("test")})
    if not names:
        raise ValueError("manifest has no test-split records")
    paths = [base / n for n in names]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"test sources not found: {', '.join(missing)}")
    return paths
