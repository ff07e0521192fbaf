"""Synthetic multi-domain segmentation data and the on-disk dataset layout.

Images are rendered from two independent random streams per image, one for
geometry and one for appearance, both derived from ``(seed, index)``. Styles
therefore change pixel intensities but never the masks.

Dataset directory layout::

    <dir>/images/0000.png   16-bit grayscale
    <dir>/masks/0000.png    8-bit label map
    <dir>/manifest          "images/0000.png<TAB>masks/0000.png" per line
    <dir>/meta              key=value lines (domain_id, name, style, seed, ...)
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

TEXTURE_AMPLITUDE = 0.08
_U16 = 65535.0


@dataclass
class DomainDataset:
    images: np.ndarray  # (N, 1, H, W) float64 in [0, 1]
    masks: np.ndarray  # (N, H, W) int64 in [0, K)
    domain_id: int
    name: str = ""
    num_classes: int = 2
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.masks = np.asarray(self.masks, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise DataError(f"images must be (N, 1, H, W), got {self.images.shape}")
        if self.masks.shape != (self.images.shape[0],) + self.images.shape[2:]:
            raise DataError(f"masks {self.masks.shape} do not match images {self.images.shape}")
        if self.masks.size and (self.masks.min() < 0 or self.masks.max() >= self.num_classes):
            raise DataError(f"{self.name or self.domain_id}: labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "DomainDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return DomainDataset(self.images[idx], self.masks[idx], self.domain_id, self.name, self.num_classes, dict(self.meta))


@dataclass(frozen=True)
class Style:
    base_intensity: float = 0.2
    contrast: float = 0.5
    noise_sigma: float = 0.03
    texture_freq: float = 0.0

    def validate(self) -> None:
        if not 0.0 <= self.base_intensity <= 1.0:
            raise ConfigError(f"base_intensity must lie in [0, 1], got {self.base_intensity}")
        if not 0.0 <= self.base_intensity + self.contrast <= 1.0:
            raise ConfigError("base_intensity + contrast must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if not 0.0 <= self.texture_freq <= 0.5:
            raise ConfigError(f"texture_freq must lie in [0, 0.5] cycles/pixel, got {self.texture_freq}")


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")


def _streams(seed: int, index: int) -> tuple[np.random.Generator, np.random.Generator]:
    geometry, appearance = np.random.SeedSequence([seed, index]).spawn(2)
    return np.random.default_rng(geometry), np.random.default_rng(appearance)


def _draw_mask(rng: np.random.Generator, size: int, num_classes: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=np.int64)
    if num_classes == 2:
        labels = [1] * int(rng.integers(1, 4))
        lo, hi = 0.08, 0.22
    else:
        labels = list(range(1, num_classes))
        lo, hi = 0.07, 0.16
    for label in labels:
        cy, cx = rng.uniform(0.25, 0.75, size=2) * size
        ay, ax = rng.uniform(lo, hi, size=2) * size
        theta = rng.uniform(0.0, math.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        mask[(u / ax) ** 2 + (v / ay) ** 2 <= 1.0] = label
    return mask


def _render(mask: np.ndarray, style: Style, rng: np.random.Generator, num_classes: int) -> np.ndarray:
    size = mask.shape[0]
    levels = style.base_intensity + style.contrast * np.arange(num_classes) / max(num_classes - 1, 1)
    img = levels[mask]
    phase, theta = rng.uniform(0.0, 2 * math.pi), rng.uniform(0.0, math.pi)
    noise = rng.standard_normal((size, size))
    if style.texture_freq > 0:
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        wave = xx * math.cos(theta) + yy * math.sin(theta)
        img = img + TEXTURE_AMPLITUDE * np.sin(2 * math.pi * style.texture_freq * wave + phase)
    if style.noise_sigma > 0:
        img = img + style.noise_sigma * noise
    return np.clip(img, 0.0, 1.0)


def _num_workers() -> int:
    try:
        return max(1, int(os.environ.get("METASTYLE_NUM_WORKERS", "1")))
    except ValueError:
        raise ConfigError("METASTYLE_NUM_WORKERS must be an integer") from None


def make_synthetic_domain(
    style: Style,
    n: int,
    seed: int,
    *,
    size: int = 64,
    num_classes: int = 2,
    domain_id: int = 0,
    name: str = "",
    offset: int = 0,
) -> DomainDataset:
    """Render ``n`` images; image ``i`` depends only on ``(seed, offset + i)`` and ``style``."""
    style.validate()
    if n < 1:
        raise ConfigError(f"need at least one image, got {n}")
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")

    def one(i):
        geo, app = _streams(seed, offset + i)
        mask = _draw_mask(geo, size, num_classes)
        return _render(mask, style, app, num_classes), mask

    workers = _num_workers()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            pairs = list(pool.map(one, range(n)))
    else:
        pairs = [one(i) for i in range(n)]
    images = np.stack([p[0] for p in pairs])[:, None]
    masks = np.stack([p[1] for p in pairs])
    meta = {"seed": seed, "offset": offset, **asdict(style)}
    return DomainDataset(images, masks, domain_id, name, num_classes, meta)


def split(ds: DomainDataset, spec: SplitSpec = SplitSpec()) -> tuple[DomainDataset, DomainDataset]:
    n = len(ds)
    if n < 2:
        raise ConfigError(f"cannot split a dataset of {n} image(s)")
    n_train = min(n - 1, max(1, math.floor(spec.train_fraction * n + 0.5)))
    perm = np.random.default_rng(spec.seed).permutation(n)
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


# --- benchmark scenarios ----------------------------------------------------

SCENARIOS = {
    "brats-like": {
        "seed": 20250,
        "num_classes": 2,
        "source": ("t2", Style(0.15, 0.55, 0.03, 0.0)),
        "targets": [
            ("flair", Style(0.65, -0.1, 0.04, 0.0)),
            ("t1", Style(0.45, 0.1, 0.06, 0.15)),
            ("t1ce", Style(0.05, 0.1, 0.08, 0.15)),
        ],
    },
    "abdominal-like": {
        "seed": 31337,
        "num_classes": 5,
        "source": ("ct", Style(0.1, 0.7, 0.03, 0.0)),
        "targets": [
            ("mri-t2", Style(0.85, -0.75, 0.04, 0.0)),
            ("mri-t1", Style(0.35, 0.3, 0.05, 0.1)),
            ("cbct", Style(0.2, 0.45, 0.08, 0.25)),
        ],
    },
}


@dataclass
class ScenarioDomain:
    name: str
    role: str  # "source" or "target"
    train: DomainDataset
    val: DomainDataset
    test: DomainDataset


def make_scenario(
    name: str = "brats-like",
    *,
    n_train: int = 200,
    n_val: int = 50,
    n_test: int = 50,
    size: int = 64,
    seed: int | None = None,
) -> list[ScenarioDomain]:
    """Source domain first, then the held-out target domains.

    All domains share geometry (same seed), so split ``k`` of every domain
    holds the same anatomy rendered in different styles.
    """
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    spec = SCENARIOS[name]
    seed = spec["seed"] if seed is None else seed
    k = spec["num_classes"]
    roles = [("source", *spec["source"])] + [("target", *t) for t in spec["targets"]]
    out = []
    for domain_id, (role, dname, style) in enumerate(roles):
        parts = {}
        offset = 0
        for part, count in (("train", n_train), ("val", n_val), ("test", n_test)):
            parts[part] = make_synthetic_domain(
                style, count, seed, size=size, num_classes=k, domain_id=domain_id, name=dname, offset=offset
            )
            offset += count
        out.append(ScenarioDomain(dname, role, **parts))
    return out


# --- disk I/O -----------------------------------------------------------------


def _write_meta(path: Path, meta: dict) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in meta.items()))


def read_meta(path: str | os.PathLike) -> dict[str, str]:
    meta = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def save_domain(ds: DomainDataset, directory: str | os.PathLike, extra_meta: dict | None = None) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(len(ds)):
        img_rel, mask_rel = f"images/{i:04d}.png", f"masks/{i:04d}.png"
        pixels = np.rint(ds.images[i, 0] * _U16).astype(np.uint16)
        Image.fromarray(pixels).save(directory / img_rel)
        Image.fromarray(ds.masks[i].astype(np.uint8)).save(directory / mask_rel)
        lines.append(f"{img_rel}\t{mask_rel}\n")
    (directory / "manifest").write_text("".join(lines))
    meta = {
        "domain_id": ds.domain_id,
        "name": ds.name,
        "num_classes": ds.num_classes,
        "scaling": "fixed",
        **{k: v for k, v in ds.meta.items()},
        **(extra_meta or {}),
    }
    _write_meta(directory / "meta", meta)
    return directory


def load_external(
    directory: str | os.PathLike,
    manifest: str | os.PathLike = "manifest",
    *,
    num_classes: int | None = None,
    domain_id: int | None = None,
    scaling: str | None = None,
) -> DomainDataset:
    """Load grayscale image/mask pairs listed in a manifest.

    ``scaling="minmax"`` (the default for foreign data) rescales each image to
    [0, 1]; a constant image becomes all zeros. ``scaling="fixed"`` divides by
    the integer range of the file's dtype and is what :func:`save_domain` writes.
    Values missing from the arguments are taken from a ``meta`` file if present.
    """
    directory = Path(directory)
    manifest_path = directory / manifest
    if not manifest_path.is_file():
        raise DataError(f"manifest not found: {manifest_path}")
    meta = read_meta(directory / "meta") if (directory / "meta").is_file() else {}
    num_classes = int(meta.get("num_classes", 2)) if num_classes is None else num_classes
    domain_id = int(meta.get("domain_id", 0)) if domain_id is None else domain_id
    scaling = meta.get("scaling", "minmax") if scaling is None else scaling
    if scaling not in ("minmax", "fixed"):
        raise ConfigError(f"unknown scaling {scaling!r}")

    images, masks = [], []
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise DataError(f"{manifest_path}:{lineno}: expected 'image<TAB>mask'")
        img_path, mask_path = directory / fields[0], directory / fields[1]
        for p in (img_path, mask_path):
            if not p.is_file():
                raise DataError(f"{manifest_path}:{lineno}: missing file {p}")
        raw = np.asarray(Image.open(img_path))
        mask = np.asarray(Image.open(mask_path)).astype(np.int64)
        if raw.ndim != 2 or mask.ndim != 2:
            raise DataError(f"pair {fields[0]} / {fields[1]}: expected 2D grayscale slices")
        if raw.shape != mask.shape:
            raise DataError(f"pair {fields[0]} / {fields[1]}: image {raw.shape} vs mask {mask.shape}")
        if mask.min() < 0 or mask.max() >= num_classes:
            raise DataError(f"pair {fields[0]} / {fields[1]}: labels outside [0, {num_classes})")
        if scaling == "fixed":
            img = raw.astype(np.float64) / float(np.iinfo(raw.dtype).max)
        else:
            img = raw.astype(np.float64)
            lo, hi = img.min(), img.max()
            img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
        images.append(img)
        masks.append(mask)
    if not images:
        raise DataError(f"{manifest_path}: no image/mask pairs listed")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"{manifest_path}: images have differing shapes {sorted(shapes)}")
    return DomainDataset(np.stack(images)[:, None], np.stack(masks), domain_id, meta.get("name", directory.name), num_classes, meta)


def save_scenario(domains: list[ScenarioDomain], directory: str | os.PathLike, meta: dict | None = None) -> Path:
    """Write ``<dir>/<domain>/{train,val,test}`` plus a ``scenario`` index file."""
    directory = Path(directory)
    for dom in domains:
        for part in ("train", "val", "test"):
            save_domain(getattr(dom, part), directory / dom.name / part, {"role": dom.role, "split": part})
    index = {**(meta or {}), "domains": ",".join(f"{d.name}:{d.role}" for d in domains)}
    _write_meta(directory / "scenario", index)
    return directory


def load_scenario(directory: str | os.PathLike) -> tuple[list[ScenarioDomain], dict[str, str]]:
    directory = Path(directory)
    index_path = directory / "scenario"
    if not index_path.is_file():
        raise DataError(f"no scenario index in {directory} (run generate-data first)")
    meta = read_meta(index_path)
    out = []
    for item in meta.get("domains", "").split(","):
        if ":" not in item:
            raise DataError(f"{index_path}: malformed domains entry {item!r}")
        name, role = item.split(":", 1)
        parts = {}
        for part in ("train", "val", "test"):
            path = directory / name / part
            if not path.is_dir():
                raise DataError(f"missing domain directory {path}")
            parts[part] = load_external(path)
        out.append(ScenarioDomain(name, role, **parts))
    if not out or out[0].role != "source":
        raise DataError(f"{index_path}: the first domain must be the source")
    return out, meta
