"""Netpbm rasters, colour palettes and dataset manifests."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from ..errors import DataError
from ..metrics import IGNORE_INDEX
from ..seeding import rng_for
from ..tensor import Tensor

SPLITS = ("train", "val", "test")


@dataclass(eq=False)
class SegSample:
    image: Tensor  # (1,3,H,W) in [0,1]
    labels: np.ndarray  # (1,1,H,W) integer
    id: str = ""

    def validate(self, num_classes: int, ignore_index: int = IGNORE_INDEX) -> None:
        if self.image.shape[:2] != (1, 3):
            raise DataError(f"{self.id}: image must be (1,3,H,W), got {self.image.shape}")
        if self.labels.shape != (1, 1) + self.image.shape[2:]:
            raise DataError(f"{self.id}: label map {self.labels.shape} does not match image {self.image.shape}")
        d = self.image.data
        if d.min() < 0 or d.max() > 1:
            raise DataError(f"{self.id}: image values outside [0,1]")
        bad = (self.labels != ignore_index) & ((self.labels < 0) | (self.labels >= num_classes))
        if bad.any():
            raise DataError(f"{self.id}: label {self.labels[bad][0]} outside [0,{num_classes}) and not {ignore_index}")


# ------------------------------------------------------------------ netpbm

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_header(raw: bytes, path) -> tuple[bytes, int, int, int, int]:
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise DataError(f"{path}: malformed netpbm header")
        fields.append(m.group(1))
        pos = m.end()
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported netpbm type {magic!r}; need binary P5 or P6")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise DataError(f"{path}: malformed netpbm header") from exc
    if w < 1 or h < 1:
        raise DataError(f"{path}: bad dimensions {w}x{h}")
    if maxval != 255:
        raise DataError(f"{path}: maxval {maxval} unsupported (need 255)")
    if pos >= len(raw) or raw[pos : pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise DataError(f"{path}: malformed netpbm header")
    return magic, w, h, maxval, pos + 1


def read_netpbm(path: str | Path) -> np.ndarray:
    """Raw uint8 raster: (H,W) for P5, (H,W,3) for P6."""
    raw = Path(path).read_bytes()
    magic, w, h, _, start = _parse_header(raw, path)
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    payload = raw[start : start + need]
    if len(payload) < need:
        raise DataError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)


def write_netpbm(path: str | Path, raster: np.ndarray) -> None:
    raster = np.asarray(raster)
    if raster.dtype != np.uint8:
        raise DataError(f"netpbm rasters are 8-bit; got dtype {raster.dtype}")
    if raster.ndim == 2:
        magic = b"P5"
    elif raster.ndim == 3 and raster.shape[2] == 3:
        magic = b"P6"
    else:
        raise DataError(f"cannot store raster of shape {raster.shape} as P5/P6")
    h, w = raster.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(raster).tobytes())


def load_ppm_pgm(path: str | Path) -> np.ndarray:
    """P6 -> float image (1,3,H,W) in [0,1]; P5 -> integer label map (1,1,H,W)."""
    r = read_netpbm(path)
    if r.ndim == 3:
        return (r.astype(np.float64) / 255.0).transpose(2, 0, 1)[None]
    return r.astype(np.int64)[None, None]


def image_to_raster(image: np.ndarray) -> np.ndarray:
    """(1,3,H,W) floats in [0,1] -> (H,W,3) uint8."""
    return np.clip(np.rint(image[0].transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


# ----------------------------------------------------------------- palette


@dataclass
class Palette:
    ids: list[int]
    names: list[str]
    colors: list[tuple[int, int, int]]

    @property
    def class_names(self) -> list[str]:
        """Names of the real classes (ignore entry excluded), ordered by id."""
        return [n for i, n in sorted(zip(self.ids, self.names)) if i != IGNORE_INDEX]

    def rgb_to_labels(self, rgb: np.ndarray) -> np.ndarray:
        """Map an (H,W,3) colour-coded annotation to class ids; unknown colours are an error."""
        key = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
        table = {(r << 16) | (g << 8) | b: cid for cid, (r, g, b) in zip(self.ids, self.colors)}
        out = np.full(key.shape, -1, dtype=np.int64)
        for k, cid in table.items():
            out[key == k] = cid
        if (out < 0).any():
            y, x = np.argwhere(out < 0)[0]
            raise DataError(f"colour {tuple(int(v) for v in rgb[y, x])} at (y={y}, x={x}) is not in the palette")
        return out


def parse_palette(text: str, source: str = "<palette>") -> Palette:
    ids, names, colors = [], [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{source}:{lineno}: expected class_id<TAB>name<TAB>R,G,B")
        try:
            cid = int(parts[0])
            rgb = tuple(int(v) for v in parts[2].split(","))
        except ValueError as exc:
            raise DataError(f"{source}:{lineno}: bad palette entry") from exc
        if len(rgb) != 3 or not all(0 <= v <= 255 for v in rgb):
            raise DataError(f"{source}:{lineno}: colour must be three bytes")
        if cid in ids:
            raise DataError(f"{source}:{lineno}: duplicate class id {cid}")
        ids.append(cid)
        names.append(parts[1])
        colors.append(rgb)
    real = sorted(i for i in ids if i != IGNORE_INDEX)
    if real != list(range(len(real))):
        raise DataError(f"{source}: class ids must be 0..C-1 (plus optional {IGNORE_INDEX})")
    return Palette(ids, names, colors)


def load_palette(path_or_name: str | Path) -> Palette:
    """Load a palette file, or a bundled one by name (``camvid``, ``cityscapes``)."""
    p = Path(path_or_name)
    if p.exists():
        return parse_palette(p.read_text(), str(p))
    name = str(path_or_name)
    try:
        text = resources.files("sernet.data").joinpath("palettes", f"{name}.tsv").read_text()
    except FileNotFoundError as exc:
        raise DataError(f"no palette file or bundled palette named {name!r}") from exc
    return parse_palette(text, name)


# ---------------------------------------------------------------- manifest


@dataclass
class ManifestEntry:
    split: str
    image: Path
    label: Path

    @property
    def id(self) -> str:
        return self.image.stem


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]


def load_manifest(path: str | Path, class_names: Sequence[str] = ()) -> DatasetManifest:
    """Parse ``split<TAB>image<TAB>label`` lines; relative paths resolve against the manifest's folder."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    root = path.parent
    m = DatasetManifest(root, class_names=list(class_names))
    ids: dict[str, int] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected split<TAB>image<TAB>label")
        split, img, lab = parts
        if split not in SPLITS:
            raise DataError(f"{path}:{lineno}: unknown split {split!r}")
        e = ManifestEntry(split, root / img, root / lab)
        for f in (e.image, e.label):
            if not f.exists():
                raise DataError(f"{path}:{lineno}: missing file {f}")
        if e.id in ids:
            raise DataError(f"{path}:{lineno}: duplicate id {e.id!r} (first at line {ids[e.id]})")
        ids[e.id] = lineno
        m.entries.append(e)
    return m


def load_sample(entry: ManifestEntry, palette: Palette | None = None) -> SegSample:
    image = load_ppm_pgm(entry.image)
    if image.shape[1] != 3:
        raise DataError(f"{entry.image}: expected a P6 colour image")
    raw = read_netpbm(entry.label)
    if raw.ndim == 3:
        if palette is None:
            raise DataError(f"{entry.label}: colour label map needs a palette")
        labels = palette.rgb_to_labels(raw)[None, None]
    else:
        labels = raw.astype(np.int64)[None, None]
    if labels.shape[2:] != image.shape[2:]:
        raise DataError(f"{entry.id}: image {image.shape[2:]} and labels {labels.shape[2:]} differ in size")
    return SegSample(Tensor(image), labels, entry.id)


def iterate(manifest: DatasetManifest, split: str, seed: int = 0, palette: Palette | None = None) -> Iterator[SegSample]:
    """Samples of ``split``: seeded shuffle for train, lexicographic by id otherwise."""
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}")
    entries = sorted(manifest.split(split), key=lambda e: e.id)
    if split == "train" and entries:
        entries = [entries[i] for i in rng_for(seed, "manifest_order").permutation(len(entries))]
    for e in entries:
        yield load_sample(e, palette)


def write_dataset(root: str | Path, splits: dict[str, Sequence[SegSample]]) -> Path:
    """Write samples as PPM/PGM pairs plus ``manifest.tsv`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    lines = []
    for split, samples in splits.items():
        for s in samples:
            if s.labels.max() > 255 or s.labels.min() < 0:
                raise DataError(f"{s.id}: labels do not fit in 8 bits")
            write_netpbm(root / "images" / f"{s.id}.ppm", image_to_raster(s.image.data))
            write_netpbm(root / "labels" / f"{s.id}.pgm", s.labels[0, 0].astype(np.uint8))
            lines.append(f"{split}\timages/{s.id}.ppm\tlabels/{s.id}.pgm")
    manifest = root / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
