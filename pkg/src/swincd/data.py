"""Dataset ingestion, tiling, dihedral augmentation, synthetic pair
generation, and change-map colorization.

Datasets live in a directory with ``A/`` (pre-change), ``B/`` (post-change)
and ``label/`` subdirectories holding same-named 8-bit PNGs, plus one
``<split>.txt`` manifest per split listing filenames.
"""

import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import DatasetError, DimensionError, GenerationError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
LABEL_THRESHOLD = 128  # 8-bit label values >= this count as changed

# TP/TN/FP/FN colors of the colorized change map.
COLOR_TP = (255, 255, 255)
COLOR_TN = (0, 0, 0)
COLOR_FP = (0, 255, 0)
COLOR_FN = (255, 0, 0)

N_DIHEDRAL_OPS = 8


@dataclass
class BitemporalPair:
    """An aligned pre/post image pair with an optional binary label.

    Images are (H, W, 3) uint8; the label is (H, W) uint8 with values in
    {0, 1}.
    """

    a: np.ndarray
    b: np.ndarray
    label: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        if self.a.shape != self.b.shape:
            raise DimensionError(
                f"image shapes differ: {self.a.shape} vs {self.b.shape}"
            )
        if self.label is not None and self.label.shape != self.a.shape[:2]:
            raise DimensionError(
                f"label shape {self.label.shape} does not match image "
                f"extent {self.a.shape[:2]}"
            )

    @property
    def size(self) -> Tuple[int, int]:
        return self.a.shape[0], self.a.shape[1]


def tile_pair(pair: BitemporalPair, tile: int) -> List[BitemporalPair]:
    """Cut a pair into row-major non-overlapping tiles.

    Partial edge tiles are dropped with a logged warning; a tile larger
    than the image yields an empty list.
    """
    if tile <= 0:
        raise DimensionError(f"tile size must be positive, got {tile}")
    h, w = pair.size
    rows, cols = h // tile, w // tile
    if rows * tile != h or cols * tile != w:
        logger.warning(
            "dropping partial tiles of %s: %dx%d image, tile %d",
            pair.name or "<pair>", h, w, tile,
        )
    tiles = []
    for r in range(rows):
        for c in range(cols):
            ys, xs = slice(r * tile, (r + 1) * tile), slice(c * tile, (c + 1) * tile)
            tiles.append(BitemporalPair(
                a=pair.a[ys, xs].copy(),
                b=pair.b[ys, xs].copy(),
                label=None if pair.label is None else pair.label[ys, xs].copy(),
                name=f"{pair.name}_r{r}c{c}" if pair.name else f"r{r}c{c}",
            ))
    return tiles


def apply_dihedral(arr: np.ndarray, op: int) -> np.ndarray:
    """Apply one of the 8 dihedral symmetries: optional horizontal flip
    (op >= 4) followed by op % 4 counterclockwise quarter turns."""
    if not 0 <= op < N_DIHEDRAL_OPS:
        raise ValueError(f"dihedral op must be in [0, {N_DIHEDRAL_OPS}), got {op}")
    out = arr[:, ::-1] if op >= 4 else arr
    return np.ascontiguousarray(np.rot90(out, k=op % 4))


def augment(pair: BitemporalPair, op: int) -> BitemporalPair:
    """Apply the identical dihedral transform to both images and the label."""
    return BitemporalPair(
        a=apply_dihedral(pair.a, op),
        b=apply_dihedral(pair.b, op),
        label=None if pair.label is None else apply_dihedral(pair.label, op),
        name=pair.name,
    )


@dataclass
class SynthSpec:
    """Recipe for a deterministic synthetic change-detection corpus.

    Generation is a pure function of the spec; each pair derives its own
    seed from (seed, index).  The change-pixel ratio of a generated batch
    stays within ``ratio_tolerance`` of ``change_ratio``.
    """

    seed: int = 0
    size: int = 64
    count: int = 8
    change_ratio: float = 0.147
    ratio_tolerance: float = 0.2
    shapes: Tuple[str, ...] = ("rectangle", "ellipse")
    texture_low: int = 60
    texture_high: int = 160
    max_attempts: int = 200
    val_fraction: float = 0.0
    test_fraction: float = 0.0

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        bad = set(self.shapes) - {"rectangle", "ellipse"}
        if bad:
            raise GenerationError(f"unknown shape kinds: {sorted(bad)}")
        if not 0 < self.change_ratio < 1:
            raise GenerationError(f"change ratio {self.change_ratio} out of (0,1)")


def _pair_seed(spec_seed: int, index: int) -> int:
    digest = hashlib.blake2s(f"{spec_seed}/{index}".encode(), digest_size=8)
    return int.from_bytes(digest.digest(), "little")


def _shape_mask(rng: np.random.Generator, size: int, kind: str,
                area_left: int) -> np.ndarray:
    """A filled rectangle or ellipse mask roughly bounded by area_left."""
    side_cap = max(4, min(size // 2, int(np.sqrt(max(area_left, 16)) * 1.5)))
    h = int(rng.integers(4, side_cap + 1))
    w = int(rng.integers(4, side_cap + 1))
    y0 = int(rng.integers(0, size - h + 1))
    x0 = int(rng.integers(0, size - w + 1))
    mask = np.zeros((size, size), dtype=bool)
    if kind == "rectangle":
        mask[y0:y0 + h, x0:x0 + w] = True
    else:
        yy, xx = np.mgrid[0:size, 0:size]
        cy, cx = y0 + h / 2.0, x0 + w / 2.0
        mask[((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2 <= 1.0] = True
    return mask


def _textured_background(rng: np.random.Generator, size: int,
                         low: int, high: int) -> np.ndarray:
    """A smooth mid-range texture so change colors stay distinguishable."""
    coarse = rng.uniform(low, high, size=(size // 8 + 2, size // 8 + 2, 3))
    idx = np.linspace(0, coarse.shape[0] - 1, size)
    yi, xi = np.meshgrid(idx, idx, indexing="ij")
    y0, x0 = yi.astype(int), xi.astype(int)
    y1, x1 = np.minimum(y0 + 1, coarse.shape[0] - 1), np.minimum(x0 + 1, coarse.shape[1] - 1)
    wy, wx = (yi - y0)[..., None], (xi - x0)[..., None]
    img = (coarse[y0, x0] * (1 - wy) * (1 - wx) + coarse[y1, x0] * wy * (1 - wx)
           + coarse[y0, x1] * (1 - wy) * wx + coarse[y1, x1] * wy * wx)
    noise = rng.normal(0, 4.0, size=(size, size, 3))
    return np.clip(img + noise, low - 20, high + 20).astype(np.uint8)


def _change_color(rng: np.random.Generator) -> np.ndarray:
    """A color far from the background range so every changed pixel differs."""
    if rng.random() < 0.5:
        base = rng.integers(215, 256, size=3)
    else:
        base = rng.integers(0, 31, size=3)
    return base.astype(np.uint8)


def generate_pair(spec: SynthSpec, index: int) -> BitemporalPair:
    """One deterministic synthetic pair; B differs from A exactly on the label."""
    rng = np.random.default_rng(_pair_seed(spec.seed, index))
    size = spec.size
    img_a = _textured_background(rng, size, spec.texture_low, spec.texture_high)
    img_b = img_a.copy()

    target = spec.change_ratio * size * size
    lo = target * (1.0 - spec.ratio_tolerance * 0.75)
    hi = target * (1.0 + spec.ratio_tolerance * 0.75)
    label = np.zeros((size, size), dtype=bool)
    attempts = 0
    while label.sum() < lo:
        attempts += 1
        if attempts > spec.max_attempts:
            raise GenerationError(
                f"pair {index}: could not reach change ratio "
                f"{spec.change_ratio} within {spec.max_attempts} attempts"
            )
        kind = spec.shapes[int(rng.integers(0, len(spec.shapes)))]
        mask = _shape_mask(rng, size, kind, int(hi - label.sum()))
        if (label | mask).sum() > hi:
            continue
        mode = rng.random()
        color = _change_color(rng)
        if mode < 0.45:            # appear: shape only in B
            img_b[mask] = color
        elif mode < 0.9:           # disappear: shape only in A
            img_a[mask] = color
        else:                      # recolor: different far colors in A and B
            img_a[mask] = color
            other = _change_color(rng)
            while abs(int(other[0]) - int(color[0])) < 60:
                other = _change_color(rng)
            img_b[mask] = other
        label |= mask
    return BitemporalPair(a=img_a, b=img_b, label=label.astype(np.uint8),
                          name=f"synth_{index:04d}")


def generate_pairs(spec: SynthSpec) -> List[BitemporalPair]:
    return [generate_pair(spec, i) for i in range(spec.count)]


def load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)


def save_image(path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path, format="PNG")


def load_label(path) -> np.ndarray:
    raw = np.asarray(Image.open(path).convert("L"), dtype=np.uint8)
    return (raw >= LABEL_THRESHOLD).astype(np.uint8)


def save_label(path, mask: np.ndarray) -> None:
    Image.fromarray((mask > 0).astype(np.uint8) * 255).save(path, format="PNG")


@dataclass
class DatasetLayout:
    """A dataset directory plus its per-split filename manifests."""

    root: Path
    splits: Dict[str, List[str]] = field(default_factory=dict)

    @classmethod
    def open(cls, root) -> "DatasetLayout":
        root = Path(root)
        for sub in ("A", "B", "label"):
            if not (root / sub).is_dir():
                raise DatasetError(f"missing dataset subdirectory {root / sub}")
        splits = {}
        for split in SPLITS:
            manifest = root / f"{split}.txt"
            if manifest.is_file():
                names = [ln.strip() for ln in manifest.read_text().splitlines()
                         if ln.strip()]
                splits[split] = names
        if not splits:
            raise DatasetError(f"no split manifests (train/val/test.txt) in {root}")
        layout = cls(root=root, splits=splits)
        layout.validate()
        return layout

    def validate(self) -> None:
        for split, names in self.splits.items():
            for name in names:
                for sub in ("A", "B", "label"):
                    if not (self.root / sub / name).is_file():
                        raise DatasetError(
                            f"{split} manifest entry {name} missing under "
                            f"{self.root / sub}"
                        )

    def load_pair(self, name: str) -> BitemporalPair:
        return BitemporalPair(
            a=load_image(self.root / "A" / name),
            b=load_image(self.root / "B" / name),
            label=load_label(self.root / "label" / name),
            name=name,
        )

    def names(self, split: str) -> List[str]:
        if split not in self.splits or not self.splits[split]:
            raise DatasetError(f"split {split!r} is empty or missing")
        return list(self.splits[split])


def write_dataset(pairs: Sequence[BitemporalPair], root,
                  splits: Optional[Dict[str, List[str]]] = None) -> DatasetLayout:
    """Write pairs and manifests to a dataset directory."""
    root = Path(root)
    for sub in ("A", "B", "label"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    names = []
    for i, pair in enumerate(pairs):
        name = (pair.name or f"pair_{i:04d}") + ".png"
        save_image(root / "A" / name, pair.a)
        save_image(root / "B" / name, pair.b)
        if pair.label is None:
            raise DatasetError(f"pair {name} has no label to write")
        save_label(root / "label" / name, pair.label)
        names.append(name)
    if splits is None:
        splits = {"train": names}
    for split, entries in splits.items():
        (root / f"{split}.txt").write_text("".join(n + "\n" for n in entries))
    return DatasetLayout(root=root, splits={k: list(v) for k, v in splits.items()})


def synth_dataset(spec: SynthSpec, root) -> DatasetLayout:
    """Generate and write a synthetic corpus; deterministic for a fixed spec."""
    pairs = generate_pairs(spec)
    names = [p.name + ".png" for p in pairs]
    n_val = int(round(spec.val_fraction * len(names)))
    n_test = int(round(spec.test_fraction * len(names)))
    n_train = len(names) - n_val - n_test
    if n_train <= 0:
        raise GenerationError("val/test fractions leave no training pairs")
    splits = {"train": names[:n_train]}
    if n_val:
        splits["val"] = names[n_train:n_train + n_val]
    if n_test:
        splits["test"] = names[n_train + n_val:]
    return write_dataset(pairs, root, splits)


def tile_dataset(in_root, out_root, tile: int) -> DatasetLayout:
    """Tile every pair of a dataset directory, keeping its split structure.

    A source directory without manifests is treated as one ``train`` split
    over all files in ``A/``.
    """
    in_root = Path(in_root)
    try:
        layout = DatasetLayout.open(in_root)
        splits = layout.splits
    except DatasetError:
        for sub in ("A", "B", "label"):
            if not (in_root / sub).is_dir():
                raise DatasetError(f"missing dataset subdirectory {in_root / sub}")
        names = sorted(p.name for p in (in_root / "A").iterdir() if p.is_file())
        if not names:
            raise DatasetError(f"no images under {in_root / 'A'}")
        layout = DatasetLayout(root=in_root, splits={"train": names})
        splits = layout.splits

    out_pairs: List[BitemporalPair] = []
    out_splits: Dict[str, List[str]] = {}
    for split, names in splits.items():
        out_splits[split] = []
        for name in names:
            pair = layout.load_pair(name)
            pair.name = Path(name).stem
            for tile_pair_ in tile_pair(pair, tile):
                out_pairs.append(tile_pair_)
                out_splits[split].append(tile_pair_.name + ".png")
    return write_dataset(out_pairs, out_root, out_splits)


def colorize(pred: np.ndarray, label: np.ndarray) -> np.ndarray:
    """Render TP white, TN black, FP green, FN red."""
    if pred.shape != label.shape:
        raise DimensionError(
            f"prediction {pred.shape} and label {label.shape} are not aligned"
        )
    p = pred.astype(bool)
    t = label.astype(bool)
    out = np.zeros(p.shape + (3,), dtype=np.uint8)
    out[p & t] = COLOR_TP
    out[~p & ~t] = COLOR_TN
    out[p & ~t] = COLOR_FP
    out[~p & t] = COLOR_FN
    return out
