"""Dataset loading, synthetic data, input construction, augmentation and the
run-length submission codec."""
import csv
import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, DataError, FormatError
from .rng import make_rng
from .tensor import Tensor

NATIVE_SIZE = 101


@dataclass
class ImageSample:
    id: str
    image: np.ndarray
    mask: np.ndarray | None = None
    depth: float = 0.0

    @property
    def size(self):
        return self.image.shape[0]


# -- run-length encoding -----------------------------------------------------

@dataclass
class RleMask:
    runs: list
    height: int
    width: int

    def validate(self):
        total = self.height * self.width
        prev_end = 0
        for start, length in self.runs:
            if length < 1 or start < 1:
                raise FormatError(f"run ({start}, {length}) must have start >= 1 and length >= 1")
            if start <= prev_end:
                raise FormatError(f"run starting at {start} overlaps or precedes the run ending at {prev_end}")
            end = start + length - 1
            if end > total:
                raise FormatError(f"run ({start}, {length}) exceeds {total} pixels")
            prev_end = end
        return self

    def to_string(self):
        return " ".join(f"{s} {n}" for s, n in self.runs)

    @classmethod
    def from_string(cls, text, height, width):
        vals = [int(v) for v in text.split()]
        if len(vals) % 2:
            raise FormatError(f"odd number of values in run-length string: {len(vals)}")
        return cls(list(zip(vals[0::2], vals[1::2])), height, width).validate()


def rle_encode(mask):
    """Column-major, 1-based runs of ones."""
    mask = np.asarray(mask)
    h, w = mask.shape
    flat = np.concatenate([[0], mask.T.reshape(-1).astype(np.int8), [0]])
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts, ends = edges[0::2], edges[1::2]
    return RleMask([(int(s), int(e - s)) for s, e in zip(starts, ends)], h, w)


def rle_decode(rle):
    rle.validate()
    flat = np.zeros(rle.height * rle.width, dtype=np.uint8)
    for start, length in rle.runs:
        flat[start - 1:start - 1 + length] = 1
    return flat.reshape(rle.width, rle.height).T.copy()


def write_submission(path, rows):
    """rows: iterable of (id, RleMask or str)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "rle_mask"])
        for sid, rle in rows:
            wr.writerow([sid, rle if isinstance(rle, str) else rle.to_string()])


def read_submission(path, height=NATIVE_SIZE, width=NATIVE_SIZE):
    with open(path, encoding="utf-8", newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != ["id", "rle_mask"]:
            raise FormatError(f"{path}: expected header id,rle_mask, got {header}")
        return {row[0]: RleMask.from_string(row[1] if len(row) > 1 else "", height, width) for row in rd}


# -- depth & input construction ---------------------------------------------------

def relative_depth(depth, d_min, d_max):
    if not d_max > d_min:
        raise ValueError(f"d_max ({d_max}) must exceed d_min ({d_min})")
    return float(min(max((depth - d_min) / (d_max - d_min), 0.0), 1.0))


def depth_range(samples):
    depths = [s.depth for s in samples]
    lo, hi = min(depths), max(depths)
    if hi <= lo:
        hi = lo + 1.0
    return float(lo), float(hi)


def pad_split(native, target):
    """(before, after) padding; odd totals put the extra pixel after."""
    total = target - native
    return total // 2, total - total // 2


def reflect_pad(img, target):
    h, w = img.shape
    if h > target or w > target:
        raise ValueError(f"image {h}×{w} larger than input size {target}")
    (t, b), (l, r) = pad_split(h, target), pad_split(w, target)
    return np.pad(img, ((t, b), (l, r)), mode="reflect")


def crop_native(arr, native_h, native_w):
    """Undo reflect_pad on the last two axes."""
    th, tw = arr.shape[-2:]
    t, _ = pad_split(native_h, th)
    l, _ = pad_split(native_w, tw)
    return arr[..., t:t + native_h, l:l + native_w]


def coord_planes(size):
    ramp = -1.0 + 2.0 * np.arange(size) / (size - 1)
    return np.broadcast_to(ramp[None, :], (size, size)), np.broadcast_to(ramp[:, None], (size, size))


def input_channels(config):
    return 1 + int(config.use_depth_channel) + 2 * int(config.use_coordconv)


def input_planes(sample, d_min, d_max, config):
    size = config.input_size
    planes = [reflect_pad(sample.image, size)]
    if config.use_depth_channel:
        planes.append(np.full((size, size), relative_depth(sample.depth, d_min, d_max)))
    if config.use_coordconv:
        planes.extend(coord_planes(size))
    return np.stack(planes)


def build_input(sample, d_min, d_max, config):
    return Tensor(input_planes(sample, d_min, d_max, config)[None])


def build_batch(samples, d_min, d_max, config):
    return Tensor(np.stack([input_planes(s, d_min, d_max, config) for s in samples]))


# -- augmentation --------------------------------------------------------------------

MAX_ROTATION_DEG = 10.0


@dataclass
class AugmentPolicy:
    hflip: float = 0.5
    vflip: float = 0.0
    brightness: float = 0.0
    brightness_delta: float = 0.1
    shift: float = 0.0
    shift_max: int = 10
    rotate: float = 0.0
    rotate_max_deg: float = 5.0

    def validate(self):
        for name in ("hflip", "vflip", "brightness", "shift", "rotate"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"augment.{name} probability {p} outside [0, 1]")
        if self.vflip > 0:
            raise ConfigurationError(
                "augment.vflip must be 0: vertical flips destroy the depth ordering of seismic data")
        if self.rotate > 0 and not 0 <= self.rotate_max_deg <= MAX_ROTATION_DEG:
            raise ConfigurationError(
                f"augment.rotate_max_deg {self.rotate_max_deg} outside [0, {MAX_ROTATION_DEG}]: "
                "large rotations mix depth levels")
        if self.shift_max < 0:
            raise ConfigurationError(f"augment.shift_max {self.shift_max} must be >= 0")
        return self


def hflip(sample):
    return replace(sample, image=sample.image[:, ::-1].copy(),
                   mask=None if sample.mask is None else sample.mask[:, ::-1].copy())


def adjust_brightness(sample, delta):
    return replace(sample, image=np.clip(sample.image + delta, 0.0, 1.0))


def hshift(sample, dx):
    if dx == 0:
        return sample

    def sh(a, order):
        return ndimage.shift(a, (0, dx), order=order, mode="reflect")

    return replace(sample, image=np.clip(sh(sample.image, 1), 0.0, 1.0),
                   mask=None if sample.mask is None else sh(sample.mask, 0).astype(np.uint8))


def rotate(sample, degrees):
    def rot(a, order):
        return ndimage.rotate(a, degrees, reshape=False, order=order, mode="reflect")

    return replace(sample, image=np.clip(rot(sample.image, 1), 0.0, 1.0),
                   mask=None if sample.mask is None else rot(sample.mask, 0).astype(np.uint8))


def augment(sample, rng_seed, policy):
    policy.validate()
    keys = rng_seed if isinstance(rng_seed, tuple) else (rng_seed,)
    rng = make_rng(*keys, "augment")
    u = rng.random(4)
    out = sample
    if u[0] < policy.hflip:
        out = hflip(out)
    if u[1] < policy.shift:
        out = hshift(out, int(rng.integers(-policy.shift_max, policy.shift_max + 1)))
    if u[2] < policy.rotate:
        out = rotate(out, float(rng.uniform(-policy.rotate_max_deg, policy.rotate_max_deg)))
    if u[3] < policy.brightness:
        out = adjust_brightness(out, float(rng.uniform(-policy.brightness_delta, policy.brightness_delta)))
    return out


# -- synthetic data -----------------------------------------------------------------

def _synthetic_sample(seed, index, size):
    rng = make_rng(seed, index, "synthetic")
    sid = hashlib.sha1(f"{seed}:{index}".encode()).hexdigest()[:10]
    rows = np.arange(size)[:, None] / size
    cols = np.arange(size)[None, :] / size

    kind = rng.random()
    if kind < 0.08:
        mask = np.zeros((size, size), dtype=np.uint8)
    elif kind < 0.16:
        mask = np.ones((size, size), dtype=np.uint8)
    else:
        boundary = rng.uniform(0.25, 0.75) * np.ones(size)
        for _ in range(3):
            amp = rng.uniform(0.02, 0.12)
            freq = rng.uniform(0.5, 2.5)
            boundary = boundary + amp * np.sin(2 * np.pi * freq * cols[0] + rng.uniform(0, 2 * np.pi))
        mask = (rows >= boundary[None, :]).astype(np.uint8)

    # sediment: dipping layered reflectors; salt: weak, chaotic low-contrast texture
    period = rng.uniform(0.05, 0.15)
    dip = rng.uniform(-0.3, 0.3)
    warp = 0.03 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * cols + rng.uniform(0, 2 * np.pi))
    layers = 0.5 + 0.35 * np.sin(2 * np.pi * (rows + dip * cols + warp) / period + rng.uniform(0, 2 * np.pi))
    blob = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 20)
    blob = blob / (np.abs(blob).max() + 1e-12)
    salt = 0.55 + 0.1 * blob
    img = np.where(mask.astype(bool), salt, layers) + rng.normal(0.0, 0.04, size=(size, size))
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    depth = float(rng.uniform(100.0, 1000.0))
    return ImageSample(sid, img, mask, depth)


def generate_synthetic(n, size=NATIVE_SIZE, seed=0):
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    return [_synthetic_sample(seed, i, size) for i in range(n)]


# -- on-disk layout -------------------------------------------------------------------

def save_dataset(samples, root):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with_masks = any(s.mask is not None for s in samples)
    if with_masks:
        (root / "masks").mkdir(exist_ok=True)
    for s in samples:
        Image.fromarray(np.round(s.image * 255.0).astype(np.uint8)).save(root / "images" / f"{s.id}.png")
        if s.mask is not None:
            Image.fromarray((s.mask * 255).astype(np.uint8)).save(root / "masks" / f"{s.id}.png")
    with open(root / "depths.csv", "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "z"])
        for s in sorted(samples, key=lambda s: s.id):
            wr.writerow([s.id, repr(float(s.depth))])


def _read_gray(path):
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if mode in ("I;16", "I;16B", "I"):
        return arr.astype(np.float64) / 65535.0
    if arr.ndim == 3:
        return arr[..., :3].astype(np.float64).mean(axis=2) / 255.0
    if mode == "1":
        return arr.astype(np.float64)
    return arr.astype(np.float64) / 255.0


def read_depths(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames is None or "id" not in rd.fieldnames or "z" not in rd.fieldnames:
            raise DataError(f"{path}: expected header id,z")
        return {row["id"]: float(row["z"]) for row in rd}


def load_dataset(images_dir, masks_dir=None, depths_csv=None):
    images_dir = Path(images_dir)
    depths_csv = Path(depths_csv) if depths_csv is not None else images_dir.parent / "depths.csv"
    depths = read_depths(depths_csv)
    samples = []
    for path in sorted(images_dir.glob("*.png")):
        sid = path.stem
        if sid not in depths:
            raise DataError(f"no depth row for image id {sid!r} in {depths_csv}")
        mask = None
        if masks_dir is not None:
            mpath = Path(masks_dir) / f"{sid}.png"
            if not mpath.exists():
                raise DataError(f"missing mask for image id {sid!r}: {mpath}")
            mask = (_read_gray(mpath) > 0.5).astype(np.uint8)
        samples.append(ImageSample(sid, _read_gray(path), mask, depths[sid]))
    return samples


def load_root(root, require_masks=False):
    """Load the ``images/ masks/ depths.csv`` layout under ``root``."""
    root = Path(root)
    if not (root / "images").is_dir():
        raise DataError(f"{root}: missing images/ directory")
    masks = root / "masks"
    if require_masks and not masks.is_dir():
        raise DataError(f"{root}: missing masks/ directory")
    return load_dataset(root / "images", masks if masks.is_dir() else None, root / "depths.csv")


# -- folds ---------------------------------------------------------------------------------

def kfold_split(ids, k, seed=0):
    ids = list(ids)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the number of ids ({len(ids)})")
    order = make_rng(seed, "kfold").permutation(len(ids))
    return {ids[j]: pos % k for pos, j in enumerate(order)}


def fold_members(split, fold):
    train = [i for i, f in split.items() if f != fold]
    val = [i for i, f in split.items() if f == fold]
    return train, val
