"""Procedural street-scene images with exact per-pixel labels.

Each sample is a pure function of ``(SceneConfig, index)``: the per-sample
generator is seeded by a splitmix64 mix of the config seed and the index,
so samples can be produced in any order or in parallel.

Three styles stand in for three datasets. They differ in palette, horizon
height and object scale.
"""

import json
import os
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from ._io import write_bytes_atomic, write_text_atomic
from .pnm import PnmError, decode_pnm, encode_pgm, encode_ppm

ROAD, SIDEWALK, BUILDING, SKY, CAR, PERSON, RIDER, VOID = range(8)
CLASS_NAMES = ("road", "sidewalk", "building", "sky", "car", "person", "rider", "void")
MANIFEST_VERSION = 1

# base RGB per class, in CLASS_NAMES order; muted so that a small
# perturbation budget is meaningful against class contrast
_PALETTES = {
    "A": (
        (118, 101, 109),
        (158, 135, 134),
        (136, 99, 95),
        (129, 138, 173),
        (168, 71, 81),
        (183, 133, 119),
        (145, 108, 159),
        (82, 65, 73),
    ),
    "B": (
        (77, 73, 88),
        (116, 106, 123),
        (97, 82, 101),
        (170, 119, 96),
        (73, 97, 161),
        (160, 160, 101),
        (97, 155, 132),
        (48, 49, 68),
    ),
    "C": (
        (150, 150, 140),
        (196, 194, 180),
        (164, 140, 130),
        (204, 210, 214),
        (176, 110, 110),
        (216, 186, 168),
        (172, 156, 196),
        (96, 96, 96),
    ),
}

# horizon range (fraction of height) and object size scale per style
_LAYOUT = {
    "A": ((0.42, 0.52), 1.0),
    "B": ((0.32, 0.42), 1.25),
    "C": ((0.52, 0.60), 0.8),
}

DEFAULT_COUNTS = {"car": (1, 3), "person_rider": (1, 4), "building": (3, 6), "void": (0, 2)}


def splitmix64(x):
    """One splitmix64 output step on a 64-bit integer."""
    mask = (1 << 64) - 1
    x = (x + 0x9E3779B97F4A7C15) & mask
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & mask
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & mask
    return x ^ (x >> 31)


def sample_seed(seed, index):
    return splitmix64(splitmix64(int(seed) & ((1 << 64) - 1)) ^ (int(index) & ((1 << 64) - 1)))


@dataclass
class SceneConfig:
    width: int = 64
    height: int = 64
    num_classes: int = 8
    style: str = "A"
    counts: dict = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    noise_sigma: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.width % 8 or self.height % 8 or self.width <= 0 or self.height <= 0:
            raise ValueError(f"scene size {self.width}x{self.height} must be positive and divisible by 8")
        if self.num_classes < len(CLASS_NAMES):
            raise ValueError(f"num_classes must be >= {len(CLASS_NAMES)}")
        if self.style not in _PALETTES:
            raise ValueError(f"unknown style {self.style!r}; expected one of {sorted(_PALETTES)}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        counts = dict(DEFAULT_COUNTS)
        for k, v in dict(self.counts).items():
            if k not in DEFAULT_COUNTS:
                raise ValueError(f"unknown count key {k!r}; expected {sorted(DEFAULT_COUNTS)}")
            lo, hi = int(v[0]), int(v[1])
            if lo < 0 or hi < lo:
                raise ValueError(f"bad count range {k}={v}")
            counts[k] = (lo, hi)
        self.counts = counts

    def to_dict(self):
        d = asdict(self)
        d["counts"] = {k: list(v) for k, v in sorted(self.counts.items())}
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SceneConfig fields: {sorted(unknown)}")
        return cls(**d)


def palette(style):
    return np.array(_PALETTES[style], dtype=np.float64)


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def _ellipse(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _layout(config, rng):
    """Label map plus an instance-id map (one id per drawn region)."""
    h, w = config.height, config.width
    (hlo, hhi), scale = _LAYOUT[config.style]
    counts = config.counts
    labels = np.full((h, w), SKY, dtype=np.uint8)
    inst = np.zeros((h, w), dtype=np.int32)
    next_id = 1

    def paint(region, cls):
        nonlocal next_id
        labels[region] = cls
        inst[region] = next_id
        next_id += 1

    horizon = int(round(h * rng.uniform(hlo, hhi)))

    # building blocks standing on the horizon, with sky gaps between them
    n_blocks = int(rng.integers(counts["building"][0], counts["building"][1] + 1))
    if n_blocks:
        edges = np.sort(rng.choice(np.arange(1, w), size=min(n_blocks, w - 1) - 1, replace=False))
        edges = np.concatenate([[0], edges, [w]])
        for x0, x1 in zip(edges[:-1], edges[1:]):
            if rng.random() < 0.2:
                continue
            top = int(rng.integers(max(1, horizon // 8), max(2, horizon - 2)))
            region = np.zeros((h, w), dtype=bool)
            region[top:horizon, x0:x1] = True
            paint(region, BUILDING)

    ground = np.zeros((h, w), dtype=bool)
    ground[horizon:] = True
    paint(ground, ROAD)

    # sidewalk band below the horizon plus two wedges toward the bottom corners
    band = max(2, int(round(h * rng.uniform(0.06, 0.12))))
    walk = np.zeros((h, w), dtype=bool)
    walk[horizon : horizon + band] = True
    spread = rng.uniform(0.15, 0.3)
    for y in range(horizon + band, h):
        frac = (y - horizon) / max(1, h - horizon)
        wl = int(frac * w * spread)
        walk[y, :wl] = True
        walk[y, w - wl :] = True
    paint(walk, SIDEWALK)

    # thin void poles
    for _ in range(int(rng.integers(counts["void"][0], counts["void"][1] + 1))):
        x = int(rng.integers(0, w - 1))
        pw = int(rng.integers(1, 3))
        top = int(rng.integers(max(1, horizon // 3), horizon))
        region = np.zeros((h, w), dtype=bool)
        region[top : min(h, horizon + band), x : x + pw] = True
        paint(region, VOID)

    # cars and people drawn far to near (by bottom row)
    objects = []
    for _ in range(int(rng.integers(counts["car"][0], counts["car"][1] + 1))):
        cw = max(4, int(round(rng.uniform(10, 18) * scale * w / 64)))
        ch = max(3, int(round(cw * rng.uniform(0.45, 0.6))))
        bottom = int(rng.integers(min(h - 1, horizon + band), h))
        x0 = int(rng.integers(-cw // 3, w - 2 * cw // 3))
        objects.append((bottom, "car", x0, cw, ch))
    n_people = int(rng.integers(counts["person_rider"][0], counts["person_rider"][1] + 1))
    for _ in range(n_people):
        ph = max(5, int(round(rng.uniform(9, 15) * scale * h / 64)))
        bottom = int(rng.integers(min(h - 1, horizon + 2), h))
        cx = int(rng.integers(2, w - 2))
        kind = "person" if rng.random() < 0.6 else "rider"
        objects.append((bottom, kind, cx, ph, 0))
    objects.sort(key=lambda o: o[0])
    for bottom, kind, a, b, c in objects:
        if kind == "car":
            x0, cw, ch = a, b, c
            region = np.zeros((h, w), dtype=bool)
            region[max(0, bottom - ch) : bottom + 1, max(0, x0) : max(0, x0 + cw)] = True
            paint(region, CAR)
        else:
            cx, ph = a, b
            rx = max(1.2, ph / 6.0)
            body = _ellipse(h, w, bottom - ph * 0.4, cx, ph * 0.4, rx)
            head = _ellipse(h, w, bottom - ph * 0.85, cx, ph * 0.15, rx * 0.8)
            region = body | head
            if kind == "rider":
                region |= _ellipse(h, w, bottom - ph * 0.15, cx, ph * 0.15, rx * 2.0)
            paint(region, PERSON if kind == "person" else RIDER)
    return labels, inst, next_id


def generate_scene(config, index):
    """Render sample ``index``: an integer-valued float32 image (3, h, w) in [0, 255] and uint8 labels (h, w)."""
    rng = np.random.default_rng(sample_seed(config.seed, index))
    labels, inst, n_inst = _layout(config, rng)
    pal = palette(config.style)
    img = pal[labels]  # (h, w, 3)
    sigma = float(config.noise_sigma)
    if sigma > 0:
        # per-instance tint plus per-pixel noise
        tint = rng.normal(0.0, sigma, size=(n_inst, 3))
        img = img + tint[inst] + rng.normal(0.0, sigma, size=img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.float32)
    return np.ascontiguousarray(img.transpose(2, 0, 1)), labels


# --------------------------------------------------------------------------
# dataset files
# --------------------------------------------------------------------------

class DatasetError(RuntimeError):
    pass


def _crc(data):
    return zlib.crc32(data) & 0xFFFFFFFF


def generate_dataset(config, n_train, n_test, out_dir):
    """Write images/NNNNNN.ppm, labels/NNNNNN.pgm and manifest.json; return the manifest dict."""
    out_dir = os.fspath(out_dir)
    try:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create dataset directory {out_dir}: {e}") from e
    samples = []
    for index in range(n_train + n_test):
        img, lab = generate_scene(config, index)
        ib = encode_ppm(img.transpose(1, 2, 0).astype(np.uint8))
        lb = encode_pgm(lab)
        iname = f"images/{index:06d}.ppm"
        lname = f"labels/{index:06d}.pgm"
        for rel, data in ((iname, ib), (lname, lb)):
            path = os.path.join(out_dir, rel)
            try:
                write_bytes_atomic(path, data)
            except OSError as e:
                raise DatasetError(f"cannot write {path}: {e}") from e
        samples.append({"index": index, "image": iname, "label": lname, "crc32_image": _crc(ib), "crc32_label": _crc(lb)})
    manifest = {
        "version": MANIFEST_VERSION,
        "scene_config": config.to_dict(),
        "n_train": n_train,
        "n_test": n_test,
        "samples": samples,
    }
    write_text_atomic(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def read_manifest(dataset_dir):
    path = os.path.join(os.fspath(dataset_dir), "manifest.json")
    try:
        with open(path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise DatasetError(f"no manifest at {path}") from None
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed manifest {path}: {e}") from e
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {manifest.get('version')!r} in {path}")
    return manifest


def _read_checked(dataset_dir, rel, crc):
    path = os.path.join(dataset_dir, rel)
    with open(path, "rb") as f:
        data = f.read()
    if _crc(data) != crc:
        raise DatasetError(f"checksum mismatch for {path}")
    try:
        return decode_pnm(data)
    except PnmError as e:
        raise DatasetError(f"{path}: {e}") from e


def load_sample(dataset_dir, index, manifest=None):
    """Image (3, h, w) float32 in [0, 255] and labels (h, w) uint8, checksum-verified."""
    dataset_dir = os.fspath(dataset_dir)
    manifest = manifest or read_manifest(dataset_dir)
    samples = manifest["samples"]
    if not 0 <= index < len(samples):
        raise DatasetError(f"sample index {index} out of range [0, {len(samples)})")
    s = samples[index]
    num_classes = manifest["scene_config"]["num_classes"]
    img = _read_checked(dataset_dir, s["image"], s["crc32_image"])
    lab = _read_checked(dataset_dir, s["label"], s["crc32_label"])
    if img.ndim != 3:
        raise DatasetError(f"{s['image']}: expected a P6 image")
    if lab.ndim != 2:
        raise DatasetError(f"{s['label']}: expected a P5 label map")
    if lab.size and lab.max() >= num_classes:
        raise DatasetError(f"{s['label']}: class id {int(lab.max())} >= num_classes {num_classes}")
    return img.transpose(2, 0, 1).astype(np.float32), lab.copy()


@dataclass
class SceneDataset:
    """A split held in memory: images (n, 3, h, w) float32 and labels (n, h, w) int64."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __len__(self):
        return len(self.images)

    @property
    def fingerprint(self):
        crc = zlib.crc32(np.ascontiguousarray(self.images).tobytes())
        crc = zlib.crc32(np.ascontiguousarray(self.labels).tobytes(), crc)
        return f"{crc & 0xFFFFFFFF:08x}"

    def subset(self, n):
        return SceneDataset(self.images[:n], self.labels[:n], self.num_classes, self.name)


def render_split(config, indices, name=""):
    imgs, labs = zip(*(generate_scene(config, i) for i in indices)) if len(indices) else ((), ())
    h, w = config.height, config.width
    images = np.stack(imgs) if imgs else np.zeros((0, 3, h, w), np.float32)
    labels = np.stack(labs).astype(np.int64) if labs else np.zeros((0, h, w), np.int64)
    return SceneDataset(images, labels, config.num_classes, name)


def in_memory_splits(config, n_train, n_test):
    """Train/test splits rendered directly, identical to what generate_dataset writes."""
    train = render_split(config, range(n_train), f"{config.style}/train")
    test = render_split(config, range(n_train, n_train + n_test), f"{config.style}/test")
    return train, test


def load_split(dataset_dir, split):
    """Load the 'train' or 'test' split of a dataset directory."""
    manifest = read_manifest(dataset_dir)
    n_train, n_test = manifest["n_train"], manifest["n_test"]
    if split == "train":
        idx = range(0, n_train)
    elif split == "test":
        idx = range(n_train, n_train + n_test)
    else:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    cfg = manifest["scene_config"]
    imgs, labs = [], []
    for i in idx:
        im, lb = load_sample(dataset_dir, i, manifest)
        imgs.append(im)
        labs.append(lb)
    h, w = cfg["height"], cfg["width"]
    images = np.stack(imgs) if imgs else np.zeros((0, 3, h, w), np.float32)
    labels = np.stack(labs).astype(np.int64) if labs else np.zeros((0, h, w), np.int64)
    return SceneDataset(images, labels, cfg["num_classes"], f"{os.path.basename(os.path.normpath(dataset_dir))}/{split}")
