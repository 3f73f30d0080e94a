"""Synthetic aligned two-modality scenes with planted objects.

A class is a fixed set of two or three object types; neighbouring classes
share a type, so only the combination identifies the class. Every object is
drawn with the same geometry in both modalities and with matching colour
directions, so the two modalities agree (high per-pixel cosine) on objects
and disagree on the independently generated smooth-noise backgrounds.

Dataset layout on disk::

    out_dir/manifest.txt
    out_dir/samples/00000_rgb.dten, 00000_d.dten, ...

The manifest starts with ``key=value`` header lines, followed by one line
per sample: ``split<TAB>label<TAB>r,c;r,c<TAB>rgb-file<TAB>d-file``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadConfig, BadManifest, MissingFile, PlacementFailure
from .tensor import Rng, Tensor, load_tensor, save_tensor

GENERATOR_VERSION = 1
SPLITS = ("train", "val", "test")
MAX_PLACEMENT_TRIES = 100

SHAPES = ("disc", "square", "ring", "diamond")
TEXTURES = ("hstripe", "vstripe", "checker")
TEXTURE_LOW = 0.35
PALETTE = np.array(
    [
        [1.0, 0.15, 0.1],
        [0.1, 0.9, 0.2],
        [0.15, 0.25, 1.0],
        [1.0, 0.95, 0.1],
        [0.95, 0.1, 0.95],
        [0.1, 0.95, 0.95],
        [1.0, 0.55, 0.05],
        [0.55, 0.1, 1.0],
        [1.0, 1.0, 1.0],
        [0.45, 0.6, 0.2],
    ]
)


@dataclass(frozen=True)
class SceneGeometry:
    size: int = 32
    num_classes: int = 6
    radius_min: float = 3.0
    radius_max: float = 5.0
    noise_amp: float = 3.0
    noise_grid: int = 4
    pixel_noise: float = 0.03
    distractors: int = 0  # per modality

    def __post_init__(self):
        if not 0 < self.radius_min <= self.radius_max:
            raise BadConfig("need 0 < radius_min <= radius_max")
        if self.size < 2 * self.radius_max + 2:
            raise BadConfig("image too small for the object radius")
        if self.num_classes < 2:
            raise BadConfig("need at least two classes")

    @property
    def num_types(self) -> int:
        return max(self.num_classes, 4)


@dataclass
class SceneExample:
    x_rgb: Tensor  # (3, H, W) in [0, 1]
    x_d: Tensor
    label: int
    object_centers: list[tuple[int, int]]
    object_radius: float
    mask: np.ndarray | None = field(default=None, repr=False)  # (H, W) bool, union of objects


def class_signature(class_id: int, num_types: int) -> tuple[int, ...]:
    """Object types making up a class: ``{c, c+1}``, plus ``c+3`` for every third class."""
    types = [class_id % num_types, (class_id + 1) % num_types]
    if class_id % 3 == 2:
        types.append((class_id + 3) % num_types)
    return tuple(dict.fromkeys(types))


def object_type(t: int) -> tuple[str, str, np.ndarray]:
    """(shape, texture, colour) of object type ``t``."""
    return SHAPES[t % len(SHAPES)], TEXTURES[t % len(TEXTURES)], PALETTE[t % len(PALETTE)]


def texture(name: str, dy: np.ndarray, dx: np.ndarray) -> np.ndarray:
    """Period-2 intensity pattern in {TEXTURE_LOW, 1}, anchored at the object center."""
    iy = np.rint(dy).astype(int)
    ix = np.rint(dx).astype(int)
    if name == "hstripe":
        on = iy % 2 == 0
    elif name == "vstripe":
        on = ix % 2 == 0
    elif name == "checker":
        on = (iy + ix) % 2 == 0
    else:
        raise BadConfig(f"unknown texture {name!r}")
    return np.where(on, 1.0, TEXTURE_LOW)


def shape_mask(shape: str, dy: np.ndarray, dx: np.ndarray, radius: float) -> np.ndarray:
    dist = np.hypot(dy, dx)
    if shape == "disc":
        return dist <= radius
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.8 * radius
    if shape == "ring":
        return (dist <= radius) & (dist >= 0.5 * radius)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= radius
    raise BadConfig(f"unknown shape {shape!r}")


def smooth_noise(rng: Rng, size: int, grid: int, channels: int = 3) -> Tensor:
    """Bilinear upsampling of a coarse uniform[-1, 1] lattice to ``size`` x ``size``."""
    coarse = rng.uniform(-1.0, 1.0, (channels, grid + 1, grid + 1))
    t = np.linspace(0.0, grid, size)
    i0 = np.minimum(np.floor(t).astype(int), grid - 1)
    f = t - i0
    rows = coarse[:, i0, :] * (1 - f)[None, :, None] + coarse[:, i0 + 1, :] * f[None, :, None]
    return rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i0 + 1] * f[None, None, :]


def _place(rng: Rng, radii: list[float], size: int, layer=None) -> list[tuple[int, int]]:
    """Sequential rejection sampling; each object gets MAX_PLACEMENT_TRIES attempts.

    ``layer[i]`` is 0 for an object drawn in both modalities, else the single
    modality (1 or 2) it lives in; objects in different single modalities may
    overlap.
    """
    layer = [0] * len(radii) if layer is None else list(layer)
    centers: list[tuple[int, int]] = []
    for i, r in enumerate(radii):
        lo = int(np.ceil(r))
        rivals = [j for j in range(i) if layer[i] == 0 or layer[j] in (0, layer[i])]
        for _ in range(MAX_PLACEMENT_TRIES):
            c = (int(rng.integers(lo, size - lo)), int(rng.integers(lo, size - lo)))
            if all(np.hypot(c[0] - centers[j][0], c[1] - centers[j][1]) >= r + radii[j] + 1 for j in rivals):
                centers.append(c)
                break
        else:
            raise PlacementFailure(f"object {i} not placed in {MAX_PLACEMENT_TRIES} tries")
    return centers


def _render(img: Tensor, t: int, r: float, center, yy, xx, bumped: bool) -> np.ndarray:
    shape, tex, color = object_type(t)
    dy, dx = yy - center[0], xx - center[1]
    m = shape_mask(shape, dy, dx, r)
    pattern = texture(tex, dy, dx)[m]
    if bumped:
        # depth-like radial bump along the same colour direction
        pattern = pattern * (0.7 + 0.3 * np.clip(1.0 - np.hypot(dy, dx) / r, 0.0, 1.0)[m])
    img[:, m] = color[:, None] * pattern[None, :]
    return m


def gen_scene(class_id: int, rng: Rng, geom: SceneGeometry = SceneGeometry()) -> SceneExample:
    """Render one aligned scene of class ``class_id``.

    Signature objects appear in both modalities at the same place.
    Distractors are random object types drawn into one modality only.
    """
    if not 0 <= class_id < geom.num_classes:
        raise BadConfig(f"class {class_id} outside [0, {geom.num_classes})")
    size = geom.size
    types = list(class_signature(class_id, geom.num_types))
    order = rng.permutation(len(types))
    types = [types[i] for i in order]
    extra = [int(t) for t in rng.integers(0, geom.num_types, 2 * geom.distractors)]
    all_types = types + extra
    radii = [float(rng.uniform(geom.radius_min, geom.radius_max)) for _ in all_types]
    n = len(types)
    centers = _place(rng, radii, size, [0] * n + [1 + k % 2 for k in range(len(extra))])
    layers = []
    for _mod in range(2):
        if geom.noise_amp > 0:
            bg = 0.5 + 0.5 * geom.noise_amp * smooth_noise(rng, size, geom.noise_grid)
        else:
            bg = np.full((3, size, size), 0.5)
        layers.append(bg)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    union = np.zeros((size, size), dtype=bool)
    for i, (t, r, c) in enumerate(zip(all_types, radii, centers)):
        if i < n:
            union |= _render(layers[0], t, r, c, yy, xx, False)
            _render(layers[1], t, r, c, yy, xx, True)
        else:
            mod = (i - n) % 2
            _render(layers[mod], t, r, c, yy, xx, mod == 1)
    out = []
    for img in layers:
        if geom.pixel_noise > 0:
            img = img + rng.normal(0.0, geom.pixel_noise, img.shape)
        out.append(np.clip(img, 0.0, 1.0))
    return SceneExample(out[0], out[1], class_id, centers[:n], geom.radius_max, union)


def disc_mask(centers, radius: float, size: int) -> np.ndarray:
    """Union of discs; stands in for the object mask of a loaded scene."""
    yy, xx = np.mgrid[0:size, 0:size]
    m = np.zeros((size, size), dtype=bool)
    for cy, cx in centers:
        m |= np.hypot(yy - cy, xx - cx) <= radius
    return m


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class SynthConfig:
    geometry: SceneGeometry = SceneGeometry()
    train_per_class: int = 50  # before the validation carve-out
    test_per_class: int = 20
    val_fraction: float = 0.2

    def val_per_class(self) -> int:
        return int(round(self.train_per_class * self.val_fraction))


@dataclass
class DatasetManifest:
    header: dict[str, str]
    samples: list[dict]  # split, label, centers, rgb, d
    path: Path | None = None

    @property
    def num_classes(self) -> int:
        return int(self.header["num_classes"])

    @property
    def radius(self) -> float:
        return float(self.header["radius"])

    @property
    def size(self) -> int:
        return int(self.header["size"])

    def counts(self) -> dict[str, int]:
        return {s: sum(1 for r in self.samples if r["split"] == s) for s in SPLITS}


_HEADER_GEOM = {
    "size": int,
    "num_classes": int,
    "radius_min": float,
    "radius": float,
    "noise_amp": float,
    "noise_grid": int,
    "pixel_noise": float,
    "distractors": int,
}


def _header(config: SynthConfig, seed: int, counts: dict[str, int]) -> dict[str, str]:
    g = config.geometry
    return {
        "version": str(GENERATOR_VERSION),
        "seed": str(seed),
        "num_classes": str(g.num_classes),
        "size": str(g.size),
        "radius_min": repr(g.radius_min),
        "radius": repr(g.radius_max),
        "noise_amp": repr(g.noise_amp),
        "noise_grid": str(g.noise_grid),
        "pixel_noise": repr(g.pixel_noise),
        "distractors": str(g.distractors),
        "train_per_class": str(config.train_per_class),
        "test_per_class": str(config.test_per_class),
        "val_fraction": repr(config.val_fraction),
        **{f"count_{s}": str(counts[s]) for s in SPLITS},
    }


def config_from_header(header: dict[str, str]) -> tuple[SynthConfig, int]:
    """Recover the generator config and seed recorded in a manifest header."""
    try:
        geom = SceneGeometry(
            size=int(header["size"]),
            num_classes=int(header["num_classes"]),
            radius_min=float(header["radius_min"]),
            radius_max=float(header["radius"]),
            noise_amp=float(header["noise_amp"]),
            noise_grid=int(header["noise_grid"]),
            pixel_noise=float(header["pixel_noise"]),
            distractors=int(header["distractors"]),
        )
        cfg = SynthConfig(
            geom,
            int(header["train_per_class"]),
            int(header["test_per_class"]),
            float(header["val_fraction"]),
        )
        return cfg, int(header["seed"])
    except (KeyError, ValueError) as exc:
        raise BadManifest(f"incomplete manifest header: {exc}") from None


def plan_splits(config: SynthConfig, seed: int) -> list[tuple[str, int]]:
    """(split, label) for every sample index, stratified per class."""
    n = config.geometry.num_classes
    pool = [(i, c) for i in range(config.train_per_class) for c in range(n)]
    nval = config.val_per_class()
    chooser = Rng(seed, stream=0)
    val_ids = set()
    for c in range(n):
        picks = chooser.substream(c).permutation(config.train_per_class)[:nval]
        val_ids.update((int(i), c) for i in picks)
    plan = [("val" if key in val_ids else "train", key[1]) for key in pool]
    plan += [("test", c) for _ in range(config.test_per_class) for c in range(n)]
    return plan


def gen_dataset(config: SynthConfig, seed: int, out_dir) -> DatasetManifest:
    out = Path(out_dir)
    try:
        (out / "samples").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    plan = plan_splits(config, seed)
    rows = []
    for idx, (split, label) in enumerate(plan):
        scene = gen_scene(label, Rng(seed, stream=idx + 1), config.geometry)
        rgb = f"samples/{idx:05d}_rgb.dten"
        d = f"samples/{idx:05d}_d.dten"
        save_tensor(out / rgb, scene.x_rgb)
        save_tensor(out / d, scene.x_d)
        rows.append({"split": split, "label": label, "centers": scene.object_centers, "rgb": rgb, "d": d})
    order = {s: i for i, s in enumerate(SPLITS)}
    rows.sort(key=lambda r: order[r["split"]])
    counts = {s: sum(1 for r in rows if r["split"] == s) for s in SPLITS}
    manifest = DatasetManifest(_header(config, seed, counts), rows, out / "manifest.txt")
    write_manifest(manifest, manifest.path)
    return manifest


def format_manifest(manifest: DatasetManifest) -> str:
    lines = [f"{k}={v}" for k, v in manifest.header.items()]
    for r in manifest.samples:
        centers = ";".join(f"{a},{b}" for a, b in r["centers"])
        lines.append(f"{r['split']}\t{r['label']}\t{centers}\t{r['rgb']}\t{r['d']}")
    return "\n".join(lines) + "\n"


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(format_manifest(manifest), encoding="utf-8")


def parse_manifest(text: str) -> DatasetManifest:
    header: dict[str, str] = {}
    samples = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line:
            continue
        if "\t" in line:
            parts = line.split("\t")
            if len(parts) != 5 or parts[0] not in SPLITS:
                raise BadManifest(f"line {lineno}: malformed sample line")
            try:
                centers = [tuple(int(v) for v in p.split(",")) for p in parts[2].split(";") if p]
                label = int(parts[1])
            except ValueError:
                raise BadManifest(f"line {lineno}: bad label or centers") from None
            samples.append({"split": parts[0], "label": label, "centers": centers, "rgb": parts[3], "d": parts[4]})
        elif "=" in line:
            if samples:
                raise BadManifest(f"line {lineno}: header line after samples")
            k, v = line.split("=", 1)
            header[k] = v
        else:
            raise BadManifest(f"line {lineno}: neither header nor sample")
    for key in ("version", "num_classes", "seed", "radius", "size"):
        if key not in header:
            raise BadManifest(f"header lacks {key!r}")
    m = DatasetManifest(header, samples)
    if any(not 0 <= r["label"] < m.num_classes for r in samples):
        raise BadManifest("label outside class range")
    return m


# ---------------------------------------------------------------------------
# loading


@dataclass
class SplitData:
    x_rgb: Tensor  # (n, 3, H, W)
    x_d: Tensor
    labels: np.ndarray
    centers: list[list[tuple[int, int]]]
    radius: float

    def __len__(self) -> int:
        return len(self.labels)

    def example(self, i: int) -> SceneExample:
        size = self.x_rgb.shape[-1]
        return SceneExample(
            self.x_rgb[i],
            self.x_d[i],
            int(self.labels[i]),
            list(self.centers[i]),
            self.radius,
            disc_mask(self.centers[i], self.radius, size),
        )

    def __iter__(self):
        return (self.example(i) for i in range(len(self)))

    def batches(self, batch_size: int, rng: Rng | None = None):
        """Yield index arrays; shuffled when ``rng`` is given. The last batch may be short."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(order), batch_size):
            yield order[start : start + batch_size]


@dataclass
class Dataset:
    manifest: DatasetManifest
    splits: dict[str, SplitData]

    def __getitem__(self, split: str) -> SplitData:
        return self.splits[split]


def load_dataset(manifest_path) -> Dataset:
    path = Path(manifest_path)
    if not path.is_file():
        raise MissingFile(f"manifest {path} not found")
    manifest = parse_manifest(path.read_text(encoding="utf-8"))
    manifest.path = path
    root = path.parent
    splits = {}
    for split in SPLITS:
        rows = [r for r in manifest.samples if r["split"] == split]
        xr, xd = [], []
        for r in rows:
            for key, dest in (("rgb", xr), ("d", xd)):
                f = root / r[key]
                if not f.is_file():
                    raise MissingFile(f"sample file {f} not found")
                dest.append(load_tensor(f))
        size = manifest.size
        empty = np.zeros((0, 3, size, size))
        splits[split] = SplitData(
            np.stack(xr) if xr else empty,
            np.stack(xd) if xd else empty,
            np.array([r["label"] for r in rows], dtype=np.int64),
            [r["centers"] for r in rows],
            manifest.radius,
        )
    return Dataset(manifest, splits)


def replace_geometry(config: SynthConfig, **changes) -> SynthConfig:
    return dataclasses.replace(config, geometry=dataclasses.replace(config.geometry, **changes))
