"""Datasets: synthetic generators, line-delimited manifests and PGM images.

Manifest grammar (one record per line, tab separated)::

    manifest  := (comment | record)*
    comment   := "#" any-text NEWLINE
    record    := id TAB label TAB subclass TAB payload NEWLINE
    label     := "0" | "1"
    payload   := vector | image-path
    vector    := number (";" number)*
    image-path:= path ending in ".pgm", relative to the manifest's directory

Numbers are written with ``repr`` so a save/load round trip is exact.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .exceptions import ConfigError, DataError

MANIFEST_HEADER = "# caad-manifest v1"
# keeps data streams disjoint from the training streams, which use small stage ids
DATA_STREAM = 0xDA7A


class LabeledExample(NamedTuple):
    id: str
    x: np.ndarray
    label: int
    subclass: str


@dataclass
class Dataset:
    """Immutable-by-convention bundle of inputs, labels and subclass tags."""

    X: np.ndarray
    y: np.ndarray
    subclass: np.ndarray
    ids: np.ndarray
    kind: str = "tabular"
    seed: int | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y).astype(np.int64)
        self.subclass = np.asarray(self.subclass, dtype=object)
        self.ids = np.asarray(self.ids, dtype=object)
        n = len(self.X)
        if not (len(self.y) == len(self.subclass) == len(self.ids) == n):
            raise DataError("inputs, labels, subclass tags and ids differ in length")
        if n and not np.isin(self.y, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        if self.kind not in ("tabular", "image"):
            raise DataError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "tabular" and self.X.ndim != 2:
            raise DataError(f"tabular data must be 2-D, got shape {self.X.shape}")
        if self.kind == "image" and self.X.ndim != 4:
            raise DataError(f"image data must be (n, C, H, W), got shape {self.X.shape}")

    def __len__(self):
        return len(self.y)

    def __iter__(self) -> Iterator[LabeledExample]:
        for i in range(len(self)):
            yield LabeledExample(str(self.ids[i]), self.X[i], int(self.y[i]), str(self.subclass[i]))

    @property
    def input_shape(self):
        return tuple(self.X.shape[1:])

    @property
    def class_counts(self):
        return {"negative": int((self.y == 0).sum()), "positive": int((self.y == 1).sum())}

    @property
    def subclass_counts(self):
        tags, counts = np.unique(self.subclass.astype(str), return_counts=True)
        return dict(zip(tags.tolist(), counts.tolist()))

    @property
    def metadata(self):
        return {"kind": self.kind, "n": len(self), "seed": self.seed,
                "class_counts": self.class_counts, "subclass_counts": self.subclass_counts}

    def subset(self, mask) -> Dataset:
        mask = np.asarray(mask)
        return Dataset(self.X[mask], self.y[mask], self.subclass[mask], self.ids[mask], self.kind, self.seed)

    def select(self, *subclasses) -> Dataset:
        return self.subset(np.isin(self.subclass.astype(str), subclasses))

    def concat(self, other: Dataset) -> Dataset:
        if other.kind != self.kind or other.input_shape != self.input_shape:
            raise DataError("cannot concatenate datasets of different kind or shape")
        return Dataset(np.concatenate([self.X, other.X]), np.concatenate([self.y, other.y]),
                       np.concatenate([self.subclass, other.subclass]),
                       np.concatenate([self.ids, other.ids]), self.kind, self.seed)


def _is_normal(tag):
    return str(tag).startswith("normal")


def novel_tag():
    return "novel"


# ---------------------------------------------------------------------------
# synthetic tabular data


@dataclass
class SynthConfig:
    """Gaussian-mixture benchmark with one held-out anomaly cluster.

    Normals come from ``normal_components`` isotropic clusters spread along the
    first axis. Known anomalies come from ``n_known_clusters`` clusters at
    ``anomaly_distance`` along random unit directions; the novel cluster points
    partly along their mean direction (``novel_alignment``) and partly along a
    fresh orthogonal one, and is only placed in the test split unless
    ``novel_train_fraction`` is positive.
    """

    n_normal: int = 5000
    n_anomaly: int = 500
    n_test_normal: int = 500
    n_test_known: int = 250
    n_test_novel: int = 250
    dim: int = 16
    normal_components: int = 2
    normal_offset: float = 1.5
    normal_scale: float = 1.0
    n_known_clusters: int = 4
    anomaly_distance: float = 4.0
    anomaly_scale: float = 1.5
    novel_alignment: float = 0.5
    novel_train_fraction: float = 0.0
    label_noise: float = 0.0
    seed: int = 0

    def validate(self):
        for name in ("n_normal", "n_anomaly", "n_test_normal", "n_test_known", "n_test_novel"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.dim < 2 or self.normal_components < 1 or self.n_known_clusters < 1:
            raise ConfigError("need dim >= 2 and at least one normal and one known anomaly cluster")
        if self.normal_scale <= 0 or self.anomaly_scale <= 0:
            raise ConfigError("degenerate covariance: cluster scales must be positive")
        if not -1.0 <= self.novel_alignment <= 1.0:
            raise ConfigError("novel_alignment must lie in [-1, 1]")
        if not 0.0 <= self.novel_train_fraction <= 1.0 or not 0.0 <= self.label_noise < 0.5:
            raise ConfigError("novel_train_fraction must lie in [0, 1] and label_noise in [0, 0.5)")

    def to_dict(self):
        return asdict(self)


def cluster_means(cfg: SynthConfig) -> dict[str, np.ndarray]:
    """Configured mean of every cluster, keyed by subclass tag."""
    cfg.validate()
    geo = np.random.default_rng(np.random.SeedSequence([cfg.seed, DATA_STREAM, 0]))
    means = {}
    offsets = np.linspace(-cfg.normal_offset, cfg.normal_offset, cfg.normal_components) \
        if cfg.normal_components > 1 else np.zeros(1)
    for k, off in enumerate(offsets):
        mu = np.zeros(cfg.dim)
        mu[0] = off
        means[f"normal_{k}"] = mu
    dirs = geo.standard_normal((cfg.n_known_clusters + 1, cfg.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    for k in range(cfg.n_known_clusters):
        means[f"known_{k}"] = cfg.anomaly_distance * dirs[k]
    shared = dirs[:-1].sum(axis=0)
    shared /= np.linalg.norm(shared)
    fresh = dirs[-1] - shared * (dirs[-1] @ shared)
    fresh /= np.linalg.norm(fresh)
    a = cfg.novel_alignment
    means[novel_tag()] = cfg.anomaly_distance * (a * shared + np.sqrt(1.0 - a * a) * fresh)
    return means


def _draw(rng, tags, means, scales):
    out = np.empty((len(tags), len(next(iter(means.values())))))
    for i, t in enumerate(tags):
        out[i] = means[t] + scales[t] * rng.standard_normal(out.shape[1])
    return out


def synth_tabular(cfg: SynthConfig | None = None) -> tuple[Dataset, Dataset]:
    """Train and test splits drawn from the mixture described by ``cfg``."""
    cfg = cfg or SynthConfig()
    cfg.validate()
    means = cluster_means(cfg)
    scales = {t: (cfg.normal_scale if _is_normal(t) else cfg.anomaly_scale) for t in means}
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, DATA_STREAM, 1]))
    normal_tags = [t for t in means if _is_normal(t)]
    known_tags = [f"known_{k}" for k in range(cfg.n_known_clusters)]

    def normals(n):
        return [normal_tags[i] for i in rng.integers(0, len(normal_tags), n)]

    def known(n):
        return [known_tags[i] for i in rng.permutation(np.arange(n) % len(known_tags))]

    n_novel_train = int(round(cfg.novel_train_fraction * cfg.n_anomaly))
    train_tags = normals(cfg.n_normal) + known(cfg.n_anomaly - n_novel_train) + [novel_tag()] * n_novel_train
    test_tags = normals(cfg.n_test_normal) + known(cfg.n_test_known) + [novel_tag()] * cfg.n_test_novel

    def build(tags, prefix, noisy):
        tags = np.array(tags, dtype=object)
        X = _draw(rng, tags, means, scales) if len(tags) else np.empty((0, cfg.dim))
        y = np.array([0 if _is_normal(t) else 1 for t in tags], dtype=np.int64)
        if noisy and cfg.label_noise > 0:
            flip = rng.random(len(y)) < cfg.label_noise
            y = np.where(flip, 1 - y, y)
        ids = np.array([f"{prefix}-{i:06d}" for i in range(len(tags))], dtype=object)
        return Dataset(X, y, tags, ids, "tabular", cfg.seed)

    return build(train_tags, "train", True), build(test_tags, "test", False)


# ---------------------------------------------------------------------------
# synthetic images


@dataclass
class ImageSynthConfig:
    """Small grayscale images: smooth background plus a fixed stripe texture.

    Anomalies add bright blobs whose layout depends on the subclass; the
    ``novel`` layout only appears in the test split.
    """

    n_normal: int = 600
    n_anomaly: int = 120
    n_test_normal: int = 100
    n_test_known: int = 50
    n_test_novel: int = 50
    size: int = 32
    crop: int = 28
    blob_intensity: float = 0.45
    blob_radius: float = 2.5
    noise: float = 0.04
    seed: int = 0

    def validate(self):
        if self.size < self.crop:
            raise ConfigError(f"image size {self.size} is below the crop size {self.crop}")
        if self.size < 8:
            raise ConfigError("image size must be at least 8")
        for name in ("n_normal", "n_anomaly", "n_test_normal", "n_test_known", "n_test_novel"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    def to_dict(self):
        return asdict(self)


# blob centres per subclass, as fractions of the image side
BLOB_LAYOUTS = {
    "known_0": [(0.35, 0.35)],
    "known_1": [(0.35, 0.65), (0.65, 0.35)],
    "known_2": [(0.65, 0.65), (0.5, 0.5), (0.35, 0.65)],
    "novel": [(0.5, 0.3), (0.5, 0.7)],
}


def _render(rng, tag, cfg: ImageSynthConfig):
    s = cfg.size
    yy, xx = np.mgrid[0:s, 0:s] / (s - 1)
    gx, gy = rng.uniform(-0.15, 0.15, 2)
    img = 0.35 + gx * (xx - 0.5) + gy * (yy - 0.5)
    img = img + 0.05 * np.sin(2 * np.pi * 4 * xx)
    if tag in BLOB_LAYOUTS:
        for cy, cx in BLOB_LAYOUTS[tag]:
            jy, jx = rng.normal(0, 0.04, 2)
            d2 = ((yy - cy - jy) * (s - 1)) ** 2 + ((xx - cx - jx) * (s - 1)) ** 2
            img = img + cfg.blob_intensity * np.exp(-d2 / (2 * cfg.blob_radius ** 2))
    img = img + cfg.noise * rng.standard_normal(img.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def synth_images(cfg: ImageSynthConfig | None = None) -> tuple[Dataset, Dataset]:
    cfg = cfg or ImageSynthConfig()
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, DATA_STREAM, 2]))
    known_tags = [t for t in BLOB_LAYOUTS if t != "novel"]

    def tags(n_norm, n_known, n_novel):
        return (["normal_0"] * n_norm
                + [known_tags[i] for i in rng.permutation(np.arange(n_known) % len(known_tags))]
                + ["novel"] * n_novel)

    def build(tag_list, prefix):
        tag_arr = np.array(tag_list, dtype=object)
        imgs = np.stack([_render(rng, t, cfg) for t in tag_list]) if tag_list else \
            np.empty((0, cfg.size, cfg.size), dtype=np.uint8)
        X = imgs[:, None].astype(np.float64) / 255.0
        y = np.array([0 if _is_normal(t) else 1 for t in tag_list], dtype=np.int64)
        ids = np.array([f"{prefix}-{i:06d}" for i in range(len(tag_list))], dtype=object)
        return Dataset(X, y, tag_arr, ids, "image", cfg.seed)

    train = build(tags(cfg.n_normal, cfg.n_anomaly, 0), "train")
    test = build(tags(cfg.n_test_normal, cfg.n_test_known, cfg.n_test_novel), "test")
    return train, test


# ---------------------------------------------------------------------------
# PGM and manifests


def write_pgm(path, image):
    """Write an 8-bit grayscale binary PGM (P5)."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise DataError("PGM images must be 2-D uint8 arrays")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PGM is supported")
    pixels = data[pos + 1:pos + 1 + w * h]
    if len(pixels) != w * h:
        raise DataError(f"{path}: truncated PGM pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


def save_manifest(dataset: Dataset, path, image_dir="images"):
    """Write ``dataset`` as a manifest; images go to PGM files next to it."""
    path = Path(path)
    lines = [f"{MANIFEST_HEADER} kind={dataset.kind}"]
    if dataset.kind == "image":
        (path.parent / image_dir).mkdir(parents=True, exist_ok=True)
    for ex in dataset:
        if "\t" in ex.id or "\t" in ex.subclass:
            raise DataError(f"tab character in id or subclass of example {ex.id!r}")
        if dataset.kind == "image":
            if ex.x.shape[0] != 1:
                raise DataError("only single-channel images can be stored as PGM")
            rel = f"{image_dir}/{ex.id}.pgm"
            write_pgm(path.parent / rel, np.round(ex.x[0] * 255).astype(np.uint8))
            payload = rel
        else:
            payload = ";".join(repr(float(v)) for v in ex.x)
        lines.append(f"{ex.id}\t{ex.label}\t{ex.subclass}\t{payload}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path) -> Dataset:
    """Parse a manifest; errors name the offending line number."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    ids, labels, tags, xs = [], [], [], []
    kind = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        ex_id, label, tag, payload = parts
        if label not in ("0", "1"):
            raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
        if payload.lower().endswith(".pgm"):
            this_kind = "image"
            img_path = path.parent / payload
            try:
                x = read_pgm(img_path)[None].astype(np.float64) / 255.0
            except (OSError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
        else:
            this_kind = "tabular"
            try:
                x = np.array([float(v) for v in payload.split(";")])
            except ValueError:
                raise DataError(f"{path}:{lineno}: payload is neither a number list nor a .pgm path") from None
            if not np.all(np.isfinite(x)):
                raise DataError(f"{path}:{lineno}: non-finite value in payload")
        if kind is None:
            kind = this_kind
        elif kind != this_kind:
            raise DataError(f"{path}:{lineno}: mixes tabular and image payloads")
        if xs and x.shape != xs[0].shape:
            raise DataError(f"{path}:{lineno}: inconsistent dimensions {x.shape} vs {xs[0].shape}")
        ids.append(ex_id)
        labels.append(int(label))
        tags.append(tag)
        xs.append(x)
    if not xs:
        raise DataError(f"{path}: no examples")
    return Dataset(np.stack(xs), labels, tags, ids, kind)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_paths(root) -> dict[str, Path]:
    root = Path(root)
    return {"train": root / "train.manifest", "test": root / "test.manifest"}


__all__ = [
    "Dataset", "LabeledExample", "SynthConfig", "ImageSynthConfig", "synth_tabular", "synth_images",
    "cluster_means", "save_manifest", "load_manifest", "read_pgm", "write_pgm", "file_sha256",
]
