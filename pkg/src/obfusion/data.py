"""Labeled multichannel time-series datasets.

Covers generation of a synthetic corpus with planted public and private
attributes, sliding-window segmentation, per-channel standardization,
stratified train/test splitting, and a bitwise-exact binary file format.

A dataset stores segments stacked as one [N, channels, window] float32 array
with one integer label array per attribute. Exactly one attribute carries the
"public" role (the downstream task label); any number carry "private"
(sensitive) or "unspecified" roles.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import TOOL_VERSION
from .errors import ConfigError, DataFormatError, SchemaError, ShapeError
from .ioutil import Reader, atomic_write, pack_f32, pack_str

MAGIC = b"CLK1"
FORMAT_VERSION = 1

ROLES = ("public", "private", "unspecified")
_ROLE_CODE = {r: i for i, r in enumerate(ROLES)}


@dataclass(frozen=True)
class AttributeSpec:
    """One labeled attribute: its name, class count, and privacy role."""

    name: str
    cardinality: int
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown attribute role {self.role!r}")
        if self.cardinality < 1:
            raise ConfigError(f"attribute {self.name!r}: cardinality must be >= 1")


@dataclass
class ChannelStats:
    """Standardization parameters; degenerate marks zero-variance channels."""

    mean: np.ndarray
    std: np.ndarray
    degenerate: np.ndarray


@dataclass
class SensorSegment:
    """A single window with its labels, split out by attribute role."""

    values: np.ndarray
    public_label: int
    private_labels: dict[str, int]
    unspecified_labels: dict[str, int]


@dataclass
class Dataset:
    values: np.ndarray
    labels: dict[str, np.ndarray]
    schema: list[AttributeSpec]
    channel_stats: ChannelStats | None = None

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def window_len(self) -> int:
        return self.values.shape[2]

    @property
    def public_attribute(self) -> str:
        return next(a.name for a in self.schema if a.role == "public")

    @property
    def private_attributes(self) -> list[str]:
        return [a.name for a in self.schema if a.role == "private"]

    def cardinality(self, name: str) -> int:
        for a in self.schema:
            if a.name == name:
                return a.cardinality
        raise SchemaError(f"no attribute named {name!r}")

    def segment(self, i: int) -> SensorSegment:
        pub, priv, unspec = None, {}, {}
        for a in self.schema:
            lab = int(self.labels[a.name][i])
            if a.role == "public":
                pub = lab
            elif a.role == "private":
                priv[a.name] = lab
            else:
                unspec[a.name] = lab
        return SensorSegment(self.values[i], pub, priv, unspec)

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(values=self.values[indices].copy(),
                       labels={k: v[indices].copy() for k, v in self.labels.items()},
                       schema=list(self.schema),
                       channel_stats=self.channel_stats)

    def with_values(self, values: np.ndarray) -> "Dataset":
        """Same labels and schema over replacement signal content."""
        if values.shape[0] != len(self):
            raise ShapeError(f"expected {len(self)} segments, got {values.shape[0]}")
        return Dataset(values=values.astype(np.float32),
                       labels={k: v.copy() for k, v in self.labels.items()},
                       schema=list(self.schema),
                       channel_stats=self.channel_stats)

    def validate(self) -> None:
        if self.values.ndim != 3:
            raise ShapeError(f"values must be [N, C, W], got {self.values.shape}")
        names = [a.name for a in self.schema]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate attribute names in schema")
        if sum(a.role == "public" for a in self.schema) != 1:
            raise SchemaError("dataset must declare exactly one public attribute")
        if set(self.labels) != set(names):
            raise SchemaError(
                f"label keys {sorted(self.labels)} != schema {sorted(names)}")
        n = len(self)
        for a in self.schema:
            lab = self.labels[a.name]
            if lab.shape != (n,):
                raise ShapeError(f"labels[{a.name!r}] must be [{n}], got {lab.shape}")
            if lab.size and (lab.min() < 0 or lab.max() >= a.cardinality):
                raise SchemaError(
                    f"labels[{a.name!r}] out of range for cardinality {a.cardinality}")


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for the planted-attribute synthetic corpus.

    The public class sets the sinusoid frequency (u+1 whole cycles per
    window); the private class sets amplitude and DC offset. The two factors
    are crossed in a full grid, so they are independent by construction.
    """

    n_public_classes: int = 4
    n_private_classes: int = 2
    per_class: int = 64
    channels: int = 3
    window_len: int = 64
    noise_std: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        for fname in ("n_public_classes", "n_private_classes", "per_class",
                      "channels", "window_len"):
            if getattr(self, fname) < 1:
                raise ConfigError(f"SynthSpec.{fname} must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("SynthSpec.noise_std must be >= 0")


PUBLIC_ATTR = "freq_class"
PRIVATE_ATTR = "amp_class"


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Deterministic synthetic dataset of n_u * n_s * per_class segments."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_u, n_s = spec.n_public_classes, spec.n_private_classes
    n = n_u * n_s * spec.per_class
    c, w = spec.channels, spec.window_len

    t = np.arange(w) / w
    chan_phase = 2.0 * math.pi * np.arange(c) / c

    values = np.empty((n, c, w), dtype=np.float32)
    u_labels = np.empty(n, dtype=np.int64)
    s_labels = np.empty(n, dtype=np.int64)
    i = 0
    for u in range(n_u):
        freq = u + 1
        for s in range(n_s):
            amp = 1.0 + 0.5 * s
            offset = 0.6 * s
            for _ in range(spec.per_class):
                phase = rng.uniform(0.0, 2.0 * math.pi)
                ang = 2.0 * math.pi * freq * t[None, :] + phase + chan_phase[:, None]
                clean = amp * np.sin(ang) + offset
                noise = rng.normal(0.0, spec.noise_std, size=(c, w))
                values[i] = (clean + noise).astype(np.float32)
                u_labels[i] = u
                s_labels[i] = s
                i += 1

    ds = Dataset(values=values,
                 labels={PUBLIC_ATTR: u_labels, PRIVATE_ATTR: s_labels},
                 schema=[AttributeSpec(PUBLIC_ATTR, n_u, "public"),
                         AttributeSpec(PRIVATE_ATTR, n_s, "private")])
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# segmentation


def segment_series(series: np.ndarray, window: int, stride: int) -> np.ndarray:
    """Sliding windows over [channels, L] -> [n, channels, window].

    Window i starts at i*stride; n = floor((L - window)/stride) + 1.
    """
    if series.ndim != 2:
        raise ShapeError(f"series must be [channels, L], got {series.shape}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    length = series.shape[1]
    if length < window:
        raise ShapeError(f"series length {length} shorter than window {window}")
    win = np.lib.stride_tricks.sliding_window_view(series, window, axis=1)
    return win[:, ::stride].transpose(1, 0, 2).copy()


# ---------------------------------------------------------------------------
# standardization


def compute_channel_stats(dataset: Dataset) -> ChannelStats:
    """Per-channel mean and population std over all segments and samples."""
    if len(dataset) == 0:
        raise ConfigError("cannot compute statistics of an empty dataset")
    x = dataset.values.astype(np.float64)
    mean = x.mean(axis=(0, 2))
    std = x.std(axis=(0, 2))
    degenerate = std < 1e-12
    std = np.where(degenerate, 1.0, std)
    return ChannelStats(mean=mean, std=std, degenerate=degenerate)


def apply_stats(dataset: Dataset, stats: ChannelStats) -> Dataset:
    """Z-score by stored stats; degenerate channels become all zeros."""
    if stats.mean.shape[0] != dataset.channels:
        raise ShapeError(f"stats cover {stats.mean.shape[0]} channels, "
                         f"dataset has {dataset.channels}")
    x = dataset.values.astype(np.float64)
    z = (x - stats.mean[None, :, None]) / stats.std[None, :, None]
    z[:, stats.degenerate, :] = 0.0
    out = dataset.with_values(z.astype(np.float32))
    out.channel_stats = stats
    return out


def standardize(dataset: Dataset) -> Dataset:
    """Fit stats on this dataset and apply them (training-split usage)."""
    return apply_stats(dataset, compute_channel_stats(dataset))


# ---------------------------------------------------------------------------
# splitting


def split(dataset: Dataset, ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified shuffle split on the public attribute.

    Train size is round(ratio*N) overall; per-class counts are allocated by
    largest remainder so class proportions hold within one segment, and every
    class lands at least one segment in each side.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    dataset.validate()
    n = len(dataset)
    u = dataset.labels[dataset.public_attribute]
    classes, counts = np.unique(u, return_counts=True)
    if counts.min() < 2:
        raise ConfigError("every public class needs >= 2 segments to stratify")

    target = int(round(ratio * n))
    target = min(max(target, len(classes)), n - len(classes))
    exact = counts * target / n
    base = np.floor(exact).astype(int)
    base = np.clip(base, 1, counts - 1)
    rem = target - int(base.sum())
    order = np.argsort(-(exact - np.floor(exact)), kind="stable")
    k = 0
    while rem != 0 and k < 10 * len(classes):
        ci = order[k % len(classes)]
        if rem > 0 and base[ci] < counts[ci] - 1:
            base[ci] += 1
            rem -= 1
        elif rem < 0 and base[ci] > 1:
            base[ci] -= 1
            rem += 1
        k += 1

    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for ci, cls in enumerate(classes):
        members = np.flatnonzero(u == cls)
        members = members[rng.permutation(members.size)]
        train_idx.append(members[:base[ci]])
        test_idx.append(members[base[ci]:])
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)
    train_idx = train_idx[rng.permutation(train_idx.size)]
    test_idx = test_idx[rng.permutation(test_idx.size)]
    return dataset.subset(train_idx), dataset.subset(test_idx)


# ---------------------------------------------------------------------------
# file format


def save_dataset(path: str | os.PathLike, dataset: Dataset) -> str:
    """Write the binary dataset format; returns the file's SHA-256 digest.

    Header: magic "CLK1", version u32, channels u32, window u32, count u64,
    attribute count u32 then per attribute (name str, cardinality u32,
    role u8), tool-version str, stats flag u8 (if 1: per channel mean f64,
    std f64, degenerate u8). Payload per segment: float32 values row-major,
    then one u32 label per attribute in schema order.
    """
    dataset.validate()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts.append(struct.pack("<IIQ", dataset.channels, dataset.window_len,
                             len(dataset)))
    parts.append(struct.pack("<I", len(dataset.schema)))
    for a in dataset.schema:
        parts.append(pack_str(a.name))
        parts.append(struct.pack("<IB", a.cardinality, _ROLE_CODE[a.role]))
    parts.append(pack_str(TOOL_VERSION))
    st = dataset.channel_stats
    if st is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1))
        for ch in range(dataset.channels):
            parts.append(struct.pack("<ddB", st.mean[ch], st.std[ch],
                                     int(st.degenerate[ch])))

    label_block = np.stack([dataset.labels[a.name] for a in dataset.schema],
                           axis=1).astype("<u4")
    for i in range(len(dataset)):
        parts.append(pack_f32(dataset.values[i]))
        parts.append(label_block[i].tobytes())
    return atomic_write(path, b"".join(parts))


def load_dataset(path: str | os.PathLike) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise DataFormatError(f"{path}: not a dataset file (bad magic)")
    r = Reader(blob, name=str(path))
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise SchemaError(f"{path}: unsupported dataset version {version}")
    channels, window, count = r.u32(), r.u32(), r.u64()
    n_attrs = r.u32()
    schema = []
    for _ in range(n_attrs):
        name = r.string()
        card = r.u32()
        role_code = r.u8()
        if role_code >= len(ROLES):
            raise DataFormatError(f"{path}: unknown attribute role {role_code}")
        schema.append(AttributeSpec(name, card, ROLES[role_code]))
    r.string()  # tool version, informational
    stats = None
    if r.u8() == 1:
        mean = np.empty(channels)
        std = np.empty(channels)
        degen = np.empty(channels, dtype=bool)
        for ch in range(channels):
            mean[ch] = r.f64()
            std[ch] = r.f64()
            degen[ch] = bool(r.u8())
        stats = ChannelStats(mean=mean, std=std, degenerate=degen)

    values = np.empty((count, channels, window), dtype=np.float32)
    labels = {a.name: np.empty(count, dtype=np.int64) for a in schema}
    for i in range(count):
        values[i] = r.f32_array((channels, window))
        row = r.u32_array(n_attrs)
        for j, a in enumerate(schema):
            labels[a.name][i] = row[j]
    r.expect_end()

    ds = Dataset(values=values, labels=labels, schema=schema, channel_stats=stats)
    ds.validate()
    return ds
