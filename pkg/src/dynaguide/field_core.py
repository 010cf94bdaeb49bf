"""Grid fields, trajectory datasets, normalization/transforms, area weights,
the STDG binary container, and the repo-wide random number discipline.

All stochastic code in this package draws from numpy's Philox4x32-10 counter
generator through :func:`make_rng` / :func:`derive_rng`, so that every run is
reproducible bit-for-bit on one platform from a 64-bit seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

GEOMETRIES = ("periodic_both", "periodic_width_only")
SPLITS = ("train", "val", "test", "none")
TRANSFORMS = ("identity", "log_epsilon")

#: Default epsilon of the precipitation-style log transform.
LOG_EPSILON_DEFAULT = 1e-4

#: Name of the one counter-based generator used repo-wide.
GENERATOR_NAME = "philox4x32-10"


class FieldError(ValueError):
    """Invalid field or dataset construction/usage."""


class DegenerateChannelError(FieldError):
    """A channel has zero variance and cannot be standardized."""


def make_rng(seed: int) -> np.random.Generator:
    """Philox generator seeded from a single 64-bit seed."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def derive_rng(root_seed: int, *path: int) -> np.random.Generator:
    """Independent Philox stream keyed by (root_seed, *path).

    Used to hand out per-trajectory / per-member streams that are independent
    of each other and of execution order.
    """
    entropy = (int(root_seed),) + tuple(int(p) for p in path)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def _check_values(values: np.ndarray, ndim: int, what: str) -> np.ndarray:
    values = np.asarray(values)
    if values.ndim != ndim:
        raise FieldError(f"{what} must be {ndim}-dimensional, got shape {values.shape}")
    if not np.issubdtype(values.dtype, np.floating):
        values = values.astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise FieldError(f"{what} contains non-finite entries")
    return values


@dataclass(frozen=True)
class Field:
    """A single (C, H, W) grid snapshot with its boundary geometry."""

    values: np.ndarray
    geometry: str = "periodic_both"

    def __post_init__(self):
        object.__setattr__(self, "values", _check_values(self.values, 3, "Field values"))
        if self.geometry not in GEOMETRIES:
            raise FieldError(f"unknown geometry {self.geometry!r}")
        self.values.setflags(write=False)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class TrajectoryDataset:
    """Temporally ordered stack of fields: frame n sits at time n * dt_physical.

    ``values`` has shape (N, C, H, W); all frames share one geometry. If the
    dataset was standardized, ``mean``/``std`` hold the per-channel training
    statistics used (so the transform can be inverted); ``transform`` records
    an elementwise pre-transform ("identity" or "log_epsilon" with epsilon).
    """

    values: np.ndarray
    dt_physical: float
    geometry: str = "periodic_both"
    split: str = "none"
    transform: str = "identity"
    transform_epsilon: float = 0.0
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", _check_values(self.values, 4, "frames"))
        if self.geometry not in GEOMETRIES:
            raise FieldError(f"unknown geometry {self.geometry!r}")
        if self.split not in SPLITS:
            raise FieldError(f"unknown split {self.split!r}")
        if self.transform not in TRANSFORMS:
            raise FieldError(f"unknown transform {self.transform!r}")
        if self.dt_physical <= 0:
            raise FieldError("dt_physical must be positive")
        for name in ("mean", "std"):
            stat = getattr(self, name)
            if stat is not None:
                stat = np.asarray(stat, dtype=np.float64).reshape(self.channels)
                object.__setattr__(self, name, stat)
        if self.std is not None and np.any(self.std <= 0):
            raise DegenerateChannelError("degenerate channel: std must be > 0")
        self.values.setflags(write=False)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[2]

    @property
    def width(self) -> int:
        return self.values.shape[3]

    @property
    def norm_stats(self) -> tuple[np.ndarray, np.ndarray] | None:
        if self.mean is None or self.std is None:
            return None
        return self.mean, self.std

    def frame(self, n: int) -> Field:
        return Field(self.values[n], geometry=self.geometry)

    def time_of(self, n: int) -> float:
        return n * self.dt_physical


def standardize(
    ds: TrajectoryDataset,
    stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrajectoryDataset:
    """Shift/scale to per-channel zero mean, unit std.

    With ``stats=None`` the dataset must be the training split; population
    statistics (divide by N) are computed from it and stored for inversion.
    Validation/test splits must pass the training statistics explicitly so the
    split discipline is visible at the call site.
    """
    if ds.norm_stats is not None:
        raise FieldError("dataset is already standardized")
    if stats is None:
        if ds.split != "train":
            raise FieldError("statistics must come from the train split; pass stats= for val/test")
        flat = ds.values.reshape(len(ds), ds.channels, -1).astype(np.float64)
        mean = flat.mean(axis=(0, 2))
        std = flat.std(axis=(0, 2))  # population std
        if np.any(std == 0):
            raise DegenerateChannelError("degenerate channel: zero variance")
    else:
        mean, std = (np.asarray(s, dtype=np.float64).reshape(ds.channels) for s in stats)
        if np.any(std <= 0):
            raise DegenerateChannelError("degenerate channel: std must be > 0")
    scaled = (ds.values.astype(np.float64) - mean[:, None, None]) / std[:, None, None]
    return replace(ds, values=scaled.astype(np.float32), mean=mean, std=std)


def unstandardize(ds: TrajectoryDataset) -> TrajectoryDataset:
    """Invert :func:`standardize` using the stored statistics."""
    if ds.norm_stats is None:
        raise FieldError("dataset carries no normalization statistics")
    mean, std = ds.norm_stats
    raw = ds.values.astype(np.float64) * std[:, None, None] + mean[:, None, None]
    return replace(ds, values=raw.astype(np.float32), mean=None, std=None)


def log_transform(x: Field, epsilon: float = LOG_EPSILON_DEFAULT) -> Field:
    """Elementwise x~ = log(x + eps) - log(eps) for nonnegative fields."""
    if epsilon <= 0:
        raise FieldError("epsilon must be > 0")
    if np.any(x.values < 0):
        raise FieldError("log transform requires nonnegative values")
    v = x.values.astype(np.float64)
    out = np.log(v + epsilon) - np.log(epsilon)
    return Field(out.astype(x.values.dtype), geometry=x.geometry)

def inverse_log_transform(x: Field, epsilon: float = LOG_EPSILON_DEFAULT) -> Field:
    """Inverse of :func:`log_transform`: x = exp(x~ + log eps) - eps."""
    if epsilon <= 0:
        raise FieldError("epsilon must be > 0")
    v = x.values.astype(np.float64)
    out = np.exp(v + np.log(epsilon)) - epsilon
    return Field(out.astype(x.values.dtype), geometry=x.geometry)


def log_transform_dataset(ds: TrajectoryDataset, epsilon: float = LOG_EPSILON_DEFAULT) -> TrajectoryDataset:
    """Apply the log transform frame-wise and record it in the dataset header."""
    if ds.transform != "identity":
        raise FieldError("dataset already carries a transform")
    if np.any(ds.values < 0):
        raise FieldError("log transform requires nonnegative values")
    out = np.log(ds.values.astype(np.float64) + epsilon) - np.log(epsilon)
    return replace(ds, values=out.astype(np.float32), transform="log_epsilon", transform_epsilon=epsilon)


def percentile_scale(
    ds: TrajectoryDataset,
    q: float = 99.9,
    scale: np.ndarray | None = None,
) -> TrajectoryDataset:
    """Divide each channel by its q-th percentile over the training split.

    Brings heavy-tailed nonnegative channels approximately into [-1, 1]
    without clamping the extremes. The scale is stored as a zero-mean
    normalization so :func:`unstandardize` inverts it; val/test splits must
    pass the training scale explicitly.
    """
    if ds.norm_stats is not None:
        raise FieldError("dataset is already normalized")
    if scale is None:
        if ds.split != "train":
            raise FieldError("scale must come from the train split; pass scale= for val/test")
        flat = np.abs(ds.values.reshape(len(ds), ds.channels, -1).astype(np.float64))
        scale = np.percentile(flat, q, axis=(0, 2))
        if np.any(scale <= 0):
            raise DegenerateChannelError("degenerate channel: zero percentile scale")
    else:
        scale = np.asarray(scale, dtype=np.float64).reshape(ds.channels)
        if np.any(scale <= 0):
            raise DegenerateChannelError("degenerate channel: scale must be > 0")
    scaled = ds.values.astype(np.float64) / scale[:, None, None]
    return replace(ds, values=scaled.astype(np.float32), mean=np.zeros(ds.channels), std=scale)


@dataclass(frozen=True)
class TrainingBatch:
    """One classifier minibatch: noisy candidates + clean conditioning history.

    ``candidate`` is (B, C, H, W) with per-element noise level ``sigma``;
    ``conditioning`` is (B, (m+1)*C, H, W) of clean frames (the m+1 most recent
    history frames concatenated channel-wise, newest first); ``label`` is 1
    where the candidate is the true next frame.
    """

    candidate: np.ndarray
    conditioning: np.ndarray
    label: np.ndarray
    sigma: np.ndarray
    m: int = 1
    sigma_bounds: tuple[float, float] | None = None

    def __post_init__(self):
        if self.m < 1:
            raise FieldError("history length m must be >= 1")
        b = self.candidate.shape[0]
        if self.conditioning.shape[0] != b or self.label.shape[0] != b or self.sigma.shape[0] != b:
            raise FieldError("batch dimensions disagree")
        c = self.candidate.shape[1]
        if self.conditioning.shape[1] != (self.m + 1) * c:
            raise FieldError(
                f"conditioning must carry (m+1)*C={self.m + 1}*{c} channels, "
                f"got {self.conditioning.shape[1]}"
            )
        if not np.all((self.label == 0) | (self.label == 1)):
            raise FieldError("labels must be binary")
        if self.sigma_bounds is not None:
            lo, hi = self.sigma_bounds
            if np.any(self.sigma < lo) or np.any(self.sigma > hi):
                raise FieldError(f"sigma outside [{lo}, {hi}]")
        elif np.any(self.sigma <= 0):
            raise FieldError("sigma must be positive")

    def __len__(self) -> int:
        return self.candidate.shape[0]


@dataclass(frozen=True)
class AreaWeights:
    """Row weights w(k) with mean exactly renormalized to 1."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise FieldError("weights must be a non-empty 1-D array")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise FieldError("weights must be positive and finite")
        w = w / w.mean()
        object.__setattr__(self, "w", w)
        self.w.setflags(write=False)

    def __len__(self) -> int:
        return self.w.size


def unit_weights(height: int) -> AreaWeights:
    """w(k) = 1 for every row: flat (non-spherical) grids, e.g. vorticity."""
    return AreaWeights(np.ones(height))


def latitude_weights(latitudes_deg: np.ndarray) -> AreaWeights:
    """Cosine-latitude row weights, normalized so their mean is 1."""
    lat = np.asarray(latitudes_deg, dtype=np.float64)
    if np.any(np.abs(lat) >= 90.0):
        raise FieldError("latitudes must lie strictly inside (-90, 90) degrees")
    return AreaWeights(np.cos(np.deg2rad(lat)))


def split_dataset(
    ds: TrajectoryDataset, n_train: int, n_val: int, n_test: int
) -> tuple[TrajectoryDataset, TrajectoryDataset, TrajectoryDataset]:
    """Cut contiguous train/val/test blocks off the front of a trajectory."""
    if n_train + n_val + n_test > len(ds):
        raise FieldError(
            f"split sizes {n_train}+{n_val}+{n_test} exceed dataset length {len(ds)}"
        )
    out = []
    start = 0
    for n, split in ((n_train, "train"), (n_val, "val"), (n_test, "test")):
        out.append(replace(ds, values=ds.values[start : start + n], split=split))
        start += n
    return tuple(out)


# ---------------------------------------------------------------------------
# STDG container
#
# magic "STDG" | u32 version | u32 ndim | u64 dims[ndim] | u8 dtype code
# | u32 metadata byte length | metadata ("key=value\n" UTF-8 lines)
# | row-major payload
#
# All integers little-endian; dtype code 0 = little-endian float32.
# ---------------------------------------------------------------------------

MAGIC = b"STDG"
CONTAINER_VERSION = 1
DTYPE_FLOAT32 = 0


class ContainerError(ValueError):
    """Malformed STDG container."""


class BadMagicError(ContainerError):
    """File does not start with the STDG magic."""


class BadVersionError(ContainerError):
    """Container version is not supported."""


class TruncatedPayloadError(ContainerError):
    """File ends before header or payload is complete."""


def _encode_metadata(meta: dict[str, str]) -> bytes:
    lines = []
    for key, value in meta.items():
        if "=" in key or "\n" in key or not key:
            raise ContainerError(f"bad metadata key {key!r}")
        if "\n" in str(value):
            raise ContainerError(f"metadata value for {key!r} contains a newline")
        lines.append(f"{key}={value}\n")
    return "".join(lines).encode("utf-8")


def _decode_metadata(blob: bytes) -> dict[str, str]:
    meta: dict[str, str] = {}
    for line in blob.decode("utf-8").splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ContainerError(f"metadata line without '=': {line!r}")
        meta[key] = value
    return meta


def write_container(path: str | Path, values: np.ndarray, meta: dict[str, str]) -> None:
    """Write one float32 array plus metadata to an STDG file."""
    values = np.ascontiguousarray(values, dtype="<f4")
    meta_blob = _encode_metadata(meta)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", CONTAINER_VERSION, values.ndim))
        f.write(struct.pack(f"<{values.ndim}Q", *values.shape))
        f.write(struct.pack("<BI", DTYPE_FLOAT32, len(meta_blob)))
        f.write(meta_blob)
        f.write(values.tobytes())


def container_header_size(ndim: int, meta: dict[str, str]) -> int:
    """Byte offset of the payload for a given rank and metadata block."""
    return 4 + 4 + 4 + 8 * ndim + 1 + 4 + len(_encode_metadata(meta))


def read_container(path: str | Path) -> tuple[np.ndarray, dict[str, str]]:
    """Read an STDG file back into (array, metadata)."""
    blob = Path(path).read_bytes()

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise TruncatedPayloadError(f"file truncated while reading {what}")
        out = blob[off : off + n]
        off += n
        return out

    off = 0
    if take(4, "magic") != MAGIC:
        raise BadMagicError(f"bad magic in {path}: expected {MAGIC!r}")
    version, ndim = struct.unpack("<II", take(8, "version/ndim"))
    if version != CONTAINER_VERSION:
        raise BadVersionError(f"unsupported container version {version}")
    dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, "dims"))
    dtype_code, meta_len = struct.unpack("<BI", take(5, "dtype/meta length"))
    if dtype_code != DTYPE_FLOAT32:
        raise ContainerError(f"unknown dtype code {dtype_code}")
    meta = _decode_metadata(take(meta_len, "metadata"))
    n_bytes = int(np.prod(dims, dtype=np.int64)) * 4
    payload = take(n_bytes, "payload")
    if off != len(blob):
        raise ContainerError(f"{len(blob) - off} trailing bytes after payload")
    values = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return values, meta


def _format_floats(a: np.ndarray) -> str:
    return ",".join(repr(float(v)) for v in a)


def _parse_floats(s: str) -> np.ndarray:
    return np.array([float(v) for v in s.split(",")], dtype=np.float64)


def save_dataset(path: str | Path, ds: TrajectoryDataset, extra_meta: dict[str, str] | None = None) -> None:
    """Serialize a trajectory dataset; round-trip is bit-exact on the payload."""
    meta = {
        "kind": "trajectory",
        "dt_physical": repr(float(ds.dt_physical)),
        "geometry": ds.geometry,
        "split": ds.split,
        "transform": ds.transform,
    }
    if ds.transform == "log_epsilon":
        meta["transform_epsilon"] = repr(float(ds.transform_epsilon))
    if ds.norm_stats is not None:
        meta["mean"] = _format_floats(ds.mean)
        meta["std"] = _format_floats(ds.std)
    if extra_meta:
        meta.update(extra_meta)
    write_container(path, ds.values, meta)


def load_dataset(path: str | Path) -> TrajectoryDataset:
    values, meta = read_container(path)
    if meta.get("kind") != "trajectory":
        raise ContainerError(f"not a trajectory container: kind={meta.get('kind')!r}")
    if values.ndim != 4:
        raise ContainerError(f"trajectory payload must be 4-D, got {values.ndim}-D")
    return TrajectoryDataset(
        values=values,
        dt_physical=float(meta["dt_physical"]),
        geometry=meta.get("geometry", "periodic_both"),
        split=meta.get("split", "none"),
        transform=meta.get("transform", "identity"),
        transform_epsilon=float(meta.get("transform_epsilon", 0.0)),
        mean=_parse_floats(meta["mean"]) if "mean" in meta else None,
        std=_parse_floats(meta["std"]) if "std" in meta else None,
    )
