"""Volumes, the FNV1 container, masking/flattening and the synthetic cohort.

Volumes are ``(W, H, D, T)`` float32 arrays. On disk and in flattened form
voxels are ordered x-fastest (Fortran order over ``(W, H, D)``).
"""

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

MAGIC = "FNV1"
KINDS = ("volume", "fns", "labels")
VARIANCE_FLOOR = 1e-8


class FNVFormatError(ValueError):
    """Malformed or truncated FNV1 file."""


class CohortSpecError(ValueError):
    """Invalid synthetic cohort specification."""


@dataclass
class Volume4D:
    values: np.ndarray
    mask: np.ndarray | None = None
    voxel_size: tuple = (1.0, 1.0, 1.0)
    kind: str = "volume"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim == 3:
            self.values = self.values[..., None]
        if self.values.ndim != 4 or min(self.values.shape) < 1:
            raise ValueError(f"volume must be W x H x D x T, got shape {self.values.shape}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.values.shape[:3]:
                raise ValueError(f"mask shape {self.mask.shape} does not match volume {self.values.shape[:3]}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}")
        self.voxel_size = tuple(float(v) for v in self.voxel_size)

    @property
    def dims(self):
        return self.values.shape

    @property
    def spatial(self):
        return self.values.shape[:3]

    def full_mask(self):
        return np.ones(self.spatial, dtype=bool) if self.mask is None else self.mask


def save_volume(path, volume):
    """Write ``volume`` as an FNV1 container (text header, mask bytes, payload)."""
    v = volume
    w, h, d, t = v.dims
    header = [
        MAGIC,
        f"kind {v.kind}",
        f"dims {w} {h} {d} {t}",
        "voxel_size " + " ".join(repr(s) for s in v.voxel_size),
        "dtype float32",
        f"mask {0 if v.mask is None else 1}",
        "end",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if v.mask is not None:
            fh.write(v.mask.ravel(order="F").astype(np.uint8).tobytes())
        fh.write(v.values.ravel(order="F").astype("<f4").tobytes())


def load_volume(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = []
    pos = 0
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise FNVFormatError(f"{path}: header is not terminated")
        line = raw[pos:nl].decode("ascii", errors="replace")
        pos = nl + 1
        lines.append(line)
        if line == "end" or len(lines) > 32:
            break
    if not lines or lines[0] != MAGIC:
        raise FNVFormatError(f"{path}: bad magic {lines[0] if lines else ''!r}, expected {MAGIC!r}")
    meta = {}
    for line in lines[1:-1]:
        key, _, rest = line.partition(" ")
        meta[key] = rest.split()
    try:
        kind = meta["kind"][0]
        dims = tuple(int(x) for x in meta["dims"])
        voxel_size = tuple(float(x) for x in meta["voxel_size"])
        has_mask = meta["mask"][0] == "1"
        dtype = meta["dtype"][0]
    except (KeyError, IndexError, ValueError) as exc:
        raise FNVFormatError(f"{path}: incomplete header ({exc})") from None
    if dtype != "float32":
        raise FNVFormatError(f"{path}: unsupported dtype {dtype!r}")
    if len(dims) != 4 or min(dims) < 1:
        raise FNVFormatError(f"{path}: invalid dims {dims}")
    n_spatial = dims[0] * dims[1] * dims[2]
    expected = (n_spatial if has_mask else 0) + 4 * n_spatial * dims[3]
    if len(raw) - pos != expected:
        raise FNVFormatError(f"{path}: payload has {len(raw) - pos} bytes, dims imply {expected}")
    mask = None
    if has_mask:
        mask = np.frombuffer(raw, dtype=np.uint8, count=n_spatial, offset=pos).reshape(dims[:3], order="F") != 0
        pos += n_spatial
    values = np.frombuffer(raw, dtype="<f4", offset=pos).reshape(dims, order="F")
    return Volume4D(values.astype(np.float32), mask=mask, voxel_size=voxel_size, kind=kind)


@dataclass
class DataMatrix:
    """``T x S`` view of the in-mask voxels of a volume.

    ``index`` holds the C-order flat position (in ``W*H*D``) of each column;
    columns follow the x-fastest scan of the mask.
    """

    X: np.ndarray
    mask: np.ndarray
    index: np.ndarray

    @property
    def T(self):
        return self.X.shape[0]

    @property
    def S(self):
        return self.X.shape[1]

    @property
    def coords(self):
        return np.stack(np.unravel_index(self.index, self.mask.shape), axis=1)


def mask_index(mask):
    """C-order flat indices of the true voxels of ``mask`` in x-fastest order."""
    mask = np.asarray(mask, dtype=bool)
    fidx = np.flatnonzero(mask.ravel(order="F"))
    return np.ravel_multi_index(np.unravel_index(fidx, mask.shape, order="F"), mask.shape)


def normalize_matrix(X, method="unit"):
    """Normalize a ``T x S`` matrix.

    ``none`` leaves it alone; ``center`` removes each voxel's temporal mean;
    ``unit`` centers and then scales the whole matrix to unit Frobenius norm;
    ``zscore`` gives every voxel zero mean and unit variance (variance floor
    1e-8) and then applies the same global scaling.
    """
    X = np.asarray(X, dtype=np.float64)
    if method == "none":
        return X.copy()
    if method not in ("center", "unit", "zscore"):
        raise ValueError(f"unknown normalization {method!r}")
    X = X - X.mean(axis=0, keepdims=True)
    if method == "center":
        return X
    if method == "zscore":
        X = X / np.sqrt(np.maximum(X.var(axis=0, keepdims=True), VARIANCE_FLOOR))
    norm = np.linalg.norm(X)
    return X / norm if norm > 0 else X


def flatten(volume, mask=None, normalize="none"):
    """``W x H x D x T`` volume to a ``T x S`` :class:`DataMatrix`."""
    if mask is None:
        mask = volume.full_mask()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != volume.spatial:
        raise ValueError(f"mask shape {mask.shape} does not match volume {volume.spatial}")
    index = mask_index(mask)
    X = volume.values.reshape(-1, volume.dims[3])[index].T.astype(np.float64)
    return DataMatrix(normalize_matrix(X, normalize), mask, index)


def unflatten(matrix, mask, kind="volume"):
    """Inverse of :func:`flatten` for a rows x S matrix; zeros outside the mask."""
    matrix = np.asarray(matrix)
    mask = np.asarray(mask, dtype=bool)
    index = mask_index(mask)
    if matrix.shape[1] != index.size:
        raise ValueError(f"matrix has {matrix.shape[1]} columns, mask has {index.size} voxels")
    out = np.zeros((mask.size, matrix.shape[0]), dtype=np.float32)
    out[index] = matrix.T
    return Volume4D(out.reshape(*mask.shape, matrix.shape[0]), mask=None, kind=kind)


def fns_to_volume(V, mask):
    """``K x S`` networks to a ``W x H x D x K`` FN volume."""
    vol = unflatten(V, mask, kind="fns")
    vol.mask = None if np.all(mask) else np.asarray(mask, dtype=bool)
    return vol


def volume_to_fns(volume, mask=None):
    """``W x H x D x K`` FN volume to a ``K x S`` array over ``mask``."""
    return flatten(volume, mask if mask is not None else volume.full_mask()).X


# synthetic cohort

@dataclass
class CohortSpec:
    n_subjects: int = 40
    dims: tuple = (16, 16, 16, 20)
    k_true: int = 4
    blob_sigma: float = 2.5
    sigma_pos: float = 0.3
    sigma_scale: float = 0.05
    min_separation: float = 6.0
    truncate: float = 0.01
    separable: bool = False
    timecourse_smoothing: float = 1.0
    noise_sigma: float = 0.3
    covariate_range: tuple = (8.0, 22.0)
    covariate_shift: float = 3.0
    covariate_extent: float = 0.4
    centers: list | None = None
    template_seed: int = 0
    seed: int = 0

    def validate(self):
        if self.k_true < 2:
            raise CohortSpecError("k_true must be at least 2")
        if self.n_subjects < 1:
            raise CohortSpecError("n_subjects must be positive")
        if len(self.dims) != 4 or min(self.dims) < 1:
            raise CohortSpecError(f"dims must be four positive extents, got {self.dims}")
        if any(d % 8 for d in self.dims[:3]):
            raise CohortSpecError(f"spatial dims {tuple(self.dims[:3])} must each be divisible by 8")
        if self.blob_sigma <= 0 or self.noise_sigma < 0:
            raise CohortSpecError("blob_sigma must be positive and noise_sigma nonnegative")

    @classmethod
    def from_dict(cls, cfg):
        known = {f.name for f in fields(cls)}
        unknown = set(cfg) - known
        if unknown:
            raise CohortSpecError(f"unknown cohort keys: {sorted(unknown)}")
        cfg = dict(cfg)
        for key in ("dims", "covariate_range"):
            if key in cfg:
                cfg[key] = tuple(cfg[key])
        return cls(**cfg)

    def to_dict(self):
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["dims"] = list(self.dims)
        out["covariate_range"] = list(self.covariate_range)
        return out


@dataclass
class SubjectTruth:
    V: np.ndarray
    U: np.ndarray
    covariate: float
    centers: np.ndarray
    widths: np.ndarray


@dataclass
class Cohort:
    spec: CohortSpec
    volumes: list
    truth: list = field(default_factory=list)
    ids: list = field(default_factory=list)

    @property
    def mask(self):
        return np.ones(self.spec.dims[:3], dtype=bool)


def _bounds(spec):
    """Allowed template-center box per network and axis, leaving room for
    jitter (3 sd) and, on network 0's x axis, the covariate shift."""
    reach = np.full((spec.k_true, 3), 3 * spec.sigma_pos + 1.0)
    reach[0, 0] += abs(spec.covariate_shift)
    hi = np.asarray(spec.dims[:3], dtype=float)[None, :] - 1 - reach
    return reach, hi


def template_centers(spec):
    """Population-level network centers (voxel coordinates)."""
    lo, hi = _bounds(spec)
    if spec.centers is not None:
        centers = np.asarray(spec.centers, dtype=float)
        if centers.shape != (spec.k_true, 3):
            raise CohortSpecError(f"centers must be {spec.k_true} x 3")
        if np.any(centers < lo) or np.any(centers > hi):
            raise CohortSpecError("blob centers plus jitter and covariate shift exceed the volume")
        return centers
    if np.any(hi <= lo):
        raise CohortSpecError("volume too small for the requested jitter and covariate shift")
    rng = np.random.default_rng(spec.template_seed)
    for _ in range(10000):
        centers = rng.uniform(lo, hi)
        d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        if np.all(d[np.triu_indices(spec.k_true, 1)] >= spec.min_separation):
            return centers
    raise CohortSpecError("could not place blobs with the requested separation inside the volume")


def blob_maps(centers, widths, spatial, truncate=0.0, separable=False):
    """Gaussian blob networks as a ``K x S`` array (x-fastest voxel order)."""
    grid = np.stack(np.unravel_index(mask_index(np.ones(spatial, dtype=bool)), spatial), axis=1)
    d2 = ((grid[None, :, :] - centers[:, None, :]) ** 2).sum(axis=-1)
    V = np.exp(-d2 / (2.0 * np.asarray(widths)[:, None] ** 2))
    if separable:
        winner = np.argmax(V, axis=0)
        V = V * (np.arange(V.shape[0])[:, None] == winner[None, :])
    V[V < truncate] = 0.0
    return V / V.max(axis=1, keepdims=True)


def smooth_timecourses(rng, T, K, smoothing):
    U = rng.standard_normal((T, K))
    if smoothing > 0:
        U = gaussian_filter1d(U, smoothing, axis=0, mode="wrap")
    U = U - U.mean(axis=0)
    return U / U.std(axis=0)


def generate_cohort(spec):
    """Synthesize ``spec.n_subjects`` volumes with known networks.

    The standardized covariate ``a`` in [-1, 1] moves network 0 along x by
    ``covariate_shift * a`` voxels and scales the width of network 1 by
    ``1 + covariate_extent * a``. The reported covariate maps ``a`` linearly
    onto ``covariate_range``.
    """
    spec.validate()
    base = template_centers(spec)
    W, H, D, T = spec.dims
    K = spec.k_true
    mask = np.ones((W, H, D), dtype=bool)
    lo, hi = spec.covariate_range
    direction = np.array([1.0 if base[0, 0] < W / 2 else -1.0, 0.0, 0.0])
    rng = np.random.default_rng(spec.seed)
    volumes, truth, ids = [], [], []
    for i in range(spec.n_subjects):
        a = rng.uniform(-1.0, 1.0)
        centers = base + rng.normal(0.0, spec.sigma_pos, size=base.shape)
        centers[0] += spec.covariate_shift * a * direction
        widths = spec.blob_sigma * np.clip(1 + rng.normal(0.0, spec.sigma_scale, size=K), 0.5, 1.5)
        if K > 1:
            widths[1] *= 1 + spec.covariate_extent * a
        V = blob_maps(centers, widths, (W, H, D), spec.truncate, spec.separable)
        U = smooth_timecourses(rng, T, K, spec.timecourse_smoothing)
        X = U @ V
        if spec.noise_sigma > 0:
            X = X + rng.normal(0.0, spec.noise_sigma, size=X.shape)
        volumes.append(unflatten(X, mask))
        truth.append(SubjectTruth(V, U, float(lo + (a + 1) / 2 * (hi - lo)), centers, widths))
        ids.append(f"sub-{i:03d}")
    return Cohort(spec, volumes, truth, ids)


# manifests

def write_manifest(path, entries):
    """``entries`` is a sequence of ``(volume_path, covariate or None)``; paths
    are stored relative to the manifest's directory."""
    base = Path(path).parent
    with open(path, "w") as fh:
        for vpath, cov in entries:
            rel = os.path.relpath(vpath, base)
            fh.write(f"{rel}\t{'' if cov is None else repr(float(cov))}\n")


def read_manifest(path):
    """Return ``[(absolute volume path, covariate or None), ...]``."""
    base = Path(path).parent
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            vpath, _, cov = line.partition("\t")
            try:
                value = float(cov) if cov.strip() else None
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad covariate {cov!r}") from None
            out.append((str((base / vpath).resolve()), value))
    return out


def subject_id(path):
    name = Path(path).name
    return name[: -len(".fnv")] if name.endswith(".fnv") else Path(path).stem
