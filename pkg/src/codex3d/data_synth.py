"""Procedural phantom volumes, parallel-ray view projection, and dataset I/O.

Volumes are cubic grids of densities in [0, 1] built from randomly placed
primitives (ellipsoid, box, tube, shell) with optional nesting, so datasets
exhibit varied topology and density strata. Views are parallel-ray
projections at configurable azimuths; pairs can be made deliberately
unaligned by resampling the projected copy under a rigid transform.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from codex3d.errors import ConfigError, DataFormatError
from codex3d.util import atomic_write_bytes, atomic_write_text, derive_seed

PRIMITIVE_KINDS = ("ellipsoid", "box", "tube", "shell")

DATASET_SCHEMA = "codex3d.dataset"
DATASET_SCHEMA_VERSION = 1


@dataclass
class VolumeGrid:
    """3D scalar density grid with physical spacing metadata."""

    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def validate(self):
        if self.values.ndim != 3:
            raise ConfigError("VolumeGrid.values must be 3D")
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("VolumeGrid.values must be finite")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ConfigError("VolumeGrid.values must lie in [0, 1]")
        return self


@dataclass
class ViewImage:
    """2D projection image with acquisition-angle metadata."""

    values: np.ndarray
    azimuth_deg: float
    elevation_deg: float = 0.0


@dataclass
class PhantomSpec:
    """Parameters of the procedural phantom generator."""

    grid_size: int = 32
    primitive_count_range: tuple = (1, 4)
    density_levels: tuple = (0.25, 0.5, 0.75, 1.0)
    allowed_primitives: tuple = PRIMITIVE_KINDS
    nesting_depth: int = 2

    def validate(self):
        s = self.grid_size
        if s < 8 or (s & (s - 1)) != 0:
            raise ConfigError(f"grid_size must be >= 8 and a power of two, got {s}")
        lo, hi = self.primitive_count_range
        if lo < 0 or hi < lo:
            raise ConfigError(
                f"primitive_count_range must satisfy 0 <= min <= max, got {self.primitive_count_range}"
            )
        levels = list(self.density_levels)
        if not levels:
            raise ConfigError("density_levels must be nonempty")
        if any(d < 0.0 or d > 1.0 for d in levels):
            raise ConfigError(f"density_levels must lie in [0, 1], got {levels}")
        if levels != sorted(levels):
            raise ConfigError(f"density_levels must be sorted ascending, got {levels}")
        bad = [p for p in self.allowed_primitives if p not in PRIMITIVE_KINDS]
        if bad or not self.allowed_primitives:
            raise ConfigError(
                f"allowed_primitives must be a nonempty subset of {PRIMITIVE_KINDS}, got {tuple(self.allowed_primitives)}"
            )
        if self.nesting_depth < 0:
            raise ConfigError(f"nesting_depth must be >= 0, got {self.nesting_depth}")
        return self


@dataclass
class MisalignmentParams:
    """Rigid perturbation applied to the projected copy of a volume."""

    rotation_deg: tuple = (0.0, 0.0, 0.0)
    translation_vox: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def validate(self, grid_size: int):
        # Multiples of 180 degrees map the frame onto itself, so they are
        # accepted alongside the +/-30 degree margin-safe band.
        for r in self.rotation_deg:
            if abs(r) > 30.0 and r % 180.0 != 0.0:
                raise ConfigError(f"rotation_deg magnitudes must be <= 30, got {self.rotation_deg}")
        if max(abs(t) for t in self.translation_vox) > grid_size / 8.0:
            raise ConfigError(
                f"translation_vox magnitudes must be <= grid_size/8 = {grid_size / 8}, got {self.translation_vox}"
            )
        return self


def _rotation_matrix(rx_deg, ry_deg, rz_deg):
    """Rotation about axes 2, then 1, then 0 (row-vector-free convention)."""
    rx, ry, rz = (math.radians(a) for a in (rx_deg, ry_deg, rz_deg))
    c0, s0 = math.cos(rx), math.sin(rx)
    c1, s1 = math.cos(ry), math.sin(ry)
    c2, s2 = math.cos(rz), math.sin(rz)
    r0 = np.array([[1, 0, 0], [0, c0, -s0], [0, s0, c0]])
    r1 = np.array([[c1, 0, s1], [0, 1, 0], [-s1, 0, c1]])
    r2 = np.array([[c2, -s2, 0], [s2, c2, 0], [0, 0, 1]])
    return r0 @ r1 @ r2


def _paint_primitive(volume, kind, center, half, rot, density, antialias):
    """Assign `density` to voxels inside the primitive (soft edge if antialias)."""
    size = volume.shape[0]
    reach = float(np.max(half)) * math.sqrt(3.0) + 2.0
    lo = np.maximum(np.floor(center - reach).astype(int), 0)
    hi = np.minimum(np.ceil(center + reach).astype(int) + 1, size)
    if np.any(lo >= hi):
        return
    grids = np.meshgrid(
        *(np.arange(lo[a], hi[a], dtype=np.float64) for a in range(3)), indexing="ij"
    )
    rel = np.stack([g - center[a] for a, g in enumerate(grids)], axis=-1)
    local = rel @ rot  # rotate coordinates into the primitive frame

    if kind == "ellipsoid":
        q = np.sqrt(np.sum((local / half) ** 2, axis=-1))
        edge = q - 1.0
    elif kind == "box":
        q = np.max(np.abs(local) / half, axis=-1)
        edge = q - 1.0
    elif kind == "tube":
        radial = np.sqrt((local[..., 1] / half[1]) ** 2 + (local[..., 2] / half[2]) ** 2)
        axial = np.abs(local[..., 0]) / half[0]
        edge = np.maximum(radial, axial) - 1.0
    elif kind == "shell":
        inner = 0.6
        q = np.sqrt(np.sum((local / half) ** 2, axis=-1))
        edge = np.maximum(q - 1.0, inner - q)
    else:
        raise ConfigError(f"unknown primitive kind {kind!r}")

    region = volume[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    if antialias:
        # soft edge roughly one voxel wide, in normalized units
        width = 1.0 / float(np.min(half))
        cover = np.clip(0.5 - edge / width, 0.0, 1.0)
        np.copyto(region, (1.0 - cover) * region + cover * density)
    else:
        region[edge <= 0.0] = density


def generate_phantom(spec: PhantomSpec, seed: int, antialias: bool = False) -> VolumeGrid:
    """Build a deterministic phantom volume for (spec, seed).

    Primitives are placed inside a central safety margin so rigid
    misalignment within the allowed bounds keeps the object in frame.
    Without antialiasing, nonzero voxels take values exactly from
    spec.density_levels.
    """
    spec.validate()
    rng = np.random.default_rng(derive_seed("phantom", seed))
    size = spec.grid_size
    volume = np.zeros((size, size, size), dtype=np.float64)

    lo, hi = spec.primitive_count_range
    count = int(rng.integers(lo, hi + 1))
    kinds = tuple(spec.allowed_primitives)
    levels = tuple(float(d) for d in spec.density_levels)
    center0 = (size - 1) / 2.0

    # Keep every primitive inside a Euclidean ball of radius 0.32 * size
    # around the volume center: a rotation preserves that radius, and adding
    # the maximum allowed translation (size / 8) still stays in frame.
    placed = []  # (center, half, depth, density)
    for _ in range(count):
        parent = None
        if placed and spec.nesting_depth > 0 and rng.random() < 0.35:
            cand = [p for p in placed if p[2] < spec.nesting_depth]
            if cand:
                parent = cand[int(rng.integers(0, len(cand)))]
        kind = kinds[int(rng.integers(0, len(kinds)))]
        if parent is None:
            offset = rng.uniform(-1.0, 1.0, size=3)
            norm = float(np.linalg.norm(offset))
            if norm > 1.0:
                offset = offset / norm
            center = center0 + offset * 0.12 * size
            half = rng.uniform(0.05, 0.16, size=3) * size
            hnorm = float(np.linalg.norm(half))
            if hnorm > 0.20 * size:
                half = half * (0.20 * size / hnorm)
            depth = 0
        else:
            pc, ph, pd, _ = parent
            center = pc + rng.uniform(-0.25, 0.25, size=3) * ph
            half = ph * rng.uniform(0.30, 0.55, size=3)
            depth = pd + 1
        half = np.maximum(half, 1.2)
        density = levels[int(rng.integers(0, len(levels)))]
        if parent is not None and len(levels) > 1 and density == parent[3]:
            density = levels[(levels.index(density) + 1) % len(levels)]
        rot = _rotation_matrix(*rng.uniform(0.0, 360.0, size=3))
        _paint_primitive(volume, kind, center, half, rot, density, antialias)
        placed.append((center, half, depth, density))

    return VolumeGrid(values=volume.astype(np.float32), spacing=(1.0, 1.0, 1.0))


def _projection_stack(volume: np.ndarray, azimuth_deg: float) -> np.ndarray:
    """Resample the volume so rays for this azimuth run along axis 2.

    Azimuth rotates the ray direction in the plane of axes (1, 2); axis 0
    stays the image row axis. Multiples of 90 degrees use exact index
    arithmetic; other angles use trilinear resampling (zeros outside).
    """
    theta = float(azimuth_deg) % 360.0
    if theta % 90.0 == 0.0:
        k = int(theta // 90.0) % 4
        if k == 0:
            return volume
        if k == 1:
            return np.swapaxes(volume, 1, 2)[:, :, ::-1]
        if k == 2:
            return volume[:, ::-1, ::-1]
        return np.swapaxes(volume, 1, 2)[:, ::-1, :]

    size1, size2 = volume.shape[1], volume.shape[2]
    c1, c2 = (size1 - 1) / 2.0, (size2 - 1) / 2.0
    j = np.arange(size1, dtype=np.float64) - c1
    k = np.arange(size2, dtype=np.float64) - c2
    jj, kk = np.meshgrid(j, k, indexing="ij")
    rad = math.radians(theta)
    cos_t, sin_t = math.cos(rad), math.sin(rad)
    src1 = c1 + cos_t * jj - sin_t * kk
    src2 = c2 + sin_t * jj + cos_t * kk
    out = np.empty_like(volume, dtype=np.float64)
    coords = np.stack([src1, src2], axis=0)
    for i in range(volume.shape[0]):
        out[i] = ndimage.map_coordinates(
            volume[i].astype(np.float64), coords, order=1, mode="constant", cval=0.0
        )
    return out


def project_views(volume: VolumeGrid, azimuths_deg, mode: str = "attenuation", mu: float = 0.1):
    """Project a volume to one parallel-ray view per azimuth.

    attenuation mode: 1 - exp(-mu * path integral of density), per ray.
    max mode: per-ray maximum density.
    """
    if azimuths_deg is None or len(azimuths_deg) == 0:
        raise ConfigError("azimuths_deg must be a nonempty list")
    if any(not math.isfinite(float(a)) for a in azimuths_deg):
        raise ConfigError(f"azimuths_deg must be finite, got {list(azimuths_deg)}")
    if mode not in ("attenuation", "max"):
        raise ConfigError(f"mode must be 'attenuation' or 'max', got {mode!r}")

    views = []
    vals = volume.values
    for az in azimuths_deg:
        stack = _projection_stack(vals, float(az))
        if mode == "max":
            img = stack.max(axis=2)
        else:
            path = stack.sum(axis=2, dtype=np.float64) * float(volume.spacing[2])
            img = 1.0 - np.exp(-float(mu) * path)
        views.append(ViewImage(values=img.astype(np.float32), azimuth_deg=float(az)))
    return views


def apply_misalignment(volume: VolumeGrid, params: MisalignmentParams) -> VolumeGrid:
    """Rigidly rotate/translate a volume with trilinear resampling.

    Zero rotation and translation returns the input values exactly.
    """
    size = volume.values.shape[0]
    params.validate(size)
    if all(r == 0.0 for r in params.rotation_deg) and all(
        t == 0.0 for t in params.translation_vox
    ):
        return VolumeGrid(values=volume.values.copy(), spacing=volume.spacing)

    rot = _rotation_matrix(*params.rotation_deg)
    inv = rot.T
    center = (np.array(volume.values.shape, dtype=np.float64) - 1.0) / 2.0
    shift = np.array(params.translation_vox, dtype=np.float64)
    offset = center - inv @ (center + shift)
    out = ndimage.affine_transform(
        volume.values.astype(np.float64), inv, offset=offset, order=1, mode="constant", cval=0.0
    )
    return VolumeGrid(values=np.clip(out, 0.0, 1.0).astype(np.float32), spacing=volume.spacing)


def sample_misalignment(max_rotation_deg: float, max_translation_vox: float, seed: int) -> MisalignmentParams:
    """Draw per-axis rotation/translation uniformly within symmetric bounds."""
    rng = np.random.default_rng(derive_seed("misalign", seed))
    rot = tuple(rng.uniform(-max_rotation_deg, max_rotation_deg, size=3))
    trans = tuple(rng.uniform(-max_translation_vox, max_translation_vox, size=3))
    return MisalignmentParams(rotation_deg=rot, translation_vox=trans, seed=seed)


def normalize_intensity(raw: np.ndarray, lo: float, hi: float) -> VolumeGrid:
    """Clip raw intensities to [lo, hi] and map affinely to [0, 1]."""
    if not lo < hi:
        raise ConfigError(f"normalize_intensity requires lo < hi, got lo={lo}, hi={hi}")
    clipped = np.clip(np.asarray(raw, dtype=np.float64), lo, hi)
    scaled = (clipped - lo) / (hi - lo)
    return VolumeGrid(values=scaled.astype(np.float32), spacing=(1.0, 1.0, 1.0))


# ---------------------------------------------------------------------------
# dataset persistence: versioned manifest + one binary record per sample
# ---------------------------------------------------------------------------


def save_dataset(samples, path, meta: dict | None = None) -> None:
    """Write samples to a directory: manifest.json + records/sample_NNNNNN.bin.

    Each record stores the volume then every view as little-endian float32
    in C row-major order, so round-trips are bit-exact.
    """
    if not samples:
        raise DataFormatError("empty dataset: nothing to save")
    volume0, views0 = samples[0]
    vol_shape = list(volume0.values.shape)
    view_shape = list(views0[0].values.shape)
    azimuths = [float(v.azimuth_deg) for v in views0]
    elevations = [float(v.elevation_deg) for v in views0]

    os.makedirs(os.path.join(path, "records"), exist_ok=True)
    for idx, (vol, views) in enumerate(samples):
        if list(vol.values.shape) != vol_shape or len(views) != len(views0):
            raise DataFormatError(f"sample {idx} has inconsistent shapes")
        parts = [np.ascontiguousarray(vol.values, dtype="<f4").tobytes()]
        for v in views:
            if list(v.values.shape) != view_shape:
                raise DataFormatError(f"sample {idx} has inconsistent view shape")
            parts.append(np.ascontiguousarray(v.values, dtype="<f4").tobytes())
        atomic_write_bytes(
            os.path.join(path, "records", f"sample_{idx:06d}.bin"), b"".join(parts)
        )

    manifest = {
        "schema": DATASET_SCHEMA,
        "schema_version": DATASET_SCHEMA_VERSION,
        "count": len(samples),
        "volume_shape": vol_shape,
        "view_shape": view_shape,
        "view_count": len(views0),
        "azimuths_deg": azimuths,
        "elevations_deg": elevations,
        "spacing": list(volume0.spacing),
        "meta": meta or {},
    }
    atomic_write_text(
        os.path.join(path, "manifest.json"), json.dumps(manifest, indent=2, sort_keys=True)
    )


def load_manifest(path) -> dict:
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataFormatError(f"no dataset manifest at {manifest_path}")
    raw = open(manifest_path, "rb").read()
    if len(raw) == 0:
        raise DataFormatError(f"empty dataset: manifest at {manifest_path} is empty")
    try:
        manifest = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"corrupted dataset manifest at {manifest_path}: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("schema") != DATASET_SCHEMA:
        raise DataFormatError(
            f"unrecognized dataset schema {manifest.get('schema') if isinstance(manifest, dict) else manifest!r}"
        )
    if manifest.get("schema_version") != DATASET_SCHEMA_VERSION:
        raise DataFormatError(
            f"dataset schema version {manifest.get('schema_version')} not supported "
            f"(expected {DATASET_SCHEMA_VERSION})"
        )
    if int(manifest.get("count", 0)) <= 0:
        raise DataFormatError(f"empty dataset at {path}")
    return manifest


def load_dataset(path):
    """Read back a dataset directory written by save_dataset."""
    manifest = load_manifest(path)
    vol_shape = tuple(manifest["volume_shape"])
    view_shape = tuple(manifest["view_shape"])
    n_views = int(manifest["view_count"])
    azimuths = manifest["azimuths_deg"]
    elevations = manifest["elevations_deg"]
    spacing = tuple(manifest["spacing"])

    vol_n = int(np.prod(vol_shape))
    view_n = int(np.prod(view_shape))
    expect = 4 * (vol_n + n_views * view_n)

    samples = []
    for idx in range(int(manifest["count"])):
        record = os.path.join(path, "records", f"sample_{idx:06d}.bin")
        if not os.path.exists(record):
            raise DataFormatError(f"missing dataset record {record}")
        blob = open(record, "rb").read()
        if len(blob) != expect:
            raise DataFormatError(
                f"record {record} has {len(blob)} bytes, expected {expect}"
            )
        flat = np.frombuffer(blob, dtype="<f4")
        vol = VolumeGrid(values=flat[:vol_n].reshape(vol_shape).copy(), spacing=spacing)
        views = []
        for v in range(n_views):
            start = vol_n + v * view_n
            views.append(
                ViewImage(
                    values=flat[start : start + view_n].reshape(view_shape).copy(),
                    azimuth_deg=float(azimuths[v]),
                    elevation_deg=float(elevations[v]),
                )
            )
        samples.append((vol, views))
    return samples


def build_dataset(
    spec: PhantomSpec,
    count: int,
    seed: int,
    azimuths_deg=(0.0, 90.0),
    mode: str = "attenuation",
    mu: float = 0.1,
    misalign: bool = False,
    max_rotation_deg: float = 15.0,
    max_translation_vox: float = 2.0,
    antialias: bool = False,
):
    """Generate (volume, views) pairs; with misalign the views are projected
    from a rigidly perturbed copy, so pairs are deliberately unaligned."""
    samples = []
    for i in range(count):
        vol = generate_phantom(spec, seed=derive_seed(seed, "sample", i), antialias=antialias)
        source = vol
        if misalign:
            params = sample_misalignment(
                max_rotation_deg, max_translation_vox, seed=derive_seed(seed, "mis", i)
            )
            source = apply_misalignment(vol, params)
        views = project_views(source, azimuths_deg, mode=mode, mu=mu)
        samples.append((vol, views))
    return samples
