"""Volume and annotation files, preprocessing, and a seeded synthetic dataset.

On-disk layout of one case ``<name>``:

``<name>.volhdr``
    text header: ``volmark-volume <version>``, then ``dims``, ``spacing`` and
    ``dtype`` lines.
``<name>.vol``
    raw little-endian scalars, x fastest (Fortran order of ``(H, W, D)``).
``<name>.landmarks``
    text: ``volmark-landmarks <version>``, ``spacing``, ``count``, then one
    ``id name x y z present`` row per landmark.

A NIfTI/DICOM volume maps onto this by dumping its voxel array x-fastest
with the per-axis pixel spacing copied into the header.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .landmarks import LandmarkSet

FORMAT_VERSION = 1
DTYPES = {"float32": "<f4", "float64": "<f8", "int16": "<i2", "uint8": "u1"}


class DataFormatError(ValueError):
    """Malformed, truncated or version-mismatched file."""


@dataclass
class Volume:
    data: np.ndarray  # (H, W, D), indexed [x, y, z]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x: float) -> str:
    return repr(float(x))


def save_volume(stem, vol: Volume) -> None:
    stem = Path(stem)
    tag = {np.dtype(v): k for k, v in DTYPES.items()}.get(np.dtype(vol.data.dtype).newbyteorder("<"))
    if tag is None:
        raise DataFormatError(f"unsupported volume dtype {vol.data.dtype}")
    header = (f"volmark-volume {FORMAT_VERSION}\n"
              f"dims {' '.join(str(n) for n in vol.dims)}\n"
              f"spacing {' '.join(_fmt(s) for s in vol.spacing)}\n"
              f"dtype {tag}\n")
    payload = np.asarray(vol.data, dtype=DTYPES[tag]).ravel(order="F").tobytes()
    _atomic_write(stem.with_suffix(".vol"), payload)
    _atomic_write(stem.with_suffix(".volhdr"), header.encode())


def _parse_header(text: str, kind: str) -> dict[str, list[str]]:
    lines = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0][0] != f"volmark-{kind}" or len(lines[0]) != 2:
        raise DataFormatError(f"not a volmark {kind} file")
    if lines[0][1] != str(FORMAT_VERSION):
        raise DataFormatError(f"unknown {kind} format version {lines[0][1]} (expected {FORMAT_VERSION})")
    return {ln[0]: ln[1:] for ln in lines[1:]}


def load_volume(stem) -> Volume:
    stem = Path(stem)
    fields = _parse_header(stem.with_suffix(".volhdr").read_text(), "volume")
    try:
        dims = tuple(int(v) for v in fields["dims"])
        spacing = tuple(float(v) for v in fields["spacing"])
        tag = fields["dtype"][0]
    except (KeyError, ValueError, IndexError) as exc:
        raise DataFormatError(f"bad volume header {stem}: {exc}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise DataFormatError(f"volume dims must be 3 positive ints, got {dims}")
    if tag not in DTYPES:
        raise DataFormatError(f"unknown dtype tag {tag!r}")
    raw = stem.with_suffix(".vol").read_bytes()
    dt = np.dtype(DTYPES[tag])
    expected = int(np.prod(dims)) * dt.itemsize
    if len(raw) != expected:
        raise DataFormatError(f"payload is {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype=dt).reshape(dims, order="F")
    return Volume(data.astype(dt.newbyteorder("="), copy=True), spacing)


def save_landmarks(path, lm: LandmarkSet) -> None:
    rows = [f"volmark-landmarks {FORMAT_VERSION}",
            f"spacing {' '.join(_fmt(s) for s in lm.spacing)}",
            f"count {lm.count}",
            "# id name x y z present"]
    for i in range(lm.count):
        x, y, z = (_fmt(c) for c in lm.coords[i])
        rows.append(f"{i} {lm.names[i]} {x} {y} {z} {int(lm.present[i])}")
    _atomic_write(Path(path), ("\n".join(rows) + "\n").encode())


def load_landmarks(path, dims=None) -> LandmarkSet:
    text = Path(path).read_text()
    fields = _parse_header(text, "landmarks")
    try:
        spacing = tuple(float(v) for v in fields["spacing"])
        count = int(fields["count"][0])
    except (KeyError, ValueError, IndexError) as exc:
        raise DataFormatError(f"bad landmark header {path}: {exc}") from None
    records = [ln.split() for ln in text.splitlines()[3:] if ln.strip() and not ln.startswith("#")]
    if len(records) != count:
        raise DataFormatError(f"{path}: header says {count} landmarks, found {len(records)}")
    ids, names, coords, present = [], [], [], []
    for rec in records:
        if len(rec) != 6:
            raise DataFormatError(f"{path}: malformed landmark row {' '.join(rec)!r}")
        ids.append(int(rec[0]))
        names.append(rec[1])
        coords.append([float(v) for v in rec[2:5]])
        present.append(rec[5] == "1")
    if len(set(ids)) != len(ids):
        raise DataFormatError(f"{path}: duplicate landmark ids")
    if sorted(ids) != list(range(count)):
        raise DataFormatError(f"{path}: landmark ids must be dense 0..{count - 1}")
    order = np.argsort(ids)
    lm = LandmarkSet(np.array(coords)[order], np.array(present)[order], spacing,
                     tuple(names[i] for i in order))
    if dims is not None:
        try:
            lm.check_bounds(dims)
        except ValueError as exc:
            raise DataFormatError(f"{path}: {exc}") from None
    return lm


def normalize_intensity(volume: np.ndarray) -> np.ndarray:
    """Min-max scale to ``[0, 255]``; a constant volume maps to zeros."""
    v = np.asarray(volume, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) * (255.0 / (hi - lo))


def crop_corner(dims, crop_dims, seed) -> tuple[int, int, int]:
    """Uniformly drawn corner for a ``crop_dims`` window inside ``dims``."""
    dims = np.asarray(dims, dtype=int)
    crop = np.asarray(crop_dims, dtype=int)
    if crop.shape != (3,) or (crop > dims).any() or (crop < 1).any():
        raise ValueError(f"crop {tuple(crop)} does not fit volume {tuple(dims)}")
    rng = np.random.default_rng(seed)
    return tuple(int(rng.integers(0, n - c + 1)) for n, c in zip(dims, crop))


def crop_at(volume: np.ndarray, landmarks: LandmarkSet, corner, crop_dims) -> tuple[np.ndarray, LandmarkSet]:
    """Crop a window at ``corner``; landmarks leaving the window become absent."""
    crop = np.asarray(crop_dims, dtype=int)
    corner = np.asarray(corner, dtype=int)
    if (corner < 0).any() or (corner + crop > np.asarray(volume.shape)).any():
        raise ValueError(f"crop {tuple(crop)} at {tuple(corner)} does not fit volume {volume.shape}")
    sl = tuple(slice(o, o + c) for o, c in zip(corner, crop))
    coords = landmarks.coords - corner
    inside = np.all((coords >= 0) & (coords <= crop - 1), axis=1)
    return volume[sl].copy(), landmarks.copy(coords=coords, present=landmarks.present & inside)


def random_crop(volume: np.ndarray, landmarks: LandmarkSet, crop_dims, seed) -> tuple[np.ndarray, LandmarkSet]:
    """Crop at a corner drawn uniformly from ``seed`` (see :func:`crop_corner`)."""
    return crop_at(volume, landmarks, crop_corner(volume.shape, crop_dims, seed), crop_dims)


def landmark_amplitudes(n: int) -> np.ndarray:
    """Blob brightness per landmark id: 1.0 down to 0.5, so ids are distinguishable."""
    return np.linspace(1.0, 0.5, n) if n > 1 else np.ones(n)


CALIBRATION_LEVEL = 1.5  # bright 2^3 corner block pins the intensity range
HU_SCALE, HU_OFFSET = 1000.0, -1000.0


def gaussian_blob(dims, center, sigma: float) -> np.ndarray:
    g = [np.exp(-(np.arange(n) - c) ** 2 / (2.0 * sigma ** 2)) for n, c in zip(dims, center)]
    return g[0][:, None, None] * g[1][None, :, None] * g[2][None, None, :]


def _place(rng, dims, n, sigma, tries=2000) -> np.ndarray:
    margin = max(2, math.ceil(sigma))
    lo = np.full(3, margin)
    hi = np.asarray(dims) - margin
    if (hi <= lo).any():
        raise ValueError(f"volume {tuple(dims)} too small for blobs of sigma {sigma}")
    pts: list[np.ndarray] = []
    for _ in range(tries):
        if len(pts) == n:
            break
        p = rng.integers(lo, hi)
        if all(np.linalg.norm(p - q) >= 2.0 * sigma for q in pts):
            pts.append(p)
    if len(pts) < n:
        raise ValueError(f"cannot place {n} landmarks {2 * sigma:g} voxels apart in {tuple(dims)}")
    return np.array(pts, dtype=np.float64)


def peaks_consistent(vol: np.ndarray, lm: LandmarkSet, sigma: float) -> bool:
    """Each present blob's local argmax is its annotated voxel."""
    r = max(1, math.ceil(sigma))
    for i in np.flatnonzero(lm.present):
        c = lm.coords[i].astype(int)
        lo = np.maximum(c - r, 0)
        hi = np.minimum(c + r + 1, vol.shape)
        patch = vol[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        if tuple(np.unravel_index(np.argmax(patch), patch.shape) + lo) != tuple(c):
            return False
    return True


def synth_case(rng: np.random.Generator, dims, n_landmarks: int, sigma_blob: float = 2.0,
               noise_level: float = 0.1, missing_prob: float = 0.0,
               spacing=(1.0, 1.0, 1.0), attempts: int = 50) -> tuple[Volume, LandmarkSet]:
    """One synthetic scan: uniform noise, a calibration block and one blob per present landmark."""
    dims = tuple(int(n) for n in dims)
    if min(dims) < 8:
        raise ValueError(f"synthetic volumes need >= 8 voxels per axis, got {dims}")
    amps = landmark_amplitudes(n_landmarks)
    for _ in range(attempts):
        coords = _place(rng, dims, n_landmarks, sigma_blob)
        present = rng.random(n_landmarks) >= missing_prob
        vol = noise_level * rng.random(dims)
        vol[:2, :2, :2] = CALIBRATION_LEVEL
        for i in np.flatnonzero(present):
            vol += amps[i] * gaussian_blob(dims, coords[i], sigma_blob)
        lm = LandmarkSet(coords, present, spacing)
        if peaks_consistent(vol, lm, sigma_blob):
            return Volume((HU_SCALE * vol + HU_OFFSET).astype(np.float32), tuple(spacing)), lm
    raise ValueError("could not generate a self-consistent synthetic case")


def synth_generate(out_dir, count: int, dims, n_landmarks: int, sigma_blob: float = 2.0,
                   noise_level: float = 0.1, missing_prob: float = 0.0, seed: int = 0,
                   spacing=(1.0, 1.0, 1.0)) -> list[str]:
    """Write ``count`` cases to ``out_dir``; case ``i`` uses the i-th spawned child seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(count)):
        vol, lm = synth_case(np.random.default_rng(child), dims, n_landmarks, sigma_blob,
                             noise_level, missing_prob, spacing)
        name = f"case_{i:04d}"
        save_volume(out / name, vol)
        save_landmarks(out / f"{name}.landmarks", lm)
        names.append(name)
    return names


def synth_cases(count: int, dims, n_landmarks: int, sigma_blob: float = 2.0, noise_level: float = 0.1,
                missing_prob: float = 0.0, seed: int = 0, spacing=(1.0, 1.0, 1.0)):
    """In-memory twin of :func:`synth_generate` (identical cases for identical arguments)."""
    return [synth_case(np.random.default_rng(child), dims, n_landmarks, sigma_blob,
                       noise_level, missing_prob, spacing)
            for child in np.random.SeedSequence(seed).spawn(count)]


def case_names(data_dir) -> list[str]:
    return sorted(p.stem for p in Path(data_dir).glob("*.volhdr"))


def load_dataset(data_dir) -> list[tuple[str, Volume, LandmarkSet]]:
    data_dir = Path(data_dir)
    names = case_names(data_dir)
    if not names:
        raise FileNotFoundError(f"no volumes (*.volhdr) found in {data_dir}")
    out = []
    for name in names:
        vol = load_volume(data_dir / name)
        out.append((name, vol, load_landmarks(data_dir / f"{name}.landmarks", vol.dims)))
    return out


def network_input(volumes: Iterable[np.ndarray], dtype=np.float32) -> np.ndarray:
    """Stack normalized volumes scaled to ``[0, 1]``: ``(B, H, W, D)``."""
    return np.stack([normalize_intensity(v) / 255.0 for v in volumes]).astype(dtype)
