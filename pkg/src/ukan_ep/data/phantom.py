"""Synthetic four-modality glioma phantoms with nested tumour subregions."""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass

import numpy as np

from .nifti import read_nifti, write_nifti

MODALITIES = ("t1", "t1gd", "t2", "flair")
LABELS = {"background": 0, "NETC": 1, "SNFH": 2, "ET": 3, "RC": 4}
MIN_EXTENT = 16

# rows: background tissue, NETC, SNFH, ET, RC; columns follow MODALITIES
_INTENSITY = np.array(
    [
        [0.60, 0.50, 0.40, 0.35],
        [0.35, 0.25, 0.80, 0.50],
        [0.45, 0.45, 0.75, 0.95],
        [0.50, 1.00, 0.55, 0.70],
        [0.15, 0.10, 0.95, 0.15],
    ]
)


@dataclass
class SampleVolume:
    image: np.ndarray  # [4, D, H, W] float32
    labels: np.ndarray  # [D, H, W] uint8
    case_id: str = ""
    spacing: tuple = (1.0, 1.0, 1.0)  # mm per axis

    def __post_init__(self):
        if self.image.ndim != 4 or self.image.shape[1:] != self.labels.shape:
            raise ValueError(f"image {self.image.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 4):
            raise ValueError("labels outside 0..4")

    @property
    def extents(self):
        return self.labels.shape


def _ellipsoid(coords, center, radii):
    return sum(((c - m) / r) ** 2 for c, m, r in zip(coords, center, radii)) <= 1.0


def generate_phantom(seed, extents=(32, 32, 32), case_id=None) -> SampleVolume:
    """Deterministic phantom: brain ellipsoid, NETC core in ET shell in SNFH halo, separate RC."""
    extents = tuple(int(n) for n in extents)
    if len(extents) != 3 or min(extents) < MIN_EXTENT:
        raise ValueError(f"extents must be 3 values >= {MIN_EXTENT}, got {extents}")
    rng = np.random.default_rng(seed)
    ext = np.array(extents, dtype=np.float64)
    coords = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in extents), indexing="ij")
    centre = (ext - 1) / 2

    brain_c = centre + rng.uniform(-0.03, 0.03, 3) * ext
    brain_r = ext * rng.uniform(0.36, 0.44, 3)
    brain = _ellipsoid(coords, brain_c, brain_r)

    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    tumour_c = brain_c + 0.2 * brain_r * direction
    base = min(extents)
    # radii chosen so every subregion spans several voxels at 32^3
    halo_r = base * rng.uniform(0.19, 0.22) * rng.uniform(0.9, 1.1, 3)
    et_r = halo_r * rng.uniform(0.65, 0.72)
    core_r = et_r * rng.uniform(0.5, 0.58)
    rc_c = brain_c - 0.6 * brain_r * direction
    rc_r = base * rng.uniform(0.10, 0.13) * rng.uniform(0.9, 1.1, 3)

    labels = np.zeros(extents, dtype=np.uint8)
    labels[_ellipsoid(coords, rc_c, rc_r)] = LABELS["RC"]
    labels[_ellipsoid(coords, tumour_c, halo_r)] = LABELS["SNFH"]
    labels[_ellipsoid(coords, tumour_c, et_r)] = LABELS["ET"]
    labels[_ellipsoid(coords, tumour_c, core_r)] = LABELS["NETC"]
    labels[~brain] = 0

    image = _INTENSITY[labels].transpose(3, 0, 1, 2).copy()
    # structural gradient on T1 across the first axis
    image[0] += 0.15 * (coords[0] / (ext[0] - 1) - 0.5) * (labels == 0)
    tilt = rng.uniform(-1, 1, 3)
    bias = 1.0 + 0.05 * sum(t * (c / (n - 1) - 0.5) for t, c, n in zip(tilt, coords, ext))
    image *= bias
    image += rng.normal(0.0, 0.02, image.shape)
    image[:, ~brain] = 0.0
    return SampleVolume(image.astype(np.float32), labels, case_id if case_id is not None else f"phantom_{seed:04d}")


def brain_mask(image):
    """Voxels where any modality is non-zero."""
    return np.any(image != 0, axis=0)


def sample_seed(global_seed, case_id, epoch):
    """Scheduling-independent per-sample seed."""
    digest = hashlib.sha256(f"{global_seed}|{case_id}|{epoch}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


MANIFEST_COLUMNS = ("case_id",) + MODALITIES + ("label",)


def write_phantom_dataset(out_dir, n, extents=(32, 32, 32), seed=0):
    """Write ``n`` phantoms as NIfTI files plus ``manifest.csv``; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i in range(n):
        sample = generate_phantom(seed + i, extents)
        row = {"case_id": sample.case_id}
        for m, name in enumerate(MODALITIES):
            path = os.path.join(out_dir, f"{sample.case_id}_{name}.nii")
            write_nifti(sample.image[m], path)
            row[name] = os.path.basename(path)
        label_path = os.path.join(out_dir, f"{sample.case_id}_seg.nii")
        write_nifti(sample.labels, label_path)
        row["label"] = os.path.basename(label_path)
        rows.append(row)
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return manifest


def read_manifest(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        missing = [c for c in MANIFEST_COLUMNS if not row.get(c)]
        if missing:
            raise ValueError(f"manifest {path}: case {row.get('case_id')!r} lacks {missing}")
    return rows


def load_case(row, root="."):
    """Read one manifest row; relative paths resolve against ``root``."""
    resolve = lambda p: p if os.path.isabs(p) else os.path.join(root, p)
    case_id = row["case_id"]
    try:
        chans = [read_nifti(resolve(row[m]))[0].astype(np.float32) for m in MODALITIES]
        labels, hdr = read_nifti(resolve(row["label"]))
    except (OSError, ValueError) as exc:
        raise ValueError(f"case {case_id}: {exc}") from exc
    if labels.min() < 0 or labels.max() > 4:
        raise ValueError(f"case {case_id}: labels outside 0..4")
    if any(c.shape != labels.shape for c in chans):
        raise ValueError(f"case {case_id}: modality shapes {[c.shape for c in chans]} differ from labels {labels.shape}")
    return SampleVolume(np.stack(chans), labels.astype(np.uint8), case_id, hdr.spacing)


def load_manifest_cases(path):
    root = os.path.dirname(os.path.abspath(path))
    return [load_case(row, root) for row in read_manifest(path)]
