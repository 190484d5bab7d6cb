"""Shape, fractal and first-order intensity features of segmented tumor regions."""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

REGION_LABELS = {
    "ET": (4,),
    "NCR": (1,),
    "TC": (1, 4),
    "WT": (1, 2, 4),
}
DEFAULT_SCALES = (1, 2, 4, 8, 16)
DEFAULT_BINS = 64
FILL_VALUE = 0.0


class EmptyRegionError(ValueError):
    pass


@dataclass
class RegionGeometry:
    centroid: np.ndarray
    axis_lengths: np.ndarray
    axis_directions: np.ndarray  # rows are unit axes, longest first
    eigenvalues: np.ndarray
    meridional_eccentricity: float
    equatorial_eccentricity: float


@dataclass
class FractalResult:
    dimension: float
    scales: list
    counts: list
    fit_r2: float


@dataclass
class IntensityStats:
    kurtosis: float
    entropy: float
    histogram: np.ndarray

    @property
    def energy(self):
        return float(np.sum(self.histogram ** 2))


def region_mask(labels, region):
    return np.isin(labels, REGION_LABELS[region])


def _fix_signs(vectors):
    # eigenvector sign is arbitrary; make the largest-magnitude component positive
    out = vectors.copy()
    for k in range(out.shape[0]):
        i = np.argmax(np.abs(out[k]))
        if out[k, i] < 0:
            out[k] = -out[k]
    return out


def eccentricities(axis_lengths):
    """(meridional, equatorial) for sorted full axes a >= b >= c; the shortest axis is polar."""
    a, b, c = (float(v) for v in axis_lengths)
    if not a >= b >= c >= 0:
        raise ValueError(f"axis lengths must be sorted a >= b >= c >= 0, got {(a, b, c)}")
    if a == 0:
        return 0.0, 0.0
    meridional = np.sqrt(max(0.0, 1.0 - (c / a) ** 2))
    equatorial = np.sqrt(max(0.0, 1.0 - (c / b) ** 2)) if b > 0 else 0.0
    return float(meridional), float(equatorial)


def region_geometry(mask, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyRegionError("geometry of an empty region is undefined")
    pts = np.argwhere(mask) * np.asarray(spacing, float) + np.asarray(origin, float)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    # tiny negative/roundoff eigenvalues of degenerate sets snap to zero
    evals[evals < 1e-12 * max(1.0, evals[0])] = 0.0
    axes = _fix_signs(evecs[:, order].T)
    lengths = 4.0 * np.sqrt(evals)
    mer, equ = eccentricities(lengths)
    return RegionGeometry(centroid, lengths, axes, evals, mer, equ)


def count_boxes(mask, size):
    """Occupied s×s×s boxes on a grid anchored at the bounding-box corner."""
    idx = np.argwhere(mask)
    lo = idx.min(axis=0)
    return len(np.unique((idx - lo) // size, axis=0))


def box_count_dimension(mask, scales=DEFAULT_SCALES):
    mask = np.asarray(mask, dtype=bool)
    scales = [int(s) for s in scales]
    if len(scales) < 3:
        raise ValueError("box counting needs at least 3 scales")
    if min(scales) < 1:
        raise ValueError("box sizes must be >= 1 voxel")
    if not mask.any():
        raise EmptyRegionError("box counting of an empty region is undefined")
    scales = sorted(set(scales))
    counts = [count_boxes(mask, s) for s in scales]
    x = np.log(1.0 / np.asarray(scales, float))
    y = np.log(np.asarray(counts, float))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return FractalResult(float(slope), scales, counts, float(r2))


def intensity_stats(samples, bins=DEFAULT_BINS):
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("intensity statistics need at least 2 samples")
    m2 = np.mean((x - x.mean()) ** 2)
    if m2 == 0:
        raise ValueError("kurtosis undefined for zero-variance samples")
    kurt = np.mean((x - x.mean()) ** 4) / m2 ** 2
    counts, _ = np.histogram(x, bins=bins, range=(x.min(), x.max()))
    p = counts / counts.sum()
    nz = p[p > 0]
    entropy = float(-(nz * np.log2(nz)).sum()) if nz.size > 1 else 0.0
    return IntensityStats(float(kurt), entropy, p)


# ---------------------------------------------------------------- manifest


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    region: str
    group: str   # geometry | fractal | intensity
    key: str
    index: int = 0


def _geometry_specs(region):
    specs = []
    for k in range(3):
        specs.append(FeatureSpec(f"{region}_axis{k + 1}_length", region, "geometry", "axis_lengths", k))
    for k in range(3):
        for j, c in enumerate("xyz"):
            specs.append(FeatureSpec(f"{region}_axis{k + 1}_dir_{c}", region, "geometry", "axis_directions", 3 * k + j))
    for j, c in enumerate("xyz"):
        specs.append(FeatureSpec(f"{region}_centroid_{c}", region, "geometry", "centroid", j))
    for k in range(3):
        specs.append(FeatureSpec(f"{region}_eigenvalue{k + 1}", region, "geometry", "eigenvalues", k))
    specs.append(FeatureSpec(f"{region}_meridional_ecc", region, "geometry", "meridional_eccentricity"))
    specs.append(FeatureSpec(f"{region}_equatorial_ecc", region, "geometry", "equatorial_eccentricity"))
    return specs


def default_manifest():
    specs = []
    for region in ("NCR", "TC", "WT"):
        specs += _geometry_specs(region)
    for region in ("ET", "NCR"):
        specs.append(FeatureSpec(f"{region}_fractal_dim", region, "fractal", "dimension"))
    for key in ("kurtosis", "entropy", "energy"):
        for region in ("NCR", "TC", "WT"):
            specs.append(FeatureSpec(f"{region}_{key}", region, "intensity", key))
    return specs


@dataclass
class RadiomicFeatureVector:
    values: np.ndarray
    manifest: list
    missing: np.ndarray = field(default=None)  # bool flag per entry

    @property
    def names(self):
        return [s.name for s in self.manifest]

    def as_dict(self):
        return dict(zip(self.names, self.values.tolist()))


def _group_values(group, mask, spacing, origin, intensities, scales, bins):
    if group == "geometry":
        g = region_geometry(mask, spacing, origin)
        return {"axis_lengths": g.axis_lengths, "axis_directions": g.axis_directions.ravel(),
                "centroid": g.centroid, "eigenvalues": g.eigenvalues,
                "meridional_eccentricity": g.meridional_eccentricity,
                "equatorial_eccentricity": g.equatorial_eccentricity}
    if group == "fractal":
        return {"dimension": box_count_dimension(mask, scales).dimension}
    if group == "intensity":
        st = intensity_stats(intensities[mask], bins)
        return {"kurtosis": st.kurtosis, "entropy": st.entropy, "energy": st.energy}
    raise ValueError(f"unknown feature group {group!r}")


def extract_feature_vector(mask, reference, manifest=None, scales=DEFAULT_SCALES, bins=DEFAULT_BINS):
    """Evaluate ``manifest`` over a label volume and a same-grid reference intensity volume.

    Entries whose region is empty (or whose statistic is undefined) take the
    fill value and are flagged in ``missing``.
    """
    manifest = default_manifest() if manifest is None else list(manifest)
    if mask.dims != reference.dims:
        raise ValueError(f"mask grid {mask.dims} does not match reference grid {reference.dims}")
    labels = np.asarray(mask.data)
    intens = np.asarray(reference.data, dtype=np.float64)
    cache = {}
    values = np.full(len(manifest), FILL_VALUE)
    missing = np.zeros(len(manifest), dtype=bool)
    for i, spec in enumerate(manifest):
        ck = (spec.region, spec.group)
        if ck not in cache:
            region = region_mask(labels, spec.region)
            try:
                cache[ck] = _group_values(spec.group, region, mask.spacing, mask.origin, intens, scales, bins)
            except ValueError as exc:
                log.warning("feature group %s/%s unavailable: %s", spec.region, spec.group, exc)
                cache[ck] = None
        got = cache[ck]
        if got is None:
            missing[i] = True
            continue
        v = got[spec.key]
        values[i] = float(np.asarray(v).ravel()[spec.index]) if np.ndim(v) else float(v)
    return RadiomicFeatureVector(values, manifest, missing)


def write_feature_csv(path, rows):
    """rows: list of (case_id, RadiomicFeatureVector) sharing one manifest."""
    names = rows[0][1].names if rows else [s.name for s in default_manifest()]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id"] + names)
        for case_id, vec in rows:
            if vec.names != names:
                raise ValueError("feature rows disagree on manifest")
            w.writerow([case_id] + [repr(float(v)) for v in vec.values])


def read_feature_csv(path):
    """Return (case_ids, names, values array)."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        ids, vals = [], []
        for row in r:
            ids.append(row[0])
            vals.append([float(v) for v in row[1:]])
    return ids, header[1:], np.asarray(vals, dtype=float).reshape(len(ids), len(header) - 1)
