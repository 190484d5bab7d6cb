"""Volume persistence, intensity normalization and synthetic phantom cohorts."""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .radiomics import box_count_dimension

log = logging.getLogger(__name__)

MODALITIES = ("T1c", "Flair", "T2")
LABELS = (0, 1, 2, 4)
DTYPES = {"f32": np.dtype("<f4"), "i16": np.dtype("<i2")}
ORDER = "C-little-endian"


class DataError(ValueError):
    """Malformed or inconsistent on-disk data."""


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be 3D with positive dims, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")

    @property
    def dims(self):
        return tuple(self.data.shape)

    @property
    def dtype_tag(self):
        return "i16" if np.issubdtype(self.data.dtype, np.integer) else "f32"

    def like(self, data):
        return Volume(data, self.spacing, self.origin)


def _sidecar_path(path):
    return path + ".json"


def write_volume(vol, path):
    """Write ``path`` (raw payload) and ``path + '.json'`` (sidecar)."""
    tag = vol.dtype_tag
    payload = np.ascontiguousarray(vol.data, dtype=DTYPES[tag])
    sidecar = {"dims": list(vol.dims), "spacing_mm": list(vol.spacing),
               "origin_mm": list(vol.origin), "dtype": tag, "order": ORDER}
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(payload.tobytes(order="C"))
    with open(_sidecar_path(path), "w") as fh:
        json.dump(sidecar, fh)


def read_volume(path):
    try:
        with open(_sidecar_path(path)) as fh:
            meta = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"missing sidecar for {path}") from exc
    if meta.get("dtype") not in DTYPES:
        raise DataError(f"unknown dtype {meta.get('dtype')!r} in {path}")
    if meta.get("order") != ORDER:
        raise DataError(f"unsupported byte order {meta.get('order')!r} in {path}")
    dims = tuple(int(d) for d in meta["dims"])
    dtype = DTYPES[meta["dtype"]]
    with open(path, "rb") as fh:
        raw = fh.read()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise DataError(f"{path}: payload is {len(raw)} bytes, sidecar implies {expected}")
    data = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    return Volume(data, tuple(meta["spacing_mm"]), tuple(meta["origin_mm"]))


def normalize_intensity(vol, support=None):
    """z-score over the nonzero support, clip to [-5, 5], rescale to [0, 1].

    Voxels outside the support stay 0. A constant support maps to 0.5.
    """
    data = np.asarray(vol.data, dtype=np.float64)
    support = data != 0 if support is None else np.asarray(support, dtype=bool)
    if not support.any():
        raise ValueError("normalization support is empty")
    values = data[support]
    out = np.zeros_like(data)
    std = values.std()
    if std == 0:
        log.warning("constant intensity over support; normalizing to 0.5")
        out[support] = 0.5
    else:
        z = np.clip((values - values.mean()) / std, -5.0, 5.0)
        out[support] = (z + 5.0) / 10.0
    return vol.like(out.astype(np.float32))


# ---------------------------------------------------------------- records


@dataclass
class CaseRecord:
    case_id: str
    modalities: dict = field(default_factory=dict)   # name -> Volume
    provenance: dict = field(default_factory=dict)   # name -> "real" | "synthesized"
    mask: Volume = None
    genes: np.ndarray = None
    survival_days: int = None
    age: float = None
    factors: dict = field(default_factory=dict)      # planted generation parameters

    def check(self):
        vols = list(self.modalities.values()) + ([self.mask] if self.mask is not None else [])
        if vols:
            ref = vols[0]
            for v in vols[1:]:
                if v.dims != ref.dims or v.spacing != ref.spacing:
                    raise DataError(f"case {self.case_id}: volumes disagree on dims/spacing")
        return self

    def stacked(self, names, normalize=True):
        """(Z, C, X, Y) float32 array of slices in channel order ``names``."""
        missing = [n for n in names if n not in self.modalities]
        if missing:
            raise DataError(f"case {self.case_id} lacks modalities {missing}")
        chans = []
        for n in names:
            v = self.modalities[n]
            chans.append(normalize_intensity(v).data if normalize else v.data.astype(np.float32))
        return np.stack(chans, axis=0).transpose(3, 0, 1, 2).copy()


# ---------------------------------------------------------------- phantoms

# base intensity per tissue: outside, brain, edema(2), necrosis(1), enhancing(4)
TISSUE_INTENSITY = {
    "T1c": (0.0, 0.45, 0.42, 0.20, 0.95),
    "Flair": (0.0, 0.40, 0.62, 0.65, 0.75),
    "T2": (0.0, 0.35, 0.80, 0.90, 0.60),
}
NOISE_SCALE = {"T1c": 1.0, "Flair": 3.0, "T2": 1.5}
BLUR_SIGMA = {"T1c": 0.0, "Flair": 0.5, "T2": 0.7}


@dataclass
class PhantomSpec:
    grid: tuple = (32, 32, 32)
    spacing: tuple = (1.0, 1.0, 1.0)
    wt_radius: tuple = (6.0, 10.0)     # voxels, fraction of a 32 grid scaled by grid size
    tc_fraction: tuple = (0.55, 0.8)   # TC radii relative to WT
    ncr_fraction: tuple = (0.5, 0.75)  # NCR radii relative to TC
    roughness: tuple = (0.0, 0.35)
    noise: float = 0.03
    n_genes: int = 1740
    informative_genes: int = 3
    module_size: int = 40              # co-expressed genes tracking each informative gene
    module_correlation: float = 0.85
    missing_fraction: float = 0.0      # share of cases with T2 withheld
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.grid) != 3 or min(self.grid) < 8:
            raise ValueError(f"grid must be 3 dims >= 8, got {self.grid}")
        for name in ("tc_fraction", "ncr_fraction"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi < 1:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi < 1 so regions nest, got {(lo, hi)}")
        if self.informative_genes * (1 + self.module_size) > self.n_genes:
            raise ValueError("informative genes and their modules exceed n_genes")


def gene_names(n):
    return [f"G{i:04d}" for i in range(n)]


def _rough_ellipsoid(coords, center, radii, rough, rng):
    """Boolean ellipsoid whose radius is modulated by a few random angular harmonics."""
    rel = (coords - center[:, None, None, None]) / radii[:, None, None, None]
    dist = np.sqrt((rel ** 2).sum(axis=0))
    if rough <= 0:
        return dist <= 1.0
    unit = rel / np.maximum(dist, 1e-9)
    bump = np.zeros_like(dist)
    for _ in range(4):
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        freq = rng.uniform(2.0, 5.0)
        phase = rng.uniform(0, 2 * np.pi)
        bump += np.cos(freq * np.tensordot(v, unit, axes=1) * np.pi + phase)
    bump /= 4.0
    return dist <= 1.0 + rough * bump


def _phantom_case(spec, idx, rng):
    grid = np.array(spec.grid, dtype=float)
    coords = np.indices(spec.grid).astype(float)
    scale = grid / 32.0
    brain_c = (grid - 1) / 2
    brain = ((((coords - brain_c[:, None, None, None]) / (0.44 * grid[:, None, None, None])) ** 2).sum(0)) <= 1

    r_wt = rng.uniform(*spec.wt_radius, size=3) * scale
    margin = r_wt + 2
    lo = np.maximum(brain_c - 0.44 * grid + margin, margin)
    hi = np.minimum(brain_c + 0.44 * grid - margin, grid - 1 - margin)
    center = rng.uniform(np.minimum(lo, brain_c), np.maximum(hi, brain_c))
    rough = rng.uniform(*spec.roughness)

    wt = _rough_ellipsoid(coords, center, r_wt, 0.15, rng) & brain
    r_tc = r_wt * rng.uniform(*spec.tc_fraction, size=3)
    tc_center = center + rng.uniform(-0.15, 0.15, size=3) * r_wt
    tc = _rough_ellipsoid(coords, tc_center, r_tc, 0.1, rng) & wt
    r_ncr = r_tc * rng.uniform(*spec.ncr_fraction, size=3)
    ncr = _rough_ellipsoid(coords, tc_center, r_ncr, rough, rng) & tc
    if not ncr.any() or ncr.sum() == tc.sum():
        # keep every sub-region nonempty: a 1-voxel necrotic seed, a rim around it
        c = tuple(np.round(tc_center).astype(int))
        ncr = np.zeros_like(tc)
        ncr[c] = True
        tc |= ndimage.binary_dilation(ncr, iterations=1) & brain
        wt |= tc

    labels = np.zeros(spec.grid, dtype=np.int16)
    labels[wt] = 2
    labels[tc] = 4
    labels[ncr] = 1
    tissue = np.zeros(spec.grid, dtype=np.int64)
    tissue[brain] = 1
    tissue[labels == 2] = 2
    tissue[labels == 1] = 3
    tissue[labels == 4] = 4

    assert_nested(labels)
    bias = 1.0 + 0.05 * np.tensordot(rng.normal(size=3), (coords - brain_c[:, None, None, None]) / grid[:, None, None, None], axes=1)
    modalities = {}
    for name in MODALITIES:
        base = np.asarray(TISSUE_INTENSITY[name])[tissue]
        if BLUR_SIGMA[name]:
            base = ndimage.gaussian_filter(base, BLUR_SIGMA[name])
        img = base * bias + rng.normal(scale=spec.noise * NOISE_SCALE[name], size=spec.grid)
        img[~brain] = 0.0
        modalities[name] = Volume(img.astype(np.float32), spec.spacing)

    vox = float(np.prod(spec.spacing))
    factors = {"wt_volume": float(wt.sum() * vox), "ncr_roughness": float(rough),
               "ncr_fractal": box_count_dimension(ncr).dimension}
    return labels, modalities, factors


def assert_nested(labels):
    et = labels == 4
    tc = np.isin(labels, (1, 4))
    wt = np.isin(labels, (1, 2, 4))
    if (et & ~tc).any() or (tc & ~wt).any():
        raise DataError("region nesting ET ⊆ TC ⊆ WT violated")
    if not np.isin(labels, LABELS).all():
        raise DataError(f"labels outside {LABELS}")


def expression_modules(genes, spec):
    """Co-expression: after the informative columns come ``module_size`` noisy copies of each."""
    k, m, rho = spec.informative_genes, spec.module_size, spec.module_correlation
    out = genes.copy()
    for i in range(k):
        cols = slice(k + i * m, k + (i + 1) * m)
        out[:, cols] = rho * genes[:, [i]] + np.sqrt(1 - rho ** 2) * genes[:, cols]
    return out


def planted_survival(factors, genes, spec, rng):
    """Survival days from tumor volume, necrosis fractal dimension and the first informative genes.

    Volume and roughness enter as standardized cohort scores; the radiomic and
    genomic halves carry comparable variance.
    """
    vol = np.array([f["wt_volume"] for f in factors])
    rough = np.array([f["ncr_fractal"] for f in factors])
    zvol = (vol - vol.mean()) / (vol.std() + 1e-12)
    zrough = (rough - rough.mean()) / (rough.std() + 1e-12)
    k = spec.informative_genes
    weights = np.array([1.0, -0.8, 0.6, 0.5, -0.4][:k] + [0.3] * max(0, k - 5))
    gscore = genes[:, :k] @ weights / np.linalg.norm(weights)
    days = 420.0 - 110.0 * zvol - 45.0 * zrough + 120.0 * gscore
    days += rng.normal(scale=15.0, size=days.shape)
    return np.maximum(np.round(days), 30).astype(int)


def generate_phantom_dataset(spec, n_cases):
    """Pure function of (spec, n_cases): list of CaseRecords with masks, genes and survival."""
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    root = np.random.SeedSequence(spec.seed)
    case_seeds = root.spawn(n_cases + 1)
    cases = []
    for i in range(n_cases):
        rng = np.random.default_rng(case_seeds[i])
        labels, modalities, factors = _phantom_case(spec, i, rng)
        cases.append(CaseRecord(
            case_id=f"case{i:03d}",
            modalities=modalities,
            provenance={m: "real" for m in modalities},
            mask=Volume(labels, spec.spacing),
            factors=factors,
        ).check())
    cohort_rng = np.random.default_rng(case_seeds[-1])
    genes = expression_modules(cohort_rng.normal(size=(n_cases, spec.n_genes)), spec)
    ages = np.round(cohort_rng.uniform(35, 80, size=n_cases), 1)
    days = planted_survival([c.factors for c in cases], genes, spec, cohort_rng)
    n_missing = int(round(spec.missing_fraction * n_cases))
    missing = set(cohort_rng.choice(n_cases, size=n_missing, replace=False).tolist()) if n_missing else set()
    for i, case in enumerate(cases):
        case.genes = genes[i]
        case.age = float(ages[i])
        case.survival_days = int(days[i])
        if i in missing:
            del case.modalities["T2"]
            del case.provenance["T2"]
    return cases


# ---------------------------------------------------------------- dataset on disk


def save_dataset(cases, root, gene_names_=None):
    """Write volumes, manifest.json, genes.csv and survival.csv under ``root``."""
    from .radiogenomics import write_gene_expression, write_survival_csv

    os.makedirs(root, exist_ok=True)
    entries = []
    for case in cases:
        entry = {"id": case.case_id, "modalities": {}, "provenance": dict(sorted(case.provenance.items()))}
        for name, vol in sorted(case.modalities.items()):
            rel = os.path.join(case.case_id, f"{name}.raw")
            write_volume(vol, os.path.join(root, rel))
            entry["modalities"][name] = rel
        if case.mask is not None:
            rel = os.path.join(case.case_id, "mask.raw")
            write_volume(case.mask, os.path.join(root, rel))
            entry["mask"] = rel
        if case.factors:
            entry["factors"] = case.factors
        entries.append(entry)
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(entries, fh, indent=1, sort_keys=True)
    if all(c.genes is not None for c in cases):
        names = gene_names_ or gene_names(len(cases[0].genes))
        write_gene_expression(os.path.join(root, "genes.csv"), [c.case_id for c in cases], names,
                              np.stack([c.genes for c in cases]))
    if all(c.survival_days is not None for c in cases):
        write_survival_csv(os.path.join(root, "survival.csv"),
                           [(c.case_id, c.survival_days, c.age) for c in cases])


def load_dataset(manifest_path, with_tables=True):
    """Read a manifest written by ``save_dataset``; paths resolve relative to the manifest."""
    from .radiogenomics import load_gene_expression, read_survival_csv

    base = os.path.dirname(os.path.abspath(manifest_path))
    try:
        with open(manifest_path) as fh:
            entries = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    cases = []
    for e in entries:
        mods = {n: read_volume(os.path.join(base, p)) for n, p in e["modalities"].items()}
        mask = read_volume(os.path.join(base, e["mask"])) if e.get("mask") else None
        prov = e.get("provenance") or {n: "real" for n in mods}
        cases.append(CaseRecord(e["id"], mods, prov, mask, factors=e.get("factors", {})).check())
    if with_tables:
        gpath = os.path.join(base, "genes.csv")
        if os.path.exists(gpath):
            gm = load_gene_expression(gpath)
            rows = dict(zip(gm.patients, gm.values))
            for c in cases:
                c.genes = rows.get(c.case_id)
        spath = os.path.join(base, "survival.csv")
        if os.path.exists(spath):
            surv = {r.case_id: r for r in read_survival_csv(spath)}
            for c in cases:
                if c.case_id in surv:
                    c.survival_days = surv[c.case_id].survival_days
                    c.age = surv[c.case_id].age
    return cases
