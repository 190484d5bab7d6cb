"""Tumor segmentation with the FCN, BraTS-style region metrics, fold ensembles and modality ablation."""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from scipy.spatial import cKDTree

from .data_io import DataError, Volume, assert_nested
from .nn_blocks import FCN, FCNConfig, load_checkpoint, save_checkpoint
from .radiogenomics import case_folds

log = logging.getLogger(__name__)

CHANNEL_ORDER = ("T1c", "Flair", "T2")
CLASS_LABELS = (0, 1, 2, 4)
REGIONS = {"ET": (4,), "WT": (1, 2, 4), "TC": (1, 4)}
TABLE_COLUMNS = ["model", "dice_et", "dice_wt", "dice_tc", "hd_et", "hd_wt", "hd_tc",
                 "hd100_et", "hd100_wt", "hd100_tc"]


class UndefinedDistanceError(ValueError):
    pass


# ---------------------------------------------------------------- metrics


def dice(pred, truth):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"grid mismatch {pred.shape} vs {truth.shape}")
    total = pred.sum() + truth.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, truth).sum() / total)


def surface(mask):
    """Voxels of ``mask`` with at least one 6-neighbour outside it (grid border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(mask.ndim, 1),
                                      border_value=0)
    return mask & ~interior


def hausdorff(pred, truth, spacing=(1.0, 1.0, 1.0), percentile=95):
    """Symmetric surface distance in mm: the given percentile of both directed distance sets pooled."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"grid mismatch {pred.shape} vs {truth.shape}")
    if not pred.any() or not truth.any():
        raise UndefinedDistanceError("Hausdorff distance is undefined for an empty set")
    sp = np.asarray(spacing, float)
    a = np.argwhere(surface(pred)) * sp
    b = np.argwhere(surface(truth)) * sp
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    dists = np.concatenate([d_ab, d_ba])
    if percentile >= 100:
        return float(dists.max())
    return float(np.percentile(dists, percentile))


def region_sets(labels):
    labels = np.asarray(labels)
    return {name: np.isin(labels, ls) for name, ls in REGIONS.items()}


@dataclass
class RegionScore:
    dice: float
    hd95: float
    hd100: float


def evaluate_regions(pred, truth, strict=False):
    """Per-region (dice, hd95, hd100). Undefined distances become NaN unless ``strict``."""
    if pred.dims != truth.dims:
        raise ValueError(f"grid mismatch {pred.dims} vs {truth.dims}")
    p, t = region_sets(pred.data), region_sets(truth.data)
    out = {}
    for name in REGIONS:
        hd = []
        for q in (95, 100):
            try:
                hd.append(hausdorff(p[name], t[name], truth.spacing, q))
            except UndefinedDistanceError:
                if strict:
                    raise
                hd.append(float("nan"))
        out[name] = RegionScore(dice(p[name], t[name]), *hd)
    return out


def table_row(model, scores):
    """scores: list of per-case evaluate_regions dicts -> mean row in table column order."""
    def mean(vals):
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")
    row = [model]
    row += [mean([s[r].dice for s in scores]) for r in ("ET", "WT", "TC")]
    row += [mean([s[r].hd95 for s in scores]) for r in ("ET", "WT", "TC")]
    row += [mean([s[r].hd100 for s in scores]) for r in ("ET", "WT", "TC")]
    return row


def write_table_csv(path, rows, columns=TABLE_COLUMNS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([v if isinstance(v, str) else ("nan" if math.isnan(v) else f"{v:.6f}") for v in row])


# ---------------------------------------------------------------- training


@dataclass
class SegConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    steps: int = 600
    batch: int = 8
    seed: int = 0
    depth: int = 3
    base_channels: int = 8
    alpha: float = 0.25

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")


def labels_to_index(labels):
    out = np.zeros(labels.shape, dtype=np.int64)
    for i, lab in enumerate(CLASS_LABELS):
        out[labels == lab] = i
    return out


def index_to_labels(idx):
    return np.asarray(CLASS_LABELS, dtype=np.int16)[idx]


def labeled_slices(cases, modalities):
    xs, ys = [], []
    for case in cases:
        if case.mask is None:
            raise DataError(f"case {case.case_id} has no ground-truth mask")
        x = case.stacked(modalities)
        y = labels_to_index(case.mask.data).transpose(2, 0, 1)
        keep = (x.reshape(len(x), -1) != 0).any(axis=1)
        xs.append(x[keep])
        ys.append(y[keep])
    if not xs or sum(len(x) for x in xs) == 0:
        raise DataError("segmentation training set is empty")
    return np.concatenate(xs), np.concatenate(ys)


def class_weights(y, n_classes=len(CLASS_LABELS)):
    """Inverse class frequency, scaled so the weights average to 1 over present classes."""
    counts = np.bincount(y.ravel(), minlength=n_classes).astype(float)
    w = np.where(counts > 0, counts.sum() / np.maximum(counts, 1), 0.0)
    return w / w[counts > 0].mean()


@dataclass
class Segmenter:
    model: FCN
    modalities: tuple
    losses: list = field(default_factory=list)


def train_segmenter(cases, cfg, modalities=CHANNEL_ORDER):
    x, y = labeled_slices(cases, modalities)
    torch.manual_seed(cfg.seed)
    model = FCN(FCNConfig(cfg.depth, cfg.base_channels, cfg.alpha, len(modalities), len(CLASS_LABELS)))
    weights = torch.tensor(class_weights(y), dtype=torch.float32)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                           weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    xt, yt = torch.from_numpy(x), torch.from_numpy(y)
    seg = Segmenter(model, tuple(modalities))
    model.train()
    for step in range(cfg.steps):
        idx = torch.from_numpy(rng.integers(0, len(x), size=cfg.batch))
        loss = F.cross_entropy(model(xt[idx]), yt[idx], weight=weights)
        opt.zero_grad()
        loss.backward()
        opt.step()
        seg.losses.append(loss.item())
    model.eval()
    return seg


def save_segmenter(seg, path):
    return save_checkpoint(seg.model, path, extra={"modalities": list(seg.modalities)})


def load_segmenter(path):
    model, extra = load_checkpoint(path)
    return Segmenter(model, tuple(extra["modalities"]))


# ---------------------------------------------------------------- inference


@dataclass
class FoldEnsemble:
    members: list

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        mods = {m.modalities for m in self.members}
        if len(mods) > 1:
            raise ValueError("ensemble members disagree on input modalities")

    @property
    def modalities(self):
        return self.members[0].modalities


def predict_probabilities(members, x, batch=64):
    total = None
    with torch.no_grad():
        for seg in members:
            seg.model.eval()
            probs = []
            for i in range(0, len(x), batch):
                probs.append(F.softmax(seg.model(torch.from_numpy(x[i:i + batch])), dim=1).numpy())
            p = np.concatenate(probs).astype(np.float64)
            total = p if total is None else total + p
    return total / len(members)


def predict_mask(model, case):
    """Argmax of the mean member softmax, slice by slice. ``model``: Segmenter or FoldEnsemble."""
    members = model.members if isinstance(model, FoldEnsemble) else [model]
    mods = members[0].modalities
    expected = members[0].model.cfg.in_channels
    if len(mods) != expected:
        raise ValueError(f"checkpoint expects {expected} modalities, descriptor lists {len(mods)}")
    x = case.stacked(mods)
    probs = predict_probabilities(members, x)
    labels = index_to_labels(probs.argmax(axis=1)).transpose(1, 2, 0)
    ref = case.modalities[mods[0]]
    brain = np.zeros(ref.dims, dtype=bool)
    for m in mods:
        brain |= case.modalities[m].data != 0
    labels = np.where(brain, labels, 0).astype(np.int16)
    labels = enforce_nesting(labels)
    return Volume(labels, ref.spacing, ref.origin)


def enforce_nesting(labels):
    # the label encoding already implies ET ⊆ TC ⊆ WT; this only validates it
    assert_nested(labels)
    return labels


def evaluate_cases(model, cases):
    return [evaluate_regions(predict_mask(model, c), c.mask) for c in cases]


# ---------------------------------------------------------------- protocols


@dataclass
class CrossValidation:
    ensemble: FoldEnsemble
    folds: list           # list of held-out case id lists
    fold_rows: list       # table rows per fold


def cross_validate_segmentation(cases, cfg, k=4, modalities=CHANNEL_ORDER):
    if len(cases) < k:
        raise ValueError(f"cannot split {len(cases)} cases into {k} folds")
    members, folds, rows = [], [], []
    for i, (tr, va) in enumerate(case_folds(len(cases), k, cfg.seed)):
        seg = train_segmenter([cases[j] for j in tr], cfg, modalities)
        held = [cases[j] for j in va]
        members.append(seg)
        folds.append([c.case_id for c in held])
        rows.append(table_row(f"fold{i + 1}", evaluate_cases(seg, held)))
    return CrossValidation(FoldEnsemble(members), folds, rows)


ABLATION_COLUMNS = ["modalities", "dice_et", "dice_wt", "dice_tc"]


def modality_ablation(train_cases, test_cases, subsets, cfg):
    """One segmenter per modality subset under the same budget and seed; mean dice per region."""
    rows = []
    for subset in subsets:
        subset = tuple(subset)
        if not subset:
            raise ValueError("modality subsets must be nonempty")
        # keep the fixed channel order regardless of how the subset was listed
        ordered = tuple(m for m in CHANNEL_ORDER if m in subset) + tuple(m for m in subset if m not in CHANNEL_ORDER)
        seg = train_segmenter(train_cases, cfg, ordered)
        scores = evaluate_cases(seg, test_cases)
        row = table_row("+".join(ordered), scores)
        rows.append(row[:4])
    return rows
