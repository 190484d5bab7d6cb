"""Single multi-command pipeline executable.

Every command reads a JSON config, writes under the output directory only, and
leaves a run-metadata record in ``<out>/runs/<command>.json``. Stage inputs are
the outputs of earlier commands in the same output directory:

    phantom-generate  -> dataset/
    synth-train       -> synthesis/
    synth-apply       -> completed/          (dataset with missing modalities filled)
    seg-train         -> segmentation/fold*.ckpt
    seg-predict       -> predictions/
    seg-eval          -> segmentation/metrics.csv
    ablate-modalities -> ablation/
    features-extract  -> features/radiomic_features.csv
    survival-train    -> survival/models/, survival/selected_features.csv
    survival-eval     -> survival/metrics.csv
    explain           -> explain/shap_ranking.csv
    report            -> report/
"""

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import pickle
import platform
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .data_io import MODALITIES, DataError, PhantomSpec

log = logging.getLogger("radiogenomic")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config


@dataclass
class PhantomSection:
    n_cases: int = 16
    spec: dict = field(default_factory=dict)


@dataclass
class SynthesisSection:
    tasks: list = field(default_factory=lambda: [{"sources": ["T1c", "Flair"], "target": "T2"}])
    train: dict = field(default_factory=dict)
    holdout_fraction: float = 0.25
    lam: float = 100.0


@dataclass
class SegmentationSection:
    train: dict = field(default_factory=dict)
    folds: int = 4
    modalities: list = field(default_factory=lambda: list(MODALITIES))


@dataclass
class AblationSection:
    subsets: list = field(default_factory=lambda: [["T1c"], ["T1c", "Flair"], ["T1c", "Flair", "T2"]])
    train: dict = field(default_factory=dict)
    holdout_fraction: float = 0.25


@dataclass
class FeatureSection:
    mask_source: str = "predicted"
    reference_modality: str = "T1c"
    bins: int = 64
    scales: list = field(default_factory=lambda: [1, 2, 4, 8, 16])


@dataclass
class SurvivalSection:
    thresholds: list = field(default_factory=lambda: [305, 456])
    folds: int = 4
    models: list = field(default_factory=lambda: ["SVR", "SVC", "ANN"])
    feature_sets: list = field(default_factory=lambda: ["radiomic", "genomic", "fused"])
    rfe_targets: dict = field(default_factory=lambda: {"radiomic": 8, "genomic": 43})
    rfe_step: float = 0.1
    C: float = 1.0
    epsilon: float = 0.1


@dataclass
class ExplainSection:
    model: str = "SVR"
    feature_set: str = "fused"
    top_k: int = 20
    budget: int = 2048
    background: int = 20


@dataclass
class PipelineConfig:
    seed: int
    out: str
    dataset: str = None
    num_threads: int = 1
    phantom: PhantomSection = field(default_factory=PhantomSection)
    synthesis: SynthesisSection = field(default_factory=SynthesisSection)
    segmentation: SegmentationSection = field(default_factory=SegmentationSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    survival: SurvivalSection = field(default_factory=SurvivalSection)
    explain: ExplainSection = field(default_factory=ExplainSection)

    def path(self, *parts):
        return os.path.join(self.out, *parts)

    @property
    def dataset_dir(self):
        return self.dataset or self.path("dataset")


SECTIONS = {"phantom": PhantomSection, "synthesis": SynthesisSection, "segmentation": SegmentationSection,
            "ablation": AblationSection, "features": FeatureSection, "survival": SurvivalSection,
            "explain": ExplainSection}


def _typed(where, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {type(value).__name__}")
    return value


def _fill(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    defaults = cls() if cls is not PipelineConfig else None
    names = {f.name for f in dataclasses.fields(cls)}
    kw = {}
    for key, value in raw.items():
        if key not in names:
            raise ConfigError(f"{where}.{key}: unknown field")
        if defaults is not None:
            value = _typed(f"{where}.{key}", value, getattr(defaults, key))
        kw[key] = value
    return cls(**kw)


def _stage(cls, raw, where, **fixed):
    """Build a library config dataclass from a JSON object, reporting the offending field."""
    names = {f.name for f in dataclasses.fields(cls)}
    defaults = cls()
    kw = {}
    for key, value in raw.items():
        if key not in names or key in fixed:
            raise ConfigError(f"{where}.{key}: unknown field" if key not in names
                              else f"{where}.{key}: set through the top-level seed")
        d = getattr(defaults, key)
        if isinstance(d, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{key}: expected list")
            value = tuple(value)
        else:
            value = _typed(f"{where}.{key}", value, d)
        kw[key] = value
    kw.update(fixed)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path=None, seed=None, out=None):
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config: expected a JSON object at top level")
    raw = dict(raw)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = os.path.abspath(out)
    for key in ("seed", "out"):
        if key not in raw:
            raise ConfigError(f"{key}: required (config field or --{key} flag)")
    if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool) or raw["seed"] < 0:
        raise ConfigError("seed: expected a nonnegative integer")
    if not isinstance(raw["out"], str) or not raw["out"]:
        raise ConfigError("out: expected a nonempty path string")
    base = os.path.dirname(os.path.abspath(path)) if path else os.getcwd()
    for key in ("out", "dataset"):
        if raw.get(key) is not None:
            if not isinstance(raw[key], str):
                raise ConfigError(f"{key}: expected a path string")
            raw[key] = os.path.normpath(os.path.join(base, raw[key]))
    if raw.get("dataset") is not None and not os.path.exists(os.path.join(raw["dataset"], "manifest.json")):
        raise ConfigError(f"dataset: no manifest.json under {raw['dataset']}")
    for name, cls in SECTIONS.items():
        raw[name] = _fill(cls, raw.get(name, {}), name)
    cfg = _fill(PipelineConfig, raw, "config")
    if not isinstance(cfg.num_threads, int) or cfg.num_threads < 1:
        raise ConfigError("num_threads: expected a positive integer")
    _validate(cfg)
    return cfg


def _validate(cfg):
    # construct every stage config once so bad fields fail at load time
    phantom_spec(cfg)
    synth_train_config(cfg)
    synth_tasks(cfg)
    seg_config(cfg, "segmentation")
    seg_config(cfg, "ablation")
    for mod in cfg.segmentation.modalities:
        if mod not in MODALITIES:
            raise ConfigError(f"segmentation.modalities: unknown modality {mod!r}")
    if cfg.segmentation.folds < 2:
        raise ConfigError("segmentation.folds: need at least 2")
    for i, sub in enumerate(cfg.ablation.subsets):
        if not sub or any(m not in MODALITIES for m in sub):
            raise ConfigError(f"ablation.subsets[{i}]: expected a nonempty list of {list(MODALITIES)}")
    for name in ("synthesis", "ablation"):
        frac = getattr(cfg, name).holdout_fraction
        if not 0 < frac < 1:
            raise ConfigError(f"{name}.holdout_fraction: must lie in (0, 1)")
    f = cfg.features
    if f.mask_source not in ("predicted", "truth"):
        raise ConfigError("features.mask_source: expected 'predicted' or 'truth'")
    if f.reference_modality not in MODALITIES:
        raise ConfigError(f"features.reference_modality: unknown modality {f.reference_modality!r}")
    if len(f.scales) < 3 or any(not isinstance(s, int) or s < 1 for s in f.scales):
        raise ConfigError("features.scales: need at least 3 positive integer box sizes")
    if f.bins < 2:
        raise ConfigError("features.bins: need at least 2")
    s = cfg.survival
    if len(s.thresholds) != 2 or not s.thresholds[0] < s.thresholds[1]:
        raise ConfigError("survival.thresholds: expected [short_below, long_above] increasing")
    for m in s.models:
        if m not in ("SVR", "SVC", "ANN"):
            raise ConfigError(f"survival.models: unknown model {m!r}")
    for fs in s.feature_sets:
        if fs not in FEATURE_SETS:
            raise ConfigError(f"survival.feature_sets: unknown set {fs!r}")
    for k, v in s.rfe_targets.items():
        if k not in ("radiomic", "genomic", "clinical") or not isinstance(v, int) or v < 1:
            raise ConfigError(f"survival.rfe_targets.{k}: expected a positive count for a known provenance")
    if s.folds < 2:
        raise ConfigError("survival.folds: need at least 2")
    if not 0 < s.rfe_step < 1:
        raise ConfigError("survival.rfe_step: must lie in (0, 1)")
    if s.C <= 0 or s.epsilon < 0:
        raise ConfigError("survival.C must be > 0 and survival.epsilon >= 0")
    e = cfg.explain
    if e.model not in ("SVR", "ANN"):
        raise ConfigError("explain.model: expected a regression model, 'SVR' or 'ANN'")
    if e.feature_set not in FEATURE_SETS:
        raise ConfigError(f"explain.feature_set: unknown set {e.feature_set!r}")
    if e.top_k < 1 or e.budget < 2 or e.background < 1:
        raise ConfigError("explain: top_k, budget and background must be positive (budget >= 2)")


def phantom_spec(cfg):
    if cfg.phantom.n_cases < 1:
        raise ConfigError("phantom.n_cases: must be >= 1")
    return _stage(PhantomSpec, cfg.phantom.spec, "phantom.spec", seed=cfg.seed)


def synth_train_config(cfg):
    from .synthesis import TrainConfig
    return _stage(TrainConfig, cfg.synthesis.train, "synthesis.train", seed=cfg.seed)


def synth_tasks(cfg):
    from .synthesis import SynthesisTask
    tasks = []
    for i, t in enumerate(cfg.synthesis.tasks):
        where = f"synthesis.tasks[{i}]"
        if not isinstance(t, dict) or set(t) - {"sources", "target"} or "target" not in t or "sources" not in t:
            raise ConfigError(f"{where}: expected {{'sources': [...], 'target': ...}}")
        mods = list(t["sources"]) + [t["target"]]
        if any(m not in MODALITIES for m in mods):
            raise ConfigError(f"{where}: modalities must be among {list(MODALITIES)}")
        try:
            tasks.append(SynthesisTask(tuple(t["sources"]), t["target"]))
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    return tasks


def seg_config(cfg, section):
    from .segmentation import SegConfig
    return _stage(SegConfig, getattr(cfg, section).train, f"{section}.train", seed=cfg.seed)


def config_dict(cfg):
    return dataclasses.asdict(cfg)


def config_hash(cfg):
    blob = json.dumps(config_dict(cfg), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------- helpers


FEATURE_SETS = {
    "radiomic": ("radiomic", "clinical"),
    "genomic": ("genomic",),
    "fused": ("radiomic", "genomic", "clinical"),
}


def _mkdir(cfg, *parts):
    p = cfg.path(*parts)
    os.makedirs(p, exist_ok=True)
    return p


def _need(path, hint):
    if not os.path.exists(path):
        raise DataError(f"missing input {path}; run `{hint}` first")
    return path


def _load_cases(cfg, prefer_completed=False):
    from .data_io import load_dataset
    if prefer_completed and os.path.exists(cfg.path("completed", "manifest.json")):
        return load_dataset(cfg.path("completed", "manifest.json"))
    return load_dataset(_need(os.path.join(cfg.dataset_dir, "manifest.json"), "phantom-generate"))


def _split(n, fraction, seed):
    """Seeded train/holdout split of case indices."""
    perm = np.random.default_rng(seed).permutation(n)
    n_hold = max(1, int(round(fraction * n)))
    if n - n_hold < 1:
        raise DataError(f"cannot hold out {n_hold} of {n} cases")
    return sorted(perm[n_hold:].tolist()), sorted(perm[:n_hold].tolist())


def _require_modalities(cases, modalities):
    for c in cases:
        missing = [m for m in modalities if m not in c.modalities]
        if missing:
            raise DataError(f"case {c.case_id} lacks {missing}; run `synth-apply` to fill them")


def _fused_features(cfg):
    """(FusedFeatureSet, days) from the radiomic CSV, genes and survival tables."""
    from .radiogenomics import fuse, load_gene_expression, read_survival_csv
    from .radiomics import read_feature_csv

    rad = read_feature_csv(_need(cfg.path("features", "radiomic_features.csv"), "features-extract"))
    genes = load_gene_expression(_need(os.path.join(cfg.dataset_dir, "genes.csv"), "phantom-generate"))
    surv = read_survival_csv(_need(os.path.join(cfg.dataset_dir, "survival.csv"), "phantom-generate"))
    ids = [r.case_id for r in surv if r.case_id in set(rad[0]) and r.case_id in set(genes.patients)]
    if len(ids) < cfg.survival.folds:
        raise DataError(f"only {len(ids)} cases carry radiomic, genomic and survival data")
    clinical = {r.case_id: r.age for r in surv if r.age is not None}
    fs = fuse(rad, genes, clinical)
    fs = fs.rows(fs.case_ids.index(i) for i in ids)
    days = {r.case_id: r.survival_days for r in surv}
    return fs, np.array([days[i] for i in fs.case_ids], float)


def _rfe_targets(cfg, fs):
    counts = fs.provenance_counts()
    return {k: min(v, counts[k]) for k, v in cfg.survival.rfe_targets.items() if counts.get(k)}


def _model_kwargs(cfg):
    return {"C": cfg.survival.C, "epsilon": cfg.survival.epsilon, "thresholds": tuple(cfg.survival.thresholds)}


# ---------------------------------------------------------------- commands


def cmd_phantom_generate(cfg):
    from .data_io import generate_phantom_dataset, save_dataset
    spec = phantom_spec(cfg)
    cases = generate_phantom_dataset(spec, cfg.phantom.n_cases)
    root = _mkdir(cfg, "dataset")
    save_dataset(cases, root)
    return [os.path.join(root, f) for f in ("manifest.json", "genes.csv", "survival.csv")]


def cmd_synth_train(cfg):
    from .plotting import psnr_curve
    from .synthesis import GanObjective, save_generator, train_synthesizer, write_loss_csv
    cases = _load_cases(cfg)
    train_cfg = synth_train_config(cfg)
    out = _mkdir(cfg, "synthesis")
    outputs, series, baselines = [], {}, []
    for task in synth_tasks(cfg):
        usable = [c for c in cases if all(m in c.modalities for m in task.sources + (task.target,))]
        if len(usable) < 2:
            raise DataError(f"task {task.name}: need at least 2 cases with all of its modalities")
        tr, ho = _split(len(usable), cfg.synthesis.holdout_fraction, cfg.seed)
        run = train_synthesizer(task, [usable[i] for i in tr], train_cfg, [usable[i] for i in ho],
                                GanObjective(cfg.synthesis.lam))
        stem = task.name.replace("->", "_to_").replace("+", "_")
        write_loss_csv(os.path.join(out, f"{stem}_losses.csv"), run.losses)
        save_generator(run, task, os.path.join(out, f"{stem}.ckpt"))
        series[task.name] = run.psnr_series()
        baselines.append(run.baseline_psnr)
        outputs += [os.path.join(out, f"{stem}_losses.csv"), os.path.join(out, f"{stem}.ckpt")]
    psnr_curve(series, os.path.join(out, "psnr.png"), baseline=max(baselines) if len(baselines) == 1 else None)
    outputs.append(os.path.join(out, "psnr.png"))
    return outputs


def _generators(cfg):
    from .synthesis import load_generator
    d = _need(cfg.path("synthesis"), "synth-train")
    gens = [load_generator(os.path.join(d, f)) for f in sorted(os.listdir(d)) if f.endswith(".ckpt")]
    if not gens:
        raise DataError(f"no generator checkpoints under {d}; run `synth-train` first")
    return gens


def cmd_synth_apply(cfg):
    from .data_io import save_dataset
    from .synthesis import synthesize_missing
    cases = _load_cases(cfg)
    gens = _generators(cfg)
    required = cfg.segmentation.modalities
    done = [synthesize_missing(c, gens, required, seed=cfg.seed) for c in cases]
    root = _mkdir(cfg, "completed")
    save_dataset(done, root)
    path = os.path.join(root, "provenance.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id"] + list(required))
        for c in done:
            w.writerow([c.case_id] + [c.provenance[m] for m in required])
    return [os.path.join(root, "manifest.json"), path]


def cmd_seg_train(cfg):
    from .segmentation import cross_validate_segmentation, save_segmenter, write_table_csv
    cases = _load_cases(cfg, prefer_completed=True)
    mods = tuple(cfg.segmentation.modalities)
    _require_modalities(cases, mods)
    cv = cross_validate_segmentation(cases, seg_config(cfg, "segmentation"), cfg.segmentation.folds, mods)
    out = _mkdir(cfg, "segmentation")
    outputs = []
    for i, seg in enumerate(cv.ensemble.members):
        p = os.path.join(out, f"fold{i + 1}.ckpt")
        save_segmenter(seg, p)
        outputs.append(p)
    with open(os.path.join(out, "folds.json"), "w") as fh:
        json.dump({"heldout": cv.folds, "modalities": list(mods)}, fh, indent=1)
    write_table_csv(os.path.join(out, "cv_table.csv"), cv.fold_rows)
    loss_path = os.path.join(out, "train_losses.csv")
    with open(loss_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"fold{i + 1}" for i in range(len(cv.ensemble.members))])
        for step, vals in enumerate(zip(*[m.losses for m in cv.ensemble.members])):
            w.writerow([step + 1] + [f"{v:.8g}" for v in vals])
    return outputs + [os.path.join(out, n) for n in ("folds.json", "cv_table.csv", "train_losses.csv")]


def _ensemble(cfg):
    from .segmentation import FoldEnsemble, load_segmenter
    d = _need(cfg.path("segmentation", "folds.json"), "seg-train")
    with open(d) as fh:
        meta = json.load(fh)
    members = [load_segmenter(cfg.path("segmentation", f"fold{i + 1}.ckpt")) for i in range(len(meta["heldout"]))]
    return FoldEnsemble(members), meta


def cmd_seg_predict(cfg):
    from .data_io import write_volume
    from .segmentation import predict_mask
    ens, _ = _ensemble(cfg)
    cases = _load_cases(cfg, prefer_completed=True)
    _require_modalities(cases, ens.modalities)
    root = _mkdir(cfg, "predictions")
    entries = []
    for c in cases:
        rel = os.path.join(c.case_id, "mask.raw")
        os.makedirs(os.path.join(root, c.case_id), exist_ok=True)
        write_volume(predict_mask(ens, c), os.path.join(root, rel))
        entries.append({"id": c.case_id, "mask": rel})
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(entries, fh, indent=1, sort_keys=True)
    return [os.path.join(root, "manifest.json")]


def cmd_seg_eval(cfg):
    """Each fold member scored on its own held-out cases (an honest cross-validated table)."""
    from .segmentation import evaluate_cases, table_row, write_table_csv
    ens, meta = _ensemble(cfg)
    cases = {c.case_id: c for c in _load_cases(cfg, prefer_completed=True)}
    rows, per_case, all_scores = [], [], []
    for i, (seg, held) in enumerate(zip(ens.members, meta["heldout"])):
        missing = [h for h in held if h not in cases]
        if missing:
            raise DataError(f"held-out cases {missing} are not in the dataset")
        scores = evaluate_cases(seg, [cases[h] for h in held])
        rows.append(table_row(f"fold{i + 1}", scores))
        all_scores += scores
        for h, s in zip(held, scores):
            per_case.append([h] + [getattr(s[r], k) for k in ("dice", "hd95", "hd100") for r in ("ET", "WT", "TC")])
    rows.append(table_row("cross-validated", all_scores))
    out = _mkdir(cfg, "segmentation")
    write_table_csv(os.path.join(out, "metrics.csv"), rows)
    cols = ["case_id"] + [f"{k}_{r.lower()}" for k in ("dice", "hd", "hd100") for r in ("ET", "WT", "TC")]
    write_table_csv(os.path.join(out, "metrics_per_case.csv"), sorted(per_case), cols)
    return [os.path.join(out, "metrics.csv"), os.path.join(out, "metrics_per_case.csv")]


def cmd_ablate_modalities(cfg):
    from .plotting import ablation_plot
    from .segmentation import ABLATION_COLUMNS, modality_ablation, write_table_csv
    cases = _load_cases(cfg, prefer_completed=True)
    subsets = [tuple(s) for s in cfg.ablation.subsets]
    _require_modalities(cases, sorted({m for s in subsets for m in s}))
    tr, ho = _split(len(cases), cfg.ablation.holdout_fraction, cfg.seed)
    rows = modality_ablation([cases[i] for i in tr], [cases[i] for i in ho], subsets, seg_config(cfg, "ablation"))
    out = _mkdir(cfg, "ablation")
    write_table_csv(os.path.join(out, "ablation.csv"), rows, ABLATION_COLUMNS)
    ablation_plot(rows, os.path.join(out, "ablation.png"))
    return [os.path.join(out, "ablation.csv"), os.path.join(out, "ablation.png")]


def cmd_features_extract(cfg):
    from .data_io import read_volume
    from .radiomics import extract_feature_vector, write_feature_csv
    f = cfg.features
    cases = _load_cases(cfg, prefer_completed=True)
    masks = {}
    if f.mask_source == "predicted":
        mpath = _need(cfg.path("predictions", "manifest.json"), "seg-predict")
        with open(mpath) as fh:
            for e in json.load(fh):
                masks[e["id"]] = read_volume(cfg.path("predictions", e["mask"]))
    rows = []
    for c in cases:
        mask = masks.get(c.case_id) if f.mask_source == "predicted" else c.mask
        if mask is None:
            raise DataError(f"case {c.case_id} has no {f.mask_source} mask")
        if f.reference_modality not in c.modalities:
            raise DataError(f"case {c.case_id} lacks reference modality {f.reference_modality}")
        rows.append((c.case_id, extract_feature_vector(mask, c.modalities[f.reference_modality],
                                                       scales=f.scales, bins=f.bins)))
    out = _mkdir(cfg, "features")
    write_feature_csv(os.path.join(out, "radiomic_features.csv"), rows)
    miss = os.path.join(out, "missing_flags.csv")
    with open(miss, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id"] + rows[0][1].names)
        for cid, vec in rows:
            w.writerow([cid] + [int(b) for b in vec.missing])
    return [os.path.join(out, "radiomic_features.csv"), miss]


def cmd_survival_train(cfg):
    from .radiogenomics import rfe_select, train_survival_model
    fs, days = _fused_features(cfg)
    out = _mkdir(cfg, "survival")
    models_dir = _mkdir(cfg, "survival", "models")
    sel_rows, outputs = [], []
    for set_name in cfg.survival.feature_sets:
        sub = fs.subset(FEATURE_SETS[set_name])
        res = rfe_select(sub, days, _rfe_targets(cfg, sub), cfg.survival.rfe_step, cfg.seed)
        chosen = sub.select(res.selected)
        for name in res.selected:
            sel_rows.append([set_name, name, chosen.provenance[chosen.columns.index(name)]])
        for kind in cfg.survival.models:
            model = train_survival_model(kind, chosen.matrix, days, seed=cfg.seed, **_model_kwargs(cfg))
            p = os.path.join(models_dir, f"{set_name}_{kind}.pkl")
            with open(p, "wb") as fh:
                pickle.dump({"model": model, "columns": chosen.columns, "provenance": chosen.provenance}, fh)
            outputs.append(p)
    path = os.path.join(out, "selected_features.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature_set", "feature", "provenance"])
        w.writerows(sel_rows)
    return [path] + outputs


def cmd_survival_eval(cfg):
    from .radiogenomics import METRIC_COLUMNS, _fmt, evaluate_survival
    fs, days = _fused_features(cfg)
    out = _mkdir(cfg, "survival")
    path = os.path.join(out, "metrics.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature_set", "model"] + METRIC_COLUMNS)
        for set_name in cfg.survival.feature_sets:
            sub = fs.subset(FEATURE_SETS[set_name])
            for kind in cfg.survival.models:
                rows = evaluate_survival(kind, sub, days, cfg.survival.folds, cfg.seed,
                                         tuple(cfg.survival.thresholds), _rfe_targets(cfg, sub),
                                         cfg.survival.rfe_step, {"C": cfg.survival.C, "epsilon": cfg.survival.epsilon})
                for r in rows:
                    w.writerow([set_name, kind] + [_fmt(v) for v in r.row()])
    return [path]


def cmd_explain(cfg):
    from .plotting import shap_bar
    from .radiogenomics import (rank_features_by_shap, rfe_select, shap_attribution, train_survival_model,
                                write_shap_csv)
    e = cfg.explain
    fs, days = _fused_features(cfg)
    sub = fs.subset(FEATURE_SETS[e.feature_set])
    sub = sub.select(rfe_select(sub, days, _rfe_targets(cfg, sub), cfg.survival.rfe_step, cfg.seed).selected)
    model = train_survival_model(e.model, sub.matrix, days, seed=cfg.seed, **_model_kwargs(cfg))
    rng = np.random.default_rng(cfg.seed)
    bg = sub.matrix[np.sort(rng.choice(len(days), size=min(e.background, len(days)), replace=False))]
    phi = np.stack([shap_attribution(model.predict, x, bg, e.budget, cfg.seed + i).values
                    for i, x in enumerate(sub.matrix)])
    ranking = rank_features_by_shap(phi, sub.columns, sub.provenance)
    out = _mkdir(cfg, "explain")
    write_shap_csv(os.path.join(out, "shap_ranking.csv"), ranking)
    vals = os.path.join(out, "shap_values.csv")
    with open(vals, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id"] + sub.columns)
        for cid, row in zip(sub.case_ids, phi):
            w.writerow([cid] + [f"{v:.9g}" for v in row])
    shap_bar(ranking, os.path.join(out, "shap_bar.png"), e.top_k)
    return [os.path.join(out, "shap_ranking.csv"), vals, os.path.join(out, "shap_bar.png")]


FOLD_TABLE_COLUMNS = ["fold", "mse", "accuracy_pct", "sensitivity_short", "sensitivity_medium", "sensitivity_long",
                      "specificity_short", "specificity_medium", "specificity_long", "source"]


def cmd_report(cfg):
    from .plotting import ablation_plot, grouped_bars, psnr_curve, shap_bar
    from .radiogenomics import ShapRanking
    out = _mkdir(cfg, "report")
    outputs = []
    with open(_need(cfg.path("survival", "metrics.csv"), "survival-eval"), newline="") as fh:
        metrics = list(csv.DictReader(fh))
    # per-fold rows plus the average for the fused-feature models, one file per model
    for kind in sorted({r["model"] for r in metrics}):
        rows = [r for r in metrics if r["model"] == kind and r["feature_set"] == "fused"]
        if not rows:
            continue
        p = os.path.join(out, f"folds_fused_{kind}.csv")
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(FOLD_TABLE_COLUMNS)
            for r in rows:
                w.writerow([r["fold"], r["mse"], r["accuracy"], r["sens_S"], r["sens_M"], r["sens_L"],
                            r["spec_S"], r["spec_M"], r["spec_L"], r["source"]])
        outputs.append(p)
    avg = [r for r in metrics if r["fold"] == "average"]
    sets = [s for s in FEATURE_SETS if any(r["feature_set"] == s for r in avg)]
    kinds = sorted({r["model"] for r in avg})
    comp = os.path.join(out, "feature_set_comparison.csv")
    with open(comp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature_set", "model", "mse", "accuracy"])
        for s in sets:
            for k in kinds:
                r = next((r for r in avg if r["feature_set"] == s and r["model"] == k), None)
                if r:
                    w.writerow([s, k, r["mse"], r["accuracy"]])
    outputs.append(comp)

    def val(s, k, col):
        r = next((r for r in avg if r["feature_set"] == s and r["model"] == k), None)
        return float(r[col]) if r else float("nan")

    reg = [k for k in kinds if not all(math.isnan(val(s, k, "mse")) for s in sets)]
    if reg:
        grouped_bars(reg, sets, [[val(s, k, "mse") for s in sets] for k in reg],
                     os.path.join(out, "mse_by_feature_set.png"), "MSE (days²)")
        outputs.append(os.path.join(out, "mse_by_feature_set.png"))
    grouped_bars(kinds, sets, [[val(s, k, "accuracy") for s in sets] for k in kinds],
                 os.path.join(out, "accuracy_by_feature_set.png"), "accuracy (%)")
    outputs.append(os.path.join(out, "accuracy_by_feature_set.png"))

    shap_path = _need(cfg.path("explain", "shap_ranking.csv"), "explain")
    with open(shap_path, newline="") as fh:
        ranking = [ShapRanking(r["feature"], float(r["mean_abs_shap"]), r["provenance"]) for r in csv.DictReader(fh)]
    shap_bar(ranking, os.path.join(out, "shap_bar.png"), cfg.explain.top_k)
    outputs.append(os.path.join(out, "shap_bar.png"))

    # optional upstream artifacts
    syn = cfg.path("synthesis")
    if os.path.isdir(syn):
        series = {}
        for f in sorted(os.listdir(syn)):
            if f.endswith("_losses.csv"):
                with open(os.path.join(syn, f), newline="") as fh:
                    series[f[:-len("_losses.csv")]] = [(int(r["step"]), float(r["psnr_holdout"]))
                                                       for r in csv.DictReader(fh) if r["psnr_holdout"]]
        if series:
            psnr_curve(series, os.path.join(out, "psnr.png"))
            outputs.append(os.path.join(out, "psnr.png"))
    abl = cfg.path("ablation", "ablation.csv")
    if os.path.exists(abl):
        with open(abl, newline="") as fh:
            rows = [[r["modalities"], float(r["dice_et"]), float(r["dice_wt"]), float(r["dice_tc"])]
                    for r in csv.DictReader(fh)]
        ablation_plot(rows, os.path.join(out, "ablation.png"))
        outputs.append(os.path.join(out, "ablation.png"))
    return outputs


COMMANDS = {
    "phantom-generate": (cmd_phantom_generate, "generate a synthetic cohort with masks, genes and survival"),
    "synth-train": (cmd_synth_train, "train cGAN generators for each synthesis task"),
    "synth-apply": (cmd_synth_apply, "fill missing modalities with trained generators"),
    "seg-train": (cmd_seg_train, "cross-validated segmentation training (one model per fold)"),
    "seg-predict": (cmd_seg_predict, "predict masks with the fold ensemble"),
    "seg-eval": (cmd_seg_eval, "dice and Hausdorff table on held-out folds"),
    "ablate-modalities": (cmd_ablate_modalities, "segmentation dice per input-modality subset"),
    "features-extract": (cmd_features_extract, "radiomic feature vectors per case"),
    "survival-train": (cmd_survival_train, "RFE selection and survival models on the full cohort"),
    "survival-eval": (cmd_survival_eval, "k-fold survival metrics per feature set and model"),
    "explain": (cmd_explain, "SHAP attributions and mean-|SHAP| ranking"),
    "report": (cmd_report, "survival tables and figures from earlier outputs"),
}


# ---------------------------------------------------------------- entry point


def _versions():
    import scipy
    import sklearn
    import torch
    return {"radiogenomic": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__, "scikit-learn": sklearn.__version__}


def write_run_metadata(cfg, command, outputs):
    d = _mkdir(cfg, "runs")
    meta = {"command": command, "config_hash": config_hash(cfg), "seed": cfg.seed, "versions": _versions(),
            "config": config_dict(cfg),
            "outputs": sorted(os.path.relpath(p, cfg.out) for p in outputs)}
    path = os.path.join(d, f"{command}.json")
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    return path


def build_parser():
    p = argparse.ArgumentParser(prog="radiogenomic", description="Radiogenomic survival pipeline.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON pipeline config")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", help="output directory (overrides the config)")
    return p


def _seed_everything(cfg):
    import torch
    torch.manual_seed(cfg.seed)
    torch.set_num_threads(cfg.num_threads)
    torch.use_deterministic_algorithms(True)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.seed, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        _seed_everything(cfg)
        os.makedirs(cfg.out, exist_ok=True)
        outputs = COMMANDS[args.command][0](cfg)
        write_run_metadata(cfg, args.command, outputs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure with a clean exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
