"""Gene-expression tables, radiogenomic fusion, RFE, survival models and Shapley attribution."""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.model_selection import KFold
from sklearn.svm import SVC, SVR, LinearSVR

from .data_io import DataError

log = logging.getLogger(__name__)

CLASSES = ("short", "medium", "long")
DEFAULT_THRESHOLDS = (305, 456)
EXACT_SHAP_MAX_FEATURES = 15
SHAP_SAMPLE_BUDGET = 2048
# strong shrinkage keeps ranking weights meaningful when columns far outnumber cases
RFE_RANKING_C = 1e-5


# ---------------------------------------------------------------- tables


@dataclass
class GeneExpressionMatrix:
    patients: list
    genes: list
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.patients), len(self.genes)):
            raise DataError(f"matrix shape {self.values.shape} does not match "
                            f"{len(self.patients)} patients x {len(self.genes)} genes")
        _no_duplicates(self.patients, "case id")
        _no_duplicates(self.genes, "gene")


def _no_duplicates(items, what):
    seen = set()
    for it in items:
        if it in seen:
            raise DataError(f"duplicate {what} {it!r}")
        seen.add(it)


def write_gene_expression(path, patients, genes, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id"] + list(genes))
        for pid, row in zip(patients, np.asarray(values, dtype=np.float64)):
            w.writerow([pid] + [repr(float(v)) for v in row])


def load_gene_expression(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        try:
            header = next(r)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        genes = header[1:]
        _no_duplicates(genes, "gene")
        patients, rows = [], []
        for lineno, row in enumerate(r, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
            patients.append(row[0])
    return GeneExpressionMatrix(patients, genes, np.asarray(rows).reshape(len(patients), len(genes)))


@dataclass
class SurvivalRecord:
    case_id: str
    survival_days: int
    age: float = None

    def survival_class(self, thresholds=DEFAULT_THRESHOLDS):
        return classify_survival(self.survival_days, thresholds)


def write_survival_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "days", "age"])
        for cid, days, age in rows:
            w.writerow([cid, int(days), "" if age is None else repr(float(age))])


def read_survival_csv(path):
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                days = int(row["days"])
                age = float(row["age"]) if row.get("age") else None
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad survival row ({exc})") from None
            if days <= 0:
                raise DataError(f"{path}:{lineno}: survival days must be positive")
            out.append(SurvivalRecord(row["case_id"], days, age))
    _no_duplicates([r.case_id for r in out], "case id")
    return out


def classify_survival(days, thresholds=DEFAULT_THRESHOLDS):
    """short below the lower threshold, long above the upper, medium in between (inclusive)."""
    lo, hi = thresholds
    if lo > hi:
        raise ValueError(f"thresholds must be ordered, got {thresholds}")
    if days <= 0:
        raise ValueError(f"survival days must be positive, got {days}")
    if days < lo:
        return "short"
    if days > hi:
        return "long"
    return "medium"


def class_index(days, thresholds=DEFAULT_THRESHOLDS):
    days = np.asarray(days, dtype=float)
    lo, hi = thresholds
    return np.where(days < lo, 0, np.where(days > hi, 2, 1))


# ---------------------------------------------------------------- fusion


@dataclass
class FusedFeatureSet:
    case_ids: list
    columns: list
    provenance: list        # radiomic | genomic | clinical, per column
    matrix: np.ndarray
    dropped: list = field(default_factory=list)

    def subset(self, provenances):
        keep = [i for i, p in enumerate(self.provenance) if p in provenances]
        return self.take(keep)

    def take(self, idx):
        idx = list(idx)
        return FusedFeatureSet(self.case_ids, [self.columns[i] for i in idx],
                               [self.provenance[i] for i in idx], self.matrix[:, idx], self.dropped)

    def rows(self, idx):
        idx = list(idx)
        return FusedFeatureSet([self.case_ids[i] for i in idx], self.columns, self.provenance,
                               self.matrix[idx], self.dropped)

    def select(self, names):
        pos = {c: i for i, c in enumerate(self.columns)}
        return self.take(pos[n] for n in names)

    def provenance_counts(self):
        out = {}
        for p in self.provenance:
            out[p] = out.get(p, 0) + 1
        return out


def fuse(radiomic=None, genomic=None, clinical=None):
    """Column-concatenate sources over their shared case ids.

    ``radiomic`` is (case_ids, names, values); ``genomic`` a GeneExpressionMatrix;
    ``clinical`` a dict case_id -> age. Cases absent from any given source are dropped.
    """
    sources = []
    if radiomic is not None:
        ids, names, vals = radiomic
        sources.append(("radiomic", list(ids), list(names), np.asarray(vals, float)))
    if genomic is not None:
        sources.append(("genomic", list(genomic.patients), list(genomic.genes), genomic.values))
    if clinical is not None:
        ids = [k for k, v in clinical.items() if v is not None]
        sources.append(("clinical", ids, ["age"], np.asarray([[clinical[k]] for k in ids], float).reshape(-1, 1)))
    if not sources:
        raise ValueError("nothing to fuse")
    shared = set(sources[0][1])
    for s in sources[1:]:
        shared &= set(s[1])
    order = [cid for cid in sources[0][1] if cid in shared]
    if not order:
        raise DataError("sources share no case ids")
    all_ids = set().union(*(set(s[1]) for s in sources))
    dropped = sorted(all_ids - shared)
    if dropped:
        log.info("fusion dropped %d cases missing a source: %s", len(dropped), dropped)
    blocks, columns, prov = [], [], []
    for kind, ids, names, vals in sources:
        pos = {cid: i for i, cid in enumerate(ids)}
        blocks.append(vals[[pos[c] for c in order]])
        columns += names
        prov += [kind] * len(names)
    return FusedFeatureSet(order, columns, prov, np.hstack(blocks), dropped)


class Standardizer:
    """Per-column mean/std fitted on training rows only; zero-variance columns pass through centered."""

    def fit(self, X):
        X = np.asarray(X, float)
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.std_ = np.where(std > 0, std, 1.0)
        return self

    def transform(self, X):
        return (np.asarray(X, float) - self.mean_) / self.std_

    def fit_transform(self, X):
        return self.fit(X).transform(X)


# ---------------------------------------------------------------- RFE


@dataclass
class RfeResult:
    selected: list
    elimination_order: list   # first eliminated first
    target: int


def _rfe_single(X, y, names, target, step, seed, ranking_C=RFE_RANKING_C):
    if target > len(names):
        raise ValueError(f"target {target} exceeds {len(names)} available columns")
    if target < 1:
        raise ValueError("target must be >= 1")
    Xs = Standardizer().fit_transform(X)
    ys = (y - y.mean()) / (y.std() or 1.0)
    remaining = list(range(len(names)))
    eliminated = []
    while len(remaining) > target:
        model = LinearSVR(C=ranking_C, epsilon=0.0, loss="squared_epsilon_insensitive",
                          dual="auto", max_iter=100000, random_state=seed)
        model.fit(Xs[:, remaining], ys)
        weight = np.abs(model.coef_)
        n_drop = min(max(1, int(step * len(remaining))), len(remaining) - target)
        # stable sort: ties go to the earlier column
        worst = np.argsort(weight, kind="stable")[:n_drop]
        for w in sorted(worst, key=lambda i: (weight[i], i)):
            eliminated.append(names[remaining[w]])
        drop = set(worst.tolist())
        remaining = [c for i, c in enumerate(remaining) if i not in drop]
    return [names[i] for i in remaining], eliminated


def rfe_select(features, labels, targets, step=0.1, seed=0):
    """Recursive elimination under a linear SVR ranking.

    ``targets`` is a total column count, or a dict provenance -> count run
    per provenance group and unioned (e.g. radiomic 8 + genomic 43 -> 51).
    """
    y = np.asarray(labels, float)
    if isinstance(targets, dict):
        selected, order = [], []
        for prov, count in targets.items():
            sub = features.subset({prov})
            if not sub.columns:
                raise ValueError(f"no {prov} columns to select from")
            s, o = _rfe_single(sub.matrix, y, sub.columns, count, step, seed)
            selected += s
            order += o
        total = sum(targets.values())
    else:
        selected, order = _rfe_single(features.matrix, y, features.columns, int(targets), step, seed)
        total = int(targets)
    keep = set(selected)
    selected = [c for c in features.columns if c in keep]
    return RfeResult(selected, order, total)


# ---------------------------------------------------------------- models


class AnnRegressor:
    """One hidden layer of 6 ReLU units, full-batch Adam with early stopping."""

    hidden = 6

    def __init__(self, lr=0.01, epochs=3000, patience=200, val_fraction=0.2, weight_decay=1e-4, seed=0):
        self.lr, self.epochs, self.patience = lr, epochs, patience
        self.val_fraction, self.weight_decay, self.seed = val_fraction, weight_decay, seed

    def _net(self, n_in):
        g = torch.Generator().manual_seed(self.seed)
        net = torch.nn.Sequential(torch.nn.Linear(n_in, self.hidden), torch.nn.ReLU(),
                                  torch.nn.Linear(self.hidden, 1)).double()
        with torch.no_grad():
            for layer in (net[0], net[2]):
                bound = 1.0 / math.sqrt(layer.in_features)
                layer.weight.uniform_(-bound, bound, generator=g)
                layer.bias.zero_()
            net[0].bias.fill_(0.1)  # keep hidden units alive at the start
        return net

    def fit(self, X, y):
        X = torch.as_tensor(np.asarray(X, float))
        y = torch.as_tensor(np.asarray(y, float)).reshape(-1, 1)
        n = len(X)
        rng = np.random.default_rng(self.seed)
        n_val = int(round(self.val_fraction * n)) if n >= 10 else 0
        perm = rng.permutation(n)
        val, tr = perm[:n_val], perm[n_val:]
        self.net = net = self._net(X.shape[1])
        opt = torch.optim.Adam(net.parameters(), lr=self.lr, weight_decay=self.weight_decay if n_val else 0.0)
        best, best_state, wait = np.inf, None, 0
        for _ in range(self.epochs):
            opt.zero_grad()
            loss = torch.mean((net(X[tr]) - y[tr]) ** 2)
            loss.backward()
            opt.step()
            if n_val:
                with torch.no_grad():
                    v = torch.mean((net(X[val]) - y[val]) ** 2).item()
                if v < best - 1e-9:
                    best, wait = v, 0
                    best_state = {k: t.clone() for k, t in net.state_dict().items()}
                else:
                    wait += 1
                    if wait >= self.patience:
                        break
        if best_state is not None:
            net.load_state_dict(best_state)
        return self

    def predict(self, X):
        with torch.no_grad():
            return self.net(torch.as_tensor(np.asarray(X, float))).numpy().ravel()


class SurvivalModel:
    """Standardizes features (and regression targets) on the training rows, then fits ``kind``.

    kind: "SVR" (days regression, RBF), "SVC" (class, RBF) or "ANN" (days regression).
    """

    def __init__(self, kind="SVR", seed=0, thresholds=DEFAULT_THRESHOLDS, C=1.0, epsilon=0.1, ann=None):
        if kind not in ("SVR", "SVC", "ANN"):
            raise ValueError(f"unknown model kind {kind!r}")
        self.kind, self.seed, self.thresholds = kind, seed, thresholds
        self.C, self.epsilon, self.ann_kwargs = C, epsilon, ann or {}

    @property
    def is_classifier(self):
        return self.kind == "SVC"

    def fit(self, X, days):
        X = np.asarray(X, float)
        days = np.asarray(days, float)
        self.scaler = Standardizer().fit(X)
        Xs = self.scaler.transform(X)
        if self.kind == "SVC":
            labels = class_index(days, self.thresholds)
            if len(np.unique(labels)) < 2:
                raise ValueError("SVC needs at least two survival classes in the training set")
            self.model = SVC(C=self.C, kernel="rbf", gamma="scale").fit(Xs, labels)
            return self
        self.y_mean = days.mean()
        self.y_std = days.std() if days.std() > 0 else 1.0
        ys = (days - self.y_mean) / self.y_std
        if self.kind == "SVR":
            self.model = SVR(C=self.C, epsilon=self.epsilon, kernel="rbf", gamma="scale").fit(Xs, ys)
        else:
            self.model = AnnRegressor(seed=self.seed, **self.ann_kwargs).fit(Xs, ys)
        return self

    def predict(self, X):
        """Days for regressors; class index for SVC."""
        out = self.model.predict(self.scaler.transform(X))
        if self.is_classifier:
            return np.asarray(out, dtype=int)
        return out * self.y_std + self.y_mean

    def predict_class(self, X):
        out = self.predict(X)
        return out if self.is_classifier else class_index(out, self.thresholds)


def train_survival_model(kind, features, days, seed=0, **kwargs):
    return SurvivalModel(kind, seed=seed, **kwargs).fit(features, days)


# ---------------------------------------------------------------- evaluation


@dataclass
class FoldMetrics:
    fold: str
    mse: float
    accuracy: float
    sensitivity: dict
    specificity: dict
    source: str
    n_cases: int = 0

    def row(self):
        return ([self.fold, self.mse, self.accuracy]
                + [self.sensitivity[c] for c in CLASSES] + [self.specificity[c] for c in CLASSES]
                + [self.source])


METRIC_COLUMNS = (["fold", "mse", "accuracy"] + [f"sens_{c[0].upper()}" for c in CLASSES]
                  + [f"spec_{c[0].upper()}" for c in CLASSES] + ["source"])


def confusion_matrix(truth, pred, n_classes=3):
    cm = np.zeros((n_classes, n_classes), dtype=int)
    for t, p in zip(truth, pred):
        cm[t, p] += 1
    return cm


def class_metrics(truth, pred):
    """Accuracy (%) and per-class one-vs-rest sensitivity/specificity (%); NaN where undefined."""
    truth = np.asarray(truth, int)
    pred = np.asarray(pred, int)
    cm = confusion_matrix(truth, pred)
    total = cm.sum()
    acc = 100.0 * np.trace(cm) / total if total else float("nan")
    sens, spec = {}, {}
    for k, name in enumerate(CLASSES):
        tp = cm[k, k]
        fn = cm[k].sum() - tp
        fp = cm[:, k].sum() - tp
        tn = total - tp - fn - fp
        sens[name] = 100.0 * tp / (tp + fn) if tp + fn else float("nan")
        spec[name] = 100.0 * tn / (tn + fp) if tn + fp else float("nan")
    return acc, sens, spec


def case_folds(n, k=4, seed=0):
    if n < k:
        raise ValueError(f"cannot split {n} cases into {k} folds")
    return list(KFold(n_splits=k, shuffle=True, random_state=seed).split(np.arange(n)))


def evaluate_survival(kind, features, days, k=4, seed=0, thresholds=DEFAULT_THRESHOLDS,
                      rfe_targets=None, rfe_step=0.1, model_kwargs=None):
    """k-fold evaluation. Returns fold rows plus an "average" row.

    ``features`` is a FusedFeatureSet; with ``rfe_targets`` the selection is
    refit inside each training fold. Undefined per-class metrics stay NaN.
    """
    days = np.asarray(days, float)
    rows, preds = [], np.zeros(len(days))
    source = "classifier" if kind == "SVC" else "regression-thresholded"
    for i, (tr, va) in enumerate(case_folds(len(days), k, seed)):
        fs = features
        if rfe_targets is not None:
            train_part = features.rows(tr)
            fs = features.select(rfe_select(train_part, days[tr], rfe_targets, rfe_step, seed).selected)
        model = SurvivalModel(kind, seed=seed, thresholds=thresholds, **(model_kwargs or {}))
        model.fit(fs.matrix[tr], days[tr])
        truth_cls = class_index(days[va], thresholds)
        pred_cls = model.predict_class(fs.matrix[va])
        if model.is_classifier:
            mse = float("nan")
        else:
            p = model.predict(fs.matrix[va])
            preds[va] = p
            mse = float(np.mean((p - days[va]) ** 2))
        acc, sens, spec = class_metrics(truth_cls, pred_cls)
        undefined = [c for c in CLASSES if math.isnan(sens[c])]
        if undefined:
            log.warning("fold %d lacks classes %s; their sensitivity is undefined", i + 1, undefined)
        rows.append(FoldMetrics(str(i + 1), mse, acc, sens, spec, source, len(va)))
    rows.append(average_row(rows))
    return rows


def average_row(rows):
    def mean(vals):
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")
    return FoldMetrics(
        "average", mean([r.mse for r in rows]), mean([r.accuracy for r in rows]),
        {c: mean([r.sensitivity[c] for r in rows]) for c in CLASSES},
        {c: mean([r.specificity[c] for r in rows]) for c in CLASSES},
        rows[0].source, sum(r.n_cases for r in rows))


def write_metrics_csv(path, rows, extra=None):
    """extra: leading (name, value) columns, e.g. feature set and model."""
    extra = list(extra or [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([k for k, _ in extra] + METRIC_COLUMNS)
        for r in rows:
            w.writerow([v for _, v in extra] + [_fmt(v) for v in r.row()])


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return v


# ---------------------------------------------------------------- Shapley values


@dataclass
class ShapResult:
    values: np.ndarray
    base_value: float
    prediction: float
    exact: bool


def _coalition_values(f, x, background, masks):
    """v(S) = mean over background rows of f with features in S taken from x."""
    masks = np.asarray(masks, dtype=bool)
    B = len(background)
    rows = np.where(masks[:, None, :], x[None, None, :], background[None, :, :])
    out = np.asarray(f(rows.reshape(-1, x.size)), dtype=np.float64).reshape(len(masks), B)
    return out.mean(axis=1)


def shap_exact(f, x, background):
    x = np.asarray(x, float).ravel()
    background = np.atleast_2d(np.asarray(background, float))
    M = x.size
    codes = np.arange(2 ** M)
    masks = ((codes[:, None] >> np.arange(M)) & 1).astype(bool)
    v = _coalition_values(f, x, background, masks)
    sizes = masks.sum(axis=1)
    weight = np.array([math.factorial(s) * math.factorial(M - s - 1) / math.factorial(M) if s < M else 0.0
                       for s in range(M + 1)])
    phi = np.zeros(M)
    for i in range(M):
        without = codes[~masks[:, i]]
        phi[i] = np.sum(weight[sizes[without]] * (v[without | (1 << i)] - v[without]))
    return ShapResult(phi, float(v[0]), float(v[-1]), True)


def shap_sampling(f, x, background, budget=SHAP_SAMPLE_BUDGET, seed=0):
    """Antithetic permutation sampling; ``budget`` caps coalition evaluations.

    Each permutation telescopes from v(empty) to v(all), so efficiency holds exactly.
    """
    x = np.asarray(x, float).ravel()
    background = np.atleast_2d(np.asarray(background, float))
    M = x.size
    rng = np.random.default_rng(seed)
    n_perm = max(2, budget // (M + 1))
    n_perm -= n_perm % 2
    phi = np.zeros(M)
    base = pred = None
    for p in range(n_perm // 2):
        perm = rng.permutation(M)
        for order in (perm, perm[::-1]):
            masks = np.zeros((M + 1, M), dtype=bool)
            for j, feat in enumerate(order):
                masks[j + 1:, feat] = True
            v = _coalition_values(f, x, background, masks)
            phi[order] += np.diff(v)
            base, pred = v[0], v[-1]
    return ShapResult(phi / n_perm, float(base), float(pred), False)


def shap_attribution(f, instance, background, budget=SHAP_SAMPLE_BUDGET, seed=0):
    background = np.atleast_2d(np.asarray(background, float))
    if background.shape[0] == 0 or background.size == 0:
        raise ValueError("background set is empty")
    if np.asarray(instance).size <= EXACT_SHAP_MAX_FEATURES:
        return shap_exact(f, instance, background)
    return shap_sampling(f, instance, background, budget, seed)


@dataclass
class ShapRanking:
    feature: str
    mean_abs_shap: float
    provenance: str


def rank_features_by_shap(attributions, names, provenance=None, top_k=None):
    """Descending mean |phi| over cases; ties broken by name for order independence."""
    phi = np.atleast_2d(np.asarray(attributions, float))
    if phi.shape[0] < 1:
        raise ValueError("need attributions for at least one case")
    # exactly rounded sums keep the scores independent of case order
    score = np.array([math.fsum(col) / len(col) for col in np.abs(phi).T])
    provenance = provenance or [""] * len(names)
    order = sorted(range(len(names)), key=lambda i: (-score[i], names[i]))
    ranking = [ShapRanking(names[i], float(score[i]), provenance[i]) for i in order]
    return ranking[:top_k] if top_k else ranking


def write_shap_csv(path, ranking):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "mean_abs_shap", "provenance"])
        for r in ranking:
            w.writerow([r.feature, f"{r.mean_abs_shap:.9g}", r.provenance])
