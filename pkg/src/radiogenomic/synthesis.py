"""Conditional GAN for missing-modality synthesis: FCN generator, encoder-decoder discriminator."""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data_io import CaseRecord, DataError
from .nn_blocks import FCN, FCNConfig, load_checkpoint, register_architecture, save_checkpoint

log = logging.getLogger(__name__)

PSNR_INF = float("inf")


@dataclass
class SynthesisTask:
    sources: tuple
    target: str
    noise_channels: int = 1

    def __post_init__(self):
        self.sources = tuple(self.sources)
        if not self.sources:
            raise ValueError("a synthesis task needs at least one source modality")
        if self.target in self.sources:
            raise ValueError(f"target {self.target!r} is also a source")

    @property
    def name(self):
        return f"{'+'.join(self.sources)}->{self.target}"


@dataclass
class GanObjective:
    lam: float = 100.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")


@dataclass
class TrainConfig:
    lr_g: float = 5e-3
    lr_d: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    steps: int = 2000
    batch: int = 8
    seed: int = 0
    eval_every: int = 100
    depth: int = 3
    base_channels: int = 8
    alpha: float = 0.25
    disc_channels: int = 8

    def __post_init__(self):
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be positive")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")

    @classmethod
    def for_segmentation(cls, **kw):
        kw.setdefault("lr_g", 1e-4)
        return cls(**kw)


# ---------------------------------------------------------------- networks


@dataclass
class DiscConfig:
    in_channels: int = 3
    base_channels: int = 8
    depth: int = 4


class Discriminator(nn.Module):
    """Plain-conv UNet ending in a per-pixel sigmoid realness map."""

    def __init__(self, cfg: DiscConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_channels * 2 ** min(i, 2) for i in range(cfg.depth)]
        self.down = nn.ModuleList()
        cin = cfg.in_channels
        for w in widths:
            self.down.append(nn.Conv2d(cin, w, 3, padding=1))
            cin = w
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up.append(nn.ConvTranspose2d(cin, w, 4, stride=2, padding=1))
            self.fuse.append(nn.Conv2d(2 * w, w, 3, padding=1))
            cin = w
        self.head = nn.Conv2d(cin, 1, 1)

    def forward(self, x):
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"discriminator expects {self.cfg.in_channels} channels, got {x.shape[1]}")
        step = 2 ** (self.cfg.depth - 1)
        if x.shape[-1] % step or x.shape[-2] % step:
            raise ValueError(f"spatial dims {tuple(x.shape[-2:])} not divisible by {step}")
        skips = []
        for i, conv in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = F.leaky_relu(conv(x), 0.2)
            skips.append(x)
        for up, fuse, skip in zip(self.up, self.fuse, reversed(skips[:-1])):
            x = F.leaky_relu(up(x), 0.2)
            x = F.leaky_relu(fuse(torch.cat([x, skip], dim=1)), 0.2)
        return torch.sigmoid(self.head(x))


register_architecture(Discriminator, DiscConfig)


def build_generator(task, cfg=None):
    cfg = cfg or TrainConfig()
    return FCN(FCNConfig(cfg.depth, cfg.base_channels, cfg.alpha,
                         len(task.sources) + task.noise_channels, 1))


def build_discriminator(task, cfg=None):
    cfg = cfg or TrainConfig()
    return Discriminator(DiscConfig(len(task.sources) + 1, cfg.disc_channels))


def generator_forward(model, task, sources, noise=None, generator=None):
    """sources: (B, S, H, W) normalized slices; noise defaults to a standard-normal draw."""
    if sources.shape[1] != len(task.sources):
        raise ValueError(f"task {task.name} expects {len(task.sources)} sources, got {sources.shape[1]}")
    if noise is None:
        noise = torch.randn((sources.shape[0], task.noise_channels, *sources.shape[2:]),
                            generator=generator, dtype=sources.dtype)
    return model(torch.cat([sources, noise], dim=1))


def discriminator_forward(model, sources, candidate):
    if sources.shape[0] != candidate.shape[0] or sources.shape[2:] != candidate.shape[2:]:
        raise ValueError("sources and candidate shapes disagree")
    return model(torch.cat([sources, candidate], dim=1))


def bce(p, target):
    """Binary cross-entropy of probabilities against a constant target (0 or 1)."""
    return F.binary_cross_entropy(p, torch.full_like(p, float(target)))


def generator_loss(objective, d_fake, fake, target):
    l1 = (fake - target).abs().mean()
    return bce(d_fake, 1.0) + objective.lam * l1, l1


def discriminator_loss(d_real, d_fake):
    return 0.5 * (bce(d_real, 1.0) + bce(d_fake, 0.0))


def gan_loss(objective, d_real, d_fake, fake, target):
    """Returns (g_loss, d_loss, l1)."""
    g_loss, l1 = generator_loss(objective, d_fake, fake, target)
    return g_loss, discriminator_loss(d_real, d_fake), l1


def psnr(a, b, peak=1.0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_INF
    return float(10.0 * np.log10(peak ** 2 / mse))


# ---------------------------------------------------------------- data


def paired_slices(cases, task):
    """(sources, target) float32 arrays of shape (N, S, H, W) / (N, 1, H, W) over brain-bearing slices."""
    src, tgt = [], []
    for case in cases:
        if task.target not in case.modalities:
            continue
        s = case.stacked(task.sources)
        t = case.stacked([task.target])
        keep = (s.reshape(len(s), -1) != 0).any(axis=1)
        src.append(s[keep])
        tgt.append(t[keep])
    if not src:
        raise DataError(f"no cases provide paired data for task {task.name}")
    return np.concatenate(src), np.concatenate(tgt)


@dataclass
class SynthesisRun:
    generator: FCN
    discriminator: Discriminator
    losses: list = field(default_factory=list)   # rows: step, g_loss, d_loss, l1, psnr_holdout
    baseline_psnr: float = float("nan")

    def psnr_series(self):
        return [(r[0], r[4]) for r in self.losses if not math.isnan(r[4])]


def synthesize_slices(model, task, sources, seed=0, batch=64):
    """Evaluation-mode synthesis with a seeded noise stream; output clipped to [0, 1]."""
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    out = []
    with torch.no_grad():
        for i in range(0, len(sources), batch):
            s = torch.from_numpy(np.ascontiguousarray(sources[i:i + batch]))
            out.append(generator_forward(model, task, s, generator=gen).clamp(0, 1).numpy())
    y = np.concatenate(out) if out else np.zeros((0, 1) + sources.shape[2:], np.float32)
    # background stays empty where every source is empty
    y[(sources == 0).all(axis=1, keepdims=True)] = 0.0
    return y


def holdout_psnr(model, task, sources, target, seed=0):
    return psnr(synthesize_slices(model, task, sources, seed), target)


def copy_baseline_psnr(sources, target):
    """Best PSNR obtained by passing one source channel through unchanged."""
    return max(psnr(sources[:, [i]], target) for i in range(sources.shape[1]))


def train_synthesizer(task, train_cases, cfg, holdout_cases=None, objective=None):
    objective = objective or GanObjective()
    src, tgt = paired_slices(train_cases, task)
    if len(src) == 0:
        raise DataError("training set is empty")
    hold = paired_slices(holdout_cases, task) if holdout_cases else None

    torch.manual_seed(cfg.seed)
    G = build_generator(task, cfg)
    D = build_discriminator(task, cfg)
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.lr_g, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr_d, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 1)
    run = SynthesisRun(G, D)
    if hold is not None:
        run.baseline_psnr = copy_baseline_psnr(*hold)
        run.losses.append([0, float("nan"), float("nan"), float("nan"), holdout_psnr(G, task, *hold, seed=cfg.seed)])

    src_t, tgt_t = torch.from_numpy(src), torch.from_numpy(tgt)
    for step in range(1, cfg.steps + 1):
        G.train()
        D.train()
        idx = torch.from_numpy(rng.integers(0, len(src), size=cfg.batch))
        s, t = src_t[idx], tgt_t[idx]
        fake = generator_forward(G, task, s, generator=noise_gen)

        opt_d.zero_grad()
        d_loss = discriminator_loss(discriminator_forward(D, s, t),
                                    discriminator_forward(D, s, fake.detach()))
        d_loss.backward()
        opt_d.step()

        opt_g.zero_grad()
        g_loss, l1 = generator_loss(objective, discriminator_forward(D, s, fake), fake, t)
        g_loss.backward()
        opt_g.step()

        score = float("nan")
        if hold is not None and (step % cfg.eval_every == 0 or step == cfg.steps):
            score = holdout_psnr(G, task, *hold, seed=cfg.seed)
        run.losses.append([step, g_loss.item(), d_loss.item(), l1.item(), score])
    G.eval()
    D.eval()
    return run


def write_loss_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "g_loss", "d_loss", "l1", "psnr_holdout"])
        for step, g, d, l1, p in rows:
            w.writerow([step] + ["" if math.isnan(v) else f"{v:.8g}" for v in (g, d, l1, p)])


def save_generator(run_or_model, task, path):
    model = getattr(run_or_model, "generator", run_or_model)
    return save_checkpoint(model, path, extra={"task": {"sources": list(task.sources), "target": task.target,
                                                        "noise_channels": task.noise_channels}})


def load_generator(path):
    model, extra = load_checkpoint(path)
    t = extra["task"]
    return model, SynthesisTask(tuple(t["sources"]), t["target"], t["noise_channels"])


# ---------------------------------------------------------------- completion


class UnfillableModalityError(DataError):
    def __init__(self, case_id, missing, available):
        self.missing, self.available = list(missing), list(available)
        super().__init__(f"case {case_id}: no generator synthesizes {self.missing} "
                         f"from available modalities {self.available}")


def synthesize_missing(case, generators, required, seed=0):
    """Fill every modality in ``required`` absent from ``case``.

    ``generators`` is a list of (model, SynthesisTask). For each missing target
    the task using the most available sources wins; filled volumes are tagged
    "synthesized" and may feed later tasks.
    """
    if not case.modalities:
        raise DataError(f"case {case.case_id} has no real modality to synthesize from")
    out = CaseRecord(case.case_id, dict(case.modalities), dict(case.provenance), case.mask,
                     case.genes, case.survival_days, case.age, dict(case.factors))
    missing = [m for m in required if m not in out.modalities]
    while missing:
        best = None
        for model, task in generators:
            if task.target in missing and all(s in out.modalities for s in task.sources):
                key = (len(task.sources), sum(out.provenance.get(s) == "real" for s in task.sources))
                if best is None or key > best[0]:
                    best = (key, model, task)
        if best is None:
            raise UnfillableModalityError(case.case_id, missing, sorted(out.modalities))
        _, model, task = best
        ref = out.modalities[task.sources[0]]
        src = out.stacked(task.sources)
        slices = synthesize_slices(model, task, src, seed)
        vol = slices[:, 0].transpose(1, 2, 0).astype(np.float32)
        out.modalities[task.target] = ref.like(vol)
        out.provenance[task.target] = "synthesized"
        missing.remove(task.target)
        log.info("case %s: synthesized %s via %s", case.case_id, task.target, task.name)
    return out.check()
