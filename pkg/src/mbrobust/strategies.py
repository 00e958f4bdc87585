"""Training methods: clean-only, input-space PGD, AugMix, and the model-based family.

Every non-clean method pairs each clean image with one corrupted counterpart
and minimises the sum of the two cross-entropy losses. The model-based
methods differ only in how they choose the nuisance code for that
counterpart:

    MDA   one uniform draw per sample
    MRT   worst (highest loss) of k draws per sample
    MAT   T steps of projected gradient ascent from the box centre
    MDAT  MAT started from an MDA draw
    MRAT  MAT started from the MRT choice

The inner routines treat the classifier weights as constants and work per
sample: each image gets its own code, chosen on its own loss.
"""
from __future__ import annotations

import hashlib
import json
import re
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .augment import augmix
from .classifier import (
    AdadeltaState,
    ArchConfig,
    ClassifierParams,
    adadelta_step,
    cross_entropy,
    forward,
    init_classifier,
    per_sample_cross_entropy,
)
from .nuisance import (
    DEFAULT_RHO_UNIT,
    NuisanceBasis,
    SeveritySpace,
    apply,
    corrupt,
    make_basis,
    project,
    sample_uniform,
)
from .tensor import Tape, Tensor

BASELINES = ("Vanilla", "AT", "AugMix")
MODEL_BASED = ("MDA", "MRT", "MAT", "MDAT", "MRAT")
METHODS = BASELINES + MODEL_BASED
_NAME_RE = re.compile(r"^(Vanilla|AT|AugMix|MDAT|MRAT|MDA|MRT|MAT)([0-5])?$")

PAPER_EPOCHS = 100
PAPER_BATCH_SIZE = 64


def parse_method_name(name: str) -> tuple[str, int | None]:
    """``"MDA5"`` -> ``("MDA", 5)``; ``"Vanilla"`` -> ``("Vanilla", None)``."""
    m = _NAME_RE.match(str(name).strip())
    if not m:
        raise ValueError(f"unrecognised method name {name!r}; expected one of {METHODS}, "
                         "model-based names optionally suffixed with a severity 0-5")
    base, level = m.group(1), m.group(2)
    if base in BASELINES and level is not None:
        raise ValueError(f"{base} has no training severity; got {name!r}")
    return base, None if level is None else int(level)


def method_label(method: str, level: int | None) -> str:
    return method if method in BASELINES else f"{method}{level}"


@dataclass(frozen=True)
class NuisanceSpec:
    """Seeded recipe for a variation-model basis; masks are regenerated, never stored."""

    kind: str = "snow"
    dim: int = 16
    seed: int = 0
    rho_unit: float | None = None

    @property
    def unit(self) -> float:
        return DEFAULT_RHO_UNIT[self.kind] if self.rho_unit is None else float(self.rho_unit)

    def basis(self, size: int = 32, channels: int = 3) -> NuisanceBasis:
        return make_basis(self.kind, self.dim, self.seed, size, channels)

    def space(self, level: int) -> SeveritySpace:
        return SeveritySpace.at_level(self.kind, level, self.dim, self.unit)


@dataclass(frozen=True)
class StrategyConfig:
    method: str = "Vanilla"
    k: int = 10
    T: int = 10
    eta_z: float | None = None  # None -> rho / T
    z_step: str = "raw"  # raw | normalized | sign
    mat_init: str = "center"  # center | zero
    R: int = 10
    epsilon: float = 8 / 255
    alpha: float = 0.01
    severity_level: int = 0
    rng_seed: int = 0
    nuisance: NuisanceSpec = field(default_factory=NuisanceSpec)
    augmix_width: int = 3
    augmix_depth: int = 3
    augmix_alpha: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method in ("MRT", "MRAT") and self.k < 1:
            raise ValueError(f"{self.method} needs k >= 1, got {self.k}")
        if self.method in ("MAT", "MDAT", "MRAT") and self.T < 0:
            raise ValueError(f"{self.method} needs T >= 0, got {self.T}")
        if self.R < 0:
            raise ValueError(f"R must be >= 0, got {self.R}")
        if self.z_step not in ("raw", "normalized", "sign"):
            raise ValueError(f"z_step must be raw, normalized or sign, got {self.z_step!r}")
        if self.mat_init not in ("center", "zero"):
            raise ValueError(f"mat_init must be center or zero, got {self.mat_init!r}")
        if not 0 <= self.severity_level <= 5:
            raise ValueError(f"severity_level must be in 0..5, got {self.severity_level}")

    @classmethod
    def from_name(cls, name: str, **kwargs) -> "StrategyConfig":
        method, level = parse_method_name(name)
        if level is not None:
            kwargs["severity_level"] = level
        return cls(method=method, **kwargs)

    @property
    def label(self) -> str:
        return method_label(self.method, self.severity_level)

    def space(self) -> SeveritySpace:
        return self.nuisance.space(self.severity_level)

    def step_size(self, space: SeveritySpace) -> float:
        if self.eta_z is not None:
            return float(self.eta_z)
        return space.rho / self.T if self.T > 0 else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def expected_passes(config: StrategyConfig) -> int:
    """Classifier forward passes per training batch for ``config``.

    Two passes train on the clean and corrupted batch (one for Vanilla). The
    inner work adds R for input PGD, k for scoring the worst-of-k candidates,
    and T + 1 for the z ascent (T gradient steps plus the acceptance check of
    the last proposal).
    """
    m = config.method
    if m == "Vanilla":
        return 1
    inner = 0
    if m == "AT":
        inner = config.R
    if m in ("MRT", "MRAT"):
        inner += config.k
    if m in ("MAT", "MDAT", "MRAT") and config.T > 0:
        inner += config.T + 1
    return 2 + inner


# inner maximisation


def sample_losses(params: ClassifierParams, basis: NuisanceBasis, x, y, z) -> np.ndarray:
    """Per-sample loss of the corrupted batch; one untracked classifier pass."""
    logits = forward(params.frozen(), apply(basis, x, z))
    return per_sample_cross_entropy(logits, y).data


def loss_and_grad_z(params: ClassifierParams, basis: NuisanceBasis, x, y, z) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and their gradients with respect to each sample's code."""
    zt = Tensor(np.asarray(z, dtype=np.float32), requires_grad=True)
    with Tape() as tape:
        losses = per_sample_cross_entropy(forward(params.frozen(), apply(basis, x, zt)), y)
        total = T.sum_all(losses)
    params.counter.backward += 1
    return losses.data, tape.gradient(total, [zt])[0]


def inner_mda(x, y, params, basis, space: SeveritySpace, rng: np.random.Generator) -> np.ndarray:
    return sample_uniform(space, rng, len(x))


def inner_mrt(x, y, params, basis, space: SeveritySpace, k: int, rng: np.random.Generator) -> np.ndarray:
    """Highest-loss code among k uniform draws, per sample; ties keep the earliest draw."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    best = sample_uniform(space, rng, len(x))
    best_loss = sample_losses(params, basis, x, y, best)
    for _ in range(k - 1):
        cand = sample_uniform(space, rng, len(x))
        loss = sample_losses(params, basis, x, y, cand)
        better = loss > best_loss
        best[better] = cand[better]
        best_loss = np.where(better, loss, best_loss)
    return best


def _ascent_direction(grad: np.ndarray, rule: str) -> np.ndarray:
    if rule == "raw":
        return grad
    if rule == "sign":
        return np.sign(grad)
    scale = np.abs(grad).max(axis=1, keepdims=True)
    return np.divide(grad, scale, out=np.zeros_like(grad), where=scale > 0)


def inner_mat(x, y, params, basis, space: SeveritySpace, T_steps: int, eta_z: float, z0,
              rule: str = "raw", trace: list | None = None) -> np.ndarray:
    """Projected gradient ascent in z with monotone per-sample acceptance.

    A proposal that lowers a sample's loss is rejected: that sample keeps its
    previous code and halves its step. ``trace``, when given, collects every
    iterate (including ``z0``).
    """
    z = np.array(z0, dtype=np.float32, copy=True)
    if trace is not None:
        trace.append(z.copy())
    if T_steps <= 0:
        return z
    loss, grad = loss_and_grad_z(params, basis, x, y, z)
    step = np.full((len(z), 1), eta_z, dtype=np.float32)
    for t in range(T_steps):
        proposal = project(space, z + step * _ascent_direction(grad, rule))
        if t == T_steps - 1:
            new_loss, new_grad = sample_losses(params, basis, x, y, proposal), None
        else:
            new_loss, new_grad = loss_and_grad_z(params, basis, x, y, proposal)
        accept = new_loss >= loss
        z[accept] = proposal[accept]
        loss = np.where(accept, new_loss, loss)
        if new_grad is not None:
            grad[accept] = new_grad[accept]
        step[~accept] *= 0.5
        if trace is not None:
            trace.append(z.copy())
    return z


def mat_start(space: SeveritySpace, n: int, how: str = "center") -> np.ndarray:
    value = space.center if how == "center" else 0.0
    return project(space, np.full((n, space.dim), value, dtype=np.float32))


def inner_mdat(x, y, params, basis, space, T_steps, eta_z, rng, rule="raw") -> np.ndarray:
    z0 = inner_mda(x, y, params, basis, space, rng)
    return inner_mat(x, y, params, basis, space, T_steps, eta_z, z0, rule)


def inner_mrat(x, y, params, basis, space, k, T_steps, eta_z, rng, rule="raw") -> np.ndarray:
    z0 = inner_mrt(x, y, params, basis, space, k, rng)
    return inner_mat(x, y, params, basis, space, T_steps, eta_z, z0, rule)


def at_pgd(x, y, params: ClassifierParams, epsilon: float, alpha: float, R: int,
           rng: np.random.Generator) -> np.ndarray:
    """L-inf PGD in input space from a uniform start; returns the perturbation.

    After every step the perturbation is clipped to the epsilon ball and then
    to ``[-x, 1 - x]``, so ``x + delta`` stays a valid image.
    """
    x = np.asarray(x, dtype=np.float32)
    eps = np.float32(epsilon)
    lo, hi = -x, np.float32(1.0) - x

    def feasible(d):
        return np.clip(np.clip(d, -eps, eps), lo, hi)

    delta = feasible(rng.uniform(-epsilon, epsilon, size=x.shape).astype(np.float32))
    frozen = params.frozen()
    for _ in range(R):
        xt = Tensor(x + delta, requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(per_sample_cross_entropy(forward(frozen, xt), y))
        params.counter.backward += 1
        g = tape.gradient(loss, [xt])[0]
        delta = feasible(delta + np.float32(alpha) * np.sign(g).astype(np.float32))
    return delta


# training


def corrupted_batch(x, y, params: ClassifierParams, config: StrategyConfig,
                    basis: NuisanceBasis | None, space: SeveritySpace | None,
                    rng: np.random.Generator) -> np.ndarray | None:
    """The corrupted counterpart of a clean batch, or None for Vanilla."""
    m = config.method
    if m == "Vanilla":
        return None
    if m == "AT":
        return np.clip(x + at_pgd(x, y, params, config.epsilon, config.alpha, config.R, rng), 0.0, 1.0)
    if m == "AugMix":
        return augmix(x, rng, config.augmix_width, config.augmix_depth, config.augmix_alpha)
    eta = config.step_size(space)
    if m == "MDA":
        z = inner_mda(x, y, params, basis, space, rng)
    elif m == "MRT":
        z = inner_mrt(x, y, params, basis, space, config.k, rng)
    elif m == "MAT":
        z = inner_mat(x, y, params, basis, space, config.T, eta, mat_start(space, len(x), config.mat_init),
                      config.z_step)
    elif m == "MDAT":
        z = inner_mdat(x, y, params, basis, space, config.T, eta, rng, config.z_step)
    else:
        z = inner_mrat(x, y, params, basis, space, config.k, config.T, eta, rng, config.z_step)
    return corrupt(basis, x, z)


def train_step(batch, params: ClassifierParams, opt_state: AdadeltaState, config: StrategyConfig,
               basis: NuisanceBasis | None, space: SeveritySpace | None,
               rng: np.random.Generator) -> tuple[float, float]:
    """One optimiser step on clean + corrupted loss; returns both loss values."""
    x, y = batch
    if len(x) == 0:
        raise ValueError("empty batch")
    x = np.asarray(x, dtype=np.float32)
    x_c = corrupted_batch(x, y, params, config, basis, space, rng)
    leaves = params.leaves()
    with Tape() as tape:
        loss_clean = cross_entropy(forward(params, Tensor(x)), y)
        if x_c is None:
            total, loss_corr = loss_clean, None
        else:
            loss_corr = cross_entropy(forward(params, Tensor(x_c)), y)
            total = T.add(loss_clean, loss_corr)
    params.counter.backward += 1
    adadelta_step(params, tape.gradient(total, leaves), opt_state)
    return float(loss_clean.data), 0.0 if loss_corr is None else float(loss_corr.data)


@dataclass
class TrainReport:
    params: ClassifierParams
    epoch_losses: list[float] = field(default_factory=list)
    batch_seconds: list[float] = field(default_factory=list)
    batch_passes: list[int] = field(default_factory=list)
    rng_checksum: str = ""

    @property
    def batches(self) -> int:
        return len(self.batch_seconds)


def _rng_checksum(*rngs: np.random.Generator) -> str:
    state = [r.bit_generator.state for r in rngs]
    return hashlib.sha256(json.dumps(state, sort_keys=True, default=int).encode()).hexdigest()[:16]


def rng_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(shuffle, inner) generators derived from one seed."""
    a, b = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def train(config: StrategyConfig, dataset, epochs: int = PAPER_EPOCHS, batch_size: int = PAPER_BATCH_SIZE,
          arch: ArchConfig | None = None, params: ClassifierParams | None = None,
          lr: float = 1.0, rho: float = 0.9, eps: float = 1e-6) -> TrainReport:
    """Train a classifier with ``config``'s method; deterministic in ``config.rng_seed``.

    ``dataset`` is any object with ``images`` (N, C, H, W) and ``labels`` (N,).
    """
    images = np.asarray(dataset.images, dtype=np.float32)
    labels = np.asarray(dataset.labels)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if params is None:
        n_classes = arch.n_classes if arch is not None else int(labels.max()) + 1
        params = init_classifier(config.rng_seed, n_classes, images.shape[1:], arch)
    opt = AdadeltaState.for_params(params, rho=rho, eps=eps, lr=lr)
    basis = space = None
    if config.method in MODEL_BASED:
        basis = config.nuisance.basis(images.shape[-1], images.shape[1])
        space = config.space()
    shuffle_rng, inner_rng = rng_streams(config.rng_seed)
    report = TrainReport(params)
    for _ in range(epochs):
        order = shuffle_rng.permutation(len(images))
        total, n = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            before = params.counter.forward
            t0 = time.perf_counter()
            lc, la = train_step((images[idx], labels[idx]), params, opt, config, basis, space, inner_rng)
            report.batch_seconds.append(time.perf_counter() - t0)
            report.batch_passes.append(params.counter.forward - before)
            total += (lc + la) * len(idx)
            n += len(idx)
        report.epoch_losses.append(total / n)
    report.rng_checksum = _rng_checksum(shuffle_rng, inner_rng)
    return report


def with_method(config: StrategyConfig, name: str) -> StrategyConfig:
    method, level = parse_method_name(name)
    return replace(config, method=method, severity_level=config.severity_level if level is None else level)
