"""Training for the three inference schemes.

Neural-linear heads minimize the negative MC-ELBO (cross entropy of the
locally reparameterized head plus a scaled closed-form KL); MC-dropout
and ensemble members minimize plain cross entropy. Optimization is Adam
with cosine annealing; early stopping keeps the parameters from the
epoch with the best mean validation Dice against the rater consensus.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from . import unet
from .errors import ConfigError, DataError, DimensionError
from .heads import (MeanFieldGaussianHead, SamplerConfig, binarize,
                    foreground_prob, kl_mean_field, local_reparam_forward,
                    sample_predictive)
from .metrics import dice
from .synth import Case, MultiRaterDataset, build_consensus  # noqa: F401  (re-export)
from .tensor import Tensor
from .util import parallel_map

STRATEGIES = ("per_expert", "all_experts", "consensus")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 300
    batch_size: int = 8
    mc_samples_T_train: int = 1
    kl_scale: float | None = None          # None -> 1 / batches-per-epoch
    scheme: str = "deep_ensemble"
    sampling_strategy: str = "all_experts"  # or "consensus" or "per_expert:N"
    seed: int = 0
    ensemble_members: int = 20             # J, deep_ensemble only
    val_mc_samples: int = 5                # predictive samples for validation Dice
    val_interval: int = 1                  # validate every n-th epoch

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("learning_rate > 0, batch_size >= 1, epochs >= 1 required")
        if self.scheme not in ("neural_linear", "mc_dropout", "deep_ensemble"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        base = self.sampling_strategy.split(":")[0]
        if base not in STRATEGIES:
            raise ConfigError(f"unknown sampling strategy {self.sampling_strategy!r}")
        if self.mc_samples_T_train < 1:
            raise ConfigError("mc_samples_T_train must be >= 1")

    def rater_index(self) -> int | None:
        if self.sampling_strategy.startswith("per_expert"):
            parts = self.sampling_strategy.split(":")
            if len(parts) != 2:
                raise ConfigError("per_expert strategy needs a rater id, e.g. 'per_expert:2'")
            return int(parts[1])
        return None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    val_dice: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    models: list                     # 1 model, or J for deep_ensemble
    heads: list                      # parallel to models; None entries unless neural_linear
    histories: list
    config: TrainConfig


# -- objective pieces ----------------------------------------------------


def cosine_lr(epoch: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    """lr_min + (lr_max - lr_min) (1 + cos(pi epoch/total)) / 2."""
    if not 0 <= epoch <= total:
        raise ConfigError(f"epoch {epoch} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * epoch / total))


class AdamState:
    """First/second moment buffers with bias correction (b1=.9, b2=.999)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0


def adam_step(params, grads, state: AdamState, lr: float):
    """One Adam update over parallel lists of arrays; params updated in place."""
    if len(params) != len(grads):
        raise DimensionError("adam_step: params/grads length mismatch")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise DimensionError(f"adam_step: param {i} shape {p.shape} != grad shape {g.shape}")
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p)
            state.v[i] = np.zeros_like(p)
        v = state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def elbo_loss(model, head: MeanFieldGaussianHead, images: Tensor, targets: np.ndarray,
              mc_samples: int, kl_scale: float, rng: np.random.Generator) -> Tensor:
    """Negative MC-ELBO: mean-over-T cross entropy plus scaled closed-form KL."""
    if mc_samples < 1:
        raise ConfigError("elbo_loss needs mc_samples >= 1")
    feats = unet.forward_features(model, images)
    ce = None
    for _ in range(mc_samples):
        logits = local_reparam_forward(feats, head, rng)
        term = T.cross_entropy(T.softmax_channels(logits), targets)
        ce = term if ce is None else ce + term
    loss = ce * (1.0 / mc_samples)
    if kl_scale != 0.0:
        loss = loss + kl_mean_field(head) * kl_scale
    return loss


# -- data plumbing -------------------------------------------------------


def case_target(case: Case, masks: dict, structures) -> np.ndarray:
    """Class-id map from nested structure masks (class = containment depth)."""
    target = np.zeros(case.image.shape, dtype=np.int64)
    for s in structures:
        target += masks[s].astype(np.int64)
    return target


def draw_training_target(case: Case, strategy: str, rng: np.random.Generator,
                         structures) -> np.ndarray:
    """Pick the epoch's training target for one case under a sampling strategy."""
    base = strategy.split(":")[0]
    if base == "consensus":
        return case_target(case, case.consensus, structures)
    if base == "per_expert":
        r = int(strategy.split(":")[1])
        if r >= case.num_annotations:
            raise ConfigError(f"rater id {r} out of range (case has {case.num_annotations})")
        return case_target(case, case.annotations[r], structures)
    r = int(rng.integers(case.num_annotations))
    return case_target(case, case.annotations[r], structures)


def _batches(cases, batch_size):
    for i in range(0, len(cases), batch_size):
        yield cases[i:i + batch_size]


# -- validation ----------------------------------------------------------


def _predict_mean_map(model, head, scheme, image, n_samples, rng, threshold=0.5):
    x = Tensor(image[None, None])
    if scheme == "neural_linear" or scheme == "mc_dropout":
        cfg = SamplerConfig(mc_samples=n_samples, ensemble_size=1, binarize_threshold=threshold)
        maps = sample_predictive(model, x, cfg, scheme,
                                 head=head if scheme == "neural_linear" else None, rng=rng)
        return sum(maps) / len(maps)
    logits = unet.forward_logits(model, x)
    return T.softmax_channels(logits).data[0]


def validation_dice(model, head, scheme, cases, structures, n_samples,
                    rng, threshold=0.5) -> float:
    """Mean Dice of the binarized mean predictive map vs the consensus."""
    scores = []
    for case in cases:
        mean_map = _predict_mean_map(model, head, scheme, case.image, n_samples, rng, threshold)
        for level, s in enumerate(structures, start=1):
            pred = binarize(foreground_prob(mean_map, level), threshold)
            scores.append(dice(pred, case.consensus[s]))
    return float(np.mean(scores))


# -- training loop -------------------------------------------------------


def _train_single(dataset: MultiRaterDataset, unet_cfg: unet.UNetConfig,
                  cfg: TrainConfig, scheme: str, seed: int):
    train_cases = dataset.split("train")
    val_cases = dataset.split("val")
    if not train_cases:
        raise DataError("training split is empty")
    structures = dataset.structures

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB41E5)))
    neural_linear = scheme == "neural_linear"
    model = unet.build(unet_cfg, rng, with_head=not neural_linear)
    head = None
    params = model.parameters()
    if neural_linear:
        head = MeanFieldGaussianHead(unet_cfg.head_features, unet_cfg.num_classes, rng)
        params = params + head.parameters()

    n_batches = int(np.ceil(len(train_cases) / cfg.batch_size))
    kl_scale = cfg.kl_scale if cfg.kl_scale is not None else 1.0 / n_batches
    adam = AdamState()
    history = TrainHistory()
    best = (-1.0, None, None)  # (val dice, model state, head state)

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.learning_rate)
        order = rng.permutation(len(train_cases))
        epoch_loss = 0.0
        for batch_idx in _batches(order, cfg.batch_size):
            batch = [train_cases[i] for i in batch_idx]
            images = Tensor(np.stack([c.image for c in batch])[:, None])
            targets = np.stack([draw_training_target(c, cfg.sampling_strategy, rng, structures)
                                for c in batch])
            if neural_linear:
                loss = elbo_loss(model, head, images, targets, cfg.mc_samples_T_train,
                                 kl_scale, rng)
            else:
                logits = unet.forward_logits(model, images,
                                             dropout_active=(scheme == "mc_dropout"), rng=rng)
                loss = T.cross_entropy(T.softmax_channels(logits), targets)
            for p in params:
                p.zero_grad()
            loss.backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            adam_step([p.data for p in params], grads, adam, lr)
            epoch_loss += float(loss.data)
        history.loss.append(epoch_loss / n_batches)
        history.lr.append(lr)

        if val_cases and (epoch % cfg.val_interval == 0 or epoch == cfg.epochs - 1):
            vrng = np.random.default_rng(np.random.SeedSequence((seed, 0x7A1, epoch)))
            vd = validation_dice(model, head, scheme, val_cases, structures,
                                 cfg.val_mc_samples, vrng)
        else:
            vd = history.val_dice[-1] if history.val_dice else 0.0
        history.val_dice.append(vd)
        if val_cases and vd > best[0]:
            best = (vd, model.copy_state(),
                    head.copy_state() if head is not None else None)
            history.best_epoch = epoch

    if best[1] is not None:
        model.load_state(best[1])
        if head is not None and best[2] is not None:
            head.load_state(best[2])
    return model, head, history


def train(dataset: MultiRaterDataset, unet_cfg: unet.UNetConfig, cfg: TrainConfig) -> TrainResult:
    """Train under the configured scheme; deep ensembles are J independent runs."""
    if cfg.scheme == "deep_ensemble":
        seeds = [cfg.seed + 1000 * j for j in range(cfg.ensemble_members)]
        results = parallel_map(
            lambda s: _train_single(dataset, unet_cfg, cfg, "deep_ensemble", s), seeds)
        models = [r[0] for r in results]
        heads = [None] * len(models)
        histories = [r[2] for r in results]
    else:
        model, head, history = _train_single(dataset, unet_cfg, cfg, cfg.scheme, cfg.seed)
        models, heads, histories = [model], [head], [history]
    return TrainResult(models=models, heads=heads, histories=histories, config=cfg)
