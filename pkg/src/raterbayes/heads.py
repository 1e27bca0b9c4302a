"""Approximate-inference heads and predictive sampling.

Three schemes over the segmentation network:

* mean-field Gaussian 1x1 output head (neural linear) trained with the
  local reparameterization trick,
* MC dropout (dropout kept active at prediction time),
* deep ensembles (averaging independently trained deterministic nets).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import unet
from .errors import ConfigError, DimensionError
from .tensor import Tensor

SCHEMES = ("neural_linear", "mc_dropout", "deep_ensemble")


def softplus_sigma(rho: float) -> float:
    """ln(1 + e^rho), overflow-safe: for rho > 30 the identity branch."""
    if rho > 30.0:
        return float(rho)
    return float(np.log1p(np.exp(rho)))


@dataclass(frozen=True)
class PriorConfig:
    prior_mean: float = 0.0
    prior_std: float = 1.0

    def __post_init__(self):
        if self.prior_std <= 0:
            raise ConfigError("prior_std must be positive")


@dataclass(frozen=True)
class SamplerConfig:
    mc_samples: int = 20      # T
    ensemble_size: int = 20   # J
    binarize_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.mc_samples < 1 or self.ensemble_size < 1:
            raise ConfigError("mc_samples and ensemble_size must be >= 1")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ConfigError("binarize_threshold must lie in (0, 1)")


class MeanFieldGaussianHead:
    """Factorized Gaussian over the 1x1 output filter weights.

    mu, rho are (I, O); sigma = softplus(rho). The bias stays
    deterministic: uncertainty is placed on the filter weights only.
    Initialization: mu ~ N(0, 0.05), rho ~ N(-4, 0.05).
    """

    def __init__(self, in_features: int, num_classes: int, rng: np.random.Generator,
                 prior: PriorConfig = PriorConfig()):
        self.in_features = in_features
        self.num_classes = num_classes
        self.prior = prior
        self.mu = Tensor(rng.normal(0.0, 0.05, size=(in_features, num_classes)), requires_grad=True)
        self.rho = Tensor(rng.normal(-4.0, 0.05, size=(in_features, num_classes)), requires_grad=True)
        self.bias = Tensor(np.zeros(num_classes), requires_grad=True)

    def parameters(self):
        return [self.mu, self.rho, self.bias]

    def sigma(self) -> np.ndarray:
        r = self.rho.data
        return np.where(r > 30.0, r, np.log1p(np.exp(np.minimum(r, 30.0))))

    def state_arrays(self) -> dict:
        return {"head.mu": self.mu.data, "head.rho": self.rho.data, "head.bias": self.bias.data}

    def copy_state(self) -> dict:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def load_state(self, state: dict):
        self.mu.data = state["head.mu"].copy()
        self.rho.data = state["head.rho"].copy()
        self.bias.data = state["head.bias"].copy()

    @classmethod
    def from_arrays(cls, arrays: dict, prior: PriorConfig = PriorConfig()) -> "MeanFieldGaussianHead":
        i, o = arrays["head.mu"].shape
        head = cls(i, o, np.random.default_rng(0), prior)
        head.load_state(arrays)
        return head


def kl_mean_field(head: MeanFieldGaussianHead) -> Tensor:
    """Closed-form KL from the factorized Gaussian posterior to the prior.

    Sum over weights of ln(s_p/sigma) + (sigma^2 + (mu - m_p)^2) / (2 s_p^2) - 1/2,
    differentiable w.r.t. mu and rho.
    """
    mp, sp = head.prior.prior_mean, head.prior.prior_std
    sigma = T.softplus(head.rho)
    var = sigma * sigma
    dm = head.mu - mp
    term = (np.log(sp) - T.log(sigma)) + (var + dm * dm) * (1.0 / (2.0 * sp * sp)) + (-0.5)
    return term.sum()


def local_reparam_forward(features: Tensor, head: MeanFieldGaussianHead,
                          rng: np.random.Generator) -> Tensor:
    """Sample the stochastic 1x1-head activations directly.

    Per pixel and class j: mean m_j = sum_i z_i mu_ij + b_j and
    std s_j = sqrt(sum_i z_i^2 sigma_ij^2); returns m + eps * s with
    eps ~ N(0,1) drawn independently per (pixel, class, call).
    """
    if features.shape[1] != head.in_features:
        raise DimensionError(
            f"feature channels {features.shape[1]} != head in_features {head.in_features}")
    o = head.num_classes
    i = head.in_features
    mu_k = head.mu.transpose((1, 0)).reshape((o, i, 1, 1))
    sigma = T.softplus(head.rho)
    var_k = (sigma * sigma).transpose((1, 0)).reshape((o, i, 1, 1))
    zero_b = Tensor(np.zeros(o))
    m = T.conv2d(features, mu_k, head.bias)
    v = T.conv2d(features * features, var_k, zero_b)
    s = T.sqrt(v)
    eps = Tensor(rng.standard_normal(m.shape))
    return m + eps * s


def mean_forward(features: Tensor, head: MeanFieldGaussianHead) -> Tensor:
    """Deterministic 1x1 conv with the variational means (sigma -> 0 limit)."""
    o, i = head.num_classes, head.in_features
    mu_k = head.mu.transpose((1, 0)).reshape((o, i, 1, 1))
    return T.conv2d(features, mu_k, head.bias)


@dataclass
class MaskEnsemble:
    """A set of binary masks over one image: predictive samples or raters."""

    masks: list
    source: str = "predictive"
    image_id: str = ""

    def __post_init__(self):
        if not self.masks:
            raise ConfigError("MaskEnsemble needs at least one mask")
        shape = self.masks[0].shape
        clean = []
        for m in self.masks:
            m = np.asarray(m)
            if m.shape != shape:
                raise DimensionError("all masks in an ensemble must share one shape")
            if not np.isin(m, (0, 1)).all():
                raise ConfigError("masks must be binary")
            clean.append(m.astype(np.uint8))
        self.masks = clean

    def __len__(self):
        return len(self.masks)


def binarize(prob_map: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Foreground where the probability strictly exceeds the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError("binarize threshold must lie in (0, 1)")
    return (np.asarray(prob_map) > threshold).astype(np.uint8)


def foreground_prob(probs_khw: np.ndarray, level: int = 1) -> np.ndarray:
    """P(class >= level) for nested class labelings; level 1 for binary."""
    if not 1 <= level < probs_khw.shape[0]:
        raise ConfigError(f"level must lie in [1, {probs_khw.shape[0] - 1}]")
    return probs_khw[level:].sum(axis=0)


def sample_predictive(model, x: Tensor, cfg: SamplerConfig, scheme: str,
                      head: MeanFieldGaussianHead | None = None,
                      rng: np.random.Generator | None = None) -> list:
    """T stochastic forward passes; each result a (K, H, W) probability map.

    neural_linear resamples the head activations per pass; mc_dropout
    keeps dropout active at prediction time. x must be a single image
    batch (1, C, H, W).
    """
    if scheme == "neural_linear":
        if head is None:
            raise ConfigError("neural_linear sampling requires a MeanFieldGaussianHead")
    elif scheme == "mc_dropout":
        if head is not None:
            raise ConfigError("mc_dropout sampling takes no stochastic head")
        if not model.has_head:
            raise ConfigError("mc_dropout requires a model with a deterministic head")
    else:
        raise ConfigError(f"sample_predictive does not handle scheme {scheme!r}")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    maps = []
    if scheme == "neural_linear":
        feats = unet.forward_features(model, x, dropout_active=False)
        feats = Tensor(feats.data)  # frozen features; no graph growth across samples
        for _ in range(cfg.mc_samples):
            logits = local_reparam_forward(feats, head, rng)
            maps.append(T.softmax_channels(logits).data[0])
    else:
        for _ in range(cfg.mc_samples):
            logits = unet.forward_logits(model, x, dropout_active=True, rng=rng)
            maps.append(T.softmax_channels(logits).data[0])
    return maps


def ensemble_predict(models: list, x: Tensor, cfg: SamplerConfig):
    """One deterministic forward per member; returns (maps, mean map)."""
    if not models:
        raise ConfigError("ensemble_predict needs at least one member")
    cfg0 = models[0].config
    for m in models:
        if m.config != cfg0:
            raise ConfigError("ensemble members must share one UNetConfig")
    maps = [T.softmax_channels(unet.forward_logits(m, x)).data[0] for m in models]
    return maps, sum(maps) / len(maps)
