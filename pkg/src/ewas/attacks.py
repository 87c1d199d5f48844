"""White-box l-infinity attacks: FGSM, PGD-k, and margin-loss (C&W style).

All attacks share one driver, ``pgd``: signed-gradient ascent on an
objective, projected after every step onto the intersection of the
epsilon-ball around the clean input and the [0, 1] pixel box. FGSM is
exactly ``pgd`` with one full-epsilon step and no random start; the
margin attack is ``pgd`` ascending the negated margin.

When the model carries scaling modules, the objective can include their
classifier losses weighted by ``lambda_attack``; with ``lambda_attack``
equal to 0 the objective is the plain backbone loss, bit for bit.

Conventions: sign(0) = 0, so dead coordinates are never perturbed;
random starts draw each coordinate uniformly from [-epsilon, epsilon];
mask selection follows the deployed inference path unless
``mask_mode="training"`` is configured. A model's parameters and
batch-norm statistics are never mutated by an attack.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    backward,
    gather_labels,
    masked_rowmax,
    maximum_scalar,
    no_grad,
    softmax_cross_entropy,
    tmean,
)

LOSS_KINDS = ("cross_entropy", "combined", "cw_margin")


@dataclass
class AttackConfig:
    """Attack hyperparameters; ``name`` labels rows in evaluation output.

    ``loss_kind="combined"`` is an alias of ``"cross_entropy"``: both add
    ``lambda_attack`` times the scaling modules' classifier loss to the
    backbone loss, and reduce to the backbone loss at lambda 0.
    """

    epsilon: float
    step_size: float
    steps: int = 1
    random_start: bool = False
    loss_kind: str = "cross_entropy"
    lambda_attack: float = 0.0
    kappa: float = 0.0
    mask_mode: str = "inference"
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"attack.epsilon must be >= 0, got {self.epsilon}")
        if self.step_size <= 0:
            raise ConfigError(f"attack.step_size must be > 0, got {self.step_size}")
        if self.steps < 1:
            raise ConfigError(f"attack.steps must be >= 1, got {self.steps}")
        if self.lambda_attack < 0:
            raise ConfigError(f"attack.lambda_attack must be >= 0, got {self.lambda_attack}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(
                f"attack.loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}"
            )
        if self.mask_mode not in ("training", "inference"):
            raise ConfigError(f"attack.mask_mode must be training|inference, got {self.mask_mode!r}")
        if not self.name:
            self.name = self.loss_kind


@dataclass
class AdversarialBatch:
    """Perturbed inputs plus per-sample attack outcome."""

    x_adv: np.ndarray
    success: np.ndarray  # True where the model now misclassifies
    loss: np.ndarray     # per-sample final objective value

    def delta(self, x: np.ndarray) -> np.ndarray:
        return self.x_adv - np.asarray(x, dtype=self.x_adv.dtype)


def project_linf_box(x: np.ndarray, x0: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp into the epsilon-ball around x0, then into [0, 1]."""
    x = np.asarray(x)
    x0 = np.asarray(x0)
    if x.shape != x0.shape:
        raise ShapeError(f"project_linf_box: shapes {x.shape} and {x0.shape} differ")
    return np.clip(np.clip(x, x0 - epsilon, x0 + epsilon), 0.0, 1.0)


def cw_margin_loss(logits: Tensor, labels, kappa: float = 0.0) -> Tensor:
    """Mean over the batch of max(Z_y - max_{k != y} Z_k, -kappa).

    The attacker minimizes this margin (equivalently ascends its
    negation); kappa > 0 keeps pushing past the decision boundary.
    """
    if logits.data.ndim != 2 or logits.data.shape[1] < 2:
        raise ConfigError(
            f"margin loss needs (B, K>=2) logits, got shape {logits.data.shape}"
        )
    margin = gather_labels(logits, labels) - masked_rowmax(logits, labels)
    return tmean(maximum_scalar(margin, -kappa))


def _alc_score_list(model, out) -> list[Tensor]:
    return [out.alc_scores[m.module_id] for m in model.ewas_modules]


def attack_objective(model, x: Tensor, y, loss_kind: str, lambda_attack: float,
                     kappa: float = 0.0, mask_mode: str = "inference") -> Tensor:
    """Combined attack objective of the backbone and any scaling modules.

    cross_entropy/combined: CE(logits, y) + lambda * sum CE(scores, y).
    cw_margin: margin(logits, y) + lambda * sum margin(scores, y); an
    ascending attacker negates this.
    """
    if loss_kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss_kind {loss_kind!r}")
    if lambda_attack > 0 and not model.ewas_modules:
        raise ConfigError("lambda_attack > 0 requires a model with a scaling module")
    out = model.forward(x, labels=y, train=False, mask_mode=mask_mode)
    if loss_kind == "cw_margin":
        loss = cw_margin_loss(out.logits, y, kappa)
        if lambda_attack > 0:
            for scores in _alc_score_list(model, out):
                loss = loss + lambda_attack * cw_margin_loss(scores, y, kappa)
        return loss
    loss = softmax_cross_entropy(out.logits, y)
    if lambda_attack > 0:
        for scores in _alc_score_list(model, out):
            loss = loss + lambda_attack * softmax_cross_entropy(scores, y)
    return loss


@contextmanager
def frozen_params(model):
    """Temporarily clear requires_grad on model parameters."""
    params = [t for _, t in getattr(model, "parameters", list)()]
    saved = [t.requires_grad for t in params]
    for t in params:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in zip(params, saved):
            t.requires_grad = flag


def _per_sample_ce(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(y)), y]


def _per_sample_margin(logits: np.ndarray, y: np.ndarray, kappa: float) -> np.ndarray:
    rows = np.arange(len(y))
    masked = logits.copy()
    masked[rows, y] = -np.inf
    return np.maximum(logits[rows, y] - masked.max(axis=1), -kappa)


def _final_metrics(model, x_adv: np.ndarray, y: np.ndarray,
                   config: AttackConfig) -> tuple[np.ndarray, np.ndarray]:
    with no_grad():
        out = model.forward(x_adv, labels=y, train=False, mask_mode=config.mask_mode)
    logits = out.logits.data
    success = logits.argmax(axis=1) != y
    if config.loss_kind == "cw_margin":
        loss = _per_sample_margin(logits, y, config.kappa)
        per_alc = _per_sample_margin
    else:
        loss = _per_sample_ce(logits, y)
        per_alc = lambda s, yy, _k: _per_sample_ce(s, yy)  # noqa: E731
    if config.lambda_attack > 0:
        for scores in _alc_score_list(model, out):
            loss = loss + config.lambda_attack * per_alc(scores.data, y, config.kappa)
    return success, loss


def pgd(model, x, y, config: AttackConfig) -> AdversarialBatch:
    """Projected signed-gradient ascent inside the epsilon-ball.

    The objective is recomputed through the full inference path on every
    iteration, so inference-mode scaling masks are reselected as the
    input moves. Deterministic for fixed (model, x, y, config).
    """
    y = np.asarray(y, dtype=np.int64)
    dtype = np.dtype(getattr(model, "dtype", np.float64))
    x0 = np.asarray(x, dtype=dtype)
    direction = -1.0 if config.loss_kind == "cw_margin" else 1.0
    x_adv = x0.copy()
    if config.random_start and config.epsilon > 0:
        rng = np.random.default_rng(np.random.PCG64(config.seed))
        noise = rng.uniform(-config.epsilon, config.epsilon, size=x0.shape)
        x_adv = project_linf_box(x0 + noise.astype(dtype), x0, config.epsilon)
    x_adv = x_adv.astype(dtype, copy=False)
    with frozen_params(model):
        for _ in range(config.steps):
            xt = Tensor(x_adv, requires_grad=True)
            loss = attack_objective(
                model, xt, y, config.loss_kind, config.lambda_attack,
                config.kappa, config.mask_mode,
            )
            backward(loss)
            step = direction * config.step_size * np.sign(xt.grad)
            x_adv = project_linf_box(x_adv + step, x0, config.epsilon)
    success, final_loss = _final_metrics(model, x_adv, y, config)
    return AdversarialBatch(x_adv, success, final_loss)


def fgsm(model, x, y, config: AttackConfig) -> AdversarialBatch:
    """Single full-epsilon signed-gradient step; ``config.steps`` is ignored."""
    one_step = replace(
        config, steps=1, step_size=max(config.epsilon, np.finfo(float).tiny),
        random_start=False,
    )
    return pgd(model, x, y, one_step)


def cw_attack(model, x, y, config: AttackConfig) -> AdversarialBatch:
    """PGD ascending the negated class margin (l-infinity C&W variant)."""
    return pgd(model, x, y, replace(config, loss_kind="cw_margin"))


def fgsm_preset(epsilon: float, lambda_attack: float = 0.0, seed: int = 0) -> AttackConfig:
    return AttackConfig(
        epsilon=epsilon, step_size=max(epsilon, np.finfo(float).tiny), steps=1,
        random_start=False, loss_kind="cross_entropy",
        lambda_attack=lambda_attack, seed=seed, name="fgsm",
    )


def pgd_preset(epsilon: float, steps: int = 20, step_size: float | None = None,
               lambda_attack: float = 0.0, random_start: bool = True,
               seed: int = 0) -> AttackConfig:
    return AttackConfig(
        epsilon=epsilon,
        step_size=step_size if step_size is not None else epsilon / 4,
        steps=steps, random_start=random_start, loss_kind="cross_entropy",
        lambda_attack=lambda_attack, seed=seed, name=f"pgd{steps}",
    )


def cw_preset(epsilon: float, steps: int = 30, step_size: float | None = None,
              lambda_attack: float = 0.0, kappa: float = 0.0,
              seed: int = 0) -> AttackConfig:
    return AttackConfig(
        epsilon=epsilon,
        step_size=step_size if step_size is not None else epsilon / 4,
        steps=steps, random_start=False, loss_kind="cw_margin",
        lambda_attack=lambda_attack, kappa=kappa, seed=seed, name=f"cw{steps}",
    )
