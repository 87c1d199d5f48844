"""Adversarial training loops and the composite losses with scaling terms.

Three training methods are supported. Writing p for backbone softmax
probabilities, p_hat for a scaling module's classifier probabilities,
lam for the module trade-off weight and beta for the robustness weight:

* at:     CE(p(x_adv), y) + lam * CE_alc(x_adv, y)
* trades: CE(p(x), y) + beta * KL(p(x) || p(x_adv))
          + lam * CE_alc(x, y) + lam * beta * KL_alc(x || x_adv)
* mart:   BCE(p(x_adv), y) + beta * KL(p(x) || p(x_adv)) * (1 - p_y(x))
          + lam * BCE_alc(x_adv, y)
          + lam * beta * KL_alc(x || x_adv) * (1 - p_hat_y(x))

KL terms use the natural-input distribution as the reference, and the
(1 - p_y) weights apply per sample before batch averaging. With several
scaling modules the auxiliary terms are summed with equal weight lam.

The inner maximization generates adversarial examples with PGD on the
combined cross-entropy objective (the training lam as lambda_attack).
Batch-norm statistics are frozen while the attack runs and updated only
by the outer step's forward passes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, pgd
from .data import BatchIterator, Dataset
from .errors import ConfigError, TrainingDivergedError
from .models import Model, save_checkpoint
from .tensor import (
    Tensor,
    backward,
    boosted_cross_entropy,
    gather_labels,
    kl_divergence,
    mul,
    no_grad,
    softmax,
    softmax_cross_entropy,
    tmean,
)

METHODS = ("at", "trades", "mart")


@dataclass
class TrainConfig:
    method: str
    lam: float
    beta: float
    epochs: int
    batch_size: int
    lr: float
    momentum: float = 0.9
    weight_decay: float = 2e-4
    milestones: tuple = ()
    lr_decay: float = 0.1
    attack: AttackConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"train.method must be one of {METHODS}, got {self.method!r}")
        if self.lam < 0:
            raise ConfigError(f"train.lambda must be >= 0, got {self.lam}")
        if self.beta < 0:
            raise ConfigError(f"train.beta must be >= 0, got {self.beta}")
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"train.milestones must be strictly increasing, got {ms}")
        if ms and ms[-1] >= self.epochs:
            raise ConfigError(
                f"train.milestones must be < epochs ({self.epochs}), got {ms}"
            )
        self.milestones = ms


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    natural_acc: float
    robust_acc: float
    loss_total: float
    loss_parts: dict[str, float]
    wall_time: float

    CSV_PARTS = ("cls", "alc", "kl", "alc_kl")

    @classmethod
    def csv_header(cls) -> list[str]:
        return (["epoch", "lr", "natural_acc", "robust_acc", "loss_total"]
                + [f"loss_{p}" for p in cls.CSV_PARTS] + ["wall_time_s"])

    def csv_row(self) -> list[str]:
        vals = [self.epoch, f"{self.lr:.6g}", f"{self.natural_acc:.6f}",
                f"{self.robust_acc:.6f}", f"{self.loss_total:.10g}"]
        vals += [f"{self.loss_parts.get(p, 0.0):.10g}" for p in self.CSV_PARTS]
        vals.append(f"{self.wall_time:.3f}")
        return [str(v) for v in vals]


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EpochRecord.csv_header())
            for rec in self.records:
                w.writerow(rec.csv_row())


# ---------------------------------------------------------------------------
# composite losses
# ---------------------------------------------------------------------------

def _require_ewas(model: Model, lam: float) -> None:
    if lam > 0 and not model.ewas_modules:
        raise ConfigError("lambda > 0 requires a model with a scaling module")


def _scores(model: Model, out) -> list[Tensor]:
    return [out.alc_scores[m.module_id] for m in model.ewas_modules]


def _at_terms(model: Model, x_adv, y, lam: float, train: bool) -> dict[str, Tensor]:
    _require_ewas(model, lam)
    out = model.forward(x_adv, labels=y, train=train, mask_mode="training")
    terms = {"cls": softmax_cross_entropy(out.logits, y)}
    if lam > 0:
        alc = None
        for scores in _scores(model, out):
            ce = softmax_cross_entropy(scores, y)
            alc = ce if alc is None else alc + ce
        terms["alc"] = lam * alc
    total = terms["cls"]
    if "alc" in terms:
        total = total + terms["alc"]
    terms["total"] = total
    return terms


def _trades_terms(model: Model, x, x_adv, y, lam: float, beta: float,
                  train: bool) -> dict[str, Tensor]:
    _require_ewas(model, lam)
    out_nat = model.forward(x, labels=y, train=train, mask_mode="training")
    out_adv = model.forward(x_adv, labels=y, train=train, mask_mode="training")
    terms = {"cls": softmax_cross_entropy(out_nat.logits, y)}
    if beta > 0:
        terms["kl"] = beta * kl_divergence(softmax(out_nat.logits), softmax(out_adv.logits))
    if lam > 0:
        alc = alc_kl = None
        for s_nat, s_adv in zip(_scores(model, out_nat), _scores(model, out_adv)):
            ce = softmax_cross_entropy(s_nat, y)
            alc = ce if alc is None else alc + ce
            if beta > 0:
                kl = kl_divergence(softmax(s_nat), softmax(s_adv))
                alc_kl = kl if alc_kl is None else alc_kl + kl
        terms["alc"] = lam * alc
        if alc_kl is not None:
            terms["alc_kl"] = (lam * beta) * alc_kl
    total = terms["cls"]
    for key in ("kl", "alc", "alc_kl"):
        if key in terms:
            total = total + terms[key]
    terms["total"] = total
    return terms


def _mart_terms(model: Model, x, x_adv, y, lam: float, beta: float,
                train: bool) -> dict[str, Tensor]:
    _require_ewas(model, lam)
    out_nat = model.forward(x, labels=y, train=train, mask_mode="training")
    out_adv = model.forward(x_adv, labels=y, train=train, mask_mode="training")
    p_adv = softmax(out_adv.logits)
    terms = {"cls": boosted_cross_entropy(p_adv, y)}
    if beta > 0:
        p_nat = softmax(out_nat.logits)
        row_kl = kl_divergence(p_nat, p_adv, reduction="none")
        weight = 1.0 - gather_labels(p_nat, y)
        terms["kl"] = beta * tmean(mul(row_kl, weight))
    if lam > 0:
        alc = alc_kl = None
        for s_nat, s_adv in zip(_scores(model, out_nat), _scores(model, out_adv)):
            ps_adv = softmax(s_adv)
            bce = boosted_cross_entropy(ps_adv, y)
            alc = bce if alc is None else alc + bce
            if beta > 0:
                ps_nat = softmax(s_nat)
                row = kl_divergence(ps_nat, ps_adv, reduction="none")
                w = 1.0 - gather_labels(ps_nat, y)
                kl = tmean(mul(row, w))
                alc_kl = kl if alc_kl is None else alc_kl + kl
        terms["alc"] = lam * alc
        if alc_kl is not None:
            terms["alc_kl"] = (lam * beta) * alc_kl
    total = terms["cls"]
    for key in ("kl", "alc", "alc_kl"):
        if key in terms:
            total = total + terms[key]
    terms["total"] = total
    return terms


def at_loss_ewas(model: Model, x_adv, y, lam: float) -> Tensor:
    """Adversarial cross-entropy plus lam times the module classifier CE."""
    return _at_terms(model, x_adv, y, lam, train=True)["total"]


def trades_loss_ewas(model: Model, x, x_adv, y, lam: float, beta: float) -> Tensor:
    """Natural CE + beta KL(nat || adv), with matching module terms."""
    return _trades_terms(model, x, x_adv, y, lam, beta, train=True)["total"]


def mart_loss_ewas(model: Model, x, x_adv, y, lam: float, beta: float) -> Tensor:
    """Boosted CE + misclassification-weighted KL, with module terms."""
    return _mart_terms(model, x, x_adv, y, lam, beta, train=True)["total"]


_TERM_FNS = {
    "at": lambda model, x, x_adv, y, lam, beta, train: _at_terms(model, x_adv, y, lam, train),
    "trades": _trades_terms,
    "mart": _mart_terms,
}


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

def sgd_step(params: list[Tensor], grads: list[np.ndarray],
             velocities: list[np.ndarray], lr: float, momentum: float,
             weight_decay: float) -> None:
    """v <- momentum v + (grad + wd param); param <- param - lr v. In place."""
    for p, g, v in zip(params, grads, velocities):
        v *= momentum
        v += g + weight_decay * p.data
        p.data -= lr * v


class SGD:
    def __init__(self, named_params, lr: float, momentum: float, weight_decay: float):
        self.params = [t for _, t in named_params]
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        sgd_step(self.params, grads, self.velocities, self.lr,
                 self.momentum, self.weight_decay)
        for p in self.params:
            p.zero_grad()


def lr_schedule(epoch: int, base_lr: float, milestones, factor: float = 0.1) -> float:
    """base_lr times factor to the number of milestones <= epoch."""
    return base_lr * factor ** sum(1 for m in milestones if m <= epoch)


# ---------------------------------------------------------------------------
# training loop and evaluation
# ---------------------------------------------------------------------------

def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    with no_grad():
        out = model.forward(x, labels=y, train=False, mask_mode="inference")
    return float((out.logits.data.argmax(axis=1) == y).mean())


def train(model: Model, dataset: Dataset, config: TrainConfig,
          out_dir=None, config_digest: str = "") -> tuple[Model, TrainLog]:
    """Run adversarial training; returns the trained model and per-epoch log.

    When ``out_dir`` is given, a train-log CSV row is appended after each
    epoch and a final checkpoint is written (float64 payload iff the
    model computes in float64, so the saved model reproduces evaluation
    results exactly).
    """
    if len(dataset) == 0:
        raise ConfigError("train: dataset is empty")
    if config.attack is None:
        raise ConfigError("train.attack: inner attack config is required")
    _require_ewas(model, config.lam)
    if config.attack.lambda_attack > 0 and not model.ewas_modules:
        raise ConfigError("train.attack.lambda_attack > 0 requires a scaling module")
    term_fn = _TERM_FNS[config.method]

    log = TrainLog()
    log_fh = None
    if out_dir is not None:
        from pathlib import Path

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "trainlog.csv", "w", newline="")
        log_fh.write(",".join(EpochRecord.csv_header()) + "\n")
        log_fh.flush()

    opt = SGD(model.parameters(), config.lr, config.momentum, config.weight_decay)
    it = BatchIterator(dataset, config.batch_size, config.seed)
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            opt.lr = lr_schedule(epoch, config.lr, config.milestones, config.lr_decay)
            n_seen = n_nat = n_rob = 0
            loss_sums: dict[str, float] = {}
            n_batches = 0
            for bi, (xb, yb) in enumerate(it.next_epoch()):
                acfg = replace(config.attack,
                               seed=_derived_seed(config.seed, epoch, bi))
                adv = pgd(model, xb, yb, acfg)
                terms = term_fn(model, xb, adv.x_adv, yb, config.lam,
                                config.beta, True)
                loss = terms["total"]
                loss_val = float(loss.data)
                if not np.isfinite(loss_val):
                    raise TrainingDivergedError(epoch, bi, loss_val)
                backward(loss)
                opt.step()
                n_seen += len(yb)
                n_rob += int((~adv.success).sum())
                n_nat += int(round(_accuracy(model, xb, yb) * len(yb)))
                for key, t in terms.items():
                    loss_sums[key] = loss_sums.get(key, 0.0) + float(t.data)
                n_batches += 1
            rec = EpochRecord(
                epoch=epoch,
                lr=opt.lr,
                natural_acc=n_nat / n_seen,
                robust_acc=n_rob / n_seen,
                loss_total=loss_sums.get("total", 0.0) / n_batches,
                loss_parts={k: v / n_batches for k, v in loss_sums.items() if k != "total"},
                wall_time=time.perf_counter() - t0,
            )
            log.records.append(rec)
            if log_fh is not None:
                log_fh.write(",".join(rec.csv_row()) + "\n")
                log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()

    if out_dir is not None:
        save_checkpoint(
            model, out_dir / "checkpoint.ckpt", epoch=config.epochs,
            seed=config.seed, config_digest=config_digest,
            float64=(np.dtype(model.dtype) == np.float64),
        )
    return model, log


@dataclass
class AttackRow:
    name: str
    epsilon: float
    steps: int
    lambda_attack: float
    natural_acc: float
    robust_acc: float


@dataclass
class EvalReport:
    natural_acc: float
    rows: list[AttackRow]

    CSV_HEADER = ["attack", "epsilon", "steps", "lambda_attack",
                  "natural_acc", "robust_acc"]

    def csv_rows(self) -> list[list[str]]:
        out = [["natural", "0", "0", "0", f"{self.natural_acc:.6f}",
                f"{self.natural_acc:.6f}"]]
        for r in self.rows:
            out.append([r.name, f"{r.epsilon:.8g}", str(r.steps),
                        f"{r.lambda_attack:.8g}", f"{r.natural_acc:.6f}",
                        f"{r.robust_acc:.6f}"])
        return out

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.CSV_HEADER)
            for row in self.csv_rows():
                w.writerow(row)


def evaluate(model: Model, dataset: Dataset, attacks: list[AttackConfig],
             batch_size: int = 128) -> EvalReport:
    """Natural accuracy plus robust accuracy per attack over the full set.

    Robust accuracy counts adversarial examples that are still labeled
    correctly. Per-batch attack seeds derive deterministically from the
    attack's own seed, so repeated evaluation is bit-identical.
    """
    n = len(dataset)
    correct = 0
    for start in range(0, n, batch_size):
        xb = dataset.images[start:start + batch_size]
        yb = dataset.labels[start:start + batch_size]
        correct += int(round(_accuracy(model, xb, yb) * len(yb)))
    natural = correct / n if n else 0.0

    rows = []
    for cfg in attacks:
        robust_hits = 0
        for bi, start in enumerate(range(0, n, batch_size)):
            xb = dataset.images[start:start + batch_size]
            yb = dataset.labels[start:start + batch_size]
            adv = pgd(model, xb, yb, replace(cfg, seed=_derived_seed(cfg.seed, bi)))
            robust_hits += int((~adv.success).sum())
        rows.append(AttackRow(cfg.name, cfg.epsilon, cfg.steps, cfg.lambda_attack,
                              natural, robust_hits / n if n else 0.0))
    return EvalReport(natural, rows)
