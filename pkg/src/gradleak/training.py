"""Pretraining: natural / PGD adversarial training of the extractor, and the
sparsity-regularized head training that turns the first head layer into a
gradient sieve."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import leakage
from . import tensor as T
from .data import Dataset, mislabel, sample_batch
from .models import FeatureExtractor, LinearHead, SpabHead
from .tensor import Tensor


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class PgdBudget:
    epsilon: float  # L-inf radius in pixel units
    step_size: float
    steps: int

    def __post_init__(self):
        if self.epsilon < 0 or self.steps < 1:
            raise ValueError("bad PGD budget")
        if self.epsilon > 0 and not 0 < self.step_size <= self.epsilon:
            raise ValueError("need 0 < step_size <= epsilon")


@dataclass
class SpabTrainConfig:
    epochs: int = 60
    lr: float = 0.05
    # beta1 >> beta2 starves the block: the L1 pull on each column grows with
    # beta1 while the softplus floor only pushes back with beta2, so the
    # steady-state active count per column sits near beta2/beta1.  Keeping the
    # two within a small factor of each other is what leaves roughly one
    # active row per column instead of zero.
    beta1: float = 5.0
    beta2: float = 8.0
    sigma: float = 0.01
    batch_size: int = 64
    batches_per_epoch: int = 16
    mislabeled: bool = False


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)


def _logits(fe: FeatureExtractor, head, x: Tensor) -> Tensor:
    y = fe.forward(x)
    out = head.forward(y)
    return out[0] if isinstance(out, tuple) else out


def _sgd_step(params: dict[str, Tensor], lr: float) -> None:
    for p in params.values():
        if p.requires_grad and p.grad is not None:
            p.data = p.data - lr * p.grad
        p.grad = None


def pgd_attack(fe: FeatureExtractor, head, images: np.ndarray, labels: np.ndarray,
               budget: PgdBudget) -> np.ndarray:
    """L-inf PGD ascent on the cross-entropy loss, starting at the clean batch.

    One step reduces to FGSM: clip(x + step * sign(grad)).
    """
    if budget.epsilon == 0:
        return images.copy()
    x_adv = images.copy()
    for _ in range(budget.steps):
        xt = Tensor(x_adv, requires_grad=True)
        loss = T.cross_entropy(_logits(fe, head, xt), labels)
        T.backward(loss)
        x_adv = x_adv + budget.step_size * np.sign(xt.grad)
        x_adv = np.clip(x_adv, images - budget.epsilon, images + budget.epsilon)
        x_adv = np.clip(x_adv, 0.0, 1.0)
        for p in {**fe.params, **head.params}.values():
            p.grad = None
    return x_adv


def accuracy(fe: FeatureExtractor, head, images: np.ndarray, labels: np.ndarray,
             chunk: int = 256) -> float:
    hits = 0
    for i in range(0, len(images), chunk):
        logits = _logits(fe, head, Tensor(images[i:i + chunk]))
        hits += int((logits.data.argmax(axis=1) == labels[i:i + chunk]).sum())
    return hits / len(images)


def robust_accuracy(fe: FeatureExtractor, head, images: np.ndarray,
                    labels: np.ndarray, budget: PgdBudget, chunk: int = 256) -> float:
    hits = 0
    for i in range(0, len(images), chunk):
        adv = pgd_attack(fe, head, images[i:i + chunk], labels[i:i + chunk], budget)
        logits = _logits(fe, head, Tensor(adv))
        hits += int((logits.data.argmax(axis=1) == labels[i:i + chunk]).sum())
    return hits / len(images)


def adversarial_train(fe: FeatureExtractor, head: LinearHead, public: Dataset,
                      budget: PgdBudget, epochs: int, lr: float = 0.05,
                      batch_size: int = 32, seed: int = 0,
                      eval_cap: int = 256) -> TrainHistory:
    """Min-max training: each batch is replaced by its PGD perturbation before
    the descent step. epsilon = 0 reduces to natural training."""
    rng = np.random.default_rng(seed)
    history = TrainHistory()
    params = {**{f"fe.{k}": v for k, v in fe.params.items()},
              **{f"head.{k}": v for k, v in head.params.items()}}
    steps = max(1, len(public) // batch_size)
    neval = min(eval_cap, len(public))
    for epoch in range(epochs):
        losses = []
        for _ in range(steps):
            x, c = sample_batch(public, batch_size, rng)
            x_adv = pgd_attack(fe, head, x, c, budget)
            try:
                loss = T.cross_entropy(_logits(fe, head, Tensor(x_adv)), c)
            except T.TensorError as err:
                raise TrainingDivergence(
                    f"non-finite loss at epoch {epoch}: {err}") from err
            T.backward(loss)
            losses.append(loss.item())
            _sgd_step(params, lr)
        nat = accuracy(fe, head, public.images[:neval], public.labels[:neval])
        rob = robust_accuracy(fe, head, public.images[:neval], public.labels[:neval],
                              budget) if budget.epsilon > 0 else nat
        history.epochs.append({"epoch": epoch, "loss": float(np.mean(losses)),
                               "natural_acc": nat, "robust_acc": rob})
    return history


def sparsity_loss(z: Tensor, zp: Tensor, beta1: float, beta2: float) -> Tensor:
    """(beta1/N) * sum_j ||Z'(:,j)||_1 + (beta2/(B*N)) * sum log(1 + e^-Z)."""
    if z.shape != zp.shape:
        raise T.TensorError("sparsity_loss: Z and Z' shapes differ")
    b, n = z.shape
    l1 = T.tsum(T.absolute(zp)) * (beta1 / n)
    push = T.tsum(T.softplus(-z)) * (beta2 / (b * n))
    return l1 + push


def alpha_schedule(k: int, total: int) -> float:
    """1 - cos^2(k*pi / 2K): ~0 early (sparsity-dominated), 1 at the end."""
    if not 1 <= k <= total:
        raise ValueError("need 1 <= k <= K")
    return 1.0 - np.cos(k * np.pi / (2 * total)) ** 2


def probe_leakage_rate(fe: FeatureExtractor, head: SpabHead,
                       images: np.ndarray, labels: np.ndarray,
                       tol: float = leakage.DEFAULT_TOL) -> float:
    """Ground-truth leakage rate of one gradient computation on a probe batch."""
    y = fe.forward(Tensor(images))
    logits, z, zp = head.forward(y)
    T.backward(T.cross_entropy(logits, labels))
    rate = leakage.leakage_rate_oracle(z.data, zp.data, zp.grad, tol)
    for p in head.params.values():
        p.grad = None
    return rate


def spab_train(fe: FeatureExtractor, head: SpabHead, public: Dataset,
               cfg: SpabTrainConfig, probe: tuple[np.ndarray, np.ndarray] | None = None,
               seed: int = 0) -> TrainHistory:
    """Head-only training of the two-layer block against the combined
    objective alpha * L_cls + (1 - alpha) * L_sp.

    The extractor stays frozen. Each epoch starts by perturbing the first
    layer's weight and bias with N(0, sigma^2) noise, then iterates batches.
    The per-epoch trace carries the probe-batch leakage rate when a probe
    batch is supplied.
    """
    rng = np.random.default_rng(seed)
    if cfg.mislabeled:
        public = mislabel(public)
    fe_state = fe.state()
    fe.set_trainable(False)
    history = TrainHistory()
    try:
        for k in range(1, cfg.epochs + 1):
            alpha = alpha_schedule(k, cfg.epochs)
            head.params["w"].data = head.params["w"].data + \
                rng.normal(0.0, cfg.sigma, head.params["w"].shape)
            head.params["b"].data = head.params["b"].data + \
                rng.normal(0.0, cfg.sigma, head.params["b"].shape)
            cls_losses, sp_losses = [], []
            for _ in range(cfg.batches_per_epoch):
                x, c = sample_batch(public, cfg.batch_size, rng)
                try:
                    y = fe.forward(Tensor(x))
                    logits, z, zp = head.forward(y)
                    l_cls = T.cross_entropy(logits, c)
                    l_sp = sparsity_loss(z, zp, cfg.beta1, cfg.beta2)
                    loss = l_cls * alpha + l_sp * (1.0 - alpha)
                except T.TensorError as err:
                    raise TrainingDivergence(
                        f"non-finite loss at epoch {k}: {err}") from err
                T.backward(loss)
                _sgd_step(head.params, cfg.lr)
                cls_losses.append(l_cls.item())
                sp_losses.append(l_sp.item())
            entry = {"epoch": k, "alpha": float(alpha),
                     "l_cls": float(np.mean(cls_losses)),
                     "l_sp": float(np.mean(sp_losses))}
            if probe is not None:
                entry["leakage_rate"] = probe_leakage_rate(fe, head, *probe)
            history.epochs.append(entry)
    finally:
        fe.set_trainable(True)
        for name, arr in fe_state.items():
            if not np.array_equal(fe.params[name].data, arr):
                raise TrainingDivergence("extractor drifted during head training")
    return history
