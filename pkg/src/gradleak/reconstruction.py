"""Representation-matching inversion with a deep-image-prior generator, and
the natural-preimage collision experiment that motivates the robust prior."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import FeatureExtractor, Generator
from .tensor import Tensor
from .training import PgdBudget


@dataclass
class IrMatchConfig:
    iterations: int = 2000
    perturb_every: int = 200  # add fresh seed noise every K1 steps
    lr_seed: float = 0.05
    lr_gen: float = 0.05
    alpha: float = 0.5  # KL weight inside the distance
    tv_weight: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.perturb_every < 1 or not 0 <= self.alpha <= 1 or self.tv_weight < 0:
            raise ValueError("bad IR-match config")


@dataclass
class IrMatchResult:
    image: np.ndarray
    loss_trace: list[float]
    best_iteration: int
    best_loss: float


def ir_distance(y: Tensor, target: np.ndarray, alpha: float) -> Tensor:
    """alpha * KL(softmax(target) || softmax(y)) + (1-alpha) * MSE(y, target).

    KL needs a distribution, so both vectors are softmax-normalized for that
    term; the MSE acts on the raw vectors.
    """
    target = np.asarray(target, dtype=np.float64)
    if y.shape != target.shape:
        raise T.TensorError(f"ir_distance: {y.shape} vs {target.shape}")
    mse = T.tmean(T.square(y - Tensor(target)))
    if alpha == 0.0:
        return mse
    p = np.exp(target - target.max())
    p /= p.sum()
    # KL(p || q) = sum p log p - sum p log q; only the cross term needs grads
    q_log = T.log(T.softmax(y))
    cross = T.tsum(T.mul(q_log, Tensor(p)))
    kl = Tensor(float((p * np.log(p)).sum())) - cross
    if alpha == 1.0:
        return kl
    return kl * alpha + mse * (1.0 - alpha)


def _zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def ir_match(target_ir: np.ndarray, fe: FeatureExtractor, gen: Generator,
             cfg: IrMatchConfig) -> IrMatchResult:
    """Optimize a latent seed and generator weights so the generated image's
    representation matches the target; returns the best-loss iterate.

    The caller's generator is not mutated; optimization runs on a clone.
    """
    gen = gen.clone()
    rng = np.random.default_rng(cfg.seed)
    fe.set_trainable(False)
    shape = gen.image_shape
    s = rng.standard_normal(shape)
    trace: list[float] = []
    best = (np.inf, -1, s.copy(), gen.state())
    try:
        for k in range(1, cfg.iterations + 1):
            if k % cfg.perturb_every == 0:
                s = s + rng.standard_normal(shape)
            st = Tensor(s, requires_grad=True)
            x = gen.forward(st)
            y = fe.forward(T.reshape(x, (1,) + shape))
            loss = ir_distance(T.reshape(y, (y.shape[1],)), target_ir, cfg.alpha)
            if cfg.tv_weight:
                loss = loss + T.tv_norm(x) * cfg.tv_weight
            if not np.isfinite(loss.data):
                raise RuntimeError(
                    f"non-finite inversion loss at iteration {k}; "
                    f"|s|={np.abs(s).max():.3g}")
            T.backward(loss)
            trace.append(loss.item())
            if loss.item() < best[0]:
                best = (loss.item(), k, s.copy(), gen.state())
            s = s - cfg.lr_seed * st.grad
            for p in gen.params.values():
                p.data = p.data - cfg.lr_gen * p.grad
            _zero_grads(gen.params.values())
    finally:
        fe.set_trainable(True)
    best_loss, best_k, best_s, best_state = best
    for name, arr in best_state.items():
        gen.params[name].data = arr
    image = gen.forward(Tensor(best_s)).data
    return IrMatchResult(image, trace, best_k, best_loss)


def _match_job(args):
    target_ir, fe_path, shape, cfg = args
    fe = FeatureExtractor.load(fe_path)
    gen = Generator(shape, rng=np.random.default_rng(cfg.seed))
    return ir_match(target_ir, fe, gen, cfg)


def run_ir_match_jobs(targets: list[np.ndarray], fe_path, shape, cfg: IrMatchConfig,
                      jobs: int = 1) -> list[IrMatchResult]:
    """Invert each target independently; results are order-stable regardless
    of worker count. Job i uses seed cfg.seed + i."""
    arglist = []
    for i, tgt in enumerate(targets):
        job_cfg = IrMatchConfig(**{**cfg.__dict__, "seed": cfg.seed + i})
        arglist.append((np.asarray(tgt), fe_path, shape, job_cfg))
    if jobs <= 1:
        return [_match_job(a) for a in arglist]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_match_job, arglist))


@dataclass
class PreimageResult:
    image: np.ndarray
    trace: list[float] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.trace[-1] / self.trace[0] if self.trace and self.trace[0] > 0 else 0.0


def preimage_attack(x1: np.ndarray, x2: np.ndarray, fe: FeatureExtractor,
                    budget: PgdBudget, tv_weight: float = 1e-4,
                    iterations: int | None = None) -> PreimageResult:
    """Search an L-inf ball around x2 for a point whose representation
    collides with that of x1; the per-iteration squared-L2 distance trace is
    the experiment's output."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    target = fe.forward(Tensor(x1[None])).data[0]
    fe.set_trainable(False)
    x = x2.copy()
    trace: list[float] = []
    # first trace entry is the unperturbed distance
    y0 = fe.forward(Tensor(x[None])).data[0]
    trace.append(float(((y0 - target) ** 2).sum()))
    if budget.epsilon == 0 or np.array_equal(x1, x2):
        return PreimageResult(x, trace)
    if iterations is None:
        iterations = budget.steps
    # Plain sign steps stall far from a collision at this input size, so the
    # inner loop runs Adam on the perturbation and projects back onto the
    # L-inf ball after every update.  budget.step_size is the Adam step.
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    try:
        for k in range(iterations):
            xt = Tensor(x, requires_grad=True)
            y = fe.forward(T.reshape(xt, (1,) + x.shape))
            dist = T.tsum(T.square(T.reshape(y, (y.shape[1],)) - Tensor(target)))
            loss = dist + T.tv_norm(xt) * tv_weight if tv_weight else dist
            T.backward(loss)
            g = xt.grad
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1.0 - 0.9 ** (k + 1))
            vh = v / (1.0 - 0.999 ** (k + 1))
            x = x - budget.step_size * mh / (np.sqrt(vh) + 1e-8)
            x = np.clip(x, x2 - budget.epsilon, x2 + budget.epsilon)
            x = np.clip(x, 0.0, 1.0)
            yk = fe.forward(Tensor(x[None])).data[0]
            trace.append(float(((yk - target) ** 2).sum()))
    finally:
        fe.set_trainable(True)
    return PreimageResult(x, trace)


# ---------------------------------------------------------------------------
# image output


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6, 8-bit, values round(255 * x); expects (3,H,W) in [0,1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"write_ppm expects (3,H,W), got {image.shape}")
    _c, h, w = image.shape
    pixels = np.round(255.0 * np.clip(image, 0.0, 1.0)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3][:w * h * 3], dtype=np.uint8)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0
