"""Learning a universal perturbation with momentum-sign updates.

Each mini-batch holds ``P`` identities with ``K`` images each.  Every image in
the batch acts once as the (perturbed) query while the other, clean, batch
images form its gallery.  The batch loss is the mean over queries of the soft
AP plus ``lambda`` times the gradient-energy penalty of the perturbed query.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import ImageSet, Perturbation, parse_gamma
from .metrics import drop_rate, pairwise_distances
from .regularizer import MiConfig, mi_grad, mi_loss
from .softrank import SoftApConfig, ap_loss_embedding

_GRAD_FLOOR = 1e-12
OBJECTIVES = ("ap", "base")


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"non-finite attack loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class AttackConfig:
    gamma: float = float("inf")
    epsilon: float = 10.0
    lam: float = 10.0
    w1: float = 0.0
    w2: float = 1.0
    eta: float = 0.4
    alpha: float = 0.25
    epochs: int = 20
    bins: int = 25
    p_ids: int = 8
    k_instances: int = 4
    n_train_images: int = 192
    seed: int = 0
    clamp: bool = True
    objective: str = "ap"
    # None: penalty of the image rescaled to [0, 1], averaged over pixel positions;
    # a number: raw penalty divided by that number
    mi_scale: float | None = None
    # debug: follow the printed "+" update, i.e. ascend the loss
    ascend: bool = False

    def __post_init__(self):
        self.gamma = parse_gamma(self.gamma)
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.p_ids * self.k_instances < 2:
            raise ValueError("batch must hold at least 2 images")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.mi_scale is not None and self.mi_scale <= 0:
            raise ValueError("mi_scale must be positive")
        if self.objective == "ap" and self.k_instances < 2:
            raise ValueError("the ap objective needs k_instances >= 2")

    @property
    def mi(self) -> MiConfig:
        return MiConfig(self.w1, self.w2, self.lam)

    @property
    def soft(self) -> SoftApConfig:
        return SoftApConfig(self.bins)


@dataclass
class MomentumState:
    g: np.ndarray
    t: int = 0


def momentum_step(state: MomentumState, grad, u, cfg: AttackConfig):
    """One momentum-sign update; returns the new state and perturbation values."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise ValueError("gradient is not finite")
    g = cfg.eta * state.g
    l1 = np.abs(grad).sum()
    if l1 >= _GRAD_FLOOR:
        g = g + grad / l1
    direction = 1.0 if cfg.ascend else -1.0
    u_new = np.asarray(u) + direction * cfg.alpha * np.sign(g)
    return MomentumState(g, state.t + 1), u_new.astype(np.asarray(u).dtype)


# -- projection ----------------------------------------------------------------------

def project_l1_ball(v, epsilon):
    """Euclidean projection onto ``{x : ||x||_1 <= epsilon}`` by sorted soft thresholding."""
    v = np.asarray(v, dtype=np.float64)
    flat = v.ravel()
    if np.abs(flat).sum() <= epsilon:
        return v.copy()
    if epsilon == 0:
        return np.zeros_like(v)
    mag = np.sort(np.abs(flat))[::-1]
    csum = np.cumsum(mag)
    j = np.arange(1, len(mag) + 1)
    # ">=" rather than ">": with equality the element thresholds to exactly 0 either way,
    # and it keeps index 0 eligible when rounding swallows a tiny epsilon
    active = np.nonzero(mag - (csum - epsilon) / j >= 0)[0]
    rho = active[-1] if len(active) else 0
    theta = (csum[rho] - epsilon) / (rho + 1.0)
    return (np.sign(flat) * np.maximum(np.abs(flat) - theta, 0.0)).reshape(v.shape)


def _l2(values):
    return float(np.sqrt(np.sum(np.square(values, dtype=np.float64))))


def project_values(values, gamma, epsilon):
    """Nearest point of the ``gamma``-norm ball of radius ``epsilon``."""
    gamma = parse_gamma(gamma)
    values = np.asarray(values)
    dtype = values.dtype if values.dtype in (np.float32, np.float64) else np.float64
    if gamma == math.inf:
        return np.clip(values, -epsilon, epsilon).astype(dtype)
    if gamma == 2.0:
        norm = _l2(values)
        if norm <= epsilon:
            return values.astype(dtype)
        scale = epsilon / norm
        out = (values * scale).astype(dtype)
        # rounding can leave the result a hair outside; shrink until it is inside so
        # that projecting again is a no-op
        while _l2(out) > epsilon:
            scale = np.nextafter(scale, 0.0) if dtype == np.float64 else scale * (1 - 2**-23)
            out = (values * scale).astype(dtype)
        return out
    if np.abs(values).sum(dtype=np.float64) <= epsilon:
        return values.astype(dtype)
    out = project_l1_ball(values, epsilon).astype(dtype)
    # same idea as the l2 case: pull the radius in until the rounded result passes the
    # feasibility check above; the step doubles so a large rounding excess still ends fast
    target, shrink = epsilon, (2.0**-52 if dtype == np.float64 else 2.0**-23)
    while np.abs(out).sum(dtype=np.float64) > epsilon:
        target *= 1 - shrink
        shrink = min(2 * shrink, 1.0)
        out = project_l1_ball(values, target).astype(dtype)
    return out


def project(u: Perturbation) -> Perturbation:
    return Perturbation(project_values(u.values, u.gamma, u.epsilon), u.gamma, u.epsilon)


def is_saturated(values, gamma, epsilon) -> bool:
    return float(np.linalg.norm(np.asarray(values, dtype=np.float64).ravel(), ord=gamma)) > epsilon


# -- objectives ----------------------------------------------------------------------

def base_loss(logits):
    """Least-likely-class loss ``-log p(y_LL)`` and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ValueError("need at least 2 classes")
    target = int(np.argmin(z))  # argmin of softmax == argmin of logits, first index on ties
    shifted = z - z.max()
    log_norm = np.log(np.exp(shifted).sum())
    prob = np.exp(shifted - log_norm)
    loss = -(shifted[target] - log_norm)
    grad = prob.copy()
    grad[target] -= 1.0
    return float(loss), grad


@dataclass
class BatchLoss:
    total: float
    ap: float
    mi: float
    grad: np.ndarray
    skipped: int = 0


def _penalty(q, cfg: AttackConfig):
    if cfg.mi_scale is not None:
        return (np.atleast_1d(mi_loss(q, cfg.mi)) / cfg.mi_scale,
                mi_grad(q, cfg.mi) / cfg.mi_scale)
    pixels = q.shape[-2] * q.shape[-1]
    unit = q / 255.0
    return (np.atleast_1d(mi_loss(unit, cfg.mi)) / pixels,
            mi_grad(unit, cfg.mi) / (255.0 * pixels))


def combined_loss_grad(u, batch: ImageSet, model, cfg: AttackConfig, head=None,
                       gallery_emb=None) -> BatchLoss:
    """Mean per-query loss of a batch and its gradient with respect to ``u``.

    ``gallery_emb`` may carry precomputed clean embeddings of ``batch``.
    """
    values = u.values if isinstance(u, Perturbation) else np.asarray(u)
    images = np.asarray(batch.images)
    dtype = np.float64 if images.dtype == np.float64 or values.dtype == np.float64 else np.float32
    images = images.astype(dtype, copy=False)
    raw = images + values.astype(dtype, copy=False)
    if cfg.clamp:
        q = np.clip(raw, 0.0, 255.0)
        pass_through = (raw > 0.0) & (raw < 255.0)
    else:
        q = raw
        pass_through = None
    ids = np.asarray(batch.identities)
    n = len(ids)

    if cfg.objective == "ap":
        emb = model.forward(q)
        clean = model.forward(images) if gallery_emb is None else gallery_emb
        g_emb = np.zeros_like(emb, dtype=np.float64)
        attack_terms = np.zeros(n)
        used = np.zeros(n, dtype=bool)
        for i in range(n):
            others = np.arange(n) != i
            labels = ids[others] == ids[i]
            if not labels.any():
                continue
            used[i] = True
            attack_terms[i], g_emb[i] = ap_loss_embedding(emb[i], clean[others], labels, cfg.soft, True)
        g_x = model.backward_input(q, g_emb.astype(dtype))
    else:
        if head is None:
            raise ValueError("the base objective needs a classifier head")
        feats = model.raw(q)
        logits = feats @ head.weight.astype(feats.dtype)
        attack_terms = np.empty(n)
        used = np.ones(n, dtype=bool)
        g_logits = np.empty(logits.shape)
        for i in range(n):
            attack_terms[i], g_logits[i] = base_loss(logits[i])
        g_x = model.backward_raw(q, (g_logits @ head.weight.T.astype(np.float64)).astype(dtype))

    skipped = int(n - used.sum())
    if not used.any():
        return BatchLoss(0.0, 0.0, 0.0, np.zeros_like(values, dtype=np.float64), skipped)

    grad = g_x.astype(np.float64)
    mi_terms = np.zeros(n)
    if cfg.lam > 0:
        mi_terms, g_mi = _penalty(q.astype(np.float64), cfg)
        grad = grad + cfg.lam * g_mi
    if pass_through is not None:
        grad = grad * pass_through
    grad = grad[used].mean(axis=0)
    ap_mean = float(attack_terms[used].mean())
    mi_mean = float(mi_terms[used].mean())
    return BatchLoss(ap_mean + cfg.lam * mi_mean, ap_mean, mi_mean, grad, skipped)


# -- training loop -------------------------------------------------------------------

def pk_batches(ids, p, k, rng):
    """Yield index arrays of ``p`` identities x ``k`` instances for one epoch."""
    ids = np.asarray(ids)
    by_id = {i: np.flatnonzero(ids == i) for i in np.unique(ids)}
    eligible = [i for i, members in by_id.items() if len(members) >= k]
    if len(eligible) < min(p, 2):
        raise ValueError(f"need identities with >= {k} images for PK batches")
    n_batches = max(1, len(ids) // (p * k))
    for _ in range(n_batches):
        chosen = rng.choice(eligible, size=min(p, len(eligible)), replace=False)
        yield np.concatenate([rng.choice(by_id[i], size=k, replace=False) for i in chosen])


def _loo_map(q_emb, g_emb, ids):
    # every item queries all other items
    dist = pairwise_distances(q_emb, g_emb)
    n = len(ids)
    aps = []
    for i in range(n):
        others = np.arange(n) != i
        labels = ids[others] == ids[i]
        if not labels.any():
            continue
        order = np.argsort(dist[i, others], kind="stable")
        hits = labels[order]
        ranks = np.flatnonzero(hits) + 1.0
        aps.append(np.mean(np.arange(1, len(ranks) + 1) / ranks))
    return float(np.mean(aps)) if aps else 0.0


@dataclass
class TrainingResult:
    uap: Perturbation
    log: list = field(default_factory=list)


def select_training_subset(train: ImageSet, n_images: int, seed: int) -> ImageSet:
    rng = np.random.default_rng(seed)
    n = len(train)
    if n == 0:
        raise ValueError("train split is empty")
    idx = np.sort(rng.permutation(n)[:min(n_images, n)])
    return ImageSet(train.images[idx], train.identities[idx])


def train_uap(model, train: ImageSet, cfg: AttackConfig | None = None, head=None) -> TrainingResult:
    """Learn a universal perturbation on ``train`` against ``model``.

    Starts from zero; for every PK batch takes one momentum-sign step and projects
    back onto the norm ball whenever the bound is exceeded.  The log holds one
    record per epoch.
    """
    cfg = cfg or AttackConfig()
    subset = select_training_subset(train, cfg.n_train_images, cfg.seed)
    shape = subset.images.shape[1:]
    u = np.zeros(shape, dtype=np.float32)
    state = MomentumState(np.zeros(shape, dtype=np.float64))
    rng = np.random.default_rng(cfg.seed + 1)
    clean_emb = model.forward(subset.images)
    clean_map = _loo_map(clean_emb, clean_emb, subset.identities)
    log = []
    for epoch in range(cfg.epochs):
        sums = np.zeros(3)
        count = 0
        for idx in pk_batches(subset.identities, cfg.p_ids, cfg.k_instances, rng):
            batch = ImageSet(subset.images[idx], subset.identities[idx])
            res = combined_loss_grad(u, batch, model, cfg, head, gallery_emb=clean_emb[idx])
            if not np.isfinite(res.total):
                raise NonFiniteLossError(epoch)
            state, u = momentum_step(state, res.grad, u, cfg)
            if is_saturated(u, cfg.gamma, cfg.epsilon):
                u = project_values(u, cfg.gamma, cfg.epsilon).astype(np.float32)
            sums += (res.ap, res.mi, res.total)
            count += 1
        q = subset.images + u
        if cfg.clamp:
            q = np.clip(q, 0.0, 255.0)
        after = _loo_map(model.forward(q), clean_emb, subset.identities)
        mdr = drop_rate(clean_map, after) if clean_map > 0 else 0.0
        means = sums / max(count, 1)
        log.append({
            "epoch": epoch,
            "loss_ap": float(means[0]),
            "loss_mi": float(means[1]),
            "loss_total": float(means[2]),
            "u_norm": float(np.linalg.norm(u.ravel().astype(np.float64), ord=cfg.gamma)),
            "train_mdr": float(mdr),
        })
    return TrainingResult(Perturbation(u, cfg.gamma, cfg.epsilon), log)
