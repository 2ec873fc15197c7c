"""Task definitions: losses, contrastive objectives and evaluation metrics.

Three task kinds share one training loop:

* ``supervised`` - cross-entropy over class logits, metric = test accuracy;
* ``ntxent`` - two augmented views per image, NT-Xent over the 2n embeddings;
* ``momentum_queue`` - query/key encoders with an EMA key encoder and a FIFO
  queue of negative keys.

Contrastive metrics are top-1 retrieval accuracy on fixed augmented views of
the test split, reported as a fraction in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import AugPolicy, Dataset, augment
from .network import ParamStore, backward, forward
from .tensor import check_finite, logsumexp, make_rng, softmax

TASK_KINDS = ("supervised", "ntxent", "momentum_queue")
# Table 2 temperature grid.
TEMPERATURE_GRID = (0.1, 0.2, 0.5, 1.0, 2.0, 10.0, 20.0)
DEFAULT_TEMPERATURE = {"supervised": 1.0, "ntxent": 0.5, "momentum_queue": 0.2}


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    temperature: float | None = None  # None -> per-kind default
    queue_size: int = 256
    momentum_coef: float = 0.99
    embed_dim: int = 32
    aug: AugPolicy | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.temperature is None:
            object.__setattr__(self, "temperature", DEFAULT_TEMPERATURE[self.kind])
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 <= self.momentum_coef <= 1:
            raise ValueError("momentum_coef must be in [0, 1]")


# ---------------------------------------------------------------- losses

def supervised_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    lse = logsumexp(logits, axis=1)
    loss = float(np.mean(lse - logits[np.arange(n), labels]))
    grad = softmax(logits, axis=1)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def l2_normalize(h: np.ndarray, eps: float = 1e-12):
    norms = np.sqrt(np.sum(h * h, axis=1, keepdims=True))
    return h / np.maximum(norms, eps), norms


def l2_normalize_backward(gz: np.ndarray, z: np.ndarray, norms: np.ndarray) -> np.ndarray:
    return (gz - z * np.sum(gz * z, axis=1, keepdims=True)) / np.maximum(norms, 1e-12)


def ntxent_loss(z: np.ndarray, z2: np.ndarray, temperature: float):
    """NT-Xent over paired views.

    ``z`` and ``z2`` are n×d L2-normalized embeddings; similarities are dot
    products. Each of the 2n anchors has its paired view as the positive and
    the other 2n-2 embeddings as negatives. Returns ``(loss, (grad_z, grad_z2))``.
    """
    n = z.shape[0]
    if n < 2:
        raise ValueError("NT-Xent needs at least 2 pairs (no negatives otherwise)")
    if z2.shape != z.shape:
        raise ValueError(f"view shapes differ: {z.shape} vs {z2.shape}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    p = np.concatenate([z, z2], axis=0)
    s = (p @ p.T) / temperature
    np.fill_diagonal(s, -np.inf)
    pos = np.concatenate([np.arange(n, 2 * n), np.arange(n)])
    rows = np.arange(2 * n)
    loss = float(np.mean(logsumexp(s, axis=1) - s[rows, pos]))
    ds = softmax(s, axis=1)
    ds[rows, pos] -= 1.0
    ds /= 2 * n
    gp = (ds + ds.T) @ p / temperature
    return loss, (gp[:n], gp[n:])


def queue_contrastive_loss(q: np.ndarray, k: np.ndarray, queue: np.ndarray, temperature: float):
    """Cross-entropy of one positive key against the queued negatives.

    Gradient flows into ``q`` only. An empty queue gives zero loss.
    """
    pos = np.sum(q * k, axis=1, keepdims=True)
    neg = q @ queue.T if queue.size else np.zeros((q.shape[0], 0))
    logits = np.concatenate([pos, neg], axis=1) / temperature
    loss = float(np.mean(logsumexp(logits, axis=1) - logits[:, 0]))
    d = softmax(logits, axis=1)
    d[:, 0] -= 1.0
    d /= q.shape[0] * temperature
    gq = d[:, :1] * k + (d[:, 1:] @ queue if queue.size else 0.0)
    return loss, gq


def momentum_update(key: dict, query: dict, momentum_coef: float) -> dict:
    """``key <- m * key + (1 - m) * query`` for every trainable tensor."""
    if momentum_coef == 1.0:
        return {n: v.copy() for n, v in key.items()}
    return {n: momentum_coef * key[n] + (1.0 - momentum_coef) * query[n] for n in key}


def enqueue(queue: np.ndarray, keys: np.ndarray, queue_size: int) -> np.ndarray:
    """FIFO: append ``keys`` at the tail, drop the oldest rows beyond ``queue_size``."""
    merged = np.concatenate([queue, keys], axis=0) if queue.size else keys.copy()
    return merged[-queue_size:]


def momentum_queue_step(encoder: ParamStore, key: ParamStore, queue: np.ndarray,
                        views: tuple, mask, temperature: float, momentum_coef: float,
                        queue_size: int):
    """One step of the simplified momentum-contrast objective.

    Returns ``(loss, grads, new_key, new_queue, batch_stats)``. The key encoder
    is updated before computing keys, keys carry no gradient, and the batch
    keys are enqueued after the loss is computed.
    """
    xq, xk = views
    new_key = key.with_trainable(momentum_update(key.trainable(), encoder.trainable(),
                                                 momentum_coef))
    hk, _ = forward(new_key, mask, xk, train=True)
    k, _ = l2_normalize(hk)
    hq, tape = forward(encoder, mask, xq, train=True)
    q, qn = l2_normalize(hq)
    loss, gq = queue_contrastive_loss(q, k, queue, temperature)
    grads = backward(tape, l2_normalize_backward(gq, q, qn))
    return loss, grads, new_key, enqueue(queue, k, queue_size), tape.batch_stats


def top1_retrieval_accuracy(z: np.ndarray, z2: np.ndarray) -> float:
    """Top-1 retrieval accuracy in percent.

    For every embedding the candidates are the other 2n-1 embeddings of both
    views; a retrieval is correct when the paired view attains the maximal
    cosine similarity (ties with the positive count as correct).
    """
    z = np.asarray(z, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    n = z.shape[0]
    if n < 2 or z2.shape != z.shape:
        raise ValueError("need two equally sized batches with n >= 2")
    p = np.concatenate([z, z2], axis=0)
    norms = np.sqrt(np.sum(p * p, axis=1))
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding")
    p = p / norms[:, None]
    hits = 0
    for i in range(2 * n):
        # Row-wise reduction keeps identical vectors at bit-identical similarity.
        sims = np.sum(p * p[i], axis=1)
        sims[i] = -np.inf
        hits += bool(sims[(i + n) % (2 * n)] >= sims.max())
    return 100.0 * hits / (2 * n)


# ---------------------------------------------------------------- tasks

class SupervisedTask:
    kind = "supervised"

    def __init__(self, dataset: Dataset, aug: AugPolicy | None = None, eval_batch: int = 500):
        if dataset.labels is None:
            raise ValueError("supervised task needs labels")
        self.dataset = dataset
        self.aug = aug
        self.eval_batch = eval_batch

    @property
    def name(self) -> str:
        return f"{self.kind}:{self.dataset.name}"

    @property
    def head(self) -> tuple[str, int]:
        return "classifier", self.dataset.n_classes

    @property
    def train_idx(self) -> np.ndarray:
        return self.dataset.train_idx

    def begin(self, params: ParamStore, mask, rng) -> None:
        pass

    def step(self, params: ParamStore, mask, idx: np.ndarray, rng):
        x = self.dataset.images[idx]
        if self.aug is not None:
            x = augment(x, self.aug, rng)
        out, tape = forward(params, mask, x, train=True)
        loss, g = supervised_loss(out, self.dataset.labels[idx])
        return loss, backward(tape, g), tape.batch_stats

    def predict(self, params: ParamStore, mask, split: str = "test") -> np.ndarray:
        images, _ = self.dataset.split(split)
        preds = []
        for s in range(0, len(images), self.eval_batch):
            out, _ = forward(params, mask, images[s:s + self.eval_batch], train=False)
            check_finite(out, "logits")
            preds.append(np.argmax(out, axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=int)

    def evaluate(self, params: ParamStore, mask, split: str = "test") -> float:
        _, labels = self.dataset.split(split)
        if len(labels) == 0:
            return 0.0
        return float(np.mean(self.predict(params, mask, split) == labels))


class _ContrastiveTask:
    """Shared evaluation for the two contrastive objectives."""

    def __init__(self, dataset: Dataset, spec: TaskSpec, eval_batch: int = 256,
                 eval_seed: int = 0):
        self.dataset = dataset
        self.spec = spec
        self.aug = spec.aug or AugPolicy()
        self.eval_batch = eval_batch
        self.eval_seed = eval_seed

    @property
    def name(self) -> str:
        return f"{self.kind}:{self.dataset.name}"

    @property
    def head(self) -> tuple[str, int]:
        return "projector", self.spec.embed_dim

    @property
    def train_idx(self) -> np.ndarray:
        return self.dataset.train_idx

    def embed(self, params: ParamStore, mask, x: np.ndarray) -> np.ndarray:
        out, _ = forward(params, mask, x, train=False)
        check_finite(out, "embeddings")
        return out

    def evaluate(self, params: ParamStore, mask, split: str = "test") -> float:
        images, _ = self.dataset.split(split)
        rng = make_rng(self.eval_seed, "retrieval-views")
        scores, weights = [], []
        for s in range(0, len(images), self.eval_batch):
            x = images[s:s + self.eval_batch]
            if len(x) < 2:
                continue
            v1, v2 = augment(x, self.aug, rng), augment(x, self.aug, rng)
            scores.append(top1_retrieval_accuracy(self.embed(params, mask, v1),
                                                  self.embed(params, mask, v2)))
            weights.append(len(x))
        if not scores:
            return 0.0
        return float(np.average(scores, weights=weights)) / 100.0


class NTXentTask(_ContrastiveTask):
    kind = "ntxent"

    def begin(self, params: ParamStore, mask, rng) -> None:
        pass

    def step(self, params: ParamStore, mask, idx: np.ndarray, rng):
        x = self.dataset.images[idx]
        v1, v2 = augment(x, self.aug, rng), augment(x, self.aug, rng)
        n = len(idx)
        h, tape = forward(params, mask, np.concatenate([v1, v2]), train=True)
        z, norms = l2_normalize(h)
        loss, (g1, g2) = ntxent_loss(z[:n], z[n:], self.spec.temperature)
        gh = l2_normalize_backward(np.concatenate([g1, g2]), z, norms)
        return loss, backward(tape, gh), tape.batch_stats


class MomentumQueueTask(_ContrastiveTask):
    kind = "momentum_queue"

    def begin(self, params: ParamStore, mask, rng) -> None:
        """Copy the encoder into the key encoder and warm the queue with its keys."""
        self.key = params.copy()
        pool = self.dataset.train_idx
        idx = rng.choice(pool, size=self.spec.queue_size, replace=len(pool) < self.spec.queue_size)
        keys = []
        for s in range(0, len(idx), self.eval_batch):
            x = augment(self.dataset.images[idx[s:s + self.eval_batch]], self.aug, rng)
            h, _ = forward(self.key, mask, x, train=True)
            keys.append(l2_normalize(h)[0])
        self.queue = np.concatenate(keys) if keys else np.zeros((0, self.spec.embed_dim))

    def step(self, params: ParamStore, mask, idx: np.ndarray, rng):
        if len(idx) > self.spec.queue_size:
            raise ValueError(f"batch of {len(idx)} exceeds queue_size {self.spec.queue_size}")
        x = self.dataset.images[idx]
        views = (augment(x, self.aug, rng), augment(x, self.aug, rng))
        loss, grads, self.key, self.queue, stats = momentum_queue_step(
            params, self.key, self.queue, views, mask, self.spec.temperature,
            self.spec.momentum_coef, self.spec.queue_size)
        return loss, grads, stats


def make_task(spec: TaskSpec, dataset: Dataset, eval_seed: int = 0):
    if spec.kind == "supervised":
        return SupervisedTask(dataset, spec.aug)
    if spec.kind == "ntxent":
        return NTXentTask(dataset, spec, eval_seed=eval_seed)
    return MomentumQueueTask(dataset, spec, eval_seed=eval_seed)
