"""Task loss, memory-retention losses (KL and JSD-bound) and the eta schedule.

Other f-divergence bounds share the JSD estimator's structure
``E_J[g(F)] - E_M[g*(g(F))]`` and differ only in the output activation ``g``
and the conjugate ``g*``:

* KL:                g(v) = v,                g*(t) = exp(t - 1)
* reverse KL:        g(v) = -exp(-v),         g*(t) = -1 - log(-t)
* Pearson chi^2:     g(v) = v,                g*(t) = t^2 / 4 + t
* squared Hellinger: g(v) = 1 - exp(-v),      g*(t) = t / (1 - t)
* Jensen-Shannon:    g(v) = log 2 - softplus(-v), g*(t) = -log(2 - exp(t))

Only the Jensen-Shannon form is implemented as a training loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, StateError
from .numkernel import AdamState, GradTape, Tensor, adam_step
from .numkernel import tape as T

LOG2 = math.log(2.0)


def task_loss(logits, labels):
    """Mean negative log-likelihood. Tensors stay on their tape; arrays give a float."""
    if isinstance(logits, Tensor):
        return T.cross_entropy(logits, labels)
    tape = GradTape()
    return float(T.cross_entropy(tape.constant(np.atleast_2d(logits)), labels).value)


def _check_proba(p: np.ndarray, what: str) -> None:
    if p.ndim != 2 or np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise InvalidArgumentError(f"{what} rows must be probability vectors")


def mr_loss_kl(proba_new, proba_old, floor: float = 1e-12) -> float:
    """Mean over rows of ``KL(p_new || p_old)`` with ``0 log 0 = 0``."""
    p = np.atleast_2d(np.asarray(proba_new, dtype=np.float64))
    q = np.atleast_2d(np.asarray(proba_old, dtype=np.float64))
    _check_proba(p, "proba_new")
    _check_proba(q, "proba_old")
    if p.shape != q.shape:
        raise InvalidArgumentError(f"batch shapes differ: {p.shape} vs {q.shape}")
    logq = np.log(np.maximum(q, floor))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - logq), 0.0)
    return float(terms.sum(axis=1).mean())


def mr_loss_kl_logits(logits_new: Tensor, proba_old: np.ndarray) -> Tensor:
    """Tape form used in training; ``proba_old`` is detached by construction."""
    return T.kl_from_logits(logits_new, np.asarray(proba_old))


# --- JSD bound ---------------------------------------------------------------


@dataclass
class Discriminator:
    """Two-hidden-layer ReLU MLP scoring a concatenated (new, old) probability pair."""

    params: dict

    @property
    def in_dim(self) -> int:
        return self.params["w1"].shape[0]


def init_discriminator(n_classes: int, hidden: int, rng: np.random.Generator) -> Discriminator:
    din = 2 * n_classes
    return Discriminator(
        params={
            "w1": rng.standard_normal((din, hidden)) * math.sqrt(2.0 / din),
            "b1": np.zeros(hidden),
            "w2": rng.standard_normal((hidden, hidden)) * math.sqrt(2.0 / hidden),
            "b2": np.zeros(hidden),
            "w3": rng.standard_normal((hidden, 1)) / math.sqrt(hidden),
            "b3": np.zeros(1),
        }
    )


def disc_score(ps: dict, z: Tensor) -> Tensor:
    h = T.relu(z @ ps["w1"] + ps["b1"])
    h = T.relu(h @ ps["w2"] + ps["b2"])
    return T.reshape(h @ ps["w3"] + ps["b3"], (-1,))


@dataclass
class MrBatch:
    """Joint pairs share an input; marginal pairs re-pair ``old`` by ``perm``."""

    xi_new: object  # B x K, array or tensor
    xi_old: np.ndarray  # B x K, detached
    perm: np.ndarray

    def __len__(self) -> int:
        return self.xi_old.shape[0]


def make_mr_batch(xi_new, xi_old, rng: np.random.Generator) -> MrBatch:
    """Pair samples; the marginal permutation is a derangement whenever B >= 2."""
    xi_old = np.asarray(xi_old, dtype=np.float64)
    b = xi_old.shape[0]
    if b == 0:
        raise InvalidArgumentError("MR batch is empty")
    perm = np.arange(b)
    if b >= 2:
        perm = (perm + int(rng.integers(1, b))) % b
    return MrBatch(xi_new=xi_new, xi_old=xi_old, perm=perm)


def mr_loss_jsd(batch: MrBatch, disc, tape: GradTape | None = None):
    """``E_J[softplus(-F)] + E_M[softplus(F)]``: the negated JSD lower bound.

    ``disc`` is a :class:`Discriminator` or a dict of tensors already on
    ``tape``. Without a tape, returns a float.
    """
    if len(batch) == 0:
        raise InvalidArgumentError("MR batch is empty")
    own = tape is None
    tape = tape or GradTape()
    ps = disc.params if isinstance(disc, Discriminator) else disc
    ps = {k: tape.lift(v) for k, v in ps.items()}
    new = tape.lift(batch.xi_new)
    old = tape.constant(batch.xi_old)
    old_m = tape.constant(batch.xi_old[batch.perm])
    joint = T.concat([new, old], axis=1)
    marg = T.concat([new, old_m], axis=1)
    loss = T.mean(T.softplus(-disc_score(ps, joint))) + T.mean(T.softplus(disc_score(ps, marg)))
    return float(loss.value) if own else loss


def jsd_divergence_estimate(l_mr: float) -> float:
    """Variational JSD-divergence estimate implied by an MR loss value (0 for independence)."""
    return 2.0 * LOG2 - l_mr


def disc_step(disc: Discriminator, state: AdamState, batch: MrBatch) -> float:
    """One discriminator update tightening the bound (minimizes the MR loss in its weights)."""
    tape = GradTape()
    ps = {k: tape.parameter(k, v) for k, v in disc.params.items()}
    detached = MrBatch(np.asarray(getattr(batch.xi_new, "value", batch.xi_new)), batch.xi_old, batch.perm)
    loss = mr_loss_jsd(detached, ps, tape)
    grads = tape.backward(loss)
    disc.params, _ = adam_step(state, disc.params, grads)
    return float(loss.value)


def train_discriminator(xi_new, xi_old, steps: int, rng: np.random.Generator, hidden: int = 64,
                        lr: float = 1e-3, batch_size: int = 64):
    """Fit a fresh discriminator on fixed sample pairs; returns ``(disc, final_loss)``.

    The final loss is evaluated on all samples with a fixed derangement.
    """
    xi_new = np.asarray(xi_new, dtype=np.float64)
    xi_old = np.asarray(xi_old, dtype=np.float64)
    n, k = xi_new.shape
    disc = init_discriminator(k, hidden, rng)
    state = AdamState(lr=lr)
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        disc_step(disc, state, make_mr_batch(xi_new[idx], xi_old[idx], rng))
    final = mr_loss_jsd(make_mr_batch(xi_new, xi_old, rng), disc)
    return disc, final


# --- schedule and total ---------------------------------------------------------


@dataclass(frozen=True)
class EtaSchedule:
    q_size: int
    eta_value: float

    # grid of memory factors examined for the schedule
    GRID = (1.0, 1e-1, 1e-2, 1e-3, 1e-4)

    def __call__(self, task_index: int) -> float:
        if task_index < 1:
            raise InvalidArgumentError("task_index starts at 1")
        return 0.0 if task_index <= self.q_size else self.eta_value


def total_loss(l_q, l_mr, schedule: EtaSchedule, task_index: int):
    eta = schedule(task_index)
    if eta == 0.0:
        return l_q
    return l_q + eta * l_mr


def build_old_reference(snapshot_prev, x_batch, head_alpha=None) -> np.ndarray:
    """Detached class probabilities of the previous task's frozen configuration.

    The previous prefix is prepended unscaled, the previous aggregator scales
    the previous queue, and ``head_alpha`` (the current task's head) reads out.
    """
    if snapshot_prev is None:
        raise StateError("no previous-task snapshot to build the old reference from")
    from .backbone import forward, predict_proba

    alpha = snapshot_prev.head.alpha if head_alpha is None else np.asarray(head_alpha)
    logits = forward(snapshot_prev.backbone, snapshot_prev.prefix, snapshot_prev.scaled_queue(), x_batch, alpha)
    return predict_proba(logits)
