"""Shared minibatch SGD loop and step logging."""

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T


@dataclass
class TrainStepReport:
    stage: str
    step: int
    epoch: int
    lr: float
    level_losses: dict
    total: float

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def sum_terms(terms):
    """Sum a name -> scalar Tensor mapping into one Tensor (insertion order)."""
    items = list(terms.values())
    total = items[0]
    for t in items[1:]:
        total = T.add(total, t)
    return total


def run_sgd(stage, params, n_samples, loss_fn, *, lr, momentum, epochs, batch_size, seed, grad_clip=None, on_step=None):
    """Shuffle-and-step loop.

    ``loss_fn(indices)`` returns ``(total, terms)`` where ``terms`` maps a
    name to a scalar Tensor and ``total`` is their sum. Returns the list of
    step reports.
    """
    reports = []
    step = 0
    for epoch in range(epochs):
        order = np.random.default_rng([int(seed), epoch]).permutation(n_samples)
        for start in range(0, n_samples, batch_size):
            idx = order[start:start + batch_size]
            total, terms = loss_fn(idx)
            T.backward(total)
            if grad_clip:
                T.clip_grad_norm(params, grad_clip)
            T.sgd_step(params, lr, momentum)
            rep = TrainStepReport(
                stage=stage,
                step=step,
                epoch=epoch,
                lr=float(lr),
                level_losses={k: float(v.item()) for k, v in terms.items()},
                total=float(total.item()),
            )
            reports.append(rep)
            if on_step is not None:
                on_step(rep)
            step += 1
    return reports


def epoch_means(reports):
    """Mean total loss per epoch."""
    by_epoch = {}
    for r in reports:
        by_epoch.setdefault(r.epoch, []).append(r.total)
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]
