"""Mixtures of flows fitted by maximizing an exact discrete-latent ELBO.

The variational posterior q(z|x) is an MLP with a tempered K-way softmax.
Because z takes K values the expectation in the bound is a finite sum, so no
sampling or score-function estimator is involved anywhere.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Param
from .datasets import minibatch_indices
from .errors import ContractError, NumericError, ShapeError
from .flows import FlowStack, build_stack
from .nn import MLP, Adam, cross_entropy, log_softmax_with_temperature

LOG_Q_FLOOR = math.log(1e-12)


@dataclass(frozen=True)
class TemperatureSchedule:
    """``T(epoch) = max(t_min, t0 * exp(-decay * epoch))``."""

    t0: float = 5.0
    t_min: float = 1.0
    decay: float = 0.0

    def __post_init__(self):
        if not (self.t0 > 0 and self.t_min > 0 and self.decay >= 0):
            raise ContractError("temperature schedule needs t0 > 0, t_min > 0, decay >= 0")

    @classmethod
    def reaching_floor(cls, epochs: int, t0: float = 5.0, t_min: float = 1.0,
                       fraction: float = 2.0 / 3.0) -> "TemperatureSchedule":
        """Decay chosen so that T hits ``t_min`` after ``fraction * epochs`` epochs."""
        span = fraction * epochs
        decay = math.log(t0 / t_min) / span if span > 0 and t0 > t_min else 0.0
        return cls(t0, t_min, decay)

    def at(self, epoch: int) -> float:
        if epoch < 0:
            raise ContractError("epoch must be non-negative")
        return max(self.t_min, self.t0 * math.exp(-self.decay * epoch))


def temperature_at(schedule: TemperatureSchedule, epoch: int) -> float:
    return schedule.at(epoch)


@dataclass
class ElboTerms:
    """Per-example pieces of the bound; ``elbo`` is their sum."""

    reconstruction: np.ndarray
    prior: np.ndarray
    entropy: np.ndarray

    @property
    def elbo(self) -> np.ndarray:
        return self.reconstruction + self.prior + self.entropy


class MixtureModel:
    """K flow components, a posterior network over components, and a fixed log-prior."""

    def __init__(self, components: Sequence[FlowStack], posterior: MLP,
                 log_prior: np.ndarray | None = None):
        self.components = list(components)
        if not self.components:
            raise ContractError("mixture needs at least one component")
        self.dim = self.components[0].dim
        if any(c.dim != self.dim for c in self.components):
            raise ContractError("all components must share the data dimension")
        self.posterior = posterior
        k = len(self.components)
        if posterior.widths[0] != self.dim or posterior.widths[-1] != k:
            raise ShapeError("posterior", tuple(posterior.widths), detail=f"D={self.dim}, K={k}")
        if log_prior is None:
            log_prior = np.full(k, -math.log(k))
        self.log_prior = np.asarray(log_prior, dtype=np.float64)
        if self.log_prior.shape != (k,) or abs(np.exp(self.log_prior).sum() - 1) > 1e-9:
            raise ContractError("log_prior must be a length-K log-probability vector")

    @classmethod
    def build(cls, dim: int, n_components: int, flow_layers: Sequence[dict],
              posterior_hidden: Sequence[int], rng: np.random.Generator,
              zero_posterior: bool = False, posterior_gain: float = 1.0) -> "MixtureModel":
        """``posterior_gain`` scales the initial posterior output layer (sharper starting partition)."""
        comps = [build_stack(flow_layers, dim, rng, name=f"component{k}")
                 for k in range(n_components)]
        post = MLP([dim, *posterior_hidden, n_components], rng, name="posterior",
                   zero_last=zero_posterior)
        if posterior_gain != 1.0:
            post.weights[-1].value *= posterior_gain
            post.biases[-1].value *= posterior_gain
        return cls(comps, post)

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def params(self) -> list[Param]:
        return [p for c in self.components for p in c.params] + self.posterior.params

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for c in self.components:
            out.update(c.buffers)
        return out

    def load_buffers(self, arrays: dict[str, np.ndarray]) -> None:
        for c in self.components:
            c.load_buffers(arrays)

    def train(self, mode: bool = True) -> "MixtureModel":
        for c in self.components:
            c.train(mode)
        return self

    def eval(self) -> "MixtureModel":
        return self.train(False)

    def component_log_probs(self, x) -> Node:
        """``log p(x | z=k)`` as a [batch, K] node, components merged in index order."""
        x = ad.as_node(x)
        cols = []
        for k, comp in enumerate(self.components):
            try:
                lp = comp.log_prob(x)
            except NumericError as err:
                raise err.locate(component=k)
            if not np.all(np.isfinite(lp.value)):
                raise NumericError("non-finite component log-probability", component=k)
            cols.append(ad.reshape(lp, (x.shape[0], 1)))
        return ad.concat(cols, axis=1)

    def posterior_logits(self, x) -> Node:
        return self.posterior(x)


def responsibilities(model: MixtureModel, x, temperature: float = 1.0) -> np.ndarray:
    with ad.no_grad():
        logq = log_softmax_with_temperature(model.posterior_logits(x), temperature)
    return np.exp(logq.value)


def elbo_from_posterior(q: Node, log_q: Node, component_log_probs: Node,
                        log_prior: np.ndarray) -> tuple[Node, ElboTerms]:
    """Mean over the batch of sum_k q_k (log p(x|k) + log p(k) - log q_k)."""
    recon = ad.sum(q * component_log_probs, axis=1)
    prior = ad.sum(q * log_prior, axis=1)
    entropy = -ad.sum(q * log_q, axis=1)
    total = ad.mean(recon + prior + entropy)
    return total, ElboTerms(recon.value, prior.value, entropy.value)


def elbo(model: MixtureModel, x, temperature: float = 1.0) -> tuple[Node, ElboTerms]:
    x = ad.as_node(x)
    if x.shape[0] == 0:
        raise ContractError("elbo needs a non-empty batch")
    log_q_exact = log_softmax_with_temperature(model.posterior_logits(x), temperature)
    q = ad.exp(log_q_exact)
    log_q = ad.maximum(log_q_exact, LOG_Q_FLOOR)
    return elbo_from_posterior(q, log_q, model.component_log_probs(x), model.log_prior)


def exact_log_evidence(model: MixtureModel, x) -> np.ndarray:
    """``log sum_k p(k) p(x|k)`` per row; exact because z is discrete."""
    with ad.no_grad():
        joint = model.component_log_probs(x) + model.log_prior
        return ad.logsumexp(joint, axis=1).value


def exact_posterior(model: MixtureModel, x) -> np.ndarray:
    with ad.no_grad():
        joint = (model.component_log_probs(x) + model.log_prior).value
    return np.exp(joint - ad.logsumexp(joint, axis=1, keepdims=True).value)


def assign_cluster(model: MixtureModel, x) -> np.ndarray:
    """Most responsible component per row (ties go to the lowest index)."""
    with ad.no_grad():
        logits = model.posterior_logits(x).value
    return np.argmax(logits, axis=1)


def sample_component(model: MixtureModel, k: int, n: int, seed=None) -> np.ndarray:
    if not 0 <= k < model.n_components:
        raise IndexError(f"component {k} outside [0, {model.n_components})")
    return model.components[k].sample(n, seed)


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    phase: str
    elbo: float = float("nan")
    reconstruction: float = float("nan")
    prior: float = float("nan")
    entropy: float = float("nan")
    temperature: float = float("nan")
    supervised_nll: float = float("nan")
    cross_entropy: float = float("nan")
    seconds: float = 0.0


def _step(loss: Node, params: list[Param], optimizer: Adam, batch: int) -> None:
    if not np.isfinite(loss.value):
        raise NumericError("non-finite loss", batch=batch)
    grads = ad.backward(loss, params)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}", batch=batch)
    optimizer.step(grads)


def train_epoch_unsupervised(model: MixtureModel, data: np.ndarray, optimizer: Adam,
                             temperature: float, batch_size: int,
                             rng: np.random.Generator, epoch: int = 0) -> EpochMetrics:
    """One shuffled pass of Adam steps on the negative ELBO."""
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if n == 0:
        raise ContractError("training data is empty")
    if not 1 <= batch_size <= n:
        raise ContractError(f"batch size {batch_size} must lie in [1, {n}]")
    start = time.perf_counter()
    model.train()
    params = model.params
    sums = np.zeros(3)
    for b, idx in enumerate(minibatch_indices(n, batch_size, rng)):
        try:
            value, terms = elbo(model, data[idx], temperature)
            _step(-value, params, optimizer, b)
        except NumericError as err:
            raise err.locate(batch=b, epoch=epoch)
        sums += [terms.reconstruction.sum(), terms.prior.sum(), terms.entropy.sum()]
    recon, prior, ent = sums / n
    return EpochMetrics(epoch, "unsupervised", recon + prior + ent, recon, prior, ent,
                        temperature, seconds=time.perf_counter() - start)


def _check_labels(model: MixtureModel, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if x.shape[0] == 0:
        raise ContractError("labeled set is empty")
    if y.shape != (x.shape[0],):
        raise ShapeError("labels", x.shape, y.shape)
    if y.min() < 0 or y.max() >= model.n_components:
        raise ContractError(f"labels must lie in [0, {model.n_components})")
    return x, y


def supervised_epoch(model: MixtureModel, x: np.ndarray, y: np.ndarray, optimizer: Adam,
                     batch_size: int, rng: np.random.Generator, epoch: int = 0) -> EpochMetrics:
    """Fit component k to the rows labeled k and the posterior to all labels.

    Components without labeled rows in a batch are left out of that step
    entirely, so Adam and weight decay do not touch them.
    """
    x, y = _check_labels(model, x, y)
    start = time.perf_counter()
    model.train()
    n = x.shape[0]
    nll_sum = ce_sum = 0.0
    for b, idx in enumerate(minibatch_indices(n, min(batch_size, n), rng)):
        xb, yb = x[idx], y[idx]
        loss = ad.as_node(0.0)
        params: list[Param] = []
        nll_batch = 0.0
        try:
            for k, comp in enumerate(model.components):
                rows = np.flatnonzero(yb == k)
                if rows.size == 0:
                    continue
                lp = comp.log_prob(xb[rows])
                nll = -ad.mean(lp)
                loss = loss + nll
                nll_batch += float(-lp.value.sum())
                params += comp.params
            probs = ad.exp(log_softmax_with_temperature(model.posterior_logits(xb), 1.0))
            ce = cross_entropy(probs, yb)
            loss = loss + ce
            params += model.posterior.params
            _step(loss, params, optimizer, b)
        except NumericError as err:
            raise err.locate(batch=b, epoch=epoch)
        nll_sum += nll_batch
        ce_sum += float(ce.value) * len(idx)
    return EpochMetrics(epoch, "supervised", supervised_nll=nll_sum / n,
                        cross_entropy=ce_sum / n, temperature=1.0,
                        seconds=time.perf_counter() - start)


def pretrain_supervised(model: MixtureModel, x, y, optimizer: Adam, epochs: int,
                        rng: np.random.Generator, batch_size: int = 128,
                        callback: Callable[[EpochMetrics], None] | None = None
                        ) -> list[EpochMetrics]:
    x, y = _check_labels(model, x, y)
    for k in np.setdiff1d(np.arange(model.n_components), y):
        warnings.warn(f"component {k} has no labeled examples; it is skipped", stacklevel=2)
    out = []
    for e in range(epochs):
        m = supervised_epoch(model, x, y, optimizer, batch_size, rng, epoch=e)
        m.phase = "pretrain"
        out.append(m)
        if callback:
            callback(m)
    return out


def train_unsupervised(model: MixtureModel, data, optimizer: Adam,
                       schedule: TemperatureSchedule, epochs: int, batch_size: int,
                       rng: np.random.Generator, start_epoch: int = 0,
                       callback: Callable[[EpochMetrics], None] | None = None
                       ) -> list[EpochMetrics]:
    out = []
    for e in range(start_epoch, start_epoch + epochs):
        m = train_epoch_unsupervised(model, data, optimizer, schedule.at(e), batch_size, rng, e)
        out.append(m)
        if callback:
            callback(m)
    return out


def train_semisupervised(model: MixtureModel, labeled_x, labeled_y, unlabeled_x,
                         optimizer: Adam, schedule: TemperatureSchedule, epochs: int,
                         rng: np.random.Generator, batch_size: int = 128,
                         supervised_per_round: int = 1, unsupervised_per_round: int = 1,
                         callback: Callable[[EpochMetrics], None] | None = None
                         ) -> list[EpochMetrics]:
    """``epochs`` rounds, each of supervised epochs followed by unsupervised ones.

    The temperature follows ``schedule`` indexed by the count of unsupervised
    epochs run so far.
    """
    labeled_x, labeled_y = _check_labels(model, labeled_x, labeled_y)
    unlabeled_x = np.asarray(unlabeled_x, dtype=np.float64)
    if unlabeled_x.shape[0] == 0 and unsupervised_per_round > 0:
        raise ContractError("unlabeled set is empty")
    out = []
    n_unsup = 0
    for r in range(epochs):
        for _ in range(supervised_per_round):
            m = supervised_epoch(model, labeled_x, labeled_y, optimizer, batch_size, rng, epoch=r)
            out.append(m)
            if callback:
                callback(m)
        for _ in range(unsupervised_per_round):
            bs = min(batch_size, unlabeled_x.shape[0])
            m = train_epoch_unsupervised(model, unlabeled_x, optimizer, schedule.at(n_unsup),
                                         bs, rng, epoch=r)
            n_unsup += 1
            out.append(m)
            if callback:
                callback(m)
    return out
