"""Training: the three-phase step (clean forward, noise backward, adversarial
forward), Adam updates with bias correction, and the epoch loop with
best-dev-checkpoint selection.

Phase structure per step when adversarial training is on:
  1. clean forward on a dedicated tape, sampling fresh dropout masks;
     backward of the classification loss alone yields the input gradient
  2. the gradient is normalized into the perturbation (detached)
  3. a second tape records the clean forward again with the phase-1 masks,
     both contrastive losses, and the adversarial forward on input+noise
     with the same masks
  4. the combined loss is backwarded once and Adam applies the update
Each tape is consumed by exactly one backward pass; phase-1 parameter
gradients are zeroed before phase 3 records.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import NumericsError, Tape, Tensor
from .data import Corpus, DataError, stratified_batches
from .losses import LossBundle, adv_noise, combine_losses, nll_loss, supcon_loss
from .metrics import evaluate
from .model import ModelParams, forward


@dataclass(frozen=True)
class HyperParams:
    tau1: float = 0.1
    tau2: float = 0.1
    epsilon: float = 0.3
    lam: float = 0.3
    alpha: float = 0.01
    learning_rate: float = 1e-4
    dropout: float = 0.4
    batch_size: int = 32
    epochs: int = 40
    seed: int = 0
    positives_per_cell: int = 4
    use_dscl: bool = True
    use_cscl: bool = True
    use_al: bool = True
    noise_norm_scope: str = "per_example"

    def with_ablation(self, dscl=None, cscl=None, al=None) -> "HyperParams":
        return replace(self,
                       use_dscl=self.use_dscl if dscl is None else dscl,
                       use_cscl=self.use_cscl if cscl is None else cscl,
                       use_al=self.use_al if al is None else al)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, named_params) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for _, p in named_params],
                   v=[np.zeros_like(p.data) for _, p in named_params])


def adam_step(named_params, state: AdamState, lr: float) -> None:
    """Standard Adam with bias correction, reading gradients off the tensors."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for i, (name, p) in enumerate(named_params):
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient at step {state.t} in {name}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / (1.0 - b1 ** state.t)
        v_hat = state.v[i] / (1.0 - b2 ** state.t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class StepCounters:
    forwards: int = 0
    adv_forwards: int = 0
    backwards: int = 0


def train_step(model: ModelParams, x: np.ndarray, domains: np.ndarray,
               labels: np.ndarray, hp: HyperParams, adam: AdamState, rng,
               counters: StepCounters = None) -> LossBundle:
    """One optimization step on a dense batch. Returns the loss bundle."""
    counters = counters if counters is not None else StepCounters()
    named = model.all_params()

    noise = None
    masks = None
    if hp.use_al:
        tape_noise = Tape()
        x_probe = Tensor(x)
        out_probe = forward(tape_noise, model, x_probe, "train", rng=rng)
        counters.forwards += 1
        l_C_probe = nll_loss(tape_noise, out_probe.logits, labels)
        model.zero_grad()
        tape_noise.backward(l_C_probe)
        counters.backwards += 1
        noise = adv_noise(x_probe.grad, hp.epsilon, hp.noise_norm_scope)
        masks = out_probe.masks
        model.zero_grad()

    tape = Tape()
    x_t = Tensor(x)
    out = forward(tape, model, x_t, "train", rng=rng, masks=masks)
    counters.forwards += 1
    l_C = nll_loss(tape, out.logits, labels)
    l_d = supcon_loss(tape, out.f_d, domains, hp.tau1) if hp.use_dscl else None
    l_c = supcon_loss(tape, out.f_c, labels, hp.tau2) if hp.use_cscl else None

    l_C_prime = None
    if hp.use_al:
        x_adv = tape.add(x_t, Tensor(noise))
        out_adv = forward(tape, model, x_adv, "train", masks=out.masks)
        counters.forwards += 1
        counters.adv_forwards += 1
        l_C_prime = nll_loss(tape, out_adv.logits, labels)

    bundle = combine_losses(tape, l_C, l_C_prime, l_d, l_c, hp)
    model.zero_grad()
    tape.backward(bundle.l_total)
    counters.backwards += 1
    adam_step(named, adam, hp.learning_rate)
    return bundle


@dataclass
class EpochRecord:
    epoch: int
    l_total: float
    l_d: float
    l_c: float
    l_C: float
    l_C_prime: float
    train_acc: float
    dev_acc: float


def format_epoch_record(r: EpochRecord) -> str:
    return (f"epoch={r.epoch} l_total={r.l_total!r} l_d={r.l_d!r} l_c={r.l_c!r} "
            f"l_C={r.l_C!r} l_C_prime={r.l_C_prime!r} "
            f"train_acc={r.train_acc!r} dev_acc={r.dev_acc!r}")


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    best_dev_acc: float = float("-inf")
    counters: StepCounters = field(default_factory=StepCounters)

    def lines(self):
        return [format_epoch_record(r) for r in self.records]


def train(model: ModelParams, train_set: Corpus, dev_set: Corpus, hp: HyperParams,
          log_fh=None) -> tuple:
    """Run hp.epochs of stratified batches; return (best checkpoint, history).

    The checkpoint is the parameter snapshot with the best dev macro-average
    accuracy (ties keep the earlier epoch). Fully deterministic for a fixed
    (seed, config, data).
    """
    if len(train_set) == 0 or len(dev_set) == 0:
        raise DataError("train and dev sets must be nonempty")
    root = np.random.SeedSequence(hp.seed)
    mask_ss, batch_ss = root.spawn(2)
    mask_rng = np.random.default_rng(mask_ss)
    batch_rng = np.random.default_rng(batch_ss)

    history = TrainHistory()
    best = model.copy()
    adam = AdamState.for_params(model.all_params())

    for epoch in range(1, hp.epochs + 1):
        epoch_seed = int(batch_rng.integers(0, 2**63))
        batches = stratified_batches(train_set, hp.batch_size,
                                     m=hp.positives_per_cell, seed=epoch_seed)
        sums = {"l_total": 0.0, "l_d": 0.0, "l_c": 0.0, "l_C": 0.0, "l_C_prime": 0.0}
        for batch in batches:
            x, domains, labels = train_set.densify(batch)
            bundle = train_step(model, x, domains, labels, hp, adam, mask_rng,
                                counters=history.counters)
            vals = bundle.values()
            for key in sums:
                sums[key] += vals[key]
        n_batches = max(len(batches), 1)
        record = EpochRecord(
            epoch=epoch,
            l_total=sums["l_total"] / n_batches,
            l_d=sums["l_d"] / n_batches,
            l_c=sums["l_c"] / n_batches,
            l_C=sums["l_C"] / n_batches,
            l_C_prime=sums["l_C_prime"] / n_batches,
            train_acc=evaluate(model, train_set).average_accuracy,
            dev_acc=evaluate(model, dev_set).average_accuracy,
        )
        history.records.append(record)
        if log_fh is not None:
            log_fh.write(format_epoch_record(record) + "\n")
            log_fh.flush()
        if record.dev_acc > history.best_dev_acc:
            history.best_dev_acc = record.dev_acc
            history.best_epoch = epoch
            best = model.copy()

    return best, history
