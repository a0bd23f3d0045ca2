"""Three-phase adversarial autoencoder training.

Per step: (1) reconstruction update of encoder+decoder on mean squared
error, (2) discriminator update on fresh prior draws vs the current encoded
codes, (3) generator update of the encoder alone through the frozen
discriminator. Each loss has its own Adam optimizer under a polynomial
learning-rate decay.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .tensor import LrSchedule, ShapeError, Tape, Tensor, adam_init, adam_step, poly_decay_lr

_PROB_EPS = 1e-7


class TrainingError(RuntimeError):
    """Non-finite loss or other unrecoverable training fault."""


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 64
    recon_lr: LrSchedule = field(
        default_factory=lambda: LrSchedule(0.005, 0.0001, power=0.5))
    adv_lr: LrSchedule = field(
        default_factory=lambda: LrSchedule(0.001, 0.0001, power=0.5))
    seed: int = 0
    checkpoint_every: int = 0  # epochs between checkpoints, 0 = off
    checkpoint_dir: str | None = None
    adversarial: bool = True  # phases 2+3; off = plain autoencoder

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    recon_loss: float
    disc_loss: float
    gen_loss: float
    recon_lr: float
    adv_lr: float
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,recon_loss,disc_loss,gen_loss,recon_lr,adv_lr,seconds\n")
            for r in self.records:
                fh.write(
                    f"{r.epoch},{r.recon_loss:.8g},{r.disc_loss:.8g},"
                    f"{r.gen_loss:.8g},{r.recon_lr:.8g},{r.adv_lr:.8g},"
                    f"{r.seconds:.3f}\n"
                )


def reconstruction_loss(x, x_hat):
    """Mean over all elements of squared error."""
    x, x_hat = T.as_tensor(x), T.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(
            f"reconstruction_loss: shapes differ {x.shape} vs {x_hat.shape}"
        )
    return T.square(x - x_hat).mean()


def adversarial_losses(d_prior, d_encoded):
    """Cross-entropy pair: discriminator loss and generator (encoder) loss.

    d_prior / d_encoded are discriminator probabilities for prior draws and
    encoded codes. Values are clamped away from {0, 1} before the logs.
    """
    d_prior, d_encoded = T.as_tensor(d_prior), T.as_tensor(d_encoded)
    for name, probs in (("d_prior", d_prior), ("d_encoded", d_encoded)):
        arr = probs.numpy()
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(f"{name}: probabilities outside [0, 1]")
    p = T.clip(d_prior, _PROB_EPS, 1.0 - _PROB_EPS)
    q = T.clip(d_encoded, _PROB_EPS, 1.0 - _PROB_EPS)
    one = Tensor(np.ones((), dtype=np.float32))
    disc_loss = -(T.log(p).mean()) - T.log(one - q).mean()
    gen_loss = -(T.log(q).mean())
    return disc_loss, gen_loss


@dataclass
class Optimizers:
    recon: object
    disc: object
    gen: object
    recon_params: list
    disc_params: list
    gen_params: list


def make_optimizers(bundle):
    recon_params = bundle.encoder_tensors() + bundle.decoder_tensors()
    disc_params = bundle.discriminator_tensors()
    gen_params = bundle.encoder_tensors()
    return Optimizers(
        recon=adam_init(recon_params),
        disc=adam_init(disc_params),
        gen=adam_init(gen_params),
        recon_params=recon_params,
        disc_params=disc_params,
        gen_params=gen_params,
    )


def _check_finite(value, epoch, phase):
    if not np.isfinite(value):
        raise TrainingError(
            f"non-finite loss at epoch {epoch}, phase {phase}: {value}"
        )
    return value


def reconstruction_phase(x, bundle, optim, lr, epoch=0):
    """Update encoder+decoder on mean squared reconstruction error."""
    with Tape() as tape:
        x_hat = M.decode(bundle, M.encode(bundle, x))
        loss = reconstruction_loss(x, x_hat)
        grads = tape.backward(loss, params=optim.recon_params)
    value = _check_finite(loss.item(), epoch, "reconstruction")
    adam_step(optim.recon_params,
              [grads[p] for p in optim.recon_params], optim.recon, lr)
    return value


def discriminator_phase(x, bundle, optim, lr, rng, epoch=0):
    """Update the discriminator on fresh prior draws vs the current codes.

    The codes are detached, so the encoder stays untouched here.
    """
    codes = M.encode(bundle, x).detach()
    prior = rng.standard_normal(
        (x.shape[0], bundle.config.latent_dim)).astype(np.float32)
    with Tape() as tape:
        d_prior = M.discriminate(bundle, Tensor(prior))
        d_encoded = M.discriminate(bundle, codes)
        disc_loss, _ = adversarial_losses(d_prior, d_encoded)
        grads = tape.backward(disc_loss, params=optim.disc_params)
    value = _check_finite(disc_loss.item(), epoch, "discriminator")
    adam_step(optim.disc_params,
              [grads[p] for p in optim.disc_params], optim.disc, lr)
    return value


def generator_phase(x, bundle, optim, lr, epoch=0):
    """Update the encoder alone so its codes fool the frozen discriminator."""
    with Tape() as tape:
        d_fake = M.discriminate(bundle, M.encode(bundle, x))
        gen_loss = -(T.log(T.clip(d_fake, _PROB_EPS, 1.0 - _PROB_EPS)).mean())
        grads = tape.backward(gen_loss, params=optim.gen_params)
    value = _check_finite(gen_loss.item(), epoch, "generator")
    adam_step(optim.gen_params,
              [grads[p] for p in optim.gen_params], optim.gen, lr)
    return value


def train_step(batch, bundle, optim, step, recon_sched, adv_sched, rng,
               adversarial=True, epoch=0):
    """One full three-phase update; returns (recon, disc, gen) loss floats."""
    x = Tensor(batch)
    recon_lr = poly_decay_lr(step, recon_sched)
    adv_lr = poly_decay_lr(step, adv_sched)
    recon_val = reconstruction_phase(x, bundle, optim, recon_lr, epoch)
    if not adversarial:
        return recon_val, 0.0, 0.0
    disc_val = discriminator_phase(x, bundle, optim, adv_lr, rng, epoch)
    gen_val = generator_phase(x, bundle, optim, adv_lr, epoch)
    return recon_val, disc_val, gen_val


def fit(dataset, config, model_config=None):
    """Train a fresh model on a normalized batch; returns (bundle, log).

    Mini-batches are reshuffled every epoch from the seeded generator, which
    also supplies the phase-2 prior draws, so a (dataset, config) pair fully
    determines the run.
    """
    T.enable_allocator_reuse()
    data = np.ascontiguousarray(dataset, dtype=np.float32)
    if data.ndim != 3 or data.shape[0] == 0:
        raise ValueError(f"fit: expected non-empty (n, t, c) data, got {data.shape}")
    if data.min() < -1e-6 or data.max() > 1.0 + 1e-6:
        raise ValueError("fit: dataset must be min-max normalized to [0, 1]")
    n, t, c = data.shape

    if model_config is None:
        model_config = M.ModelConfig(
            time_steps=t, channels=c,
            latent_dim=M.default_latent_dim(t), seed=config.seed,
        )
    if model_config.time_steps != t or model_config.channels != c:
        raise ShapeError(
            f"fit: data {data.shape[1:]} does not match model config "
            f"({model_config.time_steps}, {model_config.channels})"
        )
    bundle = M.build_model(model_config)
    optim = make_optimizers(bundle)

    steps_per_epoch = -(-n // config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    def resolved(sched):
        if sched.decay_steps > 1:
            return sched
        return LrSchedule(sched.initial_lr, sched.end_lr, sched.power, total_steps)

    recon_sched = resolved(config.recon_lr)
    adv_sched = resolved(config.adv_lr)

    rng = np.random.default_rng(config.seed)
    log = TrainLog()
    step = 0
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, config.batch_size):
            batch = data[order[start : start + config.batch_size]]
            losses = train_step(batch, bundle, optim, step, recon_sched,
                                adv_sched, rng,
                                adversarial=config.adversarial, epoch=epoch)
            sums += losses
            step += 1
        means = sums / steps_per_epoch
        log.records.append(EpochRecord(
            epoch=epoch,
            recon_loss=float(means[0]),
            disc_loss=float(means[1]),
            gen_loss=float(means[2]),
            recon_lr=poly_decay_lr(step - 1, recon_sched),
            adv_lr=poly_decay_lr(step - 1, adv_sched),
            seconds=time.perf_counter() - started,
        ))
        if (config.checkpoint_every and config.checkpoint_dir
                and epoch % config.checkpoint_every == 0):
            M.save_weights(bundle,
                           f"{config.checkpoint_dir}/weights.epoch{epoch:04d}.ttae")
    bundle.config.trained = True
    return bundle, log
