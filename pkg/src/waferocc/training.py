"""Training loops for the three model kinds.

Every batch of the adversarial kinds runs three updates in order:

1. reconstruction: encoder + decoder minimize the L1 reconstruction error;
2. discriminator: encoder latents (label 0) against prior samples;
3. encoder: non-saturating adversarial loss, plus the SVDD hinge for
   ``aae_dsvdd``.

All randomness for epoch ``e`` comes from a generator seeded with
``(seed, e)``, so a run resumed from a checkpoint matches an uninterrupted one.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import TrainConfig
from .networks import (ENCODER_CLASS, PRIOR_CLASS, Decoder, Discriminator, Encoder,
                       HypersphereParams, combined_loss, discriminator_loss, dsvdd_loss,
                       generator_loss, reparameterize)
from .optim import Adam
from .prior import PriorSampler, assign_labels, init_center, update_radius, sample_prior
from .wafer import Label, WaferMap, encode_batch

log = logging.getLogger(__name__)

INFERENCE_BATCH = 512


class NumericError(RuntimeError):
    """A loss or score went NaN/Inf."""


@dataclass
class EpochRecord:
    epoch: int
    recon: float | None = None
    disc: float | None = None
    gen: float | None = None
    dsvdd: float | None = None
    hinge: float | None = None
    radius: float | None = None
    mean_dist: float | None = None
    outside_frac: float | None = None
    seconds: float = 0.0

    def to_line(self) -> str:
        parts = []
        for k, v in asdict(self).items():
            if v is None:
                continue
            parts.append(f"{k}={v}" if k == "epoch" else f"{k}={v:.9g}")
        return " ".join(parts)


@dataclass
class ModelBundle:
    config: TrainConfig
    encoder: Encoder
    decoder: Decoder | None
    discriminator: Discriminator | None
    sphere: HypersphereParams
    optimizers: dict[str, Adam]
    epochs_done: int = 0
    run_log: list[EpochRecord] = field(default_factory=list)

    @property
    def kind(self) -> str:
        return self.config.model_kind

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.encoder.named_parameters())
        for net in (self.decoder, self.discriminator):
            if net is not None:
                out.update(net.named_parameters())
        return out


def build_bundle(cfg: TrainConfig) -> ModelBundle:
    rng = np.random.default_rng(cfg.seed)
    input_dim = 3 * cfg.image_size * cfg.image_size
    sphere = HypersphereParams(nu_svdd=cfg.nu_svdd, weight_decay=cfg.weight_decay,
                               nu_prior=cfg.nu_prior)
    adam = dict(lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.adam_epsilon)
    if cfg.model_kind == "dsvdd":
        # bias-free mean-only encoder: biases would let the net collapse onto the centre
        enc = Encoder(input_dim, cfg.latent_dim, cfg.encoder_widths, rng, bias=False,
                      logvar_head=False)
        opts = {"svdd": Adam(enc.parameters(), weight_decay=cfg.weight_decay,
                             decay_mask=enc.weight_mask(), **adam)}
        return ModelBundle(cfg, enc, None, None, sphere, opts)

    enc = Encoder(input_dim, cfg.latent_dim, cfg.encoder_widths, rng)
    dec = Decoder(cfg.latent_dim, cfg.image_size, cfg.decoder_widths, rng)
    disc = Discriminator(cfg.latent_dim, cfg.discriminator_widths, rng)
    wd = cfg.weight_decay if cfg.model_kind == "aae_dsvdd" else 0.0
    opts = {
        "ae": Adam(enc.parameters() + dec.parameters(), **adam),
        "disc": Adam(disc.parameters(), **{**adam, "lr": cfg.learning_rate * cfg.disc_lr_scale}),
        "gen": Adam(enc.parameters(), weight_decay=wd, decay_mask=enc.weight_mask(), **adam),
    }
    return ModelBundle(cfg, enc, dec, disc, sphere, opts)


# ---------------------------------------------------------------------------
# inference helpers


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def encode_means(encoder: Encoder, X: np.ndarray, batch_size: int = INFERENCE_BATCH) -> np.ndarray:
    """Untaped mean-head outputs for uint8/float inputs, shape (n, N)."""
    dtype = encoder.head_mean.W.dtype
    out = [encoder.mean(Tensor(X[s].astype(dtype))).data for s in _batches(len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, encoder.latent_dim), dtype=dtype)


def latent_distances(encoder: Encoder, X: np.ndarray, center) -> np.ndarray:
    mu = encode_means(encoder, X).astype(np.float64)
    return np.sqrt(((mu - np.asarray(center, dtype=np.float64)) ** 2).sum(axis=1))


def _param_digest(params: Sequence[Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.data.tobytes())
    return h.hexdigest()


class StepIsolationError(RuntimeError):
    """A debug-mode parameter hash changed during another network's step."""


def _check_isolation(unchanged: bool, what: str) -> None:
    if not unchanged:
        raise StepIsolationError(what)


def _finite(name: str, value: float, epoch: int) -> float:
    if not np.isfinite(value):
        raise NumericError(f"{name} loss is not finite at epoch {epoch}")
    return value


# ---------------------------------------------------------------------------
# trainer


def prepare_training_data(maps: Sequence[WaferMap], image_size: int) -> np.ndarray:
    if len(maps) == 0:
        raise ValueError("training set is empty")
    bad = sum(1 for m in maps if m.label != Label.NONE)
    if bad:
        raise ValueError(f"training set holds {bad} maps not labelled None")
    return encode_batch(maps, image_size)


class Trainer:
    def __init__(self, bundle: ModelBundle, X: np.ndarray):
        self.bundle = bundle
        self.cfg = bundle.config
        if len(X) == 0:
            raise ValueError("training set is empty")
        self.X = X

    @property
    def uses_sphere(self) -> bool:
        return self.cfg.model_kind in ("dsvdd", "aae_dsvdd")

    def run(self, epochs: int | None = None, log_path=None) -> ModelBundle:
        cfg, b = self.cfg, self.bundle
        target = cfg.epochs if epochs is None else epochs
        if self.uses_sphere and not b.sphere.initialized:
            self._init_sphere()
        while b.epochs_done < target:
            epoch = b.epochs_done + 1
            t0 = time.perf_counter()
            rec = self._epoch(epoch)
            rec.seconds = time.perf_counter() - t0
            b.run_log.append(rec)
            b.epochs_done = epoch
            line = rec.to_line()
            log.info("%s %s", cfg.model_kind, line)
            if log_path:
                with open(log_path, "a") as fh:
                    fh.write(line + "\n")
        return b

    def _init_sphere(self) -> None:
        b = self.bundle
        mu = encode_means(b.encoder, self.X)
        b.sphere.center = init_center([mu])
        dist = np.sqrt(((mu.astype(np.float64) - b.sphere.center) ** 2).sum(axis=1))
        b.sphere.radius = float(np.float32(update_radius(dist, b.sphere.nu_svdd)))

    def _finish_sphere(self, rec: EpochRecord) -> None:
        b = self.bundle
        dist = latent_distances(b.encoder, self.X, b.sphere.center)
        b.sphere.radius = float(np.float32(update_radius(dist, b.sphere.nu_svdd)))
        rec.radius = b.sphere.radius
        rec.mean_dist = float(dist.mean())
        rec.outside_frac = float(np.mean(dist > b.sphere.radius))

    def _epoch(self, epoch: int) -> EpochRecord:
        rng = np.random.default_rng([self.cfg.seed, epoch])
        order = rng.permutation(len(self.X))
        if self.cfg.model_kind == "dsvdd":
            rec = self._epoch_dsvdd(order, epoch)
        else:
            rec = self._epoch_adversarial(order, rng, epoch)
        if self.uses_sphere:
            self._finish_sphere(rec)
        return rec

    def _batch(self, idx: np.ndarray) -> Tensor:
        return Tensor(self.X[np.sort(idx)].astype(np.float32))

    def _epoch_dsvdd(self, order: np.ndarray, epoch: int) -> EpochRecord:
        b = self.bundle
        opt = b.optimizers["svdd"]
        losses, hinges = [], []
        r2 = b.sphere.radius ** 2
        for s in _batches(len(order), self.cfg.batch_size):
            x = self._batch(order[s])
            with Tape() as tape:
                mu = b.encoder.mean(x)
                loss = dsvdd_loss(mu, b.sphere)
            tape.backward(loss)
            opt.step()
            losses.append(_finite("dsvdd", loss.item(), epoch))
            hinges.append((loss.item() - r2) * b.sphere.nu_svdd)
        return EpochRecord(epoch, dsvdd=float(np.mean(losses)), hinge=float(np.mean(hinges)))

    def _epoch_adversarial(self, order: np.ndarray, rng: np.random.Generator,
                           epoch: int) -> EpochRecord:
        cfg, b = self.cfg, self.bundle
        enc, dec, disc = b.encoder, b.decoder, b.discriminator
        opt_ae, opt_d, opt_g = b.optimizers["ae"], b.optimizers["disc"], b.optimizers["gen"]
        with_sphere = cfg.model_kind == "aae_dsvdd"
        w_rec, w_adv, w_svdd = cfg.loss_weights
        sampler = None
        if with_sphere:
            sampler = PriorSampler(b.sphere.center, b.sphere.radius, b.sphere.nu_prior)
        enc_params = enc.parameters()
        disc_params = disc.parameters()
        ae_params = enc_params + dec.parameters()
        stats = {"recon": [], "disc": [], "gen": [], "dsvdd": [], "hinge": []}
        r2 = b.sphere.radius ** 2

        for s in _batches(len(order), cfg.batch_size):
            x = self._batch(order[s])
            n = x.shape[0]
            noise_rec = rng.standard_normal((n, cfg.latent_dim)).astype(np.float32)
            noise_adv = rng.standard_normal((n, cfg.latent_dim)).astype(np.float32)
            if with_sphere:
                prior = sample_prior(sampler, n, rng)
                prior_labels = assign_labels(prior, b.sphere.center, b.sphere.radius).labels
            else:
                prior = rng.standard_normal((n, cfg.latent_dim))
                prior_labels = np.full(n, PRIOR_CLASS)
            prior = prior.astype(np.float32)

            # 1. reconstruction
            if cfg.debug:
                before = _param_digest(disc_params)
            with Tape() as tape:
                mu, logvar = enc(x)
                recon = dec(reparameterize(mu, logvar, noise_rec))
                l1 = ad.l1_to_target(recon, x)
                loss_rec = combined_loss(l1, None, None, (w_rec, 0.0, 0.0)) if w_rec else l1
            tape.backward(loss_rec)
            if w_rec:
                opt_ae.step()
            else:
                opt_ae.zero_grad()
            stats["recon"].append(_finite("reconstruction", l1.item(), epoch))
            if cfg.debug:
                _check_isolation(_param_digest(disc_params) == before, "reconstruction step touched D")

            # 2 and 3 share one encoder forward: D's update does not touch the encoder
            with Tape() as gen_tape:
                mu, logvar = enc(x)
                z = reparameterize(mu, logvar, noise_adv)

                if cfg.debug:
                    before = _param_digest(ae_params)
                with Tape() as d_tape:
                    d_in = Tensor(np.concatenate([z.data, prior]))
                    labels = np.concatenate([np.full(n, ENCODER_CLASS), prior_labels])
                    loss_d = discriminator_loss(disc.logits(d_in), labels, from_logits=True)
                d_tape.backward(loss_d)
                opt_d.step()
                stats["disc"].append(_finite("discriminator", loss_d.item(), epoch))
                if cfg.debug:
                    _check_isolation(_param_digest(ae_params) == before,
                                     "discriminator step touched the autoencoder")
                    before = _param_digest(disc_params)

                loss_g = generator_loss(disc.logits(z), from_logits=True)
                svdd = dsvdd_loss(mu, b.sphere) if with_sphere else None
                loss_enc = combined_loss(None, loss_g, svdd, (0.0, w_adv, w_svdd if with_sphere else 0.0))
            gen_tape.backward(loss_enc)
            opt_g.step()
            opt_d.zero_grad()
            if cfg.debug:
                _check_isolation(_param_digest(disc_params) == before, "encoder step touched D")
            stats["gen"].append(_finite("generator", loss_g.item(), epoch))
            if svdd is not None:
                stats["dsvdd"].append(_finite("dsvdd", svdd.item(), epoch))
                stats["hinge"].append((svdd.item() - r2) * b.sphere.nu_svdd)

        rec = EpochRecord(epoch)
        for k, v in stats.items():
            if v:
                setattr(rec, k, float(np.mean(v)))
        return rec


# ---------------------------------------------------------------------------
# public entry points


def train(cfg: TrainConfig, train_maps: Sequence[WaferMap] | None = None, *,
          X: np.ndarray | None = None, bundle: ModelBundle | None = None,
          log_path=None) -> ModelBundle:
    """Train (or resume ``bundle``) up to ``cfg.epochs`` epochs."""
    if X is None:
        if train_maps is None:
            raise ValueError("need train_maps or an encoded array X")
        X = prepare_training_data(train_maps, cfg.image_size)
    if bundle is None:
        bundle = build_bundle(cfg)
    elif bundle.config.digest() != cfg.digest():
        raise ValueError("cannot resume: configuration differs from the checkpoint's")
    else:
        bundle.config = cfg
    return Trainer(bundle, X).run(cfg.epochs, log_path=log_path)


def _train_kind(kind: str, cfg: TrainConfig, train_maps, **kw) -> ModelBundle:
    if cfg.model_kind != kind:
        cfg = cfg.replace(model_kind=kind)
    return train(cfg, train_maps, **kw)


def train_dsvdd(cfg: TrainConfig, train_maps, **kw) -> ModelBundle:
    return _train_kind("dsvdd", cfg, train_maps, **kw)


def train_aae(cfg: TrainConfig, train_maps, **kw) -> ModelBundle:
    return _train_kind("aae", cfg, train_maps, **kw)


def train_aae_dsvdd(cfg: TrainConfig, train_maps, **kw) -> ModelBundle:
    return _train_kind("aae_dsvdd", cfg, train_maps, **kw)


def write_run_log(bundle: ModelBundle, path) -> None:
    Path(path).write_text("".join(r.to_line() + "\n" for r in bundle.run_log))
