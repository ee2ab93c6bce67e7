"""Training procedures: source classifier training, adversarial target
encoder adaptation (frozen source encoder, trainable target encoder,
domain discriminator with inverted-label objectives), and the non-UDA
baseline. Also the per-epoch learning-rate decay schedule.

Every procedure is a deterministic function of (seed, data, config):
all shuffling and augmentation randomness derives from the config seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.metrics import average_precision_score

from . import networks
from .checkpoint import Checkpoint, arrays_to_state, state_to_arrays
from .errors import CheckpointError, ConfigError
from .networks import EncoderConfig, focal_loss
from .preprocess import AugmentConfig, augment, sample_rng
from .volumes import VolumeSample


def lr_schedule(alpha_n: float, n: int, gamma: float, lam: float) -> float:
    """alpha_{n+1} = alpha_n * (1 + gamma * n)^(-lambda), applied once per
    epoch with n the current (0-based) epoch count."""
    if alpha_n <= 0:
        raise ValueError(f"alpha must be positive, got {alpha_n}")
    return alpha_n * (1.0 + gamma * n) ** (-lam)


@dataclass
class SourceTrainConfig:
    batch_size: int = 2
    learning_rate: float = 1e-6
    weight_decay: float = 1e-3
    focal_gamma: float = 1.0
    patience: int = 3
    patience_mode: str = "cumulative"  # or "consecutive"
    max_epochs: int = 50
    seed: int = 0
    # extra forward-only epochs that re-estimate normalization statistics
    # under the final weights; 0 disables
    bn_recalibration_epochs: int = 2
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("rates/sizes must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.patience_mode not in ("cumulative", "consecutive"):
            raise ConfigError(f"unknown patience_mode {self.patience_mode!r}")


@dataclass
class AdaptConfig:
    batch_size: int = 2
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-3
    schedule_gamma: float = 3e-4
    schedule_lambda: float = 0.75
    epochs: int = 50
    seed: int = 0
    encoder_lr_scale: float = 1.0  # encoder step size relative to discriminator
    discriminator_hidden: tuple[int, ...] = (256, 128)
    adversarial: str = "adda"  # or "grl" (gradient reversal)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.schedule_gamma < 0 or self.schedule_lambda < 0:
            raise ConfigError("schedule parameters must be nonnegative")
        if self.adversarial not in ("adda", "grl"):
            raise ConfigError(f"unknown adversarial mode {self.adversarial!r}")


# ---------------------------------------------------------------------------
# helpers

def _labels_for(samples: Sequence[VolumeSample], phenotype: str) -> np.ndarray:
    ys = []
    for s in samples:
        y = None if s.label is None else s.label.get(phenotype)
        if y is None:
            raise ConfigError(f"sample {s.sample_id} has no {phenotype} label")
        ys.append(int(y))
    return np.asarray(ys, dtype=np.int64)


def _batch_tensor(samples: Sequence[VolumeSample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.voxels for s in samples]).astype(np.float32))


def _augmented_batch(samples: Sequence[VolumeSample], cfg: AugmentConfig,
                     seed: int, epoch: int) -> torch.Tensor:
    out = [augment(s, cfg, sample_rng(seed, epoch, s.sample_id)) for s in samples]
    return _batch_tensor(out)


def _minibatches(indices: np.ndarray, batch_size: int):
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


@torch.no_grad()
def predict_scores(encoder: torch.nn.Module, head: torch.nn.Module,
                   samples: Sequence[VolumeSample], batch_size: int = 4) -> np.ndarray:
    """Sigmoid probabilities for a list of samples (eval mode)."""
    encoder.eval()
    head.eval()
    scores = []
    for start in range(0, len(samples), batch_size):
        x = _batch_tensor(samples[start:start + batch_size])
        scores.append(torch.sigmoid(head(encoder(x))).reshape(-1).numpy())
    return np.concatenate(scores)


@torch.no_grad()
def extract_features(encoder: torch.nn.Module,
                     samples: Sequence[VolumeSample], batch_size: int = 4) -> np.ndarray:
    encoder.eval()
    feats = []
    for start in range(0, len(samples), batch_size):
        feats.append(encoder(_batch_tensor(samples[start:start + batch_size])).numpy())
    return np.concatenate(feats)


def write_trace(trace: list[dict], path) -> None:
    with open(path, "w") as fh:
        for record in trace:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# source classifier

def recalibrate_bn_stats(encoder: torch.nn.Module,
                         samples: Sequence[VolumeSample],
                         cfg, start_epoch: int) -> None:
    """Replace the encoder's normalization running statistics with exact
    averages over forward passes of `samples` under the current weights.

    The running statistics accumulated during training track a moving
    weight trajectory, so they are stale for the weights that are finally
    kept; near-inactive channels then emit slightly wrong constants at
    eval time. Batches follow the same augmentation/shuffling protocol as
    training, with epoch indices starting at `start_epoch` to keep the
    random streams disjoint from the training epochs."""
    bn_modules = [m for m in encoder.modules()
                  if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    saved_momentum = [m.momentum for m in bn_modules]
    for m in bn_modules:
        m.reset_running_stats()
        m.momentum = None  # cumulative average instead of EMA
    encoder.train()
    with torch.no_grad():
        for i in range(cfg.bn_recalibration_epochs):
            epoch = start_epoch + i
            order = sample_rng(cfg.seed, epoch).permutation(len(samples))
            for batch_idx in _minibatches(order, cfg.batch_size):
                batch = [samples[j] for j in batch_idx]
                encoder(_augmented_batch(batch, cfg.augment, cfg.seed, epoch))
    for m, momentum in zip(bn_modules, saved_momentum):
        m.momentum = momentum
    encoder.eval()


def train_source(train_samples: Sequence[VolumeSample],
                 val_samples: Optional[Sequence[VolumeSample]],
                 cfg: SourceTrainConfig,
                 encoder_cfg: EncoderConfig,
                 phenotype: str) -> tuple[Checkpoint, list[dict]]:
    """Focal-loss training with Adam; stops after `patience` validation
    loss increases; the checkpoint with the best validation AUPRC is
    returned. With val_samples=None (leave-one-out folds) training runs
    max_epochs and the final model is returned."""
    if not train_samples:
        raise ConfigError("empty training set")
    y_train = _labels_for(train_samples, phenotype)
    if val_samples is not None:
        if not val_samples:
            raise ConfigError("empty validation set")
        y_val = _labels_for(val_samples, phenotype)
        if y_val.min() == y_val.max():
            raise ConfigError("validation set has one class; AUPRC is undefined")

    torch.manual_seed(cfg.seed)
    encoder = networks.Encoder3D(encoder_cfg)
    head = networks.Head(encoder.feature_dim)
    params = list(encoder.parameters()) + list(head.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate,
                                 weight_decay=cfg.weight_decay)

    trace: list[dict] = []
    best = {"auprc": -1.0, "epoch": -1, "encoder": None, "head": None}
    increases = 0
    prev_val_loss = None
    last_record = None
    for epoch in range(cfg.max_epochs):
        encoder.train()
        head.train()
        order = sample_rng(cfg.seed, epoch).permutation(len(train_samples))
        epoch_loss = 0.0
        n_batches = 0
        for batch_idx in _minibatches(order, cfg.batch_size):
            batch = [train_samples[i] for i in batch_idx]
            x = _augmented_batch(batch, cfg.augment, cfg.seed, epoch)
            y = torch.from_numpy(y_train[batch_idx])
            optimizer.zero_grad()
            loss = focal_loss(head(encoder(x)), y, gamma=cfg.focal_gamma)
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        record = {"epoch": epoch, "train_loss": epoch_loss / n_batches,
                  "lr": cfg.learning_rate}

        if val_samples is not None:
            encoder.eval()
            head.eval()
            with torch.no_grad():
                logits = torch.cat([
                    head(encoder(_batch_tensor(val_samples[i:i + cfg.batch_size])))
                    for i in range(0, len(val_samples), cfg.batch_size)]).reshape(-1)
            val_loss = float(focal_loss(logits, torch.from_numpy(y_val),
                                        gamma=cfg.focal_gamma))
            scores = torch.sigmoid(logits).numpy()
            auprc = float(average_precision_score(y_val, scores))
            record.update({"val_loss": val_loss, "val_auprc": auprc})
            if auprc > best["auprc"]:
                best.update(auprc=auprc, epoch=epoch,
                            encoder=state_to_arrays(encoder),
                            head=state_to_arrays(head))
            if prev_val_loss is not None and val_loss > prev_val_loss:
                increases += 1
            elif cfg.patience_mode == "consecutive":
                increases = 0
            prev_val_loss = val_loss
            trace.append(record)
            if increases >= cfg.patience:
                record["stopped"] = True
                break
        else:
            trace.append(record)
        last_record = record

    if val_samples is None or best["encoder"] is None:
        enc_arrays, head_arrays = state_to_arrays(encoder), state_to_arrays(head)
        best_epoch, metric = trace[-1]["epoch"], None
    else:
        enc_arrays, head_arrays = best["encoder"], best["head"]
        best_epoch, metric = best["epoch"], best["auprc"]
    if cfg.bn_recalibration_epochs > 0:
        arrays_to_state(encoder, enc_arrays)
        recalibrate_bn_stats(encoder, train_samples, cfg,
                             start_epoch=cfg.max_epochs)
        enc_arrays = state_to_arrays(encoder)
    metadata = {
        "phenotype": phenotype,
        "epochs_run": trace[-1]["epoch"] + 1,
        "selected_epoch": best_epoch,
        "selection_metric": "val_auprc",
        "selection_value": metric,
        "seed": cfg.seed,
        "encoder_config": asdict(encoder_cfg),
        "train_config": asdict(cfg),
    }
    return Checkpoint(encoder=enc_arrays, head=head_arrays, metadata=metadata), trace


def train_nonuda_baseline(train_samples, val_samples, cfg: SourceTrainConfig,
                          encoder_cfg: EncoderConfig, phenotype: str):
    """Target-only baseline: identical procedure and hyperparameters, run
    on labeled target data."""
    return train_source(train_samples, val_samples, cfg, encoder_cfg, phenotype)


# ---------------------------------------------------------------------------
# adversarial adaptation

class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -grad


def _infinite_stream(n: int, seed: int, epoch: int):
    """Shuffled infinite index stream, re-seeded per epoch."""
    rng = sample_rng(seed, epoch, "stream")
    while True:
        for i in rng.permutation(n):
            yield int(i)


def adapt_target(source_ckpt: Checkpoint,
                 source_samples: Sequence[VolumeSample],
                 target_samples: Sequence[VolumeSample],
                 cfg: AdaptConfig,
                 encoder_cfg: EncoderConfig) -> tuple[Checkpoint, list[dict]]:
    """ADDA-style adaptation. The source encoder is frozen; the target
    encoder starts from its weights; the discriminator is freshly
    initialized. Per minibatch the discriminator minimizes
    -E_s[log s(D(E_s(x)))] - E_t[log(1 - s(D(E_t(x))))] and the target
    encoder minimizes the inverted-label loss -E_t[log s(D(E_t(x)))].
    Target samples must carry no labels. Returns the final-epoch model
    with the source head copied through."""
    if not target_samples:
        raise ConfigError("empty target set")
    if not source_samples:
        raise ConfigError("empty source set")
    for s in target_samples:
        if s.label is not None:
            raise ConfigError(
                f"target sample {s.sample_id} carries a label; strip labels first")
    if not source_ckpt.head:
        raise CheckpointError("source checkpoint has no classification head")

    torch.manual_seed(cfg.seed)
    source_encoder = networks.Encoder3D(encoder_cfg)
    arrays_to_state(source_encoder, source_ckpt.encoder)
    source_encoder.eval()
    for p in source_encoder.parameters():
        p.requires_grad_(False)
    frozen_before = state_to_arrays(source_encoder)

    target_encoder = networks.Encoder3D(encoder_cfg)
    arrays_to_state(target_encoder, source_ckpt.encoder)
    discriminator = networks.Discriminator(target_encoder.feature_dim,
                                           cfg.discriminator_hidden)

    opt_d = torch.optim.SGD(discriminator.parameters(), lr=cfg.learning_rate,
                            momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    opt_e = torch.optim.SGD(target_encoder.parameters(),
                            lr=cfg.learning_rate * cfg.encoder_lr_scale,
                            momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    bce = torch.nn.BCEWithLogitsLoss()

    alpha = cfg.learning_rate
    trace: list[dict] = []
    for epoch in range(cfg.epochs):
        for group in opt_d.param_groups:
            group["lr"] = alpha
        for group in opt_e.param_groups:
            group["lr"] = alpha * cfg.encoder_lr_scale
        target_encoder.train()
        discriminator.train()
        order = sample_rng(cfg.seed, epoch, "target").permutation(len(target_samples))
        source_stream = _infinite_stream(len(source_samples), cfg.seed, epoch)
        d_losses, e_losses, d_accs = [], [], []
        for batch_idx in _minibatches(order, cfg.batch_size):
            t_batch = [target_samples[i] for i in batch_idx]
            s_batch = [source_samples[next(source_stream)] for _ in batch_idx]
            x_t = _augmented_batch(t_batch, cfg.augment, cfg.seed, epoch)
            x_s = _augmented_batch(s_batch, cfg.augment, cfg.seed + 1, epoch)

            with torch.no_grad():
                f_s = source_encoder(x_s)

            if cfg.adversarial == "adda":
                # discriminator step (source=1, target=0), encoders fixed
                f_t = target_encoder(x_t).detach()
                logits = discriminator(torch.cat([f_s, f_t])).reshape(-1)
                domains = torch.cat([torch.ones(len(s_batch)), torch.zeros(len(t_batch))])
                loss_d = bce(logits, domains)
                opt_d.zero_grad()
                loss_d.backward()
                opt_d.step()
                d_accs.append(float(((logits > 0) == (domains > 0.5)).float().mean()))

                # encoder step with inverted labels, discriminator fixed
                for p in discriminator.parameters():
                    p.requires_grad_(False)
                loss_e = bce(discriminator(target_encoder(x_t)).reshape(-1),
                             torch.ones(len(t_batch)))
                opt_e.zero_grad()
                loss_e.backward()
                opt_e.step()
                for p in discriminator.parameters():
                    p.requires_grad_(True)
            else:  # gradient reversal: one joint objective
                f_t = _GradReverse.apply(target_encoder(x_t))
                logits = discriminator(torch.cat([f_s, f_t])).reshape(-1)
                domains = torch.cat([torch.ones(len(s_batch)), torch.zeros(len(t_batch))])
                loss_d = bce(logits, domains)
                opt_d.zero_grad()
                opt_e.zero_grad()
                loss_d.backward()
                opt_d.step()
                opt_e.step()
                d_accs.append(float(((logits > 0) == (domains > 0.5)).float().mean()))
                loss_e = loss_d
            d_losses.append(float(loss_d.detach()))
            e_losses.append(float(loss_e.detach()))
        trace.append({"epoch": epoch, "lr": alpha,
                      "disc_loss": float(np.mean(d_losses)),
                      "encoder_loss": float(np.mean(e_losses)),
                      "disc_batch_accuracy": float(np.mean(d_accs))})
        alpha = lr_schedule(alpha, epoch, cfg.schedule_gamma, cfg.schedule_lambda)

    frozen_after = state_to_arrays(source_encoder)
    for name in frozen_before:
        if not np.array_equal(frozen_before[name], frozen_after[name]):
            raise AssertionError(f"frozen source encoder changed: {name}")

    metadata = {
        "adapted_from": source_ckpt.metadata,
        "epochs_run": cfg.epochs,
        "seed": cfg.seed,
        "encoder_config": asdict(encoder_cfg),
        "adapt_config": {**asdict(cfg), "discriminator_hidden": list(cfg.discriminator_hidden)},
    }
    return Checkpoint(encoder=state_to_arrays(target_encoder),
                      head={k: v.copy() for k, v in source_ckpt.head.items()},
                      discriminator=state_to_arrays(discriminator),
                      metadata=metadata), trace
