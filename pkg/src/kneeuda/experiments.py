"""Desk-scale end-to-end experiment: does adversarial adaptation improve
target-domain AUROC over (a) the source classifier applied as-is and
(b) a target-only baseline trained on few labels?

Used by the acceptance suite; all stages run in memory on the synthetic
phantom task.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.linear_model import LogisticRegression

from . import synth
from .evaluation import roc_auc, split_source
from .networks import Encoder3D, EncoderConfig, desk_config
from .checkpoint import Checkpoint, arrays_to_state
from .training import (AdaptConfig, SourceTrainConfig, adapt_target,
                       extract_features, predict_scores, train_source)
from .volumes import VolumeSample


def generate_samples(n: int, domain: str, params: synth.ShiftParams,
                     seed: int) -> list[VolumeSample]:
    """In-memory variant of the synthetic generator (same sample streams)."""
    from .phenotype import PhenotypeLabel
    from .preprocess import sample_rng
    from .volumes import SegmentationMask
    from fractions import Fraction
    from .evaluation import _largest_remainder

    p = Fraction(params.prevalence)
    n_pos, _ = _largest_remainder(n, [p, 1 - p])
    order = sample_rng(seed, 0, 0 if domain == "source" else 1).permutation(n)
    positive = np.zeros(n, dtype=bool)
    positive[order[:n_pos]] = True
    out = []
    for i in range(n):
        rng = sample_rng(seed, 1 if domain == "target" else 0, i)
        vol, mask = synth.make_phantom(params, rng, positive=bool(positive[i]))
        label = PhenotypeLabel(cartilage_meniscus=bool(positive[i]),
                               subchondral_bone=bool(positive[i]))
        out.append(VolumeSample(voxels=vol, spacing=params.spacing, domain=domain,
                                sample_id=f"{domain[0]}{i:04d}",
                                mask=SegmentationMask(mask), label=label))
    return out


def _encoder_from(ckpt: Checkpoint, encoder_cfg: EncoderConfig) -> Encoder3D:
    enc = Encoder3D(encoder_cfg)
    arrays_to_state(enc, ckpt.encoder)
    enc.eval()
    return enc


def _head_from(ckpt: Checkpoint, encoder_cfg: EncoderConfig):
    from .networks import Head
    head = Head(encoder_cfg.feature_dim)
    arrays_to_state(head, ckpt.head)
    head.eval()
    return head


def probe_domain_accuracy(feats_a: np.ndarray, feats_b: np.ndarray,
                          seed: int = 0) -> float:
    """Held-out accuracy of a logistic probe separating two feature sets:
    train on one half, score the other."""
    x = np.concatenate([feats_a, feats_b])
    y = np.concatenate([np.zeros(len(feats_a)), np.ones(len(feats_b))])
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    half = len(x) // 2
    tr, te = order[:half], order[half:]
    clf = LogisticRegression(max_iter=2000)
    clf.fit(x[tr], y[tr])
    return float(clf.score(x[te], y[te]))


@dataclass
class ExperimentResult:
    auroc_source_on_target: float
    auroc_adapted: float
    auroc_nonuda: float
    auroc_source_test: float
    disc_acc_before: float
    disc_acc_after: float

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def run_uda_experiment(seed: int,
                       n_source: int = 200,
                       n_target: int = 40,
                       encoder_cfg: Optional[EncoderConfig] = None,
                       source_cfg: Optional[SourceTrainConfig] = None,
                       adapt_cfg: Optional[AdaptConfig] = None,
                       baseline_cfg: Optional[SourceTrainConfig] = None,
                       phenotype: str = "cartilage_meniscus") -> ExperimentResult:
    """One seed of the synthetic domain-shift experiment.

    Volumes keep their raw intensity scales (no per-volume z-score): the
    domain gap is a scanner-style gain/offset shift that the encoder's
    normalization statistics absorb during adaptation. A quarter of the
    target samples (labeled) train the target-only baseline; the rest are
    the common evaluation set. The adaptation stage sees every target
    volume, labels stripped.
    """
    encoder_cfg = encoder_cfg or desk_config()
    source_cfg = source_cfg or SourceTrainConfig(
        learning_rate=1e-3, max_epochs=10, seed=seed)
    adapt_cfg = adapt_cfg or AdaptConfig(
        epochs=40, encoder_lr_scale=0.03, discriminator_hidden=(64,),
        seed=seed)
    baseline_cfg = baseline_cfg or SourceTrainConfig(
        learning_rate=1e-3, max_epochs=10, patience=10**6, seed=seed)

    src = generate_samples(n_source, "source", synth.source_params(), seed)
    tgt = generate_samples(n_target, "target", synth.target_params(), seed)

    src_ids = {s.sample_id: s for s in src}
    labels = [int(s.label.get(phenotype)) for s in src]
    tr_ids, va_ids, te_ids = split_source([s.sample_id for s in src], seed=seed,
                                          stratify_by=labels)
    src_train = [src_ids[i] for i in tr_ids]
    src_val = [src_ids[i] for i in va_ids]
    src_test = [src_ids[i] for i in te_ids]

    tgt_labels = [int(s.label.get(phenotype)) for s in tgt]
    tgt_train_ids, _, tgt_test_ids = split_source(
        [s.sample_id for s in tgt], fractions=(0.25, 0.0, 0.75), seed=seed + 1,
        stratify_by=tgt_labels)
    by_id = {s.sample_id: s for s in tgt}
    tgt_train = [by_id[i] for i in tgt_train_ids]
    tgt_test = [by_id[i] for i in tgt_test_ids]
    y_test = [int(s.label.get(phenotype)) for s in tgt_test]

    source_ckpt, _ = train_source(src_train, src_val, source_cfg, encoder_cfg, phenotype)
    src_enc = _encoder_from(source_ckpt, encoder_cfg)
    head = _head_from(source_ckpt, encoder_cfg)

    y_src_test = [int(s.label.get(phenotype)) for s in src_test]
    auroc_source_test = roc_auc(predict_scores(src_enc, head, src_test), y_src_test)
    auroc_src_on_tgt = roc_auc(predict_scores(src_enc, head, tgt_test), y_test)

    adapted_ckpt, _ = adapt_target(source_ckpt, src_train,
                                   [s.stripped() for s in tgt],
                                   adapt_cfg, encoder_cfg)
    tgt_enc = _encoder_from(adapted_ckpt, encoder_cfg)
    auroc_adapted = roc_auc(predict_scores(tgt_enc, head, tgt_test), y_test)

    nonuda_ckpt, _ = train_source(tgt_train, None, baseline_cfg, encoder_cfg, phenotype)
    nu_enc = _encoder_from(nonuda_ckpt, encoder_cfg)
    nu_head = _head_from(nonuda_ckpt, encoder_cfg)
    auroc_nonuda = roc_auc(predict_scores(nu_enc, nu_head, tgt_test), y_test)

    f_src = extract_features(src_enc, src_test)
    disc_before = probe_domain_accuracy(f_src, extract_features(src_enc, tgt), seed)
    disc_after = probe_domain_accuracy(f_src, extract_features(tgt_enc, tgt), seed)

    return ExperimentResult(
        auroc_source_on_target=auroc_src_on_tgt,
        auroc_adapted=auroc_adapted,
        auroc_nonuda=auroc_nonuda,
        auroc_source_test=auroc_source_test,
        disc_acc_before=disc_before,
        disc_acc_after=disc_after)
