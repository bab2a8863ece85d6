"""Stage-1 training: augmentations, the weighted contrastive objective,
and the pretraining loop.

The loss follows the SimCLR layout with one twist: each cross-patient
negative term is multiplied by a patient-level weight in [0,1], so look-alike
patients repel each other less. Uniform weights recover plain NT-Xent; all
zeros collapse the denominator to the positive term and the loss is exactly
zero.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import CohortBundle, VitalsSeries, channel_stats
from .encoders import (
    EncoderConfig,
    encode_vitals,
    init_encoder_params,
    init_projection_params,
    project_contrastive,
)
from .errors import (
    AsymmetricWeights,
    DegenerateConfig,
    EmptyCohort,
    InvalidFractions,
    NormViolation,
    OutOfRangeSimilarity,
    ShapeMismatch,
)
from .ontology import OntologyTree
from .optim import Adam
from .similarity import (
    CohortWeightCache,
    WeightMatrix,
    WeightSpec,
    batch_weight_matrix,
)

log = logging.getLogger(__name__)


def stream_rng(*key: int) -> np.random.Generator:
    """Counter-based stream: results never depend on worker count."""
    return np.random.default_rng(np.random.SeedSequence(key))


@dataclass(frozen=True)
class AugmentConfig:
    jitter_sigma: float = 0.1
    time_mask_ratio: float = 0.1
    feature_mask_ratio: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.jitter_sigma < 0:
            raise DegenerateConfig(f"jitter_sigma {self.jitter_sigma} < 0")
        for name in ("time_mask_ratio", "feature_mask_ratio"):
            r = getattr(self, name)
            if not 0.0 <= r < 1.0:
                raise InvalidFractions(f"{name} {r} outside [0, 1)")


@dataclass(frozen=True)
class PretrainConfig:
    temperature: float = 1.0
    batch_size: int = 256
    epochs: int = 50
    learning_rate: float = 1e-4
    weight_spec: WeightSpec = field(default_factory=WeightSpec)
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise DegenerateConfig(f"temperature {self.temperature} <= 0")
        if self.learning_rate <= 0:
            raise DegenerateConfig(f"learning_rate {self.learning_rate} <= 0")
        if self.batch_size < 2 or self.epochs < 1:
            raise DegenerateConfig("need batch_size >= 2 and epochs >= 1")


# -- augmentations -------------------------------------------------------------

def gaussian_jitter(values: np.ndarray, observed: np.ndarray, sigma: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Zero-mean noise on observed value cells; indicators untouched."""
    noise = rng.normal(0.0, sigma, size=values.shape)
    return values + noise * observed


def time_mask(values: np.ndarray, observed: np.ndarray, ratio: float,
              rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Zero every feature (values and indicators) at round(ratio*T) steps."""
    t = values.shape[0]
    k = int(round(ratio * t))
    idx = rng.choice(t, size=k, replace=False)
    values = values.copy()
    observed = observed.copy()
    values[idx, :] = 0.0
    observed[idx, :] = 0.0
    return values, observed


def feature_mask(values: np.ndarray, ratio: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Zero round(ratio*c) value channels at all timesteps."""
    c = values.shape[1]
    k = int(round(ratio * c))
    idx = rng.choice(c, size=k, replace=False)
    values = values.copy()
    values[:, idx] = 0.0
    return values


def augment(x: VitalsSeries, cfg: AugmentConfig,
            rng: np.random.Generator) -> VitalsSeries:
    """Jitter, then time masking, then feature masking."""
    values = gaussian_jitter(x.values, x.observed, cfg.jitter_sigma, rng)
    values, observed = time_mask(values, x.observed, cfg.time_mask_ratio, rng)
    values = feature_mask(values, cfg.feature_mask_ratio, rng)
    return VitalsSeries(x.patient_id, values, observed)


# -- loss -----------------------------------------------------------------------

def ow_ntxent(embeddings, weights, tau: float = 1.0) -> Tensor:
    """Weighted NT-Xent over 2B embeddings (rows i and i+B are a pair).

    Negatives are all views of other patients; each term is scaled by the
    patient-level weight. Stabilized by a detached per-row max over every
    exponent that appears in the denominator, so the loss is exactly zero
    when all weights vanish.
    """
    e = embeddings if isinstance(embeddings, Tensor) else Tensor(np.asarray(embeddings, dtype=np.float64))
    x = e.data
    if x.ndim != 2 or x.shape[0] % 2 or x.shape[0] < 2:
        raise ShapeMismatch(f"embeddings must be (2B, d), got {x.shape}")
    two_b = x.shape[0]
    b = two_b // 2
    if tau <= 0:
        raise DegenerateConfig(f"temperature {tau} <= 0")
    norms = np.linalg.norm(x, axis=1)
    worst = float(np.abs(norms - 1.0).max())
    if worst > 1e-9:
        raise NormViolation(f"embedding norm off unit by {worst:.3e}")

    w = weights.values if isinstance(weights, WeightMatrix) else weights
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (b, b):
        raise ShapeMismatch(f"weights {w.shape} for batch of {b} patients")
    if not np.array_equal(w, w.T):
        raise AsymmetricWeights("weight matrix is not symmetric")
    if w.size and (w.min() < 0.0 or w.max() > 1.0):
        raise OutOfRangeSimilarity("weights must lie in [0, 1]")

    wfull = np.tile(w, (2, 2))
    patient = np.arange(two_b) % b
    negmask = (patient[:, None] != patient[None, :]) & (wfull > 0)
    partner = (np.arange(two_b) + b) % two_b

    s = ad.scale(ad.matmul(e, ad.transpose(e)), 1.0 / tau)

    # detached row max across denominator exponents (positive included)
    m = s.data[np.arange(two_b), partner].copy()
    if negmask.any():
        m = np.maximum(m, np.where(negmask, s.data, -np.inf).max(axis=1))
    m_col = Tensor(m[:, None])

    pos_onehot = np.zeros((two_b, two_b))
    pos_onehot[np.arange(two_b), partner] = 1.0
    s_pos = ad.tensor_sum(ad.mul(s, Tensor(pos_onehot)), axis=1, keepdims=True)

    # -inf shifts excluded entries so exp underflows to an exact zero
    gate = np.where(negmask, 0.0, -np.inf)
    z = ad.exp(ad.add(ad.sub(s, m_col), Tensor(gate)))
    neg_sum = ad.tensor_sum(ad.mul(z, Tensor(wfull)), axis=1, keepdims=True)

    pos = ad.exp(ad.sub(s_pos, m_col))
    losses = ad.sub(ad.add(m_col, ad.log(ad.add(pos, neg_sum))), s_pos)
    return ad.tensor_mean(losses)


# -- training loop ---------------------------------------------------------------

@dataclass
class PretrainResult:
    final_params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    best_epoch: int
    loss_trace: list[tuple[int, int, float]]
    channel_mean: np.ndarray
    channel_std: np.ndarray
    encoder_config: EncoderConfig


def format_loss_trace(trace) -> str:
    lines = ["step,epoch,loss"]
    lines += [f"{step},{epoch},{loss!r}" for step, epoch, loss in trace]
    return "\n".join(lines) + "\n"


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in params.items()}


def _views(bundle: CohortBundle, pid: str, mean, std, aug: AugmentConfig,
           epoch: int, index: int):
    v = bundle.vitals[pid]
    z = VitalsSeries(pid, (v.values - mean) / std * v.observed, v.observed)
    out = []
    for view in (0, 1):
        rng = stream_rng(aug.seed, epoch, index, view)
        out.append(augment(z, aug, rng).stacked())
    return out


def pretrain(bundle: CohortBundle, tree: OntologyTree, cfg: PretrainConfig,
             aug: AugmentConfig, enc_cfg: EncoderConfig | None = None,
             weight_cache: CohortWeightCache | None = None,
             split: str = "train") -> PretrainResult:
    """Contrastive pretraining over the given split; returns final and
    best-epoch parameters plus the per-step loss trace."""
    ids = bundle.ids_for(split)
    if len(ids) < 2:
        raise EmptyCohort(f"pretraining needs >= 2 patients in split {split!r}")
    index_of = {pid: i for i, pid in enumerate(ids)}
    if weight_cache is not None and tuple(weight_cache.order) != tuple(ids):
        raise ShapeMismatch("weight cache order does not match the split")

    mean, std = channel_stats(bundle, ids)
    if enc_cfg is None:
        enc_cfg = EncoderConfig(input_channels=2 * bundle.channels,
                                max_timesteps=bundle.horizon_hours)
    if enc_cfg.input_channels != 2 * bundle.channels \
            or enc_cfg.max_timesteps < bundle.horizon_hours:
        raise ShapeMismatch("encoder config does not fit the cohort layout")

    init_rng = stream_rng(cfg.seed, 0x1517)
    params = init_encoder_params(enc_cfg, init_rng)
    params.update(init_projection_params(enc_cfg, init_rng))
    opt = Adam(params, lr=cfg.learning_rate)

    batch_size = cfg.batch_size
    if batch_size > len(ids):
        log.info("batch_size %d exceeds %d patients; using one full batch",
                 batch_size, len(ids))
        batch_size = len(ids)

    trace: list[tuple[int, int, float]] = []
    best_loss = np.inf
    best_epoch = 0
    best = _snapshot(params)
    step = 0
    for epoch in range(cfg.epochs):
        order = stream_rng(cfg.seed, epoch).permutation(len(ids))
        epoch_losses = []
        for start in range(0, len(ids) - batch_size + 1, batch_size):
            chosen = [ids[i] for i in order[start:start + batch_size]]
            xa, xb = [], []
            for pid in chosen:
                va, vb = _views(bundle, pid, mean, std, aug, epoch, index_of[pid])
                xa.append(va)
                xb.append(vb)
            x = np.stack(xa + xb)

            if weight_cache is not None:
                w = weight_cache.gather([index_of[p] for p in chosen]).values
            else:
                w = batch_weight_matrix(
                    tree, [bundle.diagnoses[p] for p in chosen],
                    cfg.weight_spec).values

            h = encode_vitals(enc_cfg, params, x)
            emb = project_contrastive(params, h)
            loss = ow_ntxent(emb, w.astype(np.float64), cfg.temperature)

            step += 1
            value = float(loss.data)
            trace.append((step, epoch, value))
            epoch_losses.append(value)

            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        epoch_mean = float(np.mean(epoch_losses))
        if epoch_mean < best_loss:
            best_loss = epoch_mean
            best_epoch = epoch
            best = _snapshot(params)
    return PretrainResult(
        final_params=_snapshot(params),
        best_params=best,
        best_epoch=best_epoch,
        loss_trace=trace,
        channel_mean=mean,
        channel_std=std,
        encoder_config=enc_cfg,
    )


def embed_cohort(bundle: CohortBundle, params: dict[str, np.ndarray] | dict[str, Tensor],
                 enc_cfg: EncoderConfig, mean: np.ndarray, std: np.ndarray,
                 ids=None) -> np.ndarray:
    """Deterministic (augmentation-free) encoder embeddings for analysis."""
    ids = list(ids) if ids is not None else list(bundle.patients)
    tensors = {name: p if isinstance(p, Tensor) else Tensor(p)
               for name, p in params.items()}
    x = np.stack([
        np.concatenate([
            (bundle.vitals[p].values - mean) / std * bundle.vitals[p].observed,
            bundle.vitals[p].observed], axis=1)
        for p in ids
    ])
    return encode_vitals(enc_cfg, tensors, x).data.copy()
