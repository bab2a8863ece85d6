"""Stage-2 training: a notes+vitals teacher, then a vitals-only student
trained on hard labels plus temperature-softened teacher targets.

The KD term carries no T² gradient rescaling; lambda_distill absorbs the
scale. Soft targets always come from the raw-note embedding; the raw/summary
coin flip applies only to teacher training inputs.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import CohortBundle, VitalsSeries, channel_stats, normalized_stack
from .encoders import (
    EncoderConfig,
    init_student_params,
    init_teacher_params,
    student_forward,
    teacher_forward,
)
from .errors import (
    DegenerateConfig,
    EmptyCohort,
    LabelOutOfRange,
    NonFiniteInput,
    ShapeMismatch,
    TaskMismatch,
)
from .metrics import DEGENERATE, auroc, macro_ovr
from .optim import Adam
from .pretrain import stream_rng

log = logging.getLogger(__name__)

TASKS = ("binary", "multiclass")


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 2.0
    lambda_distill: float = 5.0
    raw_note_prob: float = 0.5
    learning_rate: float = 1e-4
    epochs: int = 100
    task: str = "binary"
    n_classes: int = 2
    batch_size: int = 64
    val_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise DegenerateConfig(f"temperature {self.temperature} <= 0")
        if self.lambda_distill < 0:
            raise DegenerateConfig("lambda_distill must be non-negative")
        if not 0.0 <= self.raw_note_prob <= 1.0:
            raise DegenerateConfig(
                f"raw_note_prob {self.raw_note_prob} outside [0, 1]")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise DegenerateConfig("learning_rate, epochs, batch_size must be positive")
        if self.task not in TASKS:
            raise DegenerateConfig(f"task must be one of {TASKS}")
        if self.task == "binary" and self.n_classes != 2:
            raise DegenerateConfig("binary task implies n_classes = 2")
        if self.task == "multiclass" and self.n_classes < 2:
            raise DegenerateConfig("multiclass needs n_classes >= 2")
        if not 0.0 < self.val_fraction < 1.0:
            raise DegenerateConfig("val_fraction must lie in (0, 1)")

    @property
    def head_dim(self) -> int:
        return 1 if self.task == "binary" else self.n_classes


@dataclass(frozen=True)
class LabeledExample:
    patient_id: str
    vitals: VitalsSeries
    note_raw: np.ndarray
    note_summary: np.ndarray
    label: int

    def __post_init__(self):
        if self.note_raw.shape != self.note_summary.shape:
            raise ShapeMismatch(
                f"{self.patient_id}: raw {self.note_raw.shape} vs "
                f"summary {self.note_summary.shape}")


def labeled_examples(bundle: CohortBundle, cfg: DistillConfig,
                     split: str = "train") -> list[LabeledExample]:
    if cfg.task not in bundle.labels:
        raise TaskMismatch(f"cohort has no {cfg.task!r} labels")
    out = []
    for pid in bundle.ids_for(split):
        y = bundle.labels[cfg.task][pid]
        if not 0 <= y < cfg.n_classes:
            raise LabelOutOfRange(
                f"{pid}: label {y} outside [0, {cfg.n_classes})")
        out.append(LabeledExample(pid, bundle.vitals[pid],
                                  bundle.notes_raw[pid],
                                  bundle.notes_summary[pid], int(y)))
    return out


def select_note_input(ex: LabeledExample, p: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Raw note embedding with probability p, summary with 1-p."""
    if not 0.0 <= p <= 1.0:
        raise DegenerateConfig(f"note probability {p} outside [0, 1]")
    return ex.note_raw if rng.random() < p else ex.note_summary


# -- losses ----------------------------------------------------------------------

def hard_loss(logits: Tensor, labels, task: str) -> Tensor:
    """Mean CE (multiclass) or BCE on the single logit (binary)."""
    y = np.asarray(labels).ravel().astype(np.int64)
    if not np.isfinite(logits.data).all():
        raise NonFiniteInput("hard_loss: non-finite logits")
    if task == "binary":
        z = ad.reshape(logits, (-1,))
        if z.data.shape != y.shape:
            raise ShapeMismatch(f"{z.data.shape} logits vs {y.shape} labels")
        if not np.isin(y, (0, 1)).all():
            raise LabelOutOfRange("binary labels must be 0/1")
        yv = y.astype(np.float64)
        per = ad.sub(Tensor(np.zeros_like(yv)),
                     ad.add(ad.mul(Tensor(yv), ad.log_sigmoid(z)),
                            ad.mul(Tensor(1.0 - yv),
                                   ad.log_sigmoid(ad.scale(z, -1.0)))))
        return ad.tensor_mean(per)
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"multiclass logits must be 2-D, got {logits.data.shape}")
    n, k = logits.data.shape
    if y.shape != (n,):
        raise ShapeMismatch(f"{n} logit rows vs {y.shape} labels")
    if y.min() < 0 or y.max() >= k:
        raise LabelOutOfRange(f"labels outside [0, {k})")
    onehot = np.eye(k)[y]
    logp = ad.log_softmax(logits, axis=1)
    per = ad.tensor_sum(ad.mul(logp, Tensor(-onehot)), axis=1)
    return ad.tensor_mean(per)


def kd_loss(z_teacher, z_student: Tensor, temperature: float,
            task: str) -> Tensor:
    """Soft-target loss; the teacher side is a constant (no gradient)."""
    if temperature <= 0:
        raise DegenerateConfig(f"temperature {temperature} <= 0")
    zt = z_teacher.data if isinstance(z_teacher, Tensor) else np.asarray(z_teacher)
    zt = zt.astype(np.float64)
    if not np.isfinite(zt).all() or not np.isfinite(z_student.data).all():
        raise NonFiniteInput("kd_loss: non-finite logits")
    if zt.shape != z_student.data.shape:
        raise ShapeMismatch(f"teacher {zt.shape} vs student {z_student.data.shape}")
    inv_t = 1.0 / temperature
    if task == "binary":
        pt = 1.0 / (1.0 + np.exp(-zt * inv_t))
        zs = ad.reshape(ad.scale(z_student, inv_t), (-1,))
        per = ad.sub(Tensor(np.zeros(zs.data.shape)),
                     ad.add(ad.mul(Tensor(pt.ravel()), ad.log_sigmoid(zs)),
                            ad.mul(Tensor(1.0 - pt.ravel()),
                                   ad.log_sigmoid(ad.scale(zs, -1.0)))))
        return ad.tensor_mean(per)
    log_pt = ad.log_softmax(Tensor(zt * inv_t), axis=1).data
    pt = np.exp(log_pt)
    log_ps = ad.log_softmax(ad.scale(z_student, inv_t), axis=1)
    per = ad.tensor_sum(ad.mul(Tensor(pt), ad.sub(Tensor(log_pt), log_ps)),
                        axis=1)
    return ad.tensor_mean(per)


# -- shared training machinery -----------------------------------------------------

def _val_split(examples: list[LabeledExample], fraction: float,
               seed: int) -> tuple[list[LabeledExample], list[LabeledExample]]:
    """Deterministic hash-ordered cut: first round(fraction*n) become val."""
    def sort_key(ex):
        digest = hashlib.sha256(f"{seed}:{ex.patient_id}".encode()).digest()
        return (int.from_bytes(digest[:8], "big"), ex.patient_id)

    ordered = sorted(examples, key=sort_key)
    n_val = int(round(fraction * len(ordered)))
    val = set(id(ex) for ex in ordered[:n_val])
    return [ex for ex in examples if id(ex) not in val], \
           [ex for ex in examples if id(ex) in val]


def _stack_vitals(examples, mean, std) -> np.ndarray:
    return np.stack([normalized_stack(ex.vitals, mean, std) for ex in examples])


def _scores(logits: np.ndarray, task: str) -> np.ndarray:
    if task == "binary":
        return 1.0 / (1.0 + np.exp(-logits.ravel()))
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _val_auroc(logits: np.ndarray, labels: np.ndarray, task: str) -> float:
    try:
        if task == "binary":
            return auroc(_scores(logits, task), labels)
        return macro_ovr(_scores(logits, task), labels).auroc
    except DEGENERATE:
        return float("nan")


def _tensors(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


@dataclass
class TrainedModel:
    params: dict[str, np.ndarray]
    final_params: dict[str, np.ndarray]
    best_epoch: int
    best_val_auroc: float
    val_trace: list[tuple[int, float]]
    loss_trace: list[tuple]
    channel_mean: np.ndarray
    channel_std: np.ndarray
    encoder_config: EncoderConfig
    task: str
    n_classes: int
    note_input_hashes: list[str] = field(default_factory=list)


def format_val_trace(trace) -> str:
    lines = ["epoch,val_auroc"]
    lines += [f"{epoch},{v!r}" for epoch, v in trace]
    return "\n".join(lines) + "\n"


def format_student_trace(trace) -> str:
    lines = ["step,epoch,loss,hard,kd"]
    lines += [f"{s},{e},{t!r},{h!r},{k!r}" for s, e, t, h, k in trace]
    return "\n".join(lines) + "\n"


def _prepare(bundle: CohortBundle, cfg: DistillConfig,
             enc_cfg: EncoderConfig | None):
    examples = labeled_examples(bundle, cfg)
    if len(examples) < 2:
        raise EmptyCohort("need at least 2 labeled training patients")
    train_ids = bundle.ids_for("train")
    mean, std = channel_stats(bundle, train_ids)
    if enc_cfg is None:
        enc_cfg = EncoderConfig(input_channels=2 * bundle.channels,
                                max_timesteps=bundle.horizon_hours)
    train_ex, val_ex = _val_split(examples, cfg.val_fraction, cfg.seed)
    if not train_ex:
        raise EmptyCohort("validation split consumed every training patient")
    index_of = {ex.patient_id: i for i, ex in enumerate(examples)}
    return examples, train_ex, val_ex, mean, std, enc_cfg, index_of


def train_teacher(bundle: CohortBundle, cfg: DistillConfig,
                  enc_cfg: EncoderConfig | None = None) -> TrainedModel:
    """Supervised notes+vitals teacher; checkpoint at best validation AUROC."""
    examples, train_ex, val_ex, mean, std, enc_cfg, index_of = _prepare(
        bundle, cfg, enc_cfg)

    rng = stream_rng(cfg.seed, 0x7ea)
    params = init_teacher_params(enc_cfg, rng, note_dim=bundle.note_dim,
                                 n_outputs=cfg.head_dim)
    opt = Adam(params, lr=cfg.learning_rate)

    x_val = _stack_vitals(val_ex, mean, std) if val_ex else None
    notes_val = np.stack([ex.note_raw for ex in val_ex]).astype(np.float64) \
        if val_ex else None
    y_val = np.array([ex.label for ex in val_ex])

    trace, val_trace, note_hashes = [], [], []
    best_auroc, best_epoch = -np.inf, 0
    best = _snapshot(params)
    step = 0
    for epoch in range(cfg.epochs):
        order = stream_rng(cfg.seed, epoch, 0xba7c).permutation(len(train_ex))
        hasher = hashlib.sha256()
        for start in range(0, len(train_ex), cfg.batch_size):
            batch = [train_ex[i] for i in order[start:start + cfg.batch_size]]
            notes = []
            for ex in batch:
                pick = select_note_input(
                    ex, cfg.raw_note_prob,
                    stream_rng(cfg.seed, epoch, index_of[ex.patient_id], 2))
                notes.append(np.asarray(pick, dtype=np.float64))
                hasher.update(notes[-1].tobytes())
            x = _stack_vitals(batch, mean, std)
            y = np.array([ex.label for ex in batch])
            logits = teacher_forward(enc_cfg, params, Tensor(np.stack(notes)),
                                     x)
            loss = hard_loss(logits, y, cfg.task)
            step += 1
            trace.append((step, epoch, float(loss.data)))
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        note_hashes.append(hasher.hexdigest())
        log.debug("teacher epoch %d note-input hash %s", epoch, note_hashes[-1])

        if val_ex:
            z = teacher_forward(enc_cfg, _tensors(_snapshot(params)),
                                Tensor(notes_val), x_val).data
            score = _val_auroc(z, y_val, cfg.task)
        else:
            score = float("nan")
        val_trace.append((epoch, score))
        if np.isfinite(score) and score > best_auroc:
            best_auroc, best_epoch = score, epoch
            best = _snapshot(params)
    if not np.isfinite(best_auroc):
        best, best_epoch, best_auroc = _snapshot(params), cfg.epochs - 1, float("nan")
    return TrainedModel(best, _snapshot(params), best_epoch, float(best_auroc),
                        val_trace, trace, mean, std, enc_cfg, cfg.task,
                        cfg.n_classes, note_hashes)


def train_student(bundle: CohortBundle, cfg: DistillConfig,
                  teacher: TrainedModel | None,
                  init_params: dict[str, np.ndarray] | None = None,
                  enc_cfg: EncoderConfig | None = None) -> TrainedModel:
    """Vitals-only student; combined objective hard + lambda*kd.

    With lambda_distill = 0 the teacher is never consulted and the loop is a
    plain supervised run (the fine-tuning baseline).
    """
    distilling = cfg.lambda_distill > 0
    if distilling:
        if teacher is None:
            raise TaskMismatch("lambda_distill > 0 requires a teacher")
        if (teacher.task, teacher.n_classes) != (cfg.task, cfg.n_classes):
            raise TaskMismatch(
                f"teacher trained for {teacher.task}/{teacher.n_classes}, "
                f"student configured for {cfg.task}/{cfg.n_classes}")
        if enc_cfg is None:
            enc_cfg = teacher.encoder_config
    examples, train_ex, val_ex, mean, std, enc_cfg, _ = _prepare(
        bundle, cfg, enc_cfg)

    rng = stream_rng(cfg.seed, 0x57d)
    params = init_student_params(enc_cfg, rng, n_outputs=cfg.head_dim)
    if init_params is not None:
        for name, value in init_params.items():
            if name in params and name.startswith("enc."):
                if params[name].data.shape != value.shape:
                    raise ShapeMismatch(f"{name}: checkpoint shape {value.shape}")
                params[name] = Tensor(value.copy(), requires_grad=True)
    opt = Adam(params, lr=cfg.learning_rate)

    teacher_params = _tensors(teacher.params) if distilling else None

    x_val = _stack_vitals(val_ex, mean, std) if val_ex else None
    y_val = np.array([ex.label for ex in val_ex])

    trace, val_trace = [], []
    best_auroc, best_epoch = -np.inf, 0
    best = _snapshot(params)
    step = 0
    for epoch in range(cfg.epochs):
        order = stream_rng(cfg.seed, epoch, 0xba7c).permutation(len(train_ex))
        for start in range(0, len(train_ex), cfg.batch_size):
            batch = [train_ex[i] for i in order[start:start + cfg.batch_size]]
            x = _stack_vitals(batch, mean, std)
            y = np.array([ex.label for ex in batch])
            logits = student_forward(enc_cfg, params, x)
            hard = hard_loss(logits, y, cfg.task)
            if distilling:
                notes = np.stack([ex.note_raw for ex in batch]).astype(np.float64)
                z_t = teacher_forward(enc_cfg, teacher_params, Tensor(notes),
                                      x).data
                kd = kd_loss(z_t, logits, cfg.temperature, cfg.task)
                loss = ad.add(hard, ad.scale(kd, cfg.lambda_distill))
                kd_value = float(kd.data)
            else:
                loss = hard
                kd_value = 0.0
            step += 1
            trace.append((step, epoch, float(loss.data), float(hard.data),
                          kd_value))
            opt.zero_grad()
            ad.backward(loss)
            opt.step()

        if val_ex:
            z = student_forward(enc_cfg, _tensors(_snapshot(params)), x_val).data
            score = _val_auroc(z, y_val, cfg.task)
        else:
            score = float("nan")
        val_trace.append((epoch, score))
        if np.isfinite(score) and score > best_auroc:
            best_auroc, best_epoch = score, epoch
            best = _snapshot(params)
    if not np.isfinite(best_auroc):
        best, best_epoch, best_auroc = _snapshot(params), cfg.epochs - 1, float("nan")
    return TrainedModel(best, _snapshot(params), best_epoch, float(best_auroc),
                        val_trace, trace, mean, std, enc_cfg, cfg.task,
                        cfg.n_classes)


def finetune(bundle: CohortBundle, cfg: DistillConfig,
             init_params: dict[str, np.ndarray] | None = None,
             enc_cfg: EncoderConfig | None = None) -> TrainedModel:
    """Supervised vitals-only baseline: the student loop without a teacher."""
    from dataclasses import replace
    return train_student(bundle, replace(cfg, lambda_distill=0.0), None,
                         init_params=init_params, enc_cfg=enc_cfg)


def predict_student(bundle: CohortBundle, model: TrainedModel, ids,
                    use_best: bool = True) -> np.ndarray:
    """Scores (probabilities) for the given patients from the student."""
    params = _tensors(model.params if use_best else model.final_params)
    x = np.stack([
        normalized_stack(bundle.vitals[p], model.channel_mean,
                         model.channel_std) for p in ids
    ])
    z = student_forward(model.encoder_config, params, x).data
    return _scores(z, model.task)


def predict_teacher(bundle: CohortBundle, model: TrainedModel, ids,
                    use_best: bool = True) -> np.ndarray:
    params = _tensors(model.params if use_best else model.final_params)
    x = np.stack([
        normalized_stack(bundle.vitals[p], model.channel_mean,
                         model.channel_std) for p in ids
    ])
    notes = np.stack([bundle.notes_raw[p] for p in ids]).astype(np.float64)
    z = teacher_forward(model.encoder_config, params, Tensor(notes), x).data
    return _scores(z, model.task)
