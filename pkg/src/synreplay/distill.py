"""Training objective for continual finetuning.

Cross-entropy on the current task plus three optional stabilizers: KL
distillation of the frozen previous model's class distribution on replay
samples, a symmetric image-prompt contrastive alignment on the replay
batch, and an anchored quadratic penalty weighted by an EMA of squared
gradients.  Each term has an enable flag; a disabled term is skipped
outright so it contributes exactly zero.
"""

from dataclasses import dataclass, field

import numpy as np

from synreplay import vlm
from synreplay.numcore import (Tensor, div, exp, log_softmax, no_grad, square,
                               sub, tmean, transpose, tsum)
from synreplay.numcore.tensor import ShapeError


class TeacherSnapshot:
    """Frozen copy of the model at the start of a task."""

    def __init__(self, model: vlm.DualEncoder):
        self.model = model.clone(frozen=True)
        self.fingerprint = self.model.fingerprint()


@dataclass(frozen=True)
class LossWeights:
    lambda_cd: float = 1.0
    lambda_ita: float = 0.5
    lambda_awc: float = 10.0
    use_cd: bool = True
    use_ita: bool = True
    use_awc: bool = True

    @staticmethod
    def disabled() -> "LossWeights":
        return LossWeights(use_cd=False, use_ita=False, use_awc=False)


class ImportanceMap:
    """Per-parameter EMA of squared gradients plus the task-start anchor.

    The EMA is capped: the anchoring term's own gradient feeds back into
    the squared-gradient statistics, and without a ceiling that loop can
    run away (importance -> gradient -> importance...) until it overflows.
    """

    CAP = 1e2

    def __init__(self, model: vlm.DualEncoder, decay: float = 0.99):
        self.decay = decay
        self.values = {n: np.zeros(t.shape) for n, t in model.store.params.items()}
        self.anchor = model.store.clone_values()

    def reset_anchor(self, model: vlm.DualEncoder) -> None:
        self.anchor = model.store.clone_values()

    def update(self, model: vlm.DualEncoder) -> None:
        for name, t in model.store.params.items():
            if t.grad is not None:
                imp = self.values[name]
                imp *= self.decay
                imp += (1.0 - self.decay) * (t.grad * t.grad)
                np.minimum(imp, self.CAP, out=imp)


def kl_divergence(teacher_log_probs: np.ndarray, student_log_probs: Tensor) -> Tensor:
    """Mean over rows of KL(teacher || student); teacher side is constant."""
    if teacher_log_probs.shape != student_log_probs.shape:
        raise ShapeError(f"kl_divergence: {teacher_log_probs.shape} vs {student_log_probs.shape}")
    p_t = np.exp(teacher_log_probs)
    diff = sub(Tensor(teacher_log_probs), student_log_probs)
    return tmean(tsum(Tensor(p_t) * diff, axis=1))


def loss_cd(student: vlm.DualEncoder, teacher: TeacherSnapshot,
            replay_images: np.ndarray, pool_classes: list) -> Tensor:
    """KL of the teacher's class distribution to the student's, over the
    replay pool classes; no gradient reaches the teacher."""
    replay_images = np.atleast_2d(np.asarray(replay_images, dtype=np.float64))
    if replay_images.shape[0] == 0:
        raise ValueError("loss_cd: empty replay batch")
    if not pool_classes:
        raise ValueError("loss_cd: empty class pool")
    with no_grad():
        t_logp = log_softmax(vlm.class_logits(teacher.model, replay_images, pool_classes)).values
    s_logp = log_softmax(vlm.class_logits(student, replay_images, pool_classes))
    return kl_divergence(t_logp, s_logp)


def loss_ita(student: vlm.DualEncoder, replay_images: np.ndarray,
             prompts: list, item_classes: list) -> Tensor:
    """Symmetric contrastive alignment of replay images with their prompts.

    Cross-entropy of the image->prompt and prompt->image cosine/tau
    similarity rows against the diagonal matching, averaged over the two
    directions.
    """
    replay_images = np.atleast_2d(np.asarray(replay_images, dtype=np.float64))
    n = replay_images.shape[0]
    if n < 2:
        raise ValueError("loss_ita: need at least two replay pairs")
    if len(set(item_classes)) < 2:
        raise ValueError("loss_ita: replay batch needs >= 2 distinct classes")
    z = vlm.encode_image(student, replay_images)
    w = vlm.encode_token_batch(student, [student.token_ids(p) for p in prompts])
    sims = div(vlm.cosine_matrix(z, w), exp(student.store["log_tau"]))
    labels = np.arange(n)
    i2t = vlm.cross_entropy(sims, labels)
    t2i = vlm.cross_entropy(transpose(sims), labels)
    return 0.5 * (i2t + t2i)


def loss_awc(student: vlm.DualEncoder, importance: ImportanceMap) -> Tensor:
    """Sum over parameters of importance * (theta - anchor)^2."""
    total = None
    for name, t in student.store.params.items():
        imp = importance.values.get(name)
        anchor = importance.anchor.get(name)
        if imp is None or anchor is None or imp.shape != t.shape:
            raise ShapeError(f"loss_awc: importance/anchor mismatch on {name}")
        term = tsum(Tensor(imp) * square(sub(t, Tensor(anchor))))
        total = term if total is None else total + term
    return total


def l2_anchor_loss(student: vlm.DualEncoder, anchor: dict, lam: float) -> Tensor:
    """lam * squared distance to the pretrained weights (baseline)."""
    total = None
    for name, t in student.store.params.items():
        term = tsum(square(sub(t, Tensor(anchor[name]))))
        total = term if total is None else total + term
    return lam * total


def composite_loss(student: vlm.DualEncoder, teacher: TeacherSnapshot | None,
                   task_images: np.ndarray, task_labels: np.ndarray,
                   task_classes: list, replay_items: list,
                   pool_classes: list, weights: LossWeights,
                   importance: ImportanceMap | None):
    """Task cross-entropy plus enabled stabilizer terms.

    Returns (total loss tensor, per-term float dict).  Terms whose flag is
    off are never computed, so disabling a term leaves the rest of the
    total bit-identical.
    """
    task_images = np.asarray(task_images, dtype=np.float64)
    if task_images.shape[0] == 0:
        raise ValueError("composite_loss: empty task batch")
    total = vlm.cross_entropy(vlm.class_logits(student, task_images, task_classes),
                              np.asarray(task_labels, dtype=np.int64))
    parts = {"ce": total.item(), "cd": 0.0, "ita": 0.0, "awc": 0.0}
    use_replay = bool(replay_items)
    if weights.use_cd and use_replay:
        images = np.stack([it.sample for it in replay_items])
        cd = loss_cd(student, teacher, images, pool_classes)
        parts["cd"] = cd.item()
        total = total + weights.lambda_cd * cd
    if weights.use_ita and use_replay and len(replay_items) >= 2 \
            and len({it.class_name for it in replay_items}) >= 2:
        # a drawn replay batch can collapse to one class early on, where
        # the contrastive term's precondition does not hold; it then
        # contributes nothing this step
        images = np.stack([it.sample for it in replay_items])
        ita = loss_ita(student, images, [it.prompt for it in replay_items],
                       [it.class_name for it in replay_items])
        parts["ita"] = ita.item()
        total = total + weights.lambda_ita * ita
    if weights.use_awc:
        if importance is None:
            raise ValueError("composite_loss: AWC enabled but no importance map")
        awc = loss_awc(student, importance)
        parts["awc"] = awc.item()
        total = total + weights.lambda_awc * awc
    parts["total"] = total.item()
    return total, parts
