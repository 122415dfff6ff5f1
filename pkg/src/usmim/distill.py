"""Teacher/student bookkeeping, projection head, EMA and the two distillation losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import Params, _dense
from .tensor import Tensor


@dataclass
class HeadConfig:
    hidden: int = 128
    bottleneck: int = 64
    prototypes: int = 256


def init_head(in_dim: int, cfg: HeadConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    arrays = {
        "head.mlp1.w": _dense(rng, in_dim, cfg.hidden, dtype),
        "head.mlp1.b": np.zeros(cfg.hidden, dtype),
        "head.mlp2.w": _dense(rng, cfg.hidden, cfg.bottleneck, dtype),
        "head.mlp2.b": np.zeros(cfg.bottleneck, dtype),
        "head.proto.w": _dense(rng, cfg.bottleneck, cfg.prototypes, dtype),
    }
    return {k: T.parameter(v, name=k) for k, v in arrays.items()}


def head_scores(tokens: Tensor, params: Params, eps: float = 1e-6) -> Tensor:
    """MLP -> unit-length bottleneck -> prototype scores, over the last axis."""
    h = T.silu(T.linear(tokens, params["head.mlp1.w"], params["head.mlp1.b"]))
    z = T.linear(h, params["head.mlp2.w"], params["head.mlp2.b"])
    norm = T.sqrt(T.sum(z * z, axis=-1, keepdims=True) + eps)
    z = z / T.expand(norm, z.shape)
    return T.linear(z, params["head.proto.w"])


def center_scores(scores: Tensor, center: np.ndarray | None) -> Tensor:
    if center is None:
        return scores
    c = np.broadcast_to(np.asarray(center, dtype=scores.dtype), scores.shape)
    return scores - Tensor(c)


def head_forward(token: Tensor, params: Params, tau: float, center: np.ndarray | None = None) -> Tensor:
    """Probability vector(s) over the prototypes; pass ``center`` on the teacher path."""
    if not tau > 0:
        raise T.DomainError(f"temperature must be positive, got {tau}")
    return T.softmax_t(center_scores(head_scores(token, params), center), tau)


# ---------------------------------------------------------------- EMA


@dataclass
class TeacherStudentPair:
    student: Params
    teacher: Params
    lam: float = 0.996

    @classmethod
    def from_student(cls, student: Params, lam: float = 0.996) -> "TeacherStudentPair":
        teacher = {k: Tensor(v.data.copy(), name=k) for k, v in student.items()}
        return cls(student, teacher, lam)

    def check(self) -> None:
        if self.student.keys() != self.teacher.keys():
            raise ValueError("teacher and student parameter names differ")
        for k, s in self.student.items():
            t = self.teacher[k]
            if s.shape != t.shape or s.dtype != t.dtype:
                raise ValueError(f"shape drift in {k}: {s.shape} vs {t.shape}")
            if t.requires_grad or t.grad is not None:
                raise ValueError(f"teacher parameter {k} carries a gradient slot")


def ema_update(pair: TeacherStudentPair) -> None:
    """``teacher <- lam * teacher + (1 - lam) * student`` for every parameter."""
    pair.check()
    lam = pair.lam
    for k, s in pair.student.items():
        t = pair.teacher[k]
        t.data = (lam * t.data + (1.0 - lam) * s.data).astype(t.dtype)


# ---------------------------------------------------------------- centering


@dataclass
class CenterState:
    center: np.ndarray
    decay: float = 0.9
    updates: int = 0

    @classmethod
    def zeros(cls, k: int, decay: float = 0.9) -> "CenterState":
        return cls(np.zeros(k), decay)


def center_update(state: CenterState, teacher_batch_scores, adopt_first: bool = False) -> None:
    """EMA of the batch-mean teacher scores; ``adopt_first`` takes the first batch mean outright."""
    scores = np.asarray(getattr(teacher_batch_scores, "data", teacher_batch_scores), dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] != state.center.shape[0]:
        raise ValueError(f"expected [batch, {state.center.shape[0]}] scores, got {scores.shape}")
    mean = scores.mean(axis=0)
    if adopt_first and state.updates == 0:
        state.center = mean
    else:
        state.center = state.decay * state.center + (1.0 - state.decay) * mean
    state.updates += 1


def entropy(p) -> float:
    p = np.asarray(getattr(p, "data", p), dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


# ---------------------------------------------------------------- losses


def _target(p) -> np.ndarray:
    # teacher targets never carry gradient
    return np.asarray(getattr(p, "data", p))


def _log(p: Tensor, log_input: bool) -> Tensor:
    if not isinstance(p, Tensor):
        p = Tensor(p)
    return p if log_input else T.log(p)


def cross_entropy(target, student, log_input: bool = False) -> Tensor:
    """Per-row ``-sum_k t_k log s_k`` over the last axis."""
    ls = _log(student, log_input)
    t = Tensor(_target(target).astype(ls.dtype))
    if t.shape != ls.shape:
        raise T.ShapeError(f"target {t.shape} vs student {ls.shape}")
    return T.neg(T.sum(t * ls, axis=-1))


def loss_cls(teacher_global_probs, student_local_probs, log_input: bool = False,
             student_global_probs=None) -> Tensor:
    """Mean cross-entropy over every (teacher global view, student local view) pair.

    With ``student_global_probs`` the student's other global views join the
    pairing as well (same view index is skipped).
    """
    if not teacher_global_probs or not (student_local_probs or student_global_probs):
        raise ValueError("loss_cls needs at least one teacher and one student view")
    terms = []
    for pt in teacher_global_probs:
        for ps in student_local_probs:
            terms.append(T.mean(cross_entropy(pt, ps, log_input)))
    if student_global_probs is not None:
        for g, pt in enumerate(teacher_global_probs):
            for g2, ps in enumerate(student_global_probs):
                if g != g2:
                    terms.append(T.mean(cross_entropy(pt, ps, log_input)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / float(len(terms))


def downsample_mask(mask, stem_grid: tuple[int, int], final_grid: tuple[int, int]) -> np.ndarray:
    """Majority vote of stem-grid mask inside each final-grid window; ties count as masked."""
    m = np.asarray(mask)
    lead = m.shape[:-1]
    sh, sw = stem_grid
    gh, gw = final_grid
    fy, fx = sh // gh, sw // gw
    m = m.reshape(*lead, gh, fy, gw, fx).sum(axis=(-3, -1))
    return (2 * m >= fy * fx).astype(np.uint8).reshape(*lead, gh * gw)


def loss_patch_mim(teacher_patch_probs, student_patch_probs, masks, log_input: bool = False) -> tuple[Tensor, bool]:
    """Masked-token cross-entropy summed over views, divided by the total masked count.

    Each list entry is one view: teacher ``[..., n, K]`` (clean input),
    student ``[..., n, K]`` (masked input), mask ``[..., n]``.
    Returns ``(loss, empty)``; ``empty`` is set when nothing was masked.
    """
    total_masked = float(sum(np.asarray(m).sum() for m in masks))
    ref = student_patch_probs[0]
    dtype = ref.dtype if isinstance(ref, Tensor) else np.float64
    if total_masked == 0:
        return Tensor(np.zeros((), dtype=dtype)), True
    acc = None
    for pt, ps, m in zip(teacher_patch_probs, student_patch_probs, masks):
        ce = cross_entropy(pt, ps, log_input)
        term = T.sum(ce * Tensor(np.asarray(m, dtype=ce.dtype)))
        acc = term if acc is None else acc + term
    return acc / total_masked, False


def uniform_entropy(k: int) -> float:
    return math.log(k)
