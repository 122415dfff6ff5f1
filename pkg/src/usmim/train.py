"""Pre-training loop: views, masks, the four losses, AdamW, EMA, metrics and checkpoints.

All randomness is drawn from generators keyed by ``(seed, epoch, index, stream)``,
so a run is a pure function of its config and a checkpoint needs no RNG state.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .config import TrainConfig, config_from_dict, dump_config, tomllib
from .data import ImageRecord, epoch_views
from .distill import (CenterState, TeacherStudentPair, center_update, downsample_mask, ema_update, entropy,
                      head_scores, init_head, loss_cls, loss_patch_mim)
from .encoder import Params, encode, init_encoder
from .masking import (MaskScheduleState, RecLossEMA, alpha_schedule, compute_alp, random_blockwise_mask,
                      ratio_schedule, self_adaptive_mask, update_rec_loss_ema)
from .recon import init_recon_head, loss_recon_global, loss_recon_local, rec_loss_map, reconstruct
from .tensor import Tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "step", "loss_total", "loss_cls", "loss_patch", "loss_recon_g", "loss_recon_l",
                  "alpha", "r_t", "lr", "teacher_entropy")
COMPONENTS = ("cls", "patch", "recon_g", "recon_l")

# stream tags for per-image generators
_VIEW_STREAM = 0
_MASK_STREAM = 1
_ORDER_STREAM = 2


class TrainingAborted(RuntimeError):
    pass


# ---------------------------------------------------------------- model


def init_model(cfg: TrainConfig) -> Params:
    """Encoder, projection head and reconstruction head, all from ``cfg.seed``."""
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng([cfg.seed, 1_000_003])
    params = init_encoder(cfg.encoder, rng, dtype)
    dim = cfg.encoder.stage_dims[-1]
    params.update(init_head(dim, cfg.head, rng, dtype))
    params.update(init_recon_head(dim, cfg.encoder.down_total, rng, dtype))
    return params


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices only, not to norms, biases or SSM decay rates."""
    last = name.rsplit(".", 1)[-1]
    return not (last in ("b", "g", "A_log") or name == "mask_token" or name.startswith("norm."))


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(math.fsum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale in place to global norm ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = (grads[k] * scale).astype(grads[k].dtype)
    return norm


def adamw_step(params: Params, grads: dict[str, np.ndarray], state: OptimizerState, lr: float, wd: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               decay_mask: dict[str, bool] | None = None) -> bool:
    """Decoupled weight decay then a bias-corrected Adam update.

    Parameters without a gradient entry are treated as having zero gradient.
    Returns False (and leaves everything untouched) if any gradient is non-finite.
    """
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k}")
        if g.shape != params[k].shape:
            raise T.ShapeError(f"gradient {k}: {g.shape} vs parameter {params[k].shape}")
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient in %s; skipping optimizer step", k)
            return False
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        dt = p.data.dtype
        data = p.data
        if wd and (decay_mask is None or decay_mask.get(k, True)):
            data = data * (1.0 - lr * wd)
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        state.m[k] = m.astype(dt)
        state.v[k] = v.astype(dt)
        p.data = (data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(dt)
    return True


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr`` then a half-cosine down to 0."""
    if not 0 <= warmup_steps < total_steps:
        raise ValueError("need 0 <= warmup_steps < total_steps")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if step >= total_steps:
        return 0.0
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * frac))


def total_loss(components: dict[str, float | Tensor], weights: dict[str, float] | None = None):
    """Weighted sum of the enabled components (all weights 1 by default)."""
    weights = weights or {}
    acc = None
    for name, value in components.items():
        w = weights.get(name, 1.0)
        term = value * w if w != 1.0 else value
        acc = term if acc is None else acc + term
    return 0.0 if acc is None else acc


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsRow:
    epoch: int
    step: int
    loss_total: float
    loss_cls: float
    loss_patch: float
    loss_recon_g: float
    loss_recon_l: float
    alpha: float
    r_t: float
    lr: float
    teacher_entropy: float

    def cells(self) -> list[str]:
        return [repr(v) if isinstance(v, float) else str(v) for v in asdict(self).values()]


def metrics_csv(rows: Sequence[MetricsRow], header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"unexpected metrics header {rd.fieldnames}")
        return [MetricsRow(int(r["epoch"]), int(r["step"]), *(float(r[c]) for c in METRIC_COLUMNS[2:]))
                for r in rd]


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------- training state


@dataclass
class TrainState:
    cfg: TrainConfig
    pair: TeacherStudentPair
    opt: OptimizerState
    center_cls: CenterState
    center_patch: CenterState
    rec_ema: RecLossEMA
    epoch: int = 0  # completed epochs
    step: int = 0  # completed optimizer iterations (including skipped ones)
    extras: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "TrainState":
        student = init_model(cfg)
        k = cfg.head.prototypes
        return cls(cfg, TeacherStudentPair.from_student(student, cfg.lam), OptimizerState.zeros_like(student),
                   CenterState.zeros(k, cfg.center_decay), CenterState.zeros(k, cfg.center_decay),
                   RecLossEMA(cfg.rec_ema_decay))


def steps_per_epoch(n_images: int, batch_size: int) -> int:
    return max(1, math.ceil(n_images / batch_size))


def _probs(scores: Tensor, center: CenterState | None, tau: float, log: bool) -> Tensor:
    c = center.center if center is not None else None
    s = scores if c is None else scores - Tensor(np.broadcast_to(c.astype(scores.dtype), scores.shape))
    return T.log_softmax_t(s, tau) if log else T.softmax_t(s, tau)


def _rows(x: Tensor, start: int, count: int) -> Tensor:
    return T.gather(x, np.arange(start, start + count), axis=0)


class Trainer:
    """Runs epochs over a fixed corpus, mutating a :class:`TrainState`."""

    def __init__(self, cfg: TrainConfig, records: Sequence[ImageRecord], state: TrainState | None = None,
                 workers: int = 1, diag_dir: str | Path | None = None):
        if not records:
            raise ValueError("empty corpus")
        self.cfg = cfg
        self.records = list(records)
        self.state = state or TrainState.fresh(cfg)
        self.workers = workers
        self.diag_dir = Path(diag_dir) if diag_dir is not None else None
        self.spe = steps_per_epoch(len(self.records), cfg.batch_size)
        self.total_steps = cfg.epochs * self.spe
        self.warmup_steps = cfg.warmup_epochs * self.spe
        self.decay_mask = {k: decays(k) for k in self.state.pair.student}
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("image ids must be unique")

    # -- schedules ---------------------------------------------------
    def schedule(self, epoch: int) -> tuple[float, float]:
        """``(alpha, r_t)`` for a 0-based epoch, with ``t/T`` running 0 -> 1 across the run."""
        cfg = self.cfg
        t_max = max(cfg.epochs - 1, 1)
        st = MaskScheduleState(min(epoch, t_max), t_max, cfg.r0, cfg.rT, cfg.alpha_min, cfg.alpha_max)
        alpha = alpha_schedule(st)
        if cfg.global_mask == "attention":
            alpha = 0.0
        elif cfg.global_mask == "reconstruction":
            alpha = 1.0
        return alpha, ratio_schedule(st)

    def _sample_key(self, epoch: int) -> int:
        return 0 if self.cfg.epoch_invariant_sampling else epoch

    def batch_order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.seed, self._sample_key(epoch), _ORDER_STREAM, 7])
        return rng.permutation(len(self.records))

    # -- masks -------------------------------------------------------
    def global_masks(self, idx: int, am: np.ndarray, rec_snapshot: RecLossEMA, alpha: float, r_t: float,
                     stem_grid: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
        """Masks ``[G, n_stem]`` for one image's global views."""
        cfg = self.cfg
        n = stem_grid[0] * stem_grid[1]
        out = np.zeros((am.shape[0], n), dtype=np.uint8)
        rec = rec_snapshot.get(self.records[idx].id)
        for g in range(am.shape[0]):
            if cfg.global_mask == "rbw":
                plan = random_blockwise_mask(*stem_grid, cfg.rat_m, rng)
            else:
                alp = compute_alp(am[g], rec, alpha)
                plan = self_adaptive_mask(alp, cfg.rat_m, cfg.rat_m * r_t, rng)
            out[g] = plan.grid
        return out

    def local_masks(self, n_views: int, stem_grid: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
        n = stem_grid[0] * stem_grid[1]
        out = np.zeros((n_views, n), dtype=np.uint8)
        if self.cfg.local_mask == "rbw":
            for v in range(n_views):
                out[v] = random_blockwise_mask(*stem_grid, self.cfg.local_rat_m, rng).grid
        return out

    # -- one step ----------------------------------------------------
    def train_step(self, batch_idx: Sequence[int], epoch: int, rec_snapshot: RecLossEMA) -> MetricsRow:
        cfg, st = self.cfg, self.state
        enc = cfg.encoder
        student, teacher = st.pair.student, st.pair.teacher
        dtype = np.dtype(cfg.dtype)
        key = self._sample_key(epoch)
        nb = len(batch_idx)
        G, L = cfg.views.n_global, cfg.views.n_local
        terms = cfg.loss_terms()

        # (1) views, stacked view-major: row g*B + b is view g of image b
        views = epoch_views(self.records, batch_idx, cfg.views, cfg.seed, key, self.workers)
        glob = np.concatenate([np.stack([v.global_views[g] for v in views]) for g in range(G)]).astype(dtype)
        loc = (np.concatenate([np.stack([v.local_views[l] for v in views]) for l in range(L)]).astype(dtype)
               if L else None)

        alpha, r_t = self.schedule(epoch)
        need_am = cfg.global_mask in ("self_adaptive", "attention", "reconstruction")

        # (2) teacher on clean global views
        with T.no_grad():
            tout = encode(glob, enc, teacher, with_attention=need_am)
            t_cls_scores = head_scores(tout.cls_token, teacher)
            t_patch_scores = head_scores(tout.patch_tokens, teacher) if "patch" in terms else None
        if cfg.centering and st.center_cls.updates == 0:
            # an untrained teacher scores every image alike; start the center at that common score
            center_update(st.center_cls, t_cls_scores.data, adopt_first=True)
            if t_patch_scores is not None:
                center_update(st.center_patch, t_patch_scores.data.reshape(-1, t_patch_scores.shape[-1]),
                              adopt_first=True)
        c_cls = st.center_cls if cfg.centering else None
        c_patch = st.center_patch if cfg.centering else None
        t_cls = _probs(t_cls_scores, c_cls, cfg.tau_t, log=False).data
        teacher_ent = entropy(t_cls.astype(np.float64).mean(axis=0))
        stem_g = tout.stem_grid
        stem_l = (cfg.views.local_size // enc.stem_patch,) * 2

        # (3) masks
        am = tout.attention_map if need_am else np.zeros((G * nb, stem_g[0] * stem_g[1]))
        gmask = np.zeros((G * nb, stem_g[0] * stem_g[1]), dtype=np.uint8)
        lmask = np.zeros((L * nb, stem_l[0] * stem_l[1]), dtype=np.uint8)
        for b, idx in enumerate(batch_idx):
            rng = np.random.default_rng([cfg.seed, key, int(idx), _MASK_STREAM])
            rows_g = np.arange(G) * nb + b
            gmask[rows_g] = self.global_masks(int(idx), am[rows_g], rec_snapshot, alpha, r_t, stem_g, rng)
            if L:
                lmask[np.arange(L) * nb + b] = self.local_masks(L, stem_l, rng)

        # (4) student on masked views
        with T.tape():
            sg = encode(glob, enc, student, mask=gmask)
            sl = encode(loc, enc, student, mask=lmask if cfg.local_mask == "rbw" else None) if L else None

            # (5) losses
            comps: dict[str, Tensor] = {}
            flags = {}
            if "cls" in terms:
                teacher_views = [t_cls[g * nb:(g + 1) * nb] for g in range(G)]
                s_loc = []
                if L:
                    s_log = _probs(head_scores(sl.cls_token, student), None, cfg.tau_s, log=True)
                    s_loc = [_rows(s_log, l * nb, nb) for l in range(L)]
                s_glob = None
                if cfg.student_global_cls:
                    s_glog = _probs(head_scores(sg.cls_token, student), None, cfg.tau_s, log=True)
                    s_glob = [_rows(s_glog, g * nb, nb) for g in range(G)]
                comps["cls"] = loss_cls(teacher_views, s_loc, log_input=True, student_global_probs=s_glob)
            if "patch" in terms:
                t_patch = _probs(t_patch_scores, c_patch, cfg.tau_t, log=False).data
                s_patch = _probs(head_scores(sg.patch_tokens, student), None, cfg.tau_s, log=True)
                fmask = downsample_mask(gmask, stem_g, sg.final_grid)
                comps["patch"], flags["patch_empty"] = loss_patch_mim([t_patch], [s_patch], [fmask], log_input=True)
            pred_g = None
            if "recon_g" in terms:
                pred_g = reconstruct(sg.patch_tokens, student, sg.final_grid, enc.down_total)
                comps["recon_g"], flags["recon_g_empty"] = loss_recon_global([pred_g], [glob], [gmask], enc.stem_patch)
            if "recon_l" in terms:
                pred_l = reconstruct(sl.patch_tokens, student, sl.final_grid, enc.down_total)
                comps["recon_l"], flags["recon_l_empty"] = loss_recon_local([pred_l], [loc], [lmask], enc.stem_patch)
            if not comps:
                raise ValueError("every loss term is disabled")
            loss = total_loss(comps, terms)
            values = {k: float(v.item()) for k, v in comps.items()}
            if not all(math.isfinite(v) for v in values.values()):
                self._dump(epoch, batch_idx, values, glob, gmask)
                raise TrainingAborted(f"non-finite loss at epoch {epoch + 1}, step {st.step}: {values}")
            for p in student.values():
                p.grad = None
            T.backward(loss)

        grads = {k: p.grad for k, p in student.items() if p.grad is not None}
        lr = lr_schedule(st.step, self.total_steps, self.warmup_steps, cfg.base_lr)
        finite = all(np.all(np.isfinite(g)) for g in grads.values())
        if finite:
            clip_grads(grads, cfg.grad_clip)
        if adamw_step(student, grads, st.opt, lr, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.adam_eps,
                      self.decay_mask):
            # (6) teacher follows the student
            ema_update(st.pair)
        for p in student.values():
            p.grad = None

        # (7) loss memory for the next epoch's priorities
        if pred_g is None:
            with T.no_grad():
                pred_g = reconstruct(sg.patch_tokens.detach(), student, sg.final_grid, enc.down_total)
        rmap = rec_loss_map(pred_g.data, glob, gmask, enc.stem_patch)
        for b, idx in enumerate(batch_idx):
            for g in range(G):
                update_rec_loss_ema(st.rec_ema, self.records[idx].id, rmap[g * nb + b])

        # (8) centers
        if cfg.centering:
            center_update(st.center_cls, t_cls_scores.data)
            if t_patch_scores is not None:
                center_update(st.center_patch, t_patch_scores.data.reshape(-1, t_patch_scores.shape[-1]))

        st.step += 1
        # (9) metrics; the total is re-summed in float64 from the logged components
        logged = {k: terms[k] * values[k] if k in values else 0.0 for k in COMPONENTS}
        return MetricsRow(epoch + 1, st.step, math.fsum(logged.values()), logged["cls"], logged["patch"],
                          logged["recon_g"], logged["recon_l"], float(alpha), float(r_t), float(lr),
                          float(teacher_ent))

    def _dump(self, epoch, batch_idx, values, glob, gmask) -> None:
        if self.diag_dir is None:
            return
        self.diag_dir.mkdir(parents=True, exist_ok=True)
        path = self.diag_dir / f"nonfinite_epoch{epoch + 1}_step{self.state.step}.npz"
        np.savez(path, batch_idx=np.asarray(batch_idx), global_views=glob, global_masks=gmask,
                 ids=np.asarray([self.records[i].id for i in batch_idx]),
                 **{f"loss_{k}": np.asarray(v) for k, v in values.items()})
        log.error("diagnostic dump written to %s", path)

    # -- epochs ------------------------------------------------------
    def run_epoch(self) -> list[MetricsRow]:
        """Train the next epoch; the loss memory read for masking is frozen at epoch start."""
        st = self.state
        epoch = st.epoch
        if epoch >= self.cfg.epochs:
            raise ValueError(f"run already finished ({self.cfg.epochs} epochs)")
        snapshot = st.rec_ema.snapshot()
        order = self.batch_order(epoch)
        bs = self.cfg.batch_size
        rows = [self.train_step(order[i:i + bs], epoch, snapshot) for i in range(0, len(order), bs)]
        st.epoch += 1
        return rows


def pretrain_epoch(trainer: Trainer) -> list[MetricsRow]:
    return trainer.run_epoch()


# ---------------------------------------------------------------- checkpoints


def state_entries(state: TrainState) -> dict[str, np.ndarray]:
    e: dict[str, np.ndarray] = {
        "meta.version": np.array([float(ckpt.FORMAT_VERSION)]),
        "meta.config": ckpt.text_entry(dump_config(state.cfg)),
        "state.epoch": np.array([float(state.epoch)]),
        "state.step": np.array([float(state.step)]),
        "opt.step": np.array([float(state.opt.step)]),
        "center.cls": state.center_cls.center.astype(np.float64),
        "center.patch": state.center_patch.center.astype(np.float64),
        "center.updates": np.array([float(state.center_cls.updates), float(state.center_patch.updates)]),
        "recema.decay": np.array([state.rec_ema.decay]),
    }
    for k, p in state.pair.student.items():
        e[f"student.{k}"] = p.data
    for k, p in state.pair.teacher.items():
        e[f"teacher.{k}"] = p.data
    for k in state.opt.m:
        e[f"opt.m.{k}"] = state.opt.m[k]
        e[f"opt.v.{k}"] = state.opt.v[k]
    for image_id in sorted(state.rec_ema.store):
        e[f"recema.{image_id}"] = state.rec_ema.store[image_id]
    return e


def checkpoint_save(path, state: TrainState) -> None:
    ckpt.save(path, state_entries(state))


def checkpoint_config(entries: dict[str, np.ndarray]) -> TrainConfig:
    return config_from_dict(tomllib.loads(ckpt.entry_text(entries["meta.config"])))


def checkpoint_load(path) -> TrainState:
    """Rebuild a :class:`TrainState`; raises before constructing anything if the file is invalid."""
    e = ckpt.load(path)
    try:
        cfg = checkpoint_config(e)
        fresh = TrainState.fresh(cfg)  # supplies names, shapes and dtypes to validate against
        for k, p in fresh.pair.student.items():
            for src, dst in ((f"student.{k}", p), (f"teacher.{k}", fresh.pair.teacher[k])):
                arr = e[src]
                if arr.shape != p.shape or arr.dtype != p.dtype:
                    raise ckpt.CheckpointError(f"{src}: stored {arr.shape}/{arr.dtype} vs model {p.shape}/{p.dtype}")
                dst.data = arr.copy()
            fresh.opt.m[k] = e[f"opt.m.{k}"].copy()
            fresh.opt.v[k] = e[f"opt.v.{k}"].copy()
        fresh.opt.step = int(e["opt.step"][0])
        fresh.center_cls.center = e["center.cls"].copy()
        fresh.center_patch.center = e["center.patch"].copy()
        fresh.center_cls.updates, fresh.center_patch.updates = (int(u) for u in e["center.updates"])
        fresh.rec_ema = RecLossEMA(float(e["recema.decay"][0]))
        for name, arr in e.items():
            if name.startswith("recema.") and name != "recema.decay":
                fresh.rec_ema.store[name[len("recema."):]] = arr.copy()
        fresh.epoch = int(e["state.epoch"][0])
        fresh.step = int(e["state.step"][0])
    except KeyError as err:
        raise ckpt.CheckpointError(f"checkpoint is missing entry {err}") from None
    return fresh


def encoder_from_checkpoint(path, which: str = "teacher") -> tuple[TrainConfig, Params]:
    """Config and one network's parameters; the teacher is the usual export."""
    st = checkpoint_load(path)
    net = st.pair.teacher if which == "teacher" else st.pair.student
    return st.cfg, net


# ---------------------------------------------------------------- driver


def pretrain(cfg: TrainConfig, records: Sequence[ImageRecord], out_dir, resume=None, stop_after: int | None = None,
             ckpt_every: int = 0, workers: int = 1) -> list[MetricsRow]:
    """Train to ``cfg.epochs`` (or ``stop_after`` epochs), writing ``metrics.csv`` and checkpoints.

    ``resume`` is a checkpoint path; its rows already in ``metrics.csv`` are kept.
    ``ckpt_every`` > 0 also writes ``epoch_XXX.ckpt`` every that many epochs;
    ``last.ckpt`` is always refreshed at each epoch boundary.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    prior: list[MetricsRow] = []
    if resume is not None:
        state = checkpoint_load(resume)
        if dump_config(state.cfg) != dump_config(cfg):
            raise ValueError("resume checkpoint was written with a different config")
        metrics_path = out / "metrics.csv"
        if metrics_path.exists():
            prior = [r for r in read_metrics(metrics_path) if r.epoch <= state.epoch]
    trainer = Trainer(cfg, records, state, workers=workers, diag_dir=out)
    rows = list(prior)
    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    while trainer.state.epoch < end:
        rows.extend(trainer.run_epoch())
        e = trainer.state.epoch
        atomic_write_text(out / "metrics.csv", metrics_csv(rows))
        checkpoint_save(out / "last.ckpt", trainer.state)
        if ckpt_every and e % ckpt_every == 0:
            checkpoint_save(out / f"epoch_{e:03d}.ckpt", trainer.state)
        log.info("epoch %d/%d mean loss %.4f", e, cfg.epochs,
                 float(np.mean([r.loss_total for r in rows if r.epoch == e])))
    return rows
