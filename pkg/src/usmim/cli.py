"""Command-line entry point: ``usmim <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import TrainConfig, config_from_dict, replace, tomllib
from .data import ImageRecord, SpecklePhantomSpec, load_corpus, manifest_line, read_pgm, resize_bilinear, synth_speckle, write_pgm
from .encoder import encode
from .masking import MaskScheduleState, alpha_schedule, compute_alp, ratio_schedule, self_adaptive_mask
from .probe import ProbeSettings, ProbeTask, linear_probe
from .train import atomic_write_text, checkpoint_load, init_model, pretrain

log = logging.getLogger("usmim")

PHANTOM_KEYS = {f.name for f in dataclasses.fields(SpecklePhantomSpec)}

# the six masking configurations compared by ``ablate``: three global strategies x single/multi view
DEFAULT_GRID = [
    {"name": "rbw_single", "global_mask": "rbw", "local_mask": "none"},
    {"name": "rbw_multi", "global_mask": "rbw", "local_mask": "rbw"},
    {"name": "attention_single", "global_mask": "attention", "local_mask": "none"},
    {"name": "attention_multi", "global_mask": "attention", "local_mask": "rbw"},
    {"name": "self_adaptive_single", "global_mask": "self_adaptive", "local_mask": "none"},
    {"name": "self_adaptive_multi", "global_mask": "self_adaptive", "local_mask": "rbw"},
]


class CLIError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def phantom_spec(table: dict) -> SpecklePhantomSpec:
    unknown = set(table) - PHANTOM_KEYS
    if unknown:
        raise CLIError(f"unknown phantom keys: {sorted(unknown)}")
    return SpecklePhantomSpec(**table)


def synth_corpus(spec: SpecklePhantomSpec, count: int) -> list[ImageRecord]:
    """``count`` phantoms with seeds ``spec.seed, spec.seed + 1, ...``."""
    return [synth_speckle(dataclasses.replace(spec, seed=spec.seed + i)) for i in range(count)]


def records_from_table(table: dict, base: Path) -> list[ImageRecord]:
    """A ``[data]``/``[probe]`` table names either ``corpus = "dir"`` or ``synthetic = N`` plus phantom keys."""
    table = dict(table)
    table.pop("seeds", None)
    table.pop("train_frac", None)
    if "corpus" in table:
        path = base / table.pop("corpus")
        records = list(load_corpus(path))
        if not records:
            raise CLIError(f"no readable PGM images in {path}")
        return records
    if "synthetic" in table:
        count = int(table.pop("synthetic"))
        return synth_corpus(phantom_spec(table), count)
    raise CLIError("data table needs 'corpus' or 'synthetic'")


def probe_task_from_table(table: dict, base: Path) -> ProbeTask:
    frac = float(table.get("train_frac", 0.6))
    if "task" in table:
        return ProbeTask.from_dir(base / table["task"], frac)
    return ProbeTask.from_records(records_from_table(table, base), frac)


def read_toml(path) -> dict:
    try:
        return tomllib.loads(Path(path).read_text())
    except OSError as e:
        raise CLIError(f"cannot read {path}: {e.strerror}") from None
    except tomllib.TOMLDecodeError as e:
        raise CLIError(f"{path}: {e}") from None


def clip01(values: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)


def grid_image(values: np.ndarray, grid: tuple[int, int], scale: int) -> np.ndarray:
    g = np.asarray(values, dtype=np.float64).reshape(grid)
    return np.repeat(np.repeat(g, scale, axis=0), scale, axis=1)


class StagedDir:
    """Build outputs in a scratch directory, then move them into place together."""

    def __init__(self, out: Path):
        self.out = out

    def __enter__(self) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.out))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            for f in sorted(self.tmp.iterdir()):
                f.replace(self.out / f.name)
        shutil.rmtree(self.tmp, ignore_errors=True)
        return False


# ---------------------------------------------------------------- subcommands


def cmd_gen_synth(args) -> None:
    table = read_toml(args.spec) if args.spec else {}
    spec = phantom_spec(table.get("phantom", table))
    if args.count < 1:
        raise CLIError("--count must be positive")
    with StagedDir(Path(args.out)) as tmp:
        lines = []
        for rec in synth_corpus(spec, args.count):
            write_pgm(tmp / f"{rec.id}.pgm", np.round(rec.pixels * 255).astype(np.uint8))
            lines.append(manifest_line(rec))
        atomic_write_text(tmp / "manifest.txt", "\n".join(lines) + "\n")
    print(f"wrote {args.count} phantoms and manifest.txt to {args.out}")


def load_run_config(path) -> tuple[TrainConfig, dict]:
    raw = read_toml(path)
    try:
        cfg = config_from_dict(raw)
    except (TypeError, ValueError) as e:
        raise CLIError(f"{path}: {e}") from None
    return cfg, raw


def cmd_pretrain(args) -> None:
    cfg, raw = load_run_config(args.config)
    records = records_from_table(raw.get("data", {}), Path(args.config).parent)
    rows = pretrain(cfg, records, args.out, resume=args.resume, stop_after=args.stop_after,
                    ckpt_every=args.ckpt_every, workers=args.workers)
    last = [r.loss_total for r in rows if r.epoch == rows[-1].epoch]
    print(f"trained {rows[-1].epoch} epochs on {len(records)} images; final mean loss {np.mean(last):.6f}")


def _encoder_for_probe(args):
    st = checkpoint_load(args.ckpt)
    if args.random_init:
        return st.cfg, init_model(st.cfg)
    return st.cfg, st.pair.teacher


def cmd_probe(args) -> None:
    cfg, params = _encoder_for_probe(args)
    task = ProbeTask.from_dir(args.task, args.train_frac)
    settings = ProbeSettings(epochs=args.epochs, shuffle_labels=args.shuffle_labels,
                             image_size=cfg.views.global_size)
    report = linear_probe(cfg.encoder, params, task, list(range(args.seeds)), settings)
    sys.stdout.write(report.text())
    if args.out:
        with StagedDir(Path(args.out)) as tmp:
            atomic_write_text(tmp / "probe.csv", report.csv())
            atomic_write_text(tmp / "probe.txt", report.text())


def fmt_vec(v: np.ndarray) -> str:
    return " ".join(repr(float(x)) for x in np.asarray(v).reshape(-1))


def cmd_inspect_mask(args) -> None:
    st = checkpoint_load(args.ckpt)
    cfg = st.cfg
    try:
        pixels = read_pgm(args.image).astype(np.float64) / 255.0
    except (OSError, ValueError) as e:
        raise CLIError(f"cannot read {args.image}: {e}") from None
    image_id = args.image_id or Path(args.image).stem
    size = cfg.views.global_size
    img = resize_bilinear(pixels, size, size)[None].astype(cfg.dtype)
    with T.no_grad():
        out = encode(img, cfg.encoder, st.pair.teacher, with_attention=True)
    am = out.attention_map[0]
    grid = out.stem_grid
    t_max = max(cfg.epochs - 1, 1)
    if not 0 <= args.epoch_sim <= t_max:
        raise CLIError(f"--epoch-sim must lie in [0, {t_max}]")
    sched = MaskScheduleState(args.epoch_sim, t_max, cfg.r0, cfg.rT, cfg.alpha_min, cfg.alpha_max)
    alpha, r_t = alpha_schedule(sched), ratio_schedule(sched)
    rec = st.rec_ema.get(image_id)
    alp = compute_alp(am, rec, alpha)
    thr_m = cfg.rat_m * r_t
    plan = self_adaptive_mask(alp, cfg.rat_m, thr_m, np.random.default_rng([cfg.seed, args.epoch_sim, 1]))
    rec_dump = rec if rec is not None else np.full(am.shape, np.nan)
    n = am.size
    summary = [
        f"image {image_id}",
        f"grid {grid[0]}x{grid[1]}",
        f"patches {n}",
        f"epoch_sim {args.epoch_sim} of {t_max}",
        f"alpha {alpha!r}",
        f"alpha_used {alp.alpha_used!r}",
        f"r_t {r_t!r}",
        f"rat_m {cfg.rat_m!r}",
        f"thr_m {thr_m!r}",
        f"masked {plan.n_masked}",
        f"expected_masked {math.ceil(round(n * cfg.rat_m, 9))}",
        f"alp_driven {len(plan.alp_driven_idx)}",
        f"random_fill {len(plan.random_idx)}",
        f"flags {' '.join(f'{k}={v}' for k, v in sorted(alp.flags.items())) or 'none'}",
        f"am {fmt_vec(am)}",
        f"rec {fmt_vec(rec_dump)}",
        f"alp {fmt_vec(alp.scores)}",
        f"mask {' '.join(str(int(v)) for v in plan.grid)}",
    ]
    scale = cfg.encoder.stem_patch
    with StagedDir(Path(args.out)) as tmp:
        write_pgm(tmp / "am.pgm", np.round(clip01(grid_image(am, grid, scale)) * 255).astype(np.uint8))
        write_pgm(tmp / "rec.pgm", np.round(clip01(grid_image(alp.rec_norm, grid, scale)) * 255).astype(np.uint8))
        write_pgm(tmp / "alp.pgm", np.round(clip01(grid_image(alp.scores, grid, scale)) * 255).astype(np.uint8))
        write_pgm(tmp / "mask.pgm", (grid_image(plan.grid, grid, scale) * 255).astype(np.uint8))
        atomic_write_text(tmp / "summary.txt", "\n".join(summary) + "\n")
    print(f"masked {plan.n_masked} of {n} patches (alpha {alpha:.4f}, r_t {r_t:.4f}); outputs in {args.out}")


def parse_summary(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        key, _, value = line.partition(" ")
        out[key] = value
    return out


def cmd_ablate(args) -> None:
    raw = read_toml(args.grid)
    base_dir = Path(args.grid).parent
    rows_spec = raw.pop("row", None) or DEFAULT_GRID
    probe_table = raw.get("probe", {})
    seeds = list(range(int(probe_table.get("seeds", 5))))
    try:
        base = config_from_dict(raw)
    except (TypeError, ValueError) as e:
        raise CLIError(f"{args.grid}: {e}") from None
    records = records_from_table(raw.get("data", {}), base_dir)
    task = probe_task_from_table(probe_table, base_dir)
    out = Path(args.out)
    lines = ["name,global_mask,local_mask,final_loss,acc_mean,acc_std,f1_mean,f1_std"]
    for row in rows_spec:
        row = dict(row)
        name = row.pop("name")
        try:
            cfg = replace(base, **row)
        except (TypeError, ValueError) as e:
            raise CLIError(f"row {name}: {e}") from None
        run_dir = out / name
        metrics = pretrain(cfg, records, run_dir, workers=args.workers)
        final = float(np.mean([m.loss_total for m in metrics if m.epoch == cfg.epochs]))
        st = checkpoint_load(run_dir / "last.ckpt")
        rep = linear_probe(cfg.encoder, st.pair.teacher, task, seeds, ProbeSettings(image_size=cfg.views.global_size))
        lines.append(f"{name},{cfg.global_mask},{cfg.local_mask},{final!r},{rep.accuracy_mean!r},"
                     f"{rep.accuracy_std!r},{rep.f1_mean!r},{rep.f1_std!r}")
        print(f"{name}: acc {rep.accuracy_mean:.4f} +/- {rep.accuracy_std:.4f}", flush=True)
    atomic_write_text(out / "ablation.csv", "\n".join(lines) + "\n")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="usmim", description="Masked self-distillation pre-training for speckle images.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-synth", help="write a synthetic phantom corpus")
    g.add_argument("--spec", help="TOML file of phantom settings (optionally under [phantom])")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("pretrain", help="run pre-training")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-after", type=int, help="stop once this many epochs are complete")
    t.add_argument("--ckpt-every", type=int, default=0)
    t.add_argument("--workers", type=int, default=1)
    t.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("probe", help="linear probe on frozen features")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--task", required=True, help="directory of PGMs plus manifest.txt")
    r.add_argument("--seeds", type=int, default=5)
    r.add_argument("--out")
    r.add_argument("--epochs", type=int, default=50)
    r.add_argument("--train-frac", type=float, default=0.6)
    r.add_argument("--random-init", action="store_true", help="probe an untrained encoder built from the same config")
    r.add_argument("--shuffle-labels", action="store_true", help="null control")
    r.set_defaults(func=cmd_probe)

    m = sub.add_parser("inspect-mask", help="dump attention, loss, priority and mask maps for one image")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--image", required=True)
    m.add_argument("--epoch-sim", type=int, required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--image-id", help="corpus id for the loss memory lookup (default: file stem)")
    m.set_defaults(func=cmd_inspect_mask)

    a = sub.add_parser("ablate", help="masking-strategy grid with probe accuracy per row")
    a.add_argument("--grid", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--workers", type=int, default=1)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (CLIError, ValueError, OSError, KeyError, RuntimeError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"usmim {args.cmd}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
