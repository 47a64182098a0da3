"""Run configuration: flat INI sections, with every published default named.

Per-dataset hyperparameters (sampling radii/counts, epochs, learning rates,
ODE steps, lengthscale milestones) are exposed as named defaults so a config
file diff shows exactly what an experiment changed.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .losses import LossWeights, Schedule
from .odesolve import TimeGrid
from .skeleton import BoneSampleParams
from .varifold import CompressionConfig, KernelConfig


class ConfigError(Exception):
    pass


# loss weights, shared across datasets (main / fine-tune)
WEIGHTS_MAIN = (2e2, 1e1, 5e3)
WEIGHTS_FT = (1e3, 1e2, 5e3)

# per-dataset training defaults: epochs, learning rates, ODE steps,
# coarse-to-fine kernel milestones (epoch, ell_x, ell_n) and sampling
DATASET_DEFAULTS = {
    "mano": {
        "epochs_main": 4000, "epochs_ft": 2000,
        "lr_init": 1e-2, "lr_final": 1e-3, "ode_steps": 10,
        "kernel_initial": (0.5, 0.5),
        "milestones": [(1000, 0.1, 0.5), (2000, 0.1, 0.4), (3000, 0.1, 0.3)],
        "beta_bone": 0.10, "n_bone": 50, "beta_tissue": 0.25, "n_tissue": 50,
        "n_surface": 500,
    },
    "dfaust": {
        "epochs_main": 5000, "epochs_ft": 2000,
        "lr_init": 5e-3, "lr_final": 1e-4, "ode_steps": 15,
        "kernel_initial": (0.5, 0.5),
        "milestones": [(1000, 0.25, 0.5), (2000, 0.1, 0.4), (3000, 0.1, 0.3)],
        "beta_bone": 0.10, "n_bone": 50, "beta_tissue": 0.25, "n_tissue": 25,
        "n_surface": 500,
    },
    # finger-scale regions on full bodies need much smaller radii
    "dfaust_hands": {
        "epochs_main": 5000, "epochs_ft": 2000,
        "lr_init": 5e-3, "lr_final": 1e-4, "ode_steps": 15,
        "kernel_initial": (0.5, 0.5),
        "milestones": [(1000, 0.25, 0.5), (2000, 0.1, 0.4), (3000, 0.1, 0.3)],
        "beta_bone": 0.01, "n_bone": 50, "beta_tissue": 0.02, "n_tissue": 25,
        "n_surface": 500,
    },
    "smal": {
        "epochs_main": 4000, "epochs_ft": 2000,
        "lr_init": 5e-3, "lr_final": 1e-4, "ode_steps": 10,
        "kernel_initial": (0.5, 0.5),
        "milestones": [(1000, 0.25, 0.5), (2000, 0.1, 0.4), (3000, 0.1, 0.3)],
        "beta_bone": 0.10, "n_bone": 50, "beta_tissue": 0.15, "n_tissue": 50,
        "n_surface": 500,
    },
    # downsized defaults for the synthetic fixtures
    "desk": {
        "epochs_main": 600, "epochs_ft": 0,
        "lr_init": 1e-2, "lr_final": 1e-3, "ode_steps": 8,
        "kernel_initial": (0.5, 0.5),
        "milestones": [(150, 0.25, 0.5), (300, 0.1, 0.4), (450, 0.1, 0.3)],
        "beta_bone": 0.10, "n_bone": 50, "beta_tissue": 0.25, "n_tissue": 50,
        "n_surface": 500,
    },
}

WARMUP_EPOCHS = 50
ARC_WIDTHS = (256, 256, 256, 256, 128)
ARC_OMEGA0 = 4.0
QNET_WIDTHS = (128, 128, 128)
DESK_ARC_WIDTHS = (24, 16)
DESK_QNET_WIDTHS = (16, 16)
DESK_ARC_HEAD_GAIN = 0.05
DESK_SOURCE_SAMPLES = 500


@dataclass
class RunConfig:
    source: Path
    target: Path
    output: Path
    skeleton: Optional[Path] = None
    kernel: KernelConfig = field(default_factory=lambda: KernelConfig(0.5, 0.5))
    compression: Optional[CompressionConfig] = None
    grid: TimeGrid = field(default_factory=lambda: TimeGrid(1.0, 10))
    schedule: Schedule = field(default_factory=lambda: Schedule(600))
    sample_params: BoneSampleParams = field(default_factory=BoneSampleParams)
    arc_widths: tuple = DESK_ARC_WIDTHS
    arc_omega0: float = ARC_OMEGA0
    arc_head_gain: float = DESK_ARC_HEAD_GAIN
    qnet_widths: tuple = DESK_QNET_WIDTHS
    seed: int = 0
    deterministic: bool = True

    def validate(self) -> None:
        for p in (self.source, self.target):
            if not Path(p).exists():
                raise ConfigError(f"referenced file does not exist: {p}")
        if self.skeleton is not None and not Path(self.skeleton).exists():
            raise ConfigError(f"referenced skeleton does not exist: {self.skeleton}")
        try:
            Path(self.output).mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"cannot create output dir {self.output}: {e}") from e


def _parse_milestones(text: str) -> list:
    out = []
    for part in text.split():
        bits = part.split(":")
        if len(bits) != 3:
            raise ConfigError(f"milestone {part!r} is not epoch:ell_x:ell_n")
        out.append((int(bits[0]), float(bits[1]), float(bits[2])))
    return out


def _fmt_milestones(ms: list) -> str:
    return " ".join(f"{e}:{x:g}:{n:g}" for e, x, n in ms)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.read(path)
    try:
        paths = cp["paths"]
        base = path.parent

        def respath(key, fallback=None):
            raw = paths.get(key, fallback)
            if raw is None:
                return None
            p = Path(raw)
            return p if p.is_absolute() else base / p

        kernel = KernelConfig(cp.getfloat("kernel", "ell_x", fallback=0.5),
                              cp.getfloat("kernel", "ell_n", fallback=0.5))
        compression = None
        if cp.has_section("compression"):
            compression = CompressionConfig(
                m=cp.getint("compression", "m"),
                lam=cp.getfloat("compression", "lambda", fallback=1.0),
                seed=cp.getint("compression", "seed", fallback=0))
        grid = TimeGrid(cp.getfloat("grid", "horizon", fallback=1.0),
                        cp.getint("grid", "steps", fallback=10))
        wm = LossWeights(cp.getfloat("weights_main", "lambda1", fallback=WEIGHTS_MAIN[0]),
                         cp.getfloat("weights_main", "lambda2", fallback=WEIGHTS_MAIN[1]),
                         cp.getfloat("weights_main", "lambda3", fallback=WEIGHTS_MAIN[2]),
                         stage="main")
        wf = LossWeights(cp.getfloat("weights_ft", "lambda1", fallback=WEIGHTS_FT[0]),
                         cp.getfloat("weights_ft", "lambda2", fallback=WEIGHTS_FT[1]),
                         cp.getfloat("weights_ft", "lambda3", fallback=WEIGHTS_FT[2]),
                         stage="fine_tune")
        sched = cp["schedule"] if cp.has_section("schedule") else {}
        n_src = cp.getint("schedule", "source_samples",
                          fallback=DESK_SOURCE_SAMPLES) if cp.has_section(
                              "schedule") else DESK_SOURCE_SAMPLES
        schedule = Schedule(
            epochs_main=int(sched.get("epochs_main", 600)),
            epochs_ft=int(sched.get("epochs_ft", 0)),
            lr_init=float(sched.get("lr_init", 1e-2)),
            lr_final=float(sched.get("lr_final", 1e-3)),
            warmup_epochs=int(sched.get("warmup_epochs", WARMUP_EPOCHS)),
            initial_kernel=kernel,
            milestones=_parse_milestones(sched.get("milestones", "")),
            main_weights=wm, ft_weights=wf,
            source_samples=None if n_src <= 0 else n_src,
            constraint_start_epoch=int(sched.get("constraint_start_epoch", 0)),
            pose_align_steps=int(sched.get("pose_align_steps", 0)))
        samp = BoneSampleParams(
            beta_bone=cp.getfloat("sampling", "beta_bone", fallback=0.10),
            beta_tissue=cp.getfloat("sampling", "beta_tissue", fallback=0.25),
            n_bone=cp.getint("sampling", "n_bone", fallback=50),
            n_tissue=cp.getint("sampling", "n_tissue", fallback=50),
            n_surface=cp.getint("sampling", "n_surface", fallback=500))

        def tuple_of_ints(section, key, fallback):
            if not cp.has_option(section, key):
                return fallback
            return tuple(int(v) for v in cp.get(section, key).split())

        cfg = RunConfig(
            source=respath("source"),
            target=respath("target"),
            output=respath("output", "out"),
            skeleton=respath("skeleton"),
            kernel=kernel,
            compression=compression,
            grid=grid,
            schedule=schedule,
            sample_params=samp,
            arc_widths=tuple_of_ints("model", "arc_widths", DESK_ARC_WIDTHS),
            arc_omega0=cp.getfloat("model", "arc_omega0", fallback=ARC_OMEGA0),
            arc_head_gain=cp.getfloat("model", "arc_head_gain",
                                      fallback=DESK_ARC_HEAD_GAIN),
            qnet_widths=tuple_of_ints("model", "qnet_widths", DESK_QNET_WIDTHS),
            seed=cp.getint("seeds", "master", fallback=0),
        )
    except (configparser.Error, KeyError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e
    return cfg


def write_config(path, cfg: RunConfig) -> None:
    sch = cfg.schedule
    lines = [
        "[paths]",
        f"source = {cfg.source}",
        f"target = {cfg.target}",
        f"output = {cfg.output}",
    ]
    if cfg.skeleton is not None:
        lines.append(f"skeleton = {cfg.skeleton}")
    lines += [
        "",
        "[kernel]",
        f"ell_x = {cfg.kernel.ell_x:g}",
        f"ell_n = {cfg.kernel.ell_n:g}",
        "",
        "[grid]",
        f"horizon = {cfg.grid.horizon:g}",
        f"steps = {cfg.grid.steps}",
        "",
        "[model]",
        f"arc_widths = {' '.join(str(w) for w in cfg.arc_widths)}",
        f"arc_omega0 = {cfg.arc_omega0:g}",
        f"arc_head_gain = {cfg.arc_head_gain:g}",
        f"qnet_widths = {' '.join(str(w) for w in cfg.qnet_widths)}",
        "",
        "[schedule]",
        f"epochs_main = {sch.epochs_main}",
        f"epochs_ft = {sch.epochs_ft}",
        f"lr_init = {sch.lr_init:g}",
        f"lr_final = {sch.lr_final:g}",
        f"warmup_epochs = {sch.warmup_epochs}",
        f"milestones = {_fmt_milestones(sch.milestones)}",
        f"source_samples = {sch.source_samples or 0}",
        f"constraint_start_epoch = {sch.constraint_start_epoch}",
        f"pose_align_steps = {sch.pose_align_steps}",
        "",
        "[weights_main]",
        f"lambda1 = {sch.main_weights.lambda1:g}",
        f"lambda2 = {sch.main_weights.lambda2:g}",
        f"lambda3 = {sch.main_weights.lambda3:g}",
        "",
        "[weights_ft]",
        f"lambda1 = {sch.ft_weights.lambda1:g}",
        f"lambda2 = {sch.ft_weights.lambda2:g}",
        f"lambda3 = {sch.ft_weights.lambda3:g}",
        "",
        "[sampling]",
        f"beta_bone = {cfg.sample_params.beta_bone:g}",
        f"beta_tissue = {cfg.sample_params.beta_tissue:g}",
        f"n_bone = {cfg.sample_params.n_bone}",
        f"n_tissue = {cfg.sample_params.n_tissue}",
        f"n_surface = {cfg.sample_params.n_surface}",
        "",
        "[seeds]",
        f"master = {cfg.seed}",
    ]
    if cfg.compression is not None:
        lines += [
            "",
            "[compression]",
            f"m = {cfg.compression.m}",
            f"lambda = {cfg.compression.lam:g}",
            f"seed = {cfg.compression.seed}",
        ]
    Path(path).write_text("\n".join(lines) + "\n")
