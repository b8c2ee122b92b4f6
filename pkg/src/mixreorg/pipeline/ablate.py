"""Train-and-evaluate sweeps over one configuration axis."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..config import ModelConfig
from ..losses import LossBundle
from ..synthdata import SyntheticScene, class_captions
from .checkpoint import METRIC_COLUMNS
from .evaluate import eval_miou, eval_reorg
from .train import train

SWITCHES = {"cm_on_off": "cm", "l_seg_on_off": "use_seg", "l_re_on_off": "use_re"}
AXES = tuple(SWITCHES) + ("M", "P")
LOSS_WINDOW = 50


class AxisError(ValueError):
    pass


def parse_values(axis: str, values) -> list:
    """``"on,off"`` for switch axes, comma-separated integers for ``M`` and ``P``."""
    if axis not in AXES:
        raise AxisError(f"unknown axis {axis!r}; valid axes: {', '.join(AXES)}")
    items = [v.strip() for v in values.split(",")] if isinstance(values, str) else list(values)
    items = [v for v in items if v != ""]
    if not items:
        raise AxisError("no values given")
    out = []
    for v in items:
        if axis in SWITCHES:
            if isinstance(v, bool):
                out.append(v)
            elif str(v).lower() in ("on", "true", "1"):
                out.append(True)
            elif str(v).lower() in ("off", "false", "0"):
                out.append(False)
            else:
                raise AxisError(f"axis {axis} takes on/off, got {v!r}")
        else:
            try:
                out.append(int(v))
            except ValueError:
                raise AxisError(f"axis {axis} takes integers, got {v!r}") from None
    return out


def config_for(cfg: ModelConfig, axis: str, value) -> ModelConfig:
    if axis in SWITCHES:
        return cfg.replace(**{SWITCHES[axis]: bool(value)})
    if axis == "M":
        return cfg.replace(M=int(value))
    return cfg.replace(P=int(value))


@dataclass
class AblationRow:
    axis: str
    value: str
    miou: float
    reorg_diagonal: float
    losses: dict  # mean of each loss term over the final logged steps


def run_one(cfg: ModelConfig, train_scenes, eval_scenes, axis: str, value) -> AblationRow:
    state = train(cfg, train_scenes)
    rows = np.array(list(state.metrics)[-LOSS_WINDOW:], dtype=np.float64)
    losses = {}
    for f in LossBundle.FIELDS:
        col = METRIC_COLUMNS.index(f)
        losses[f] = float(rows[:, col].mean()) if len(rows) else math.nan
    miou = eval_miou(state.params, eval_scenes, class_captions()).miou
    diag = eval_reorg(state.params, train_scenes, max_rasters=0).confusion.mean_diagonal
    label = ("on" if value else "off") if axis in SWITCHES else str(value)
    return AblationRow(axis, label, miou, diag, losses)


def ablate(
    cfg: ModelConfig,
    axis: str,
    values,
    train_scenes: Sequence[SyntheticScene],
    eval_scenes: Sequence[SyntheticScene] | None = None,
) -> list[AblationRow]:
    """One training run per value, all sharing ``cfg.seed``."""
    parsed = parse_values(axis, values)
    eval_scenes = train_scenes if eval_scenes is None else eval_scenes
    configs = [config_for(cfg, axis, v) for v in parsed]
    for c in configs:
        c.validate()
    return [run_one(c, train_scenes, eval_scenes, axis, v) for c, v in zip(configs, parsed)]


def format_table(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    header = ["axis", "value", "miou", "reorg_diagonal"] + list(LossBundle.FIELDS)
    buf.write("\t".join(header) + "\n")
    for r in rows:
        cells = [r.axis, r.value, repr(r.miou), repr(r.reorg_diagonal)] + [repr(r.losses[f]) for f in LossBundle.FIELDS]
        buf.write("\t".join(cells) + "\n")
    return buf.getvalue()
