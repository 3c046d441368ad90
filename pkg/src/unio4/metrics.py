"""Append-only JSON-lines metrics with wall-clock kept in a sidecar file."""
from __future__ import annotations

import json
import math
import time
from pathlib import Path

import numpy as np

from .errors import ConfigError


def _plain(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        # JSON has no NaN/inf; keep the record parseable by strict readers
        return v if math.isfinite(v) else repr(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.ndarray):
        return [_plain(x) for x in v.tolist()]
    return v


class MetricsWriter:
    """One ``{"stage", "step", "values"}`` object per line, flushed per record.

    Records must be strictly ordered by (stage, step): steps increase within a
    stage and a stage that has been left cannot be re-entered. Wall-clock
    times go to ``<path>.timings`` so the main stream stays reproducible.
    """

    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        mode = "a" if append else "w"
        self._fh = open(self.path, mode, encoding="utf-8")
        self._timings = open(str(self.path) + ".timings", mode, encoding="utf-8")
        self._stage: str | None = None
        self._last_step: int | None = None
        self._closed_stages: set[str] = set()
        if append and self.path.stat().st_size:
            for rec in read_metrics(self.path):
                self._advance(rec["stage"], rec["step"])

    def _advance(self, stage: str, step: int) -> None:
        if stage != self._stage:
            if stage in self._closed_stages:
                raise ConfigError(f"metrics stage {stage!r} re-entered")
            if self._stage is not None:
                self._closed_stages.add(self._stage)
            self._stage, self._last_step = stage, None
        if self._last_step is not None and step <= self._last_step:
            raise ConfigError(f"metrics step {step} not after {self._last_step} in stage {stage!r}")
        self._last_step = step

    def log(self, stage: str, step: int, values: dict) -> None:
        self._advance(stage, int(step))
        rec = {"stage": stage, "step": int(step), "values": {k: _plain(v) for k, v in values.items()}}
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self._fh.flush()
        self._timings.write(json.dumps({"stage": stage, "step": int(step), "wall_clock": time.time()}) + "\n")
        self._timings.flush()

    def logger(self, stage: str):
        return lambda step, values: self.log(stage, step, values)

    def close(self) -> None:
        self._fh.close()
        self._timings.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
