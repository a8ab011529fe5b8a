"""Experiment reports: per-run rows plus recomputable aggregates.

Rows are deterministic given (config, seeds) except for wall-clock
timings; the canonical CSV therefore drops the wall_ms column so two
runs of the same scenario produce byte-identical canonical output.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

_HEADER = ("seed", "setting", "method", "accuracy", "wall_ms", "flops")


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


@dataclass
class RunRow:
    seed: int
    setting: int | str          # shard count, episode id, or subset size
    method: str
    accuracy: float
    wall_ms: float
    flops: float


@dataclass
class ExperimentReport:
    scenario: str
    config: dict
    setting_name: str = "setting"
    rows: list[RunRow] = field(default_factory=list)

    def add(self, seed: int, setting, method: str, accuracy: float,
            wall_ms: float = 0.0, flops: float = 0.0) -> None:
        self.rows.append(RunRow(int(seed), setting, method,
                                float(accuracy), float(wall_ms), float(flops)))

    # -- access --------------------------------------------------------------

    def accuracies(self, method: str, setting=None) -> np.ndarray:
        vals = [r.accuracy for r in self.rows
                if r.method == method and (setting is None or r.setting == setting)]
        return np.asarray(vals, dtype=np.float64)

    def mean_accuracy(self, method: str, setting=None) -> float:
        vals = self.accuracies(method, setting)
        if vals.size == 0:
            raise KeyError(f"no rows for method {method!r} setting {setting!r}")
        return float(vals.mean())

    def settings(self) -> list:
        out = []
        for r in self.rows:
            if r.setting not in out:
                out.append(r.setting)
        return out

    def methods(self) -> list[str]:
        out = []
        for r in self.rows:
            if r.method not in out:
                out.append(r.method)
        return out

    def aggregates(self) -> list[dict]:
        """Mean and std of accuracy per (setting, method), recomputed from rows."""
        out = []
        for setting in self.settings():
            for method in self.methods():
                vals = self.accuracies(method, setting)
                if vals.size == 0:
                    continue
                out.append({
                    "setting": setting,
                    "method": method,
                    "n": int(vals.size),
                    "mean_accuracy": float(vals.mean()),
                    "std_accuracy": float(vals.std()),
                })
        return out

    # -- serialization ---------------------------------------------------------

    def _csv(self, include_timing: bool) -> str:
        buf = io.StringIO()
        header = [_HEADER[0], self.setting_name] + list(_HEADER[2:])
        if not include_timing:
            header = [h for h in header if h != "wall_ms"]
        buf.write(",".join(header) + "\n")
        for r in self.rows:
            cells = [str(r.seed), _fmt(r.setting), r.method, _fmt(r.accuracy)]
            if include_timing:
                cells.append(_fmt(r.wall_ms))
            cells.append(_fmt(r.flops))
            buf.write(",".join(cells) + "\n")
        return buf.getvalue()

    def to_csv(self) -> str:
        """Full per-run table including wall-clock timings."""
        return self._csv(include_timing=True)

    def canonical_csv(self) -> str:
        """Timing-free table; byte-identical across reruns of (config, seeds)."""
        return self._csv(include_timing=False)

    def aggregates_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"{self.setting_name},method,n,mean_accuracy,std_accuracy\n")
        for a in self.aggregates():
            buf.write(",".join([_fmt(a["setting"]), a["method"], str(a["n"]),
                                _fmt(a["mean_accuracy"]), _fmt(a["std_accuracy"])]) + "\n")
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"scenario: {self.scenario}"]
        for k in sorted(self.config):
            lines.append(f"  {k}: {self.config[k]}")
        lines.append(f"  rows: {len(self.rows)}")
        width = max((len(str(a['method'])) for a in self.aggregates()), default=6)
        for a in self.aggregates():
            lines.append(
                f"  {self.setting_name}={a['setting']:<4} {a['method']:<{width}} "
                f"acc {a['mean_accuracy']:.4f} +/- {a['std_accuracy']:.4f} (n={a['n']})"
            )
        return "\n".join(lines) + "\n"

    def save(self, out_dir, stem: str | None = None) -> None:
        from pathlib import Path
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.scenario.replace(" ", "_")
        (out / f"{stem}.csv").write_text(self.to_csv())
        (out / f"{stem}_aggregates.csv").write_text(self.aggregates_csv())
        (out / f"{stem}_summary.txt").write_text(self.summary())
