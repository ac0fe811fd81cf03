"""Scenario-level evaluation and the RMSE/STD report."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import SCENARIOS, Sample, Trial, materialize, n_folds, scenario_split
from .errors import InputError
from .model import ModelParams, predict

REPORT_FORMAT = "multiscale-va-eval-report"
REPORT_VERSION = 1
STD_DEFINITION = ("population standard deviation of per-fold RMSE values "
                  "(per test sequence for across_time)")
OVERALL_LABEL = "mean scenario RMSE"
DIMENSIONS = ("arousal", "valence")  # table column order
_TARGET_COL = {"valence": 0, "arousal": 1}

SCENARIO_TITLES = {
    "across_time": "Across-time scenario",
    "across_subject": "Across-subject scenario",
    "across_elicitor": "Across-elicitor scenario",
    "across_version": "Across-version scenario",
}


def rmse(preds: Sequence[float], targets: Sequence[float]) -> float:
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.size == 0 or p.size != t.size:
        raise InputError(f"rmse needs equal non-zero lengths, got {p.size} and {t.size}")
    return math.sqrt(float(np.mean((p - t) ** 2)))


@dataclass
class FoldResult:
    fold: str
    arousal_rmse: float
    valence_rmse: float
    n_windows: int


@dataclass
class ScenarioResult:
    scenario: str
    folds: list[FoldResult] = field(default_factory=list)
    flagged: list[dict] = field(default_factory=list)

    def values(self, dimension: str) -> np.ndarray:
        return np.array([getattr(f, f"{dimension}_rmse") for f in self.folds], dtype=np.float64)

    def mean(self, dimension: str) -> float | None:
        v = self.values(dimension)
        return float(v.mean()) if v.size else None

    def std(self, dimension: str) -> float | None:
        v = self.values(dimension)
        return float(v.std()) if v.size else None


Predictor = Callable[[list[Sample]], np.ndarray]
Fitter = Callable[[list[Sample], str], ModelParams]


def _score(samples: list[Sample], predictor: Predictor, label: str) -> FoldResult:
    pred = np.asarray(predictor(samples), dtype=np.float64)
    target = np.array([s.target for s in samples], dtype=np.float64)
    return FoldResult(label, rmse(pred[:, 1], target[:, 1]), rmse(pred[:, 0], target[:, 0]), len(samples))


def evaluate_scenario(params: ModelParams | None, trials: Sequence[Trial], scenario: str, seed: int = 0,
                      hop: int = 1000, seq_len: int | None = None, predictor: Predictor | None = None,
                      fit: Fitter | None = None) -> ScenarioResult:
    """Per-fold arousal/valence RMSE for one scenario.

    Each fold is standardized with its own training-side statistics. By default
    ``params`` predicts every fold; ``fit`` instead trains a fresh model on the
    fold's training windows. ``predictor`` replaces the model entirely (used
    for baselines). For across_time the per-fold values are per test trial.
    """
    if seq_len is None:
        if params is None:
            raise InputError("seq_len is required when no model is given")
        seq_len = params.config.seq_len
    if predictor is None and params is None and fit is None:
        raise InputError("need a model, a fit function or a predictor")
    result = ScenarioResult(scenario)
    for k in range(n_folds(scenario, trials)):
        plan = scenario_split(trials, scenario, k, seed=seed, seq_len=seq_len, hop=hop)
        label = f"fold{k}"
        try:
            fold = materialize(plan, trials, seq_len, hop)
        except InputError as exc:
            result.flagged.append({"fold": label, "reason": str(exc)})
            continue
        for key in fold.skipped:
            result.flagged.append({"fold": label, "reason": f"trial {key} shorter than seq_len"})
        if not fold.test:
            result.flagged.append({"fold": label, "reason": "no test windows"})
            continue
        use = predictor
        if use is None:
            model = fit(fold.train, label) if fit is not None else params
            use = (lambda samples, m=model: predict([s.window for s in samples], m))
        if scenario == "across_time":
            groups: dict[tuple[int, int], list[Sample]] = {}
            for s in fold.test:
                groups.setdefault(s.origin[:2], []).append(s)
            for key in sorted({ref[:2] for ref in plan.train | plan.test}):
                if key not in groups:
                    result.flagged.append({"fold": f"sub{key[0]}_vid{key[1]}", "reason": "no test windows"})
                    continue
                result.folds.append(_score(groups[key], use, f"sub{key[0]}_vid{key[1]}"))
        else:
            result.folds.append(_score(fold.test, use, label))
    return result


@dataclass
class EvalReport:
    rows: dict[str, ScenarioResult]

    @property
    def overall_rmse(self) -> float | None:
        vals = [r.mean(d) for r in self.rows.values() for d in DIMENSIONS if r.folds]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        entries, flagged = [], []
        for scenario in SCENARIOS:
            if scenario not in self.rows:
                continue
            row = self.rows[scenario]
            for dim in DIMENSIONS:
                entries.append({
                    "scenario": scenario,
                    "dimension": dim,
                    "rmse": row.mean(dim),
                    "std": row.std(dim),
                    "folds": [{"fold": f.fold, "rmse": getattr(f, f"{dim}_rmse"), "n_windows": f.n_windows}
                              for f in row.folds],
                })
            flagged += [{"scenario": scenario, **f} for f in row.flagged]
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "std_definition": STD_DEFINITION,
            "overall_label": OVERALL_LABEL,
            "overall_rmse": self.overall_rmse,
            "entries": entries,
            "flagged": flagged,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> EvalReport:
        if doc.get("format") != REPORT_FORMAT:
            raise InputError(f"not an evaluation report (format={doc.get('format')!r})")
        rows: dict[str, ScenarioResult] = {}
        per_fold: dict[str, dict[str, dict]] = {}
        for e in doc["entries"]:
            per_fold.setdefault(e["scenario"], {})[e["dimension"]] = {f["fold"]: f for f in e["folds"]}
        for scenario, dims in per_fold.items():
            result = ScenarioResult(scenario)
            for label, fa in dims["arousal"].items():
                fv = dims["valence"][label]
                result.folds.append(FoldResult(label, fa["rmse"], fv["rmse"], fa["n_windows"]))
            rows[scenario] = result
        for f in doc.get("flagged", []):
            rows.setdefault(f["scenario"], ScenarioResult(f["scenario"])).flagged.append(
                {"fold": f["fold"], "reason": f["reason"]})
        return cls(rows)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path) -> EvalReport:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise InputError(f"cannot read report {path}: {exc}") from exc

    def table_rows(self) -> list[list[str]]:
        def fmt(x):
            return "n/a" if x is None else f"{x:.4f}"

        out = []
        for scenario in SCENARIOS:
            row = self.rows.get(scenario)
            if row is None:
                continue
            out.append([SCENARIO_TITLES[scenario], fmt(row.mean("arousal")), fmt(row.std("arousal")),
                        fmt(row.mean("valence")), fmt(row.std("valence"))])
        return out

    def to_table(self) -> str:
        header = ["Scenarios type", "Arousal RMSE", "Arousal STD", "Valence RMSE", "Valence STD"]
        rows = self.table_rows()
        widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
        line = "  ".join("-" * w for w in widths)

        def render(r):
            return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))

        lines = [f"# STD: {STD_DEFINITION}", render(header), line, *map(render, rows), line]
        overall = self.overall_rmse
        lines.append(f"{OVERALL_LABEL}: {'n/a' if overall is None else f'{overall:.4f}'}")
        for scenario in SCENARIOS:
            for f in self.rows.get(scenario, ScenarioResult(scenario)).flagged:
                lines.append(f"flagged: {scenario} {f['fold']}: {f['reason']}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "arousal_rmse", "arousal_std", "valence_rmse", "valence_std", "n_folds"])
        for scenario in SCENARIOS:
            row = self.rows.get(scenario)
            if row is None:
                continue
            vals = [row.mean("arousal"), row.std("arousal"), row.mean("valence"), row.std("valence")]
            w.writerow([scenario, *("" if v is None else repr(v) for v in vals), len(row.folds)])
        return buf.getvalue()


def evaluate(params: ModelParams | None, trials: Sequence[Trial], scenarios: Sequence[str] = SCENARIOS,
             seed: int = 0, hop: int = 1000, **kwargs) -> EvalReport:
    return EvalReport({s: evaluate_scenario(params, trials, s, seed=seed, hop=hop, **kwargs) for s in scenarios})
