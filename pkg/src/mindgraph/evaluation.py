"""Evaluation: Brier curves over observation fractions, false-goal probability
curves, preference-drift deltas, the Wilcoxon signed-rank test, and report
files."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .sim import Episode, FalseGoalInfo, prefix_length

log = logging.getLogger(__name__)

REPORT_VERSION = 1
DEFAULT_FRACTIONS = (0.25, 0.5, 0.75, 0.95)
GRID_FRACTIONS = tuple(round(0.1 * k, 1) for k in range(1, 11))
EXACT_LIMIT = 20

# Published Brier scores and drift deltas for the 3,185-node campus setting;
# kept as context in reports, never compared against.
REFERENCE_BRIER = {
    "btom": [0.9555, 0.9117, 0.7400, 0.4204],
    "extended_btom": [0.8899, 0.8292, 0.6865, 0.3927],
    "gru": [1.5358, 1.5853, 1.4555, 0.5399],
    "lstm": [1.1886, 1.1606, 1.1171, 0.4211],
    "tomnet": [0.8583, 0.7453, 0.7215, 0.7176],
    "hivae": [0.1042, 0.1036, 0.1023, 0.1023],
}
REFERENCE_DRIFT = {
    "btom": [0.0644, 0.0532, 0.3755, 0.8350],
    "extended_btom": [0.0904, 0.2814, 0.5871, 1.0222],
    "gru": [-0.0184, 0.0170, 0.0290, 0.6185],
    "lstm": [0.0104, -0.0071, 0.0373, 0.2436],
    "tomnet": [-0.0182, -0.0342, -0.0343, -0.0275],
    "hivae": [0.0205, 0.0309, 0.0307, 0.0307],
}


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------- metric

def brier(p, true_goal: int) -> float:
    """Sum of squared differences between ``p`` and the one-hot ``true_goal``."""
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= true_goal < len(p):
        raise IndexError(f"true goal index {true_goal} outside [0, {len(p)})")
    d = p.copy()
    d[true_goal] -= 1.0
    return float(d @ d)


def brier_rows(P: np.ndarray, targets) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    D = P.copy()
    D[np.arange(len(targets)), targets] -= 1.0
    return np.einsum("ij,ij->i", D, D)


def check_posteriors(P: np.ndarray, where: str = "") -> float:
    """Largest normalisation error; raises if any row is off the simplex."""
    err = float(np.max(np.abs(P.sum(axis=1) - 1.0))) if len(P) else 0.0
    if err >= 1e-9 or (P.size and P.min() < 0) or not np.isfinite(P).all():
        raise EvaluationError(f"{where}: posterior off the simplex (max |sum-1| = {err:g})")
    return err


def posteriors(model, paths, agent_ids, batch_size: int = 64, threads: int = 1) -> np.ndarray:
    """Run ``model.infer_batch`` over fixed chunks; chunking is independent of ``threads``."""
    chunks = [
        (paths[i : i + batch_size], agent_ids[i : i + batch_size])
        for i in range(0, len(paths), batch_size)
    ]

    def run(chunk):
        return model.infer_batch(*chunk)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    P = np.concatenate(parts) if parts else np.zeros((0, 0))
    check_posteriors(P, getattr(model, "name", "model"))
    return P


# ---------------------------------------------------------------- experiment 1

@dataclass
class BrierCurve:
    fractions: tuple[float, ...]
    means: list[float]
    per_episode: np.ndarray  # (len(fractions), n_episodes)
    episode_keys: list[tuple[int, int]]


def _ordered(episodes):
    return sorted(episodes, key=lambda e: (e.agent_id, e.episode_id))


def evaluate_brier_curve(model, episodes: list[Episode], g, fractions=DEFAULT_FRACTIONS,
                         batch_size: int = 64, threads: int = 1) -> BrierCurve:
    if not episodes:
        raise EvaluationError("no test episodes")
    eps = _ordered(episodes)
    targets = [g.goal_index(e.goal) for e in eps]
    ids = [e.agent_id for e in eps]
    rows = []
    for f in fractions:
        paths = [e.path[: prefix_length(len(e.path), f)] for e in eps]
        rows.append(brier_rows(posteriors(model, paths, ids, batch_size, threads), targets))
    per = np.stack(rows)
    return BrierCurve(tuple(fractions), [float(r.mean()) for r in per], per,
                      [(e.agent_id, e.episode_id) for e in eps])


# ---------------------------------------------------------------- experiment 2

def false_goal_checkpoints(pass_index: int, intervals: int = 10) -> list[int]:
    """Prefix lengths from the origin alone up to and including the pass point."""
    return [int(round(x)) for x in np.linspace(1, pass_index + 1, intervals)]


def false_goal_curve(model, items: list[tuple[Episode, FalseGoalInfo]], g, intervals: int = 10) -> list[float]:
    """Mean posterior mass on the false goal at ``intervals`` checkpoints."""
    if not items:
        raise EvaluationError("no false-goal episodes")
    sums = np.zeros(intervals)
    warned = False
    for ep, info in sorted(items, key=lambda it: (it[0].agent_id, it[0].episode_id)):
        lengths = false_goal_checkpoints(info.pass_index, intervals)
        uniq = sorted(set(lengths))
        if len(uniq) < intervals and not warned:
            log.warning("pass index %d < %d intervals; checkpoints repeat", info.pass_index, intervals)
            warned = True
        P = model.infer_batch([ep.path[:n] for n in uniq], [ep.agent_id] * len(uniq))
        check_posteriors(P, getattr(model, "name", "model"))
        mass = dict(zip(uniq, P[:, g.goal_index(info.false_goal)]))
        sums += np.array([mass[n] for n in lengths])
    return (sums / len(items)).tolist()


# ---------------------------------------------------------------- experiment 3

def drift_evaluation(model, original, drifted, g, fractions=DEFAULT_FRACTIONS, threads: int = 1) -> dict:
    """Mean Brier on drifted test episodes minus mean Brier on the original test split."""
    if original.graph_hash != drifted.graph_hash or original.graph_hash != g.content_hash():
        raise EvaluationError("original and drifted datasets reference different graphs")
    before = evaluate_brier_curve(model, original.test, g, fractions, threads=threads)
    after = evaluate_brier_curve(model, drifted.test, g, fractions, threads=threads)
    return {
        "original": before.means,
        "drifted": after.means,
        "delta": [b - a for a, b in zip(before.means, after.means)],
    }


# ---------------------------------------------------------------- significance

@dataclass(frozen=True)
class WilcoxonResult:
    W: float
    z_approx: float
    p_value: float
    n_effective: int
    exact: bool


def _exact_tail_count(ranks2: np.ndarray, w2: int) -> int:
    """Number of sign assignments with min(W+, W-) <= w (ranks doubled to integers)."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in ranks2:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    wplus = np.arange(total + 1)
    hit = (wplus <= w2) | (total - wplus <= w2)
    return int(counts[hit].sum())


def wilcoxon_signed_rank(xs, ys) -> WilcoxonResult:
    """Paired two-sided signed-rank test on ``xs - ys``.

    Zero differences are dropped and ties get mid-ranks. For up to 20
    non-zero pairs the p-value counts all 2^n sign assignments whose
    ``min(W+, W-)`` is at most the observed value; larger samples use the
    tie-corrected normal approximation.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("xs and ys must be paired 1-d samples")
    if len(xs) < 5:
        raise ValueError("need at least 5 pairs")
    d = xs - ys
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise ValueError("degenerate sample: all differences are zero")
    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    W = min(w_plus, w_minus)
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - np.sum(tie_counts ** 3 - tie_counts) / 48
    z = (W - n * (n + 1) / 4) / math.sqrt(var) if var > 0 else 0.0
    if n <= EXACT_LIMIT:
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        p = _exact_tail_count(ranks2, int(round(2 * W))) / 2 ** n
        exact = True
    else:
        p = 2 * stats.norm.cdf(-abs(z))
        exact = False
    return WilcoxonResult(W, float(z), float(min(1.0, p)), n, exact)


# ---------------------------------------------------------------- reports

def _flabel(f: float) -> str:
    return f"f{int(round(100 * f))}"


@dataclass
class EvalReport:
    fractions: list[float] = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    brier_curves: dict[str, list[float]] = field(default_factory=dict)
    false_goal_curves: dict[str, list[float]] = field(default_factory=dict)
    drift_deltas: dict[str, list[float]] = field(default_factory=dict)
    drift_curves: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    wilcoxon: dict | None = None
    metadata: dict = field(default_factory=dict)
    report_version: int = REPORT_VERSION

    def validate(self) -> None:
        for name, curve in self.brier_curves.items():
            if any(not 0 <= v <= 2 for v in curve):
                raise EvaluationError(f"{name}: Brier mean outside [0, 2]")
        for name, curve in self.false_goal_curves.items():
            if any(not 0 <= v <= 1 for v in curve):
                raise EvaluationError(f"{name}: probability outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        if d.get("report_version") != REPORT_VERSION:
            raise EvaluationError(f"unsupported report_version {d.get('report_version')!r}")
        return cls(**d)

    def merge(self, other: EvalReport) -> EvalReport:
        out = EvalReport(**json.loads(json.dumps(self.to_dict())))
        out.brier_curves.update(other.brier_curves)
        out.false_goal_curves.update(other.false_goal_curves)
        out.drift_deltas.update(other.drift_deltas)
        out.drift_curves.update(other.drift_curves)
        out.wilcoxon = other.wilcoxon or out.wilcoxon
        out.metadata.update(other.metadata)
        return out


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_tables(report: EvalReport, out_dir) -> list[Path]:
    """CSV tables with one row per model, rows sorted by model name."""
    out = Path(out_dir)
    labels = [_flabel(f) for f in report.fractions]
    written = []
    for fname, table in (("brier.csv", report.brier_curves), ("drift.csv", report.drift_deltas)):
        if table:
            p = out / fname
            _write_csv(p, ["model", *labels], [[m, *map(_fmt, v)] for m, v in sorted(table.items())])
            written.append(p)
    if report.false_goal_curves:
        k = len(next(iter(report.false_goal_curves.values())))
        p = out / "false_goal.csv"
        _write_csv(p, ["model", *[f"i{i}" for i in range(1, k + 1)]],
                   [[m, *map(_fmt, v)] for m, v in sorted(report.false_goal_curves.items())])
        written.append(p)
    return written


def emit_report(report: EvalReport, out_dir) -> list[Path]:
    """Write ``report.json`` plus CSV tables into ``out_dir``."""
    report.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        p = out / "report.json"
        p.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
        return [p, *write_tables(report, out)]
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))
