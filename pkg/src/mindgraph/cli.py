"""Command-line entry point: simulate, train, eval, report, run-all.

Every run reads one JSON config (optional) and applies flag overrides on top.
``master_seed`` drives all randomness: graph generation, agent profiles and
episodes use it directly through their own stream purposes, the drifted
dataset uses ``derive_seed(master_seed, 4)``, and each learned model uses
``master_seed`` unless its config sets ``seed``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.
``MINDGRAPH_LOG`` sets the log level and affects nothing else.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .baselines import BaselineConfig, BToM, BtomConfig, ExtendedBToM, RecurrentGoalModel, ToMNetLite
from .graph import GraphError, SpatialGraph, generate_synthetic_graph, load_graph, save_graph
from .hivae import HiVAE, ModelConfig
from .sim import (
    AgentProfile, Dataset, SimulationError, derive_seed, file_digest, generate_dataset,
    generate_drifted_profiles, kl_divergence, read_dataset, sample_agent_profiles,
    synthesize_false_goal_episode, write_dataset,
)
from .training import DivergenceError

log = logging.getLogger("mindgraph")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4
DRIFT_PURPOSE = 4
MODEL_KINDS = ("btom", "extended_btom", "gru", "lstm", "tomnet", "hivae")
EXPERIMENTS = ("brier", "false-goal", "drift")

DEFAULT_CONFIG = {
    "master_seed": 0,
    "out_dir": "run",
    "threads": 1,
    "graph": {
        "path": None,
        "grid_width": 20,
        "grid_height": 15,
        "diagonal_probability": 0.1,
        "jitter": 0.2,
        "num_goals": 16,
    },
    "simulation": {
        "num_agents": 10,
        "episodes_per_agent": 100,
        "alpha": 0.5,
        "tau": 0.2,
        "k_paths": 5,
        "test_fraction": 0.3,
    },
    "models": {name: {} for name in MODEL_KINDS},
    "experiments": list(EXPERIMENTS),
    "fractions": list(ev.DEFAULT_FRACTIONS),
    "drift": {"kl_threshold": 1.0},
    "false_goal": {"intervals": 10},
    "wilcoxon": {"model": "hivae", "num_episodes": 10},
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config

def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        path = f"{where}.{k}" if where else k
        if k not in base and where != "models":
            raise ConfigError(f"unknown config field {path!r}")
        if isinstance(v, dict) and isinstance(base.get(k), dict) and where != "models":
            out[k] = _merge(base[k], v, path)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _model_kind(name: str, spec: dict) -> str:
    kind = spec.get("kind", name)
    if kind not in MODEL_KINDS:
        raise ConfigError(f"models.{name}: unknown model kind {kind!r} (choose from {', '.join(MODEL_KINDS)})")
    return kind


def validate_config(cfg: dict) -> dict:
    sim = cfg["simulation"]
    for key in ("num_agents", "episodes_per_agent", "k_paths"):
        if not isinstance(sim[key], int) or sim[key] < 1:
            raise ConfigError(f"simulation.{key} must be a positive integer, got {sim[key]!r}")
    if not sim["alpha"] > 0 or not sim["tau"] > 0:
        raise ConfigError("simulation.alpha and simulation.tau must be positive")
    if not 0 < sim["test_fraction"] < 1:
        raise ConfigError("simulation.test_fraction must be in (0, 1)")
    if not isinstance(cfg["master_seed"], int) or cfg["master_seed"] < 0:
        raise ConfigError("master_seed must be a non-negative integer")
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    for exp in cfg["experiments"]:
        if exp not in EXPERIMENTS:
            raise ConfigError(f"experiments: unknown experiment {exp!r}")
    if any(not 0 < f <= 1 for f in cfg["fractions"]):
        raise ConfigError("fractions must lie in (0, 1]")
    for name, spec in cfg["models"].items():
        kind = _model_kind(name, spec)
        try:
            model_config(cfg, name, kind)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"models.{name}: {exc}") from None
    return cfg


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        if "models" in doc:
            doc = dict(doc)
            cfg["models"] = {}
        cfg = _merge(cfg, doc)
    if overrides:
        cfg = _merge(cfg, overrides)
    return validate_config(cfg)


def model_config(cfg: dict, name: str, kind: str):
    spec = {k: v for k, v in cfg["models"].get(name, {}).items() if k != "kind"}
    if kind in ("btom", "extended_btom"):
        spec.setdefault("prior_mode", "uniform" if kind == "btom" else "empirical")
        return BtomConfig(**spec)
    spec.setdefault("seed", cfg["master_seed"])
    return ModelConfig.from_dict(spec) if kind == "hivae" else BaselineConfig.from_dict(spec)


# ---------------------------------------------------------------- layout

class Layout:
    def __init__(self, out_dir):
        self.root = Path(out_dir)
        self.graph = self.root / "graph.json"
        self.dataset = self.root / "dataset.jsonl"
        self.profiles = self.root / "profiles.json"
        self.models = self.root / "models"
        self.drift_dataset = self.root / "drift" / "dataset.jsonl"
        self.drift_profiles = self.root / "drift" / "profiles.json"
        self.false_goal = self.root / "false_goal.jsonl"
        self.reports = self.root / "reports"

    def checkpoint(self, name: str) -> Path:
        return self.models / f"{name}.json"

    def trace(self, name: str) -> Path:
        return self.models / f"{name}.trace.csv"


def _write_profiles(profiles: list[AgentProfile], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = [{"agent": p.agent_id, "preferences": p.preferences.tolist(), "tau": p.rationality_temperature,
            "attempts": p.attempts} for p in profiles]
    path.write_text(json.dumps(doc, indent=1) + "\n")


def _read_profiles(path: Path) -> list[AgentProfile]:
    doc = json.loads(_need(path, "agent profiles").read_text())
    return [AgentProfile(d["agent"], np.array(d["preferences"]), d["tau"], d.get("attempts", 1)) for d in doc]


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path} (run the earlier pipeline step first)")
    return path


def _graph(cfg: dict) -> SpatialGraph:
    gc = cfg["graph"]
    if gc.get("path"):
        return load_graph(gc["path"])
    return generate_synthetic_graph(
        gc["grid_width"], gc["grid_height"], gc["diagonal_probability"], gc["jitter"], gc["num_goals"],
        seed=cfg["master_seed"],
    )


def _load_run(lay: Layout) -> tuple[SpatialGraph, Dataset]:
    g = load_graph(_need(lay.graph, "graph"))
    ds = read_dataset(_need(lay.dataset, "dataset"))
    if ds.graph_hash != g.content_hash():
        raise SimulationError(f"{lay.dataset} was generated on a different graph than {lay.graph}")
    return g, ds


# ---------------------------------------------------------------- commands

def cmd_simulate(cfg: dict) -> dict:
    lay = Layout(cfg["out_dir"])
    lay.root.mkdir(parents=True, exist_ok=True)
    sc = cfg["simulation"]
    g = _graph(cfg)
    seed = cfg["master_seed"]
    profiles = sample_agent_profiles(g, sc["num_agents"], sc["alpha"], seed=seed, tau=sc["tau"])
    ds = generate_dataset(g, profiles, sc["episodes_per_agent"], sc["k_paths"], master_seed=seed,
                          test_fraction=sc["test_fraction"], threads=cfg["threads"])
    save_graph(g, lay.graph)
    _write_profiles(profiles, lay.profiles)
    write_dataset(ds, lay.dataset)
    summary = {
        "nodes": g.num_nodes, "edges": g.num_edges, "goals": g.num_goals, "graph_hash": g.content_hash(),
        "episodes": len(ds.episodes), "train": len(ds.train), "test": len(ds.test),
        "dataset_sha256": file_digest(lay.dataset),
    }
    print(" ".join(f"{k}={v}" for k, v in summary.items()))
    return summary


def build_model(cfg: dict, name: str, g: SpatialGraph):
    kind = _model_kind(name, cfg["models"].get(name, {}))
    mc = model_config(cfg, name, kind)
    if kind == "btom":
        return BToM(g, mc)
    if kind == "extended_btom":
        return ExtendedBToM(g, mc)
    if kind == "hivae":
        return HiVAE(mc, g)
    if kind == "tomnet":
        return ToMNetLite(mc, g)
    return RecurrentGoalModel(mc, g, kind)


def load_model(cfg: dict, name: str, g: SpatialGraph):
    if name not in cfg["models"]:
        raise ConfigError(f"model {name!r} is not configured")
    kind = _model_kind(name, cfg["models"][name])
    path = Layout(cfg["out_dir"]).checkpoint(name)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint for model {name!r}: {path} (run `train {name}`)")
    cls = {"btom": BToM, "extended_btom": ExtendedBToM, "hivae": HiVAE, "tomnet": ToMNetLite,
           "gru": RecurrentGoalModel, "lstm": RecurrentGoalModel}[kind]
    return cls.load(path, g)


def _write_trace(trace: list[dict], path: Path) -> None:
    keys = ["epoch"] + sorted({k for row in trace for k in row} - {"epoch"})
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in trace:
            w.writerow([row.get(k, "") if k == "epoch" else repr(float(row[k])) if k in row else "" for k in keys])


def cmd_train(cfg: dict, name: str) -> Path:
    if name not in cfg["models"]:
        raise ConfigError(f"unknown model {name!r}; configured: {', '.join(cfg['models'])}")
    lay = Layout(cfg["out_dir"])
    g, ds = _load_run(lay)
    model = build_model(cfg, name, g)
    lay.models.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if model.learned:
        def progress(row):
            log.info("%s epoch %d %s", name, row["epoch"],
                     " ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))
        model.fit(ds, g, progress=progress)
        _write_trace(model.trace, lay.trace(name))
    else:
        model.fit(ds, g)
    path = model.save(lay.checkpoint(name))
    print(f"trained {name} in {time.perf_counter() - t0:.1f}s -> {path}")
    return path


def _drift_data(cfg: dict, g: SpatialGraph, lay: Layout) -> tuple[list[AgentProfile], Dataset]:
    profiles = _read_profiles(lay.profiles)
    sc = cfg["simulation"]
    thr = cfg["drift"]["kl_threshold"]
    drifted = generate_drifted_profiles(profiles, thr, sc["alpha"], seed=cfg["master_seed"])
    for old, new in zip(profiles, drifted):
        kl = kl_divergence(old.preferences, new.preferences)
        if not kl > thr:
            raise SimulationError(f"agent {old.agent_id}: drifted KL {kl:.4f} does not exceed {thr}")
    ds = generate_dataset(g, drifted, sc["episodes_per_agent"], sc["k_paths"],
                          master_seed=derive_seed(cfg["master_seed"], DRIFT_PURPOSE),
                          test_fraction=sc["test_fraction"], threads=cfg["threads"])
    lay.drift_dataset.parent.mkdir(parents=True, exist_ok=True)
    _write_profiles(drifted, lay.drift_profiles)
    write_dataset(ds, lay.drift_dataset)
    return drifted, ds


def _false_goal_items(g: SpatialGraph, lay: Layout):
    items = []
    for prof in _read_profiles(lay.profiles):
        try:
            items.append(synthesize_false_goal_episode(g, prof, episode_id=0))
        except SimulationError as exc:
            log.warning("agent %d: no false-goal episode (%s)", prof.agent_id, exc)
    with lay.false_goal.open("w") as fh:
        for ep, info in items:
            rec = {**ep.to_record(), "false_goal": info.false_goal, "pass_index": info.pass_index}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    return items


def _print_table(title: str, header: list[str], rows: dict[str, list[float]]) -> None:
    print(title)
    print("  " + "".join(f"{h:>15}" for h in ["model", *header]))
    for m, vals in rows.items():
        print("  " + f"{m:>15}" + "".join(f"{v:>15.4f}" for v in vals))


def cmd_eval(cfg: dict, experiment: str = "all") -> ev.EvalReport:
    exps = list(cfg["experiments"]) if experiment == "all" else [experiment]
    if any(e not in EXPERIMENTS for e in exps):
        raise ConfigError(f"unknown experiment {experiment!r}")
    lay = Layout(cfg["out_dir"])
    g, ds = _load_run(lay)
    models = {name: load_model(cfg, name, g) for name in cfg["models"]}
    fractions = tuple(cfg["fractions"])
    threads = cfg["threads"]
    report = ev.EvalReport(fractions=list(fractions))
    report.metadata = {
        "master_seed": cfg["master_seed"],
        "graph_hash": g.content_hash(),
        "dataset_sha256": file_digest(lay.dataset),
        # output location and thread count never change results, so they stay out
        "config": {k: v for k, v in cfg.items() if k not in ("out_dir", "threads")},
        "reference": {"brier": ev.REFERENCE_BRIER, "drift": ev.REFERENCE_DRIFT,
                      "note": "published values on a different, unreleased dataset; context only"},
    }
    if "brier" in exps:
        curves = {n: ev.evaluate_brier_curve(m, ds.test, g, fractions, threads=threads) for n, m in models.items()}
        report.brier_curves = {n: c.means for n, c in curves.items()}
        report.wilcoxon = _significance(cfg, curves)
        _print_table("Brier score by observation fraction", [ev._flabel(f) for f in fractions],
                     report.brier_curves)
    if "false-goal" in exps:
        items = _false_goal_items(g, lay)
        k = cfg["false_goal"]["intervals"]
        report.false_goal_curves = {n: ev.false_goal_curve(m, items, g, k) for n, m in models.items()}
        report.metadata["false_goal_episodes"] = len(items)
        _print_table(f"False-goal probability over {k} intervals ({len(items)} episodes)",
                     [f"i{i}" for i in range(1, k + 1)], report.false_goal_curves)
    if "drift" in exps:
        drifted, dds = _drift_data(cfg, g, lay)
        report.metadata["drift_kl"] = [
            kl_divergence(a.preferences, b.preferences) for a, b in zip(_read_profiles(lay.profiles), drifted)
        ]
        for n, m in models.items():
            res = ev.drift_evaluation(m, ds, dds, g, fractions, threads=threads)
            report.drift_deltas[n] = res["delta"]
            report.drift_curves[n] = {"original": res["original"], "drifted": res["drifted"]}
        _print_table("Drift delta (drifted - original)", [ev._flabel(f) for f in fractions], report.drift_deltas)
    files = ev.emit_report(report, lay.reports)
    print("wrote " + ", ".join(str(p) for p in files))
    return report


def _significance(cfg: dict, curves: dict) -> dict | None:
    """Paired test of the chosen model against the best other model by mean Brier."""
    wc = cfg["wilcoxon"]
    target = wc.get("model")
    if target not in curves or len(curves) < 2:
        return None
    others = {n: float(np.mean(c.means)) for n, c in curves.items() if n != target}
    rival = min(others, key=others.get)
    a = curves[target].per_episode.mean(axis=0)
    b = curves[rival].per_episode.mean(axis=0)
    n = wc.get("num_episodes")
    if n:
        a, b = a[:n], b[:n]
    try:
        res = ev.wilcoxon_signed_rank(a, b)
    except ValueError as exc:
        log.warning("wilcoxon skipped: %s", exc)
        return {"model": target, "versus": rival, "error": str(exc)}
    return {"model": target, "versus": rival, "n": int(len(a)), "W": res.W, "z_approx": res.z_approx,
            "p_value": res.p_value, "n_effective": res.n_effective, "exact": res.exact}


def cmd_report(cfg: dict, report_path=None) -> list[Path]:
    lay = Layout(cfg["out_dir"])
    src = Path(report_path) if report_path else lay.reports / "report.json"
    report = ev.load_report(_need(src, "report"))
    files = ev.write_tables(report, src.parent)
    for title, table in (("Brier", report.brier_curves), ("Drift delta", report.drift_deltas)):
        if table:
            _print_table(title, [ev._flabel(f) for f in report.fractions], table)
    print("wrote " + ", ".join(str(p) for p in files))
    return files


def cmd_run_all(cfg: dict) -> ev.EvalReport:
    cmd_simulate(cfg)
    for name in cfg["models"]:
        cmd_train(cfg, name)
    return cmd_eval(cfg, "all")


# ---------------------------------------------------------------- argparse

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out-dir", help="output directory")
    common.add_argument("--seed", type=int, dest="master_seed", help="master seed")
    common.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
    common.add_argument("--agents", type=int, help="simulation.num_agents")
    common.add_argument("--episodes", type=int, help="simulation.episodes_per_agent")
    common.add_argument("--graph", help="graph JSON file instead of the synthetic grid")
    common.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                        help="override any field, e.g. --set models.hivae.epochs=10")
    common.add_argument("--ablation", action="store_true",
                        help="add hivae_l1 and hivae_l2 (one and two latent levels)")

    p = argparse.ArgumentParser(prog="mindgraph", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="build the graph and simulate episodes")
    t = sub.add_parser("train", parents=[common], help="fit or train one model (or all)")
    t.add_argument("model", help="configured model name, or 'all'")
    e = sub.add_parser("eval", parents=[common], help="run experiments and write reports")
    e.add_argument("experiment", nargs="?", default="all", choices=[*EXPERIMENTS, "all"])
    r = sub.add_parser("report", parents=[common], help="re-render CSV tables from a JSON report")
    r.add_argument("report", nargs="?", help="report.json (default: <out-dir>/reports/report.json)")
    sub.add_parser("run-all", parents=[common], help="simulate, train every model, evaluate")
    return p


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def _overrides(args) -> dict:
    over: dict = {}
    for key, dest in (("out_dir", "out_dir"), ("master_seed", "master_seed"), ("threads", "threads"),
                      ("agents", "simulation.num_agents"), ("episodes", "simulation.episodes_per_agent"),
                      ("graph", "graph.path")):
        val = getattr(args, key)
        if val is not None:
            _set_path(over, dest, val)
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=JSON, got {item!r}")
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        _set_path(over, key, val)
    return over


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MINDGRAPH_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.ablation:
            # variants share the main hivae settings apart from depth
            base = {k: v for k, v in cfg["models"].get("hivae", {}).items() if k != "kind"}
            cfg["models"].setdefault("hivae_l1", {**base, "kind": "hivae", "num_levels": 1})
            cfg["models"].setdefault("hivae_l2", {**base, "kind": "hivae", "num_levels": 2})
            validate_config(cfg)
        if args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "train":
            for name in (list(cfg["models"]) if args.model == "all" else [args.model]):
                cmd_train(cfg, name)
        elif args.command == "eval":
            cmd_eval(cfg, args.experiment)
        elif args.command == "report":
            cmd_report(cfg, args.report)
        else:
            cmd_run_all(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (GraphError, SimulationError, ev.EvaluationError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
