"""Command-line front end.

Subcommands:

  train      train one or more agents (optionally a parameter sweep)
  eval       metrics over a directory of checkpoints
  figures    sweep summaries as plot-ready CSV files
  capacity   protocol-counting report
  analyze    behavioural probes per checkpoint

Configuration is JSON with a documented schema (see the README); flags
override file values, which override defaults. Every run directory
gets a copy of the resolved config and a manifest of artifacts.

Exit codes: 0 success, 2 bad configuration or usage, 3 training
divergence (partial history is saved first), 4 file I/O failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import channel as ch
from .agent import load_checkpoint, save_checkpoint
from .analysis import (capacity_calc, establishment_probe, positive_listening_test,
                       positive_signalling_test, record_student_episode)
from .errors import (CheckpointError, ConfigurationError,
                     TrainingDivergedError, UsageError)
from .evaluation import (DEFAULT_METRIC_EPISODES, DEFAULT_ZCP_GAMES, PolicyActor,
                         clean_channel, heatmaps, protocol_diversity,
                         responsiveness_student, responsiveness_teacher,
                         run_episodes, selfplay_accuracy, write_heatmap_csv,
                         write_zcp_csv, zcp)
from .env import build_observation_space, write_traces
from .training import TrainConfig, train, write_history

logger = logging.getLogger("protolab")

SWEEP_PARAMETERS = ("mutation_probability", "permutation_subset")
FIGURE_COLUMNS = ("x", "zcp_mean", "zcp_std", "selfplay_mean", "selfplay_std",
                  "R_S", "R_T", "P_D", "baseline")


def _agent_seed(master_seed: int, value_index: int, agent_index: int) -> int:
    """Deterministic per-agent seed; adding agents or sweep values never
    changes the seeds of earlier ones."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(value_index, agent_index))
    return int(ss.generate_state(1)[0])


def _train_config_from_dict(data: dict) -> TrainConfig:
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
    try:
        return TrainConfig(**data)
    except TypeError as exc:
        raise ConfigurationError(f"bad train config: {exc}") from exc


@dataclasses.dataclass
class SweepSpec:
    parameter: str
    values: list
    agents_per_value: int = 3

    def validate(self):
        if self.parameter not in SWEEP_PARAMETERS:
            raise ConfigurationError(f"sweep parameter must be one of "
                                     f"{SWEEP_PARAMETERS}, got {self.parameter!r}")
        if not self.values:
            raise ConfigurationError("sweep values must be non-empty")
        if self.agents_per_value < 1:
            raise ConfigurationError("agents_per_value must be >= 1")
        return self


@dataclasses.dataclass
class ExperimentConfig:
    name: str = "experiment"
    n_agents: int = 1
    master_seed: int = 0
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    sweep: SweepSpec | None = None

    def validate(self):
        if self.n_agents < 1:
            raise ConfigurationError("n_agents must be >= 1")
        self.train.validate()
        if self.sweep is not None:
            self.sweep.validate()
        return self

    def to_dict(self):
        out = {"name": self.name, "n_agents": self.n_agents,
               "master_seed": self.master_seed, "train": self.train.to_dict()}
        if self.sweep is not None:
            out["sweep"] = dataclasses.asdict(self.sweep)
        return out


def load_experiment_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    return experiment_config_from_dict(data)


def experiment_config_from_dict(data: dict) -> ExperimentConfig:
    known = {"name", "n_agents", "master_seed", "train", "sweep"}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    cfg = ExperimentConfig(
        name=data.get("name", "experiment"),
        n_agents=int(data.get("n_agents", 1)),
        master_seed=int(data.get("master_seed", 0)),
        train=_train_config_from_dict(data.get("train", {})),
    )
    if data.get("sweep") is not None:
        sw = data["sweep"]
        extra = set(sw) - {"parameter", "values", "agents_per_value"}
        if extra:
            raise ConfigurationError(f"unknown sweep keys: {sorted(extra)}")
        cfg.sweep = SweepSpec(parameter=sw.get("parameter", ""),
                              values=list(sw.get("values", [])),
                              agents_per_value=int(sw.get("agents_per_value", 3)))
    return cfg


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _update_manifest(out_dir: Path, entries, config_digest=None):
    path = out_dir / "manifest.json"
    manifest = {"artifacts": []}
    if path.exists():
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    known = {a["path"] for a in manifest["artifacts"]}
    for rel, kind in entries:
        if rel not in known:
            manifest["artifacts"].append({"path": rel, "kind": kind})
    if config_digest is not None:
        manifest["config_digest"] = config_digest
    manifest["artifacts"].sort(key=lambda a: a["path"])
    _write_json(path, manifest)


def _fmt_value(v):
    return f"{v:g}"


def _sweep_runs(cfg: ExperimentConfig):
    """Expand an experiment into (subdir, value_index, train_config list)."""
    if cfg.sweep is None:
        return [("", 0, cfg.n_agents, cfg.train)]
    runs = []
    for vi, value in enumerate(cfg.sweep.values):
        tc = dataclasses.replace(cfg.train)
        if cfg.sweep.parameter == "mutation_probability":
            tc = dataclasses.replace(tc, mutation_probability=float(value))
            if float(value) > 0 and tc.mutation == ch.MUTATION_OFF:
                tc = dataclasses.replace(tc, mutation=ch.MUTATION_KIND)
        else:
            tc = dataclasses.replace(tc, permutation_subset=int(value))
        runs.append((f"value_{_fmt_value(value)}", vi, cfg.sweep.agents_per_value, tc))
    return runs


def cmd_train(args) -> int:
    cfg = load_experiment_config(args.config) if args.config else ExperimentConfig()
    if args.agents is not None:
        cfg.n_agents = args.agents
    if args.master_seed is not None:
        cfg.master_seed = args.master_seed
    if args.epochs is not None:
        cfg.train = dataclasses.replace(cfg.train, epochs=args.epochs)
    if args.loss_set is not None:
        cfg.train = dataclasses.replace(cfg.train, loss_set=args.loss_set)
    cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    artifacts = [("config.json", "config")]
    for subdir, value_index, n_agents, tc in _sweep_runs(cfg):
        run_dir = out / subdir if subdir else out
        run_dir.mkdir(parents=True, exist_ok=True)
        for i in range(n_agents):
            seed = _agent_seed(cfg.master_seed, value_index, i)
            agent_cfg = dataclasses.replace(tc, seed=seed)
            label = f"{subdir + '/' if subdir else ''}agent_{i:02d}"
            logger.info("training %s (seed %d)", label, seed)
            ckpt_rel = f"{subdir + '/' if subdir else ''}agent_{i:02d}.ckpt"
            hist_rel = f"{subdir + '/' if subdir else ''}history_{i:02d}.csv"
            try:
                result = train(agent_cfg, progress=_progress_logger(label))
            except TrainingDivergedError as exc:
                partial = run_dir / f"history_{i:02d}.partial.csv"
                write_history(exc.history, partial)
                logger.error("%s diverged at epoch %s; partial history at %s",
                             label, exc.epoch, partial)
                raise
            meta = {"seed": seed, "name": cfg.name,
                    "config_digest": agent_cfg.digest(),
                    "train": agent_cfg.to_dict()}
            save_checkpoint(result.params, out / ckpt_rel, metadata=meta)
            write_history(result.history, out / hist_rel)
            artifacts += [(ckpt_rel, "checkpoint"), (hist_rel, "history")]
            final = result.history[-1] if result.history else {}
            logger.info("%s done: %d epochs, selfplay %.3f", label,
                        len(result.history), final.get("selfplay_accuracy", -1.0))
    _update_manifest(out, artifacts, config_digest=cfg.train.digest())
    return 0


def _progress_logger(label):
    def cb(row):
        if row["epoch"] % 25 == 0:
            logger.debug("%s epoch %d total %.4f selfplay %.3f", label,
                         row["epoch"], row["total"], row["selfplay_accuracy"])
    return cb


def _load_population(directory):
    paths = sorted(Path(directory).glob("*.ckpt"))
    if not paths:
        raise ConfigurationError(f"no checkpoints found in {directory}")
    loaded = [load_checkpoint(p) for p in paths]
    return paths, [p for p, _ in loaded], [m for _, m in loaded]


def cmd_eval(args) -> int:
    paths, agents, metas = _load_population(args.checkpoints)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    if args.metric == "zcp":
        result = zcp(agents, games_per_direction=args.games, seed=args.seed)
        write_zcp_csv(result, out / "zcp.csv")
        _write_json(out / "zcp_summary.json",
                    {"mean": result.mean, "std": result.std,
                     "n_agents": len(agents), "games_per_direction": args.games})
        artifacts += [("zcp.csv", "zcp"), ("zcp_summary.json", "summary")]
        print(f"zcp mean {result.mean:.4f} std {result.std:.4f} "
              f"over {len(result.encounters)} encounters")
    elif args.metric == "responsiveness":
        import csv as _csv
        with open(out / "responsiveness.csv", "w", newline="", encoding="utf-8") as fh:
            w = _csv.writer(fh)
            w.writerow(["agent_id", "R_S", "mean_sic", "R_T", "mean_tm"])
            for i, params in enumerate(agents):
                rs = responsiveness_student(params, args.episodes,
                                            np.random.default_rng(args.seed + i))
                rt = responsiveness_teacher(params, args.episodes,
                                            np.random.default_rng(args.seed + i))
                w.writerow([i, rs.score, rs.mean_loss, rt.score, rt.mean_loss])
                print(f"agent {i}: R_S {rs.score:.4f} R_T {rt.score:.4f}")
        artifacts.append(("responsiveness.csv", "responsiveness"))
    elif args.metric == "diversity":
        import csv as _csv
        with open(out / "diversity.csv", "w", newline="", encoding="utf-8") as fh:
            w = _csv.writer(fh)
            w.writerow(["agent_id", "P_D", "mean_pd"])
            for i, params in enumerate(agents):
                pd = protocol_diversity(params, args.episodes,
                                        np.random.default_rng(args.seed + i))
                w.writerow([i, pd.score, pd.mean_loss])
                print(f"agent {i}: P_D {pd.score:.4f}")
        artifacts.append(("diversity.csv", "diversity"))
    elif args.metric == "selfplay":
        import csv as _csv
        with open(out / "selfplay.csv", "w", newline="", encoding="utf-8") as fh:
            w = _csv.writer(fh)
            w.writerow(["agent_id", "accuracy"])
            for i, (params, meta) in enumerate(zip(agents, metas)):
                tc = _train_config_from_dict(meta.get("train", {}))
                acc = selfplay_accuracy(params, tc, args.episodes,
                                        np.random.default_rng(args.seed + i))
                w.writerow([i, acc])
                print(f"agent {i}: selfplay {acc:.4f}")
        artifacts.append(("selfplay.csv", "selfplay"))
    elif args.metric == "heatmap":
        for i, params in enumerate(agents):
            hm = heatmaps(params, args.episodes, np.random.default_rng(args.seed + i))
            class_rel = f"heatmap_class_{i:02d}.csv"
            ts_rel = f"heatmap_timestep_{i:02d}.csv"
            write_heatmap_csv(hm.class_symbol,
                              [f"class_{c + 1}" for c in range(hm.class_symbol.shape[0])],
                              out / class_rel)
            write_heatmap_csv(hm.timestep_symbol,
                              [f"t_{t}" for t in range(hm.timestep_symbol.shape[0])],
                              out / ts_rel)
            artifacts += [(class_rel, "heatmap"), (ts_rel, "heatmap")]
    else:
        raise ConfigurationError(f"unknown metric {args.metric!r}")
    _update_manifest(out, artifacts)
    return 0


def _value_dirs(sweep_dir: Path):
    dirs = sorted(sweep_dir.glob("value_*"),
                  key=lambda p: float(p.name.split("_", 1)[1]))
    if not dirs:
        raise ConfigurationError(f"no value_* directories under {sweep_dir}")
    return dirs


def _sweep_row(value_dir: Path, episodes: int, zcp_games: int, seed: int):
    _, agents, metas = _load_population(value_dir)
    x = float(value_dir.name.split("_", 1)[1])
    zr = zcp(agents, games_per_direction=zcp_games, seed=seed) if len(agents) > 1 else None
    selfs, rss, rts, pds = [], [], [], []
    for i, (params, meta) in enumerate(zip(agents, metas)):
        rng = np.random.default_rng(seed + 1000 + i)
        tc = _train_config_from_dict(meta.get("train", {}))
        selfs.append(selfplay_accuracy(params, tc, episodes, rng))
        rss.append(responsiveness_student(params, episodes, rng).score)
        rts.append(responsiveness_teacher(params, episodes, rng).score)
        pds.append(protocol_diversity(params, episodes, rng).score)
    return {
        "x": x,
        "zcp_mean": zr.mean if zr else float("nan"),
        "zcp_std": zr.std if zr else float("nan"),
        "selfplay_mean": float(np.mean(selfs)),
        "selfplay_std": float(np.std(selfs)),
        "R_S": float(np.mean(rss)),
        "R_T": float(np.mean(rts)),
        "P_D": float(np.mean(pds)),
    }


def _write_figure_csv(path, rows, baseline):
    import csv as _csv
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _csv.DictWriter(fh, fieldnames=list(FIGURE_COLUMNS))
        w.writeheader()
        for row in rows:
            w.writerow({**row, "baseline": baseline})


def cmd_figures(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    baseline_mean = float("nan")
    if args.baseline:
        _, agents, _ = _load_population(args.baseline)
        baseline_mean = zcp(agents, games_per_direction=args.games,
                            seed=args.seed).mean
        logger.info("baseline zcp %.4f", baseline_mean)
    table_rows = {}
    if args.baseline:
        _, agents, metas = _load_population(args.baseline)
        row = _population_metrics(agents, metas, args.episodes, args.games, args.seed)
        table_rows["baseline"] = row
    for kind, sweep_dir, figs in (("mutation", args.mutation_sweep, ("3a", "3b")),
                                  ("permutation", args.permutation_sweep, ("3c", "3d"))):
        if not sweep_dir:
            continue
        rows = [_sweep_row(d, args.episodes, args.games, args.seed)
                for d in _value_dirs(Path(sweep_dir))]
        for fig in figs:
            rel = f"figure-{fig}.csv"
            _write_figure_csv(out / rel, rows, baseline_mean)
            artifacts.append((rel, "figure"))
        for row in rows:
            if kind == "mutation" and row["x"] in (0.3, 1.0):
                table_rows[f"mutation_{_fmt_value(row['x'])}"] = {
                    "R_T": row["R_T"], "R_S": row["R_S"], "P_D": row["P_D"],
                    "ZCP": row["zcp_mean"]}
            if kind == "permutation" and row["x"] == max(r["x"] for r in rows):
                table_rows["permutation_full"] = {
                    "R_T": row["R_T"], "R_S": row["R_S"], "P_D": row["P_D"],
                    "ZCP": row["zcp_mean"]}
    wanted = ("baseline", "permutation_full", "mutation_0.3", "mutation_1")
    if all(k in table_rows for k in wanted):
        import csv as _csv
        with open(out / "table1.csv", "w", newline="", encoding="utf-8") as fh:
            w = _csv.writer(fh)
            w.writerow(["setting", "R_T", "R_S", "P_D", "ZCP"])
            for k in wanted:
                r = table_rows[k]
                w.writerow([k, r["R_T"], r["R_S"], r["P_D"], r["ZCP"]])
        artifacts.append(("table1.csv", "table"))
    else:
        logger.warning("table1 skipped; missing settings: %s",
                       sorted(set(wanted) - set(table_rows)))
    _update_manifest(out, artifacts)
    return 0


def _population_metrics(agents, metas, episodes, games, seed):
    rss, rts, pds = [], [], []
    for i, params in enumerate(agents):
        rng = np.random.default_rng(seed + 2000 + i)
        rss.append(responsiveness_student(params, episodes, rng).score)
        rts.append(responsiveness_teacher(params, episodes, rng).score)
        pds.append(protocol_diversity(params, episodes, rng).score)
    z = zcp(agents, games_per_direction=games, seed=seed).mean if len(agents) > 1 \
        else float("nan")
    return {"R_T": float(np.mean(rts)), "R_S": float(np.mean(rss)),
            "P_D": float(np.mean(pds)), "ZCP": z}


def cmd_capacity(args) -> int:
    weights = args.weights
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
        weights = params.n_weights()
    if weights is None:
        raise ConfigurationError("capacity needs --weights or --checkpoint")
    report = capacity_calc(args.vocab, args.classes, weights)
    payload = dataclasses.asdict(report)
    print(json.dumps(payload, sort_keys=True, indent=2))
    if args.out:
        _write_json(Path(args.out), payload)
    return 0


def cmd_analyze(args) -> int:
    paths, agents, metas = _load_population(args.checkpoints)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for i, params in enumerate(agents):
        rng = np.random.default_rng(args.seed + i)
        probe = establishment_probe(params, args.episodes, rng)
        space = build_observation_space(params.config.n_classes)
        batch = run_episodes(PolicyActor(params), PolicyActor(params), space,
                             clean_channel(params.config.vocab),
                             max(args.episodes, 100), rng)
        signalling = positive_signalling_test(batch, rng=rng)
        contexts, trace = record_student_episode(
            params, params, clean_channel(params.config.vocab), rng)
        listening = positive_listening_test(params, contexts, args.tolerance)
        capacity = capacity_calc(params.config.vocab, params.config.n_classes,
                                 params.n_weights())
        trace_rel = f"trace_{i:02d}.jsonl"
        write_traces([trace], out / trace_rel)
        report = {
            "agent": i,
            "checkpoint": paths[i].name,
            "establishment": dataclasses.asdict(probe),
            "signalling": dataclasses.asdict(signalling),
            "listening": {
                "tolerance": listening.tolerance,
                "any_listening": listening.any_listening,
                "max_sensitivity": listening.max_sensitivity,
                "steps": [dataclasses.asdict(s) for s in listening.steps],
            },
            "capacity": dataclasses.asdict(capacity),
        }
        rel = f"analysis_{i:02d}.json"
        _write_json(out / rel, report)
        artifacts += [(rel, "analysis"), (trace_rel, "trace")]
        print(f"agent {i}: verdict {probe.verdict} mi {probe.mi_bits:.3f} bits "
              f"R_S {probe.responsiveness:.3f} selfplay {probe.selfplay:.3f}")
    _update_manifest(out, artifacts)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protolab",
                                     description="signalling-game laboratory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train agents per a config file")
    p_train.add_argument("--config", help="experiment config JSON")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--agents", type=int, default=None)
    p_train.add_argument("--master-seed", type=int, default=None)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--loss-set", choices=("ac", "sic_tm_pd"), default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint population")
    p_eval.add_argument("--checkpoints", required=True)
    p_eval.add_argument("--metric", required=True,
                        choices=("zcp", "responsiveness", "diversity",
                                 "selfplay", "heatmap"))
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--games", type=int, default=DEFAULT_ZCP_GAMES)
    p_eval.add_argument("--episodes", type=int, default=DEFAULT_METRIC_EPISODES)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.set_defaults(func=cmd_eval)

    p_fig = sub.add_parser("figures", help="emit plot-ready sweep CSVs")
    p_fig.add_argument("--baseline", help="baseline checkpoint directory")
    p_fig.add_argument("--mutation-sweep", help="mutation sweep directory")
    p_fig.add_argument("--permutation-sweep", help="permutation sweep directory")
    p_fig.add_argument("--out", required=True)
    p_fig.add_argument("--games", type=int, default=DEFAULT_ZCP_GAMES)
    p_fig.add_argument("--episodes", type=int, default=500)
    p_fig.add_argument("--seed", type=int, default=0)
    p_fig.set_defaults(func=cmd_figures)

    p_cap = sub.add_parser("capacity", help="protocol capacity report")
    p_cap.add_argument("--vocab", type=int, required=True)
    p_cap.add_argument("--classes", type=int, required=True)
    p_cap.add_argument("--weights", type=int, default=None)
    p_cap.add_argument("--checkpoint", default=None)
    p_cap.add_argument("--out", default=None)
    p_cap.set_defaults(func=cmd_capacity)

    p_an = sub.add_parser("analyze", help="behavioural probes per checkpoint")
    p_an.add_argument("--checkpoints", required=True)
    p_an.add_argument("--out", required=True)
    p_an.add_argument("--episodes", type=int, default=1000)
    p_an.add_argument("--tolerance", type=float, default=0.01)
    p_an.add_argument("--seed", type=int, default=0)
    p_an.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        logger.error("training diverged: %s", exc)
        return 3
    except (ConfigurationError, UsageError, CheckpointError) as exc:
        logger.error("%s", exc)
        return 2
    except OSError as exc:
        logger.error("i/o failure: %s", exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
