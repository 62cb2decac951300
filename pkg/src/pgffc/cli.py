"""
Command-line driver for the benchmark experiment.

Every subcommand reads one JSON config (``--config``; defaults to the bundled
``paper-s6.json`` preset) and works inside an output directory (``--out``).
Stages communicate only through the files they write there, and every write
is recorded in ``manifest.json`` with its size and SHA-256.

Exit codes: 0 success, 1 stage failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import budget_report, compute_budget
from .ffc import (ConstraintSets, FhofcProblem, RegularizerSpec, derivative_basis, run_il_fhofc,
                  solve_fhofc, solve_fhofc_basis, solve_receding_horizon)
from .ident import (IdentConfig, identify_physical, identify_pgnn, identify_sweep,
                    simulate_on_dataset)
from .io import atomic_write_text, read_json, sha256_file, sha256_obj, write_json
from .model import DynOrders, PgnnModel
from .optim import SolverOptions
from .plant import (ClosedLoopDataset, DataGenSpec, NoiseSpec, PlantParams, discretize_controller,
                    generate_training_data, realize, simulate_closed_loop)
from .signals import NormSpec, ReferenceSpec, check_reference_feasible, Signal, generate_reference, read_csv, write_csv

log = logging.getLogger("pgffc")

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2
STAGES = ("generate", "identify", "synthesize", "evaluate", "budget", "il-run")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(exc).__name__}: {exc}")
        self.stage = stage


# --------------------------------------------------------------------------
# configuration

DEFAULTS = {
    "plant": asdict(PlantParams()),
    "sample_rate": 100.0,
    "substeps": 10,
    "noise": {"std_dev": 1e-6, "seed": 0},
    "evaluation_noise_seed": 1,
    "reference": asdict(ReferenceSpec()),
    "data": {"repetitions": 15, "duration": 45.0, "excitation_start": 10.0,
             "excitation_stop": 40.0, "excitation_std": 20.0, "excitation_seed": 1},
    "model": {"n_a": 4, "n_b": 4, "n_k": 0, "n_1": [32]},
    "identification": {"reg_weight": 1.0, "init_scale": 0.5, "seed": 0, "max_iterations": 400,
                       "stage1_max_iterations": 200, "nested": True},
    "ffc": {"gamma": [1e-6], "max_iterations": 100, "time_limit": None, "horizon": None,
            "basis": "none", "constraints": {}},
    "il": {"enabled": False, "alpha": 1.0, "gamma": 1e-8, "iterations": 6, "n_1": 32,
           "noise": [True, False]},
    "norm": {"p": 2, "normalized": True},
}


def _merge(base: dict, over: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key '{path}{key}'")
        if isinstance(base[key], dict) and key not in ("constraints",):
            if not isinstance(val, dict):
                raise ConfigError(f"'{path}{key}' must be an object")
            out[key] = _merge(base[key], val, f"{path}{key}.")
        else:
            out[key] = val
    return out


def preset_path(name: str) -> Path:
    return Path(str(resources.files("pgffc") / "presets" / name))


def load_config(path=None, seed: int | None = None) -> dict:
    """Merge a JSON config over the defaults, apply ``seed`` and validate.

    ``path`` may also name a bundled preset (``paper-s6``, ``sweep``, ``paper-s6-il``).
    """
    path = Path(path) if path else preset_path("paper-s6.json")
    if not path.exists() and path.parent == Path("."):
        bundled = preset_path(path.name if path.suffix else f"{path.name}.json")
        path = bundled if bundled.exists() else path
    try:
        user = read_json(path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be an object")
    cfg = _merge(DEFAULTS, user)
    if seed is not None:
        cfg["noise"]["seed"] = seed
        cfg["evaluation_noise_seed"] = seed + 1
        cfg["data"]["excitation_seed"] = seed + 2
        cfg["identification"]["seed"] = seed
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        PlantParams(**cfg["plant"])
        ref = ReferenceSpec(**cfg["reference"])
        check_reference_feasible(ref)
        NoiseSpec(**cfg["noise"])
        DynOrders(cfg["model"]["n_a"], cfg["model"]["n_b"], cfg["model"]["n_k"])
        NormSpec(**cfg["norm"])
        RegularizerSpec(cfg["il"]["gamma"])
        ConstraintSets(**cfg["ffc"]["constraints"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if not cfg["sample_rate"] > 0:
        raise ConfigError("sample_rate must be positive")
    for key, lst in (("model.n_1", cfg["model"]["n_1"]), ("ffc.gamma", cfg["ffc"]["gamma"]),
                     ("il.noise", cfg["il"]["noise"])):
        if not isinstance(lst, list) or not lst:
            raise ConfigError(f"sweep list '{key}' must be a nonempty list")
    if any((not isinstance(n, int)) or n < 0 for n in cfg["model"]["n_1"]):
        raise ConfigError("model.n_1 entries must be nonnegative integers")
    if any(not g >= 0 for g in cfg["ffc"]["gamma"]):
        raise ConfigError("ffc.gamma entries must be nonnegative")
    if not 0 < cfg["il"]["alpha"] <= 1:
        raise ConfigError("il.alpha must lie in (0, 1]")
    if cfg["il"]["enabled"] and (cfg["il"]["n_1"] not in cfg["model"]["n_1"] or cfg["il"]["n_1"] == 0):
        raise ConfigError("il.n_1 must be one of the nonzero model.n_1 entries")
    if cfg["ffc"]["basis"] not in ("none", "derivative"):
        raise ConfigError("ffc.basis must be 'none' or 'derivative'")
    h = cfg["ffc"]["horizon"]
    if h is not None and (not isinstance(h, int) or h < cfg["model"]["n_k"] + 1):
        raise ConfigError("ffc.horizon must be null or an integer >= n_k + 1")
    for name in ("seed",):
        if not isinstance(cfg["noise"][name], int) or not isinstance(cfg["identification"][name], int):
            raise ConfigError("seeds must be explicit integers")


# --------------------------------------------------------------------------
# run context


class Run:
    """Output directory, config and manifest bookkeeping."""

    def __init__(self, cfg: dict, out: Path):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.config_hash = sha256_obj(cfg)
        self.fs = float(cfg["sample_rate"])
        self.realization = realize(PlantParams(**cfg["plant"]))
        self.controller = discretize_controller(self.fs)
        self.norm = NormSpec(**cfg["norm"])
        self.manifest_path = self.out / "manifest.json"
        manifest = read_json(self.manifest_path) if self.manifest_path.exists() else {}
        if manifest.get("config_hash") != self.config_hash:
            manifest = {"files": {}, "stages": []}
        manifest.update({"config_hash": self.config_hash, "config": cfg, "version": __version__})
        self.manifest = manifest
        write_json(self.out / "config.json", cfg)
        self.record("config.json")

    def path(self, name: str) -> Path:
        return self.out / name

    def record(self, *names: str, stage: str | None = None) -> None:
        for name in names:
            p = self.path(name)
            self.manifest["files"][name] = {"sha256": sha256_file(p), "size": p.stat().st_size}
        if stage and stage not in self.manifest["stages"]:
            self.manifest["stages"].append(stage)
        write_json(self.manifest_path, self.manifest)

    def require(self, *names: str) -> None:
        missing = [n for n in names if not self.path(n).exists()]
        if missing:
            raise FileNotFoundError(f"missing artifacts {missing} (run the earlier stages first)")

    # shared objects
    def reference(self) -> Signal:
        return generate_reference(ReferenceSpec(**self.cfg["reference"]), self.fs)

    def dataset(self) -> ClosedLoopDataset:
        self.require("dataset.csv", "dataset.json")
        return ClosedLoopDataset.load(self.path("dataset.csv"), self.path("dataset.json"))

    def model(self, n_1: int) -> PgnnModel:
        name = model_name(n_1)
        self.require(name)
        return PgnnModel.load(self.path(name))

    def widths(self) -> list[int]:
        return [n for n in self.cfg["model"]["n_1"] if n > 0]

    def gammas(self) -> list[float]:
        return [float(g) for g in self.cfg["ffc"]["gamma"]]

    def plant(self, R: Signal, noise: bool):
        """Plant handle; trial ``i`` draws noise from seed ``evaluation_noise_seed + 1000 i``."""
        std = self.cfg["noise"]["std_dev"] if noise else 0.0
        base, steps = self.cfg["evaluation_noise_seed"], self.cfg["substeps"]
        trial = iter(range(1 << 30))

        def apply(U: Signal) -> Signal:
            spec = NoiseSpec(std, base + 1000 * next(trial))
            return simulate_closed_loop(self.realization, self.controller, R, U, spec, substeps=steps)

        return apply


def model_name(n_1: int) -> str:
    return "model_linear.json" if n_1 == 0 else f"model_pgnn_n{n_1}.json"


def cell_tag(n_1: int, gamma: float) -> str:
    return f"n{n_1}_g{gamma:.0e}"


# --------------------------------------------------------------------------
# stages


def stage_generate(run: Run) -> dict:
    cfg = run.cfg
    spec = DataGenSpec(ReferenceSpec(**cfg["reference"]), noise=NoiseSpec(**cfg["noise"]),
                       **cfg["data"])
    ds = generate_training_data(run.realization, run.controller, spec, cfg["substeps"])
    ds.save(run.path("dataset.csv"), run.path("dataset.json"))
    write_csv(run.path("reference.csv"), [run.reference().renamed("r")])
    run.record("dataset.csv", "dataset.json", "reference.csv", stage="generate")
    return {"n_samples": ds.n_samples}


def stage_identify(run: Run) -> dict:
    cfg, ic = run.cfg, run.cfg["identification"]
    ds = run.dataset()
    orders = DynOrders(cfg["model"]["n_a"], cfg["model"]["n_b"], cfg["model"]["n_k"])
    config = IdentConfig(orders, reg_weight=ic["reg_weight"], init_scale=ic["init_scale"],
                         seed=ic["seed"], solver=SolverOptions(max_iterations=ic["max_iterations"]),
                         stage1_solver=SolverOptions(max_iterations=ic["stage1_max_iterations"]))
    lin = identify_physical(ds, run.controller, config, run.norm)
    lin.model.save(run.path(model_name(0)), {"identification_error": lin.identification_error,
                                            "report": lin.report.to_dict()})
    summary = {"linear": {"identification_error": lin.identification_error,
                          "report": lin.report.to_dict()}}
    written = [model_name(0)]
    widths = run.widths()
    if widths:
        if ic["nested"]:
            fits = identify_sweep(ds, run.controller, lin.theta_phy_star, widths, config, run.norm)
        else:
            fits = [identify_pgnn(ds, run.controller, lin.theta_phy_star,
                                  IdentConfig(**{**config.__dict__, "n_1": n}), run.norm)
                    for n in widths]
        for n, fit in zip(widths, fits):
            fit.model.save(run.path(model_name(n)), {"identification_error": fit.identification_error,
                                                     "report": fit.report.to_dict(), **fit.meta})
            summary[f"pgnn_n{n}"] = {"identification_error": fit.identification_error,
                                     "report": fit.report.to_dict()}
            written.append(model_name(n))
    write_json(run.path("identification.json"), summary)
    run.record(*written, "identification.json", stage="identify")
    return {k: v["identification_error"] for k, v in summary.items()}


def _problem(run: Run, model: PgnnModel, R: Signal, gamma: float) -> FhofcProblem:
    fc = run.cfg["ffc"]
    solver = SolverOptions(max_iterations=fc["max_iterations"], gtol=1e-10, xtol=1e-14, ftol=1e-14,
                           time_limit=fc["time_limit"])
    return FhofcProblem(model, run.controller, R, regularizer=RegularizerSpec(gamma),
                        constraints=ConstraintSets(**fc["constraints"]), norm_spec=run.norm,
                        solver=solver)


def stage_synthesize(run: Run) -> dict:
    fc = run.cfg["ffc"]
    R = run.reference()
    report, written = {}, []
    for n in run.widths():
        model = run.model(n)
        for gamma in run.gammas():
            problem = _problem(run, model, R, gamma)
            if fc["basis"] == "derivative":
                _, res = solve_fhofc_basis(problem, derivative_basis(ReferenceSpec(**run.cfg["reference"]),
                                                                     run.fs))
            elif fc["horizon"] is not None:
                res = solve_receding_horizon(problem, fc["horizon"])
            else:
                res = solve_fhofc(problem)
            tag = cell_tag(n, gamma)
            write_csv(run.path(f"uff_{tag}.csv"), [res.U_ff, res.Y_hat.renamed("yhat")])
            report[tag] = {"n_1": n, "gamma": gamma, "inversion_error": res.inversion_error,
                           "report": res.report.to_dict(), "meta": res.meta}
            written.append(f"uff_{tag}.csv")
    write_json(run.path("synthesis.json"), report)
    run.record(*written, "synthesis.json", stage="synthesize")
    return {k: v["inversion_error"] for k, v in report.items()}


def _read_uff(run: Run, tag: str):
    name = f"uff_{tag}.csv"
    run.require(name)
    cols = read_csv(run.path(name), run.fs)
    return cols["uff"], cols["yhat"]


def stage_evaluate(run: Run) -> dict:
    R = run.reference()
    plant = run.plant(R, noise=True)
    written, out = [], {}
    for n in run.widths():
        for gamma in run.gammas():
            tag = cell_tag(n, gamma)
            uff, _ = _read_uff(run, tag)
            y = plant(uff)
            write_csv(run.path(f"y_{tag}.csv"), [y.renamed("y"), R.renamed("r")])
            written.append(f"y_{tag}.csv")
            out[tag] = float(np.sqrt(np.mean((R.values - y.values) ** 2)))
    run.record(*written, stage="evaluate")
    return out


def stage_budget(run: Run) -> dict:
    ds = run.dataset()
    budgets, labels = [], []
    for n in run.widths():
        model = run.model(n)
        y_hat_d, _ = simulate_on_dataset(model, run.controller, ds)
        for gamma in run.gammas():
            tag = cell_tag(n, gamma)
            _, y_hat = _read_uff(run, tag)
            run.require(f"y_{tag}.csv")
            cols = read_csv(run.path(f"y_{tag}.csv"), run.fs)
            budgets.append(compute_budget(cols["r"], cols["y"], y_hat, ds.Y_d, y_hat_d, run.norm))
            labels.append({"n_1": n, "gamma": f"{gamma:.6e}"})
    if not budgets:
        raise ValueError("no PGNN widths configured, nothing to budget")
    budget_report(budgets, labels, run.path("budget.csv"))
    write_json(run.path("budget.json"), [dict(b.to_dict(), **lab) for b, lab in zip(budgets, labels)])
    run.record("budget.csv", "budget.json", stage="budget")
    return {"rows": len(budgets)}


def stage_il(run: Run) -> dict:
    ilc = run.cfg["il"]
    R = run.reference()
    models = {"linear": run.model(0), "pgnn": run.model(ilc["n_1"])}
    columns, finals, written = {}, {}, []
    for noise in ilc["noise"]:
        for name, model in models.items():
            label = f"{name}_{'noise' if noise else 'noisefree'}"
            problem = _problem(run, model, R, float(ilc["gamma"]))
            state = run_il_fhofc(problem, run.plant(R, noise), ilc["alpha"], ilc["iterations"])
            columns[label] = np.asarray(state.history)
            finals[label] = state.history[-1]
            write_csv(run.path(f"il_uff_{label}.csv"), [state.U_ff])
            written.append(f"il_uff_{label}.csv")
    n_it = ilc["iterations"] + 1
    lines = ["iteration," + ",".join(columns)]
    for i in range(n_it):
        lines.append(f"{i}," + ",".join(f"{columns[c][i]:.11e}" for c in columns))
    atomic_write_text(run.path("il_history.csv"), "\n".join(lines) + "\n")
    run.record("il_history.csv", *written, stage="il-run")
    return finals


STAGE_FUNCS = {"generate": stage_generate, "identify": stage_identify,
               "synthesize": stage_synthesize, "evaluate": stage_evaluate,
               "budget": stage_budget, "il-run": stage_il}


def run_stage(run: Run, stage: str) -> dict:
    t0 = time.perf_counter()
    log.info("stage %s started", stage)
    try:
        result = STAGE_FUNCS[stage](run)
    except Exception as exc:
        raise StageError(stage, exc) from exc
    log.info("stage %s finished in %.1f s", stage, time.perf_counter() - t0)
    return result


def run_pipeline(cfg: dict, out) -> dict:
    """generate, identify, synthesize, evaluate and budget, then il-run when ``il.enabled``."""
    run = Run(cfg, Path(out))
    results = {}
    stages = list(STAGES) if cfg["il"]["enabled"] else list(STAGES[:-1])
    for stage in stages:
        results[stage] = run_stage(run, stage)
    return results


# --------------------------------------------------------------------------
# verify


def verify_checks(cfg: dict, out: Path | None = None) -> list[tuple[str, bool, str]]:
    """Fast invariant suite; each entry is ``(name, passed, detail)``."""
    from . import checks

    results = []
    for name, fn in checks.FAST_CHECKS:
        try:
            ok, detail = fn(cfg)
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    if out is not None and (Path(out) / "manifest.json").exists():
        results.extend(checks.artifact_checks(Path(out)))
    return results


# --------------------------------------------------------------------------
# entry point


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # subcommand copies must not reset values given before the subcommand
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=default(None),
                        help="experiment JSON (default: bundled paper-s6.json)")
    parser.add_argument("--out", default=default("runs/default"), help="output directory")
    parser.add_argument("--seed", type=int, default=default(None), help="override all seeds")
    parser.add_argument("--quiet", action="store_true", default=default(False),
                        help="only print errors")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    parser = argparse.ArgumentParser(prog="pgffc", description="PGNN feedforward benchmark experiments")
    _global_flags(parser, suppress=False)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("generate", "simulate the closed-loop training dataset"),
                       ("identify", "two-stage identification of linear and PGNN models"),
                       ("synthesize", "FHOFC feedforward for every (n_1, gamma) cell"),
                       ("evaluate", "apply the feedforward signals to the plant"),
                       ("il-run", "IL-FHOFC convergence curves"),
                       ("budget", "tracking-error budget table"),
                       ("pipeline", "all stages in order"),
                       ("verify", "fast invariant checks")):
        sub.add_parser(name, help=text, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    say = (lambda *a: None) if args.quiet else print
    try:
        cfg = load_config(args.config, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "verify":
        results = verify_checks(cfg, Path(args.out))
        for name, ok, detail in results:
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_STAGE

    try:
        if args.command == "pipeline":
            results = run_pipeline(cfg, args.out)
        else:
            results = {args.command: run_stage(Run(cfg, Path(args.out)), args.command)}
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE
    for stage, res in results.items():
        say(f"{stage}: {json.dumps(res, sort_keys=True, default=float)}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
