"""Command-line pipeline: expand, conditions, check, design, simulate, verify, reproduce.

Exit codes: 0 success, 2 invalid input, 3 non-convergence or empty Omega.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any

import numpy as np

from . import design, sim, verify
from .conditions import ConditionError, conditions_from_expansion, membership, violated
from .rational import format_fraction, to_fraction
from .trig import BasisSpec, DesiredStateSpec, TrigAlgebraError, expand_basis, format_sum

log = logging.getLogger("pexcite")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INVALID, EXIT_FAIL = 0, 2, 3
REFERENCE_CONDITION_COUNT = 49
REFERENCE_T1 = {"noise": 69.91, "u11": 1.14, "u12": 3.61, "u13": 1.54}
REFERENCE_CONV = {"noise": 3392.0, "u11": 247.0, "u12": 482.0, "u13": 477.0}
SIM_KEYS = {"dt", "eta_v", "sigma_max_sq", "tau", "eval_threshold", "conv_threshold",
            "horizon", "noise_amplitude", "noise_seed", "record_every"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    game: str = "benchmark"
    basis: BasisSpec = field(default_factory=lambda: design.BENCHMARK_BASIS)
    desired_state: DesiredStateSpec = field(default_factory=lambda: design.BENCHMARK_TEMPLATE)
    omega: tuple[Fraction, ...] | None = None
    nu: tuple[Fraction, ...] | None = None
    signal: str | None = None
    sim: dict = field(default_factory=dict)
    output_dir: str = "out"

    @property
    def is_benchmark_template(self) -> bool:
        return self.basis == design.BENCHMARK_BASIS and self.desired_state == design.BENCHMARK_TEMPLATE

    def validate(self) -> "RunConfig":
        if self.game != "benchmark":
            raise ConfigError("only the 'benchmark' game ships with this package")
        if self.basis.n != self.desired_state.n:
            raise ConfigError(
                f"basis uses {self.basis.n} states, desired state has {self.desired_state.n}"
            )
        if self.omega is not None and len(self.omega) != self.desired_state.m:
            raise ConfigError(f"omega needs {self.desired_state.m} entries")
        if self.nu is not None and any(v == 0 for v in self.nu):
            raise ConfigError("nu entries must be nonzero")
        if self.signal is not None and self.signal not in (*design.REFERENCE_SIGNALS, "noise"):
            raise ConfigError(f"unknown signal {self.signal!r}")
        bad = set(self.sim) - SIM_KEYS
        if bad:
            raise ConfigError(f"unknown sim keys {sorted(bad)}")
        try:
            sim.SimConfig(**self.sim)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"sim: {exc}") from exc
        return self


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    known = {"schema_version", "game", "basis", "desired_state", "omega", "nu", "signal",
             "sim", "output_dir"}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown config keys {sorted(extra)}")
    try:
        cfg = RunConfig(
            game=data.get("game", "benchmark"),
            basis=BasisSpec.from_json(data["basis"]) if "basis" in data else design.BENCHMARK_BASIS,
            desired_state=(DesiredStateSpec.from_json(data["desired_state"])
                           if "desired_state" in data else design.BENCHMARK_TEMPLATE),
            omega=tuple(to_fraction(v) for v in data["omega"]) if data.get("omega") else None,
            nu=tuple(to_fraction(v) for v in data["nu"]) if data.get("nu") else None,
            signal=data.get("signal"),
            sim=dict(data.get("sim", {})),
            output_dir=data.get("output_dir", "out"),
        )
    except (KeyError, TypeError, ValueError, TrigAlgebraError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg.validate()


# -- helpers -------------------------------------------------------------------


def _vector(text: str) -> tuple[Fraction, ...]:
    try:
        return tuple(to_fraction(v.strip()) for v in text.split(",") if v.strip())
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad vector {text!r}: {exc}") from exc


def _emit(obj: Any, path: str | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=False)
    if path:
        _atomic_write(Path(path), text + "\n")
    else:
        print(text)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.chmod(tmp, 0o644)
    os.replace(tmp, path)


def _conditions(cfg: RunConfig):
    if cfg.is_benchmark_template:
        return design.benchmark_conditions()
    return conditions_from_expansion(expand_basis(cfg.basis, cfg.desired_state))


def _plan(cfg: RunConfig, args) -> design.ExcitationPlan:
    sig = getattr(args, "signal", None) or cfg.signal
    omega = _vector(args.omega) if getattr(args, "omega", None) else cfg.omega
    nu = _vector(args.nu) if getattr(args, "nu", None) else cfg.nu
    if sig and sig != "noise" and omega is None:
        o, n = design.REFERENCE_SIGNALS[sig]
        omega = o
        nu = n if nu is None else nu
    if omega is None:
        raise ConfigError("need --signal or --omega")
    if nu is None:
        nu = (Fraction(1, 4),) * cfg.desired_state.n
    if len(nu) != cfg.desired_state.n:
        raise ConfigError(f"nu needs {cfg.desired_state.n} entries")
    return design.make_plan(cfg.desired_state, omega, nu, _conditions(cfg).omega)


def _sim_config(cfg: RunConfig, args, **extra) -> sim.SimConfig:
    values = dict(cfg.sim)
    for key in ("dt", "horizon"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    if getattr(args, "seed", None) is not None:
        values["noise_seed"] = args.seed
    values.update(extra)
    try:
        return sim.SimConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# -- subcommands -----------------------------------------------------------------


def cmd_expand(args) -> int:
    cfg = load_config(args.config)
    expanded = expand_basis(cfg.basis, cfg.desired_state)
    rows = []
    for k, s in enumerate(expanded, 1):
        L, K = s.counts
        print(f"phi_{k}(x_d) = {format_sum(s)}    (L, K) = ({L}, {K})")
        rows.append({"element": k, "sum": s.to_json(), "L": L, "K": K})
    if args.json:
        _emit({"expanded": rows}, args.json)
    return EXIT_OK


def cmd_conditions(args) -> int:
    cfg = load_config(args.config)
    rep = _conditions(cfg)
    for line in rep.omega.describe():
        print(line)
    reference = f" (reference value {REFERENCE_CONDITION_COUNT})" if cfg.is_benchmark_template else ""
    print(f"count: {rep.omega.count}{reference}")
    print(f"Omega1: {rep.omega1.count}, Omega2: {rep.omega2.count}, N_P: {rep.table.n_columns}")
    print(f"exact (N_P = 1): {str(rep.exact).lower()}")
    if args.json:
        out = rep.omega.to_json()
        out["exact"] = rep.exact
        out["N_P"] = rep.table.n_columns
        _emit(out, args.json)
    if rep.omega.is_empty_omega:
        print("Omega is empty", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_check(args) -> int:
    cfg = load_config(args.config)
    omega = _vector(args.omega)
    cset = _conditions(cfg).omega
    if len(omega) != cset.m:
        raise ConfigError(f"omega needs {cset.m} entries")
    if membership(omega, cset):
        print("member")
    else:
        print("not member")
        for c in violated(omega, cset):
            print(f"  violates {c.describe()}")
    return EXIT_OK


def cmd_design(args) -> int:
    cfg = load_config(args.config)
    plan = _plan(cfg, args)
    out = {"plan": plan.to_json()}
    cert = design.build_certificate(plan, cfg.basis, strict=False)
    out["certificate"] = cert.to_json()
    out["certificate"]["v_o_frequencies"] = [format_fraction(f) for f in cert.v_o_frequencies]
    out["certificate"]["shape"] = list(cert.shape)
    _emit(out, args.json)
    if not cert.full_rank:
        print(f"rank {cert.rank} < {cert.shape[0]}: PE not certified", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _run_signal(name: str, plan, cfg: sim.SimConfig) -> sim.WeightTrace:
    game = sim.GameSpec()
    return sim.run_policy_iteration(game, None if name == "noise" else plan, cfg, signal=name)


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    name = args.signal or cfg.signal or ("noise" if not (args.omega or cfg.omega) else "custom")
    plan = None if name == "noise" else _plan(cfg, args)
    scfg = _sim_config(cfg, args)
    try:
        tr = _run_signal(name, plan, scfg)
    except sim.DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim.write_trace_csv(tr, out / f"trace_{name}.csv")
    sim.write_sigma_csv(tr, out / f"sigma_{name}.csv", "bar")
    sim.write_sigma_csv(tr, out / f"sigma_raw_{name}.csv", "raw")
    summary = tr.summary()
    _emit(summary, str(out / f"summary_{name}.json"))
    print(json.dumps({k: summary[k] for k in ("signal", "conv_time_s", "status")}))
    return EXIT_OK if tr.converged else EXIT_FAIL


def cmd_verify(args) -> int:
    trace = verify.read_signal_csv(args.input)
    rep = verify.verify(trace, alpha1=args.alpha1, T=args.window, alphaI=args.alphaI)
    if args.lambda_out and rep.lambda1 is not None:
        step = max(1, args.every)
        verify.write_series_csv(args.lambda_out, rep.lambda1_t[::step], {"lambda1": rep.lambda1[::step]})
    _emit(rep.to_json(), args.json)
    return EXIT_OK if rep.verdict else EXIT_FAIL


# -- reproduce -------------------------------------------------------------------


def study_signal(name: str, plan, cfg: sim.SimConfig, alpha1: float = 1e-4) -> dict:
    """One learning run plus the eigenvalue-signal analysis of its sigma traces.

    ``T1`` is the smallest window for which ``lambda1 >= alpha1`` holds along
    the whole model-compensated regressor trace; the first crossing of
    ``lambda2 >= alpha1`` is reported alongside as ``T1_lambda2``.
    """
    tr = sim.run_recorded(sim.GameSpec(), None if name == "noise" else plan, cfg, name,
                          record_every=cfg.record_every)
    st = verify.SignalTrace(tr.t, tr.sigma_bar)
    rep = verify.verify(st, alpha1=alpha1, gram=verify.gram_from_upper(tr.gram, 3))
    raw = verify.find_T1(tr.t, verify.lambda2_trace(None, verify.gram_from_upper(tr.gram_raw, 3)), alpha1)
    return {"trace": tr, "report": rep, "T1_lambda2_raw": raw}


def write_study(out: Path, name: str, study: dict, dt_out: float = 0.1) -> None:
    tr, rep = study["trace"], study["report"]
    step = max(1, int(round(dt_out / (tr.t[1] - tr.t[0]))))
    sim.write_trace_csv(tr, out / f"error_{name}.csv", stride=step)
    if rep.lambda1 is not None:
        lstep = max(1, step // 10)
        verify.write_series_csv(out / f"lambda1_{name}.csv", rep.lambda1_t[::lstep],
                                {"lambda1": rep.lambda1[::lstep]})


def reproduce(out: Path, seeds: int = 1, horizon: float = 8000.0, dt: float = 1e-3,
              noise_record_every: int = 5) -> dict:
    """Run the four benchmark excitations and write plot-ready data plus a summary."""
    out.mkdir(parents=True, exist_ok=True)
    summary: dict[str, Any] = {"signals": {}, "reference": {"T1_s": REFERENCE_T1, "conv_time_s": REFERENCE_CONV}}
    for name in ("u11", "u12", "u13", "noise"):
        plan = None if name == "noise" else design.reference_plan(name)
        rows = []
        for seed in range(seeds if name == "noise" else 1):
            cfg = sim.SimConfig(dt=dt, horizon=horizon, noise_seed=seed,
                                record_every=noise_record_every if name == "noise" else 1)
            st = study_signal(name, plan, cfg)
            write_study(out, f"{name}_seed{seed}" if name == "noise" and seeds > 1 else name, st)
            tr, rep = st["trace"], st["report"]
            rows.append({
                "seed": seed if name == "noise" else None,
                "conv_time_s": tr.conv_time,
                "T1_s": rep.window if rep.verdict else None,
                "T1_lambda2_s": rep.T1,
                "T1_lambda2_raw_s": st["T1_lambda2_raw"],
                "pe_verdict": rep.verdict,
                "min_lambda1": rep.min_lambda1,
                "noise_amplitude": tr.noise_amplitude,
                "eta": list(tr.eta),
                "events": tr.summary()["events"],
            })
            del st
        def med(key):
            v = [r[key] for r in rows]
            return None if any(x is None for x in v) else float(np.median(v))
        summary["signals"][name] = {
            "conv_time_s": med("conv_time_s"),
            "T1_s": med("T1_s"),
            "T1_lambda2_s": med("T1_lambda2_s"),
            "pe_verdict": all(r["pe_verdict"] for r in rows),
            "runs": rows,
        }
    det = [summary["signals"][n]["conv_time_s"] for n in ("u11", "u12", "u13")]
    noise = summary["signals"]["noise"]["conv_time_s"]
    summary["reduction"] = (
        None if noise is None or any(d is None for d in det) else 1.0 - min(det) / noise
    )
    summary["reference"]["reduction"] = 1.0 - 247.0 / 3392.0
    _emit(summary, str(out / "summary.json"))
    return summary


def cmd_reproduce(args) -> int:
    summary = reproduce(Path(args.out), seeds=args.seeds, horizon=args.horizon, dt=args.dt)
    print(f"{'signal':8s} {'T1 [s]':>10s} {'ref':>8s} {'conv [s]':>10s} {'ref':>8s}")
    for name, row in summary["signals"].items():
        t1 = "n/a" if row["T1_s"] is None else f"{row['T1_s']:.3f}"
        ct = "n/a" if row["conv_time_s"] is None else f"{row['conv_time_s']:.1f}"
        print(f"{name:8s} {t1:>10s} {REFERENCE_T1[name]:8.2f} {ct:>10s} {REFERENCE_CONV[name]:8.0f}")
    if summary["reduction"] is not None:
        print(f"reduction: {100 * summary['reduction']:.1f} % (reference 92.7 %)")
    ok = all(r["conv_time_s"] is not None for r in summary["signals"].values())
    return EXIT_OK if ok else EXIT_FAIL


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pexcite", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, json_out=True):
        sp.add_argument("--config", help="JSON run configuration (schema_version 1)")
        if json_out:
            sp.add_argument("--json", help="write the JSON result to this file")

    sp = sub.add_parser("expand", help="expand phi(x_d) into canonical sinusoid sums")
    common(sp)
    sp.set_defaults(func=cmd_expand)

    sp = sub.add_parser("conditions", help="build the excluding frequency conditions")
    common(sp)
    sp.set_defaults(func=cmd_conditions)

    sp = sub.add_parser("check", help="test a frequency vector for membership in Omega")
    common(sp, json_out=False)
    sp.add_argument("--omega", required=True, help="comma-separated, e.g. 1,2,3 or 1/2,1,2")
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("design", help="build an excitation plan and its rank certificate")
    common(sp)
    sp.add_argument("--signal", choices=sorted(design.REFERENCE_SIGNALS))
    sp.add_argument("--omega")
    sp.add_argument("--nu")
    sp.set_defaults(func=cmd_design)

    sp = sub.add_parser("simulate", help="run online policy iteration under one excitation")
    common(sp, json_out=False)
    sp.add_argument("--signal", choices=[*sorted(design.REFERENCE_SIGNALS), "noise"])
    sp.add_argument("--omega")
    sp.add_argument("--nu")
    sp.add_argument("--dt", type=float)
    sp.add_argument("--horizon", type=float)
    sp.add_argument("--seed", type=int, help="probing-noise seed")
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("verify", help="PE verification of a sampled signal (CSV: t, s1, ...)")
    sp.add_argument("--input", required=True)
    sp.add_argument("--alpha1", type=float, default=verify.DEFAULT_ALPHA1)
    sp.add_argument("--window", type=float, help="fixed window T instead of the T1 search")
    sp.add_argument("--alphaI", action="store_true", help="also estimate the degree of PE")
    sp.add_argument("--lambda-out", help="write the lambda1 series to this CSV")
    sp.add_argument("--every", type=int, default=1, help="stride for --lambda-out")
    sp.add_argument("--json", help="write the report to this file")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("reproduce", help="run the full four-signal benchmark study")
    sp.add_argument("--out", default="reproduce_out")
    sp.add_argument("--seeds", type=int, default=1, help="noise seeds (median is reported)")
    sp.add_argument("--horizon", type=float, default=8000.0)
    sp.add_argument("--dt", type=float, default=1e-3)
    sp.set_defaults(func=cmd_reproduce)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, design.DesignError, ConditionError, TrigAlgebraError,
            verify.PEVerifyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
