"""Command-line front end.

Every subcommand reads one JSON config file; a few flags override the
simulation settings.  Outputs are CSV files (plus a JSON summary for
simulations) written atomically to the output directory, each starting with a
``# config_sha256=...`` comment line.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BoundaryError,
    ConfigError,
    ConvergenceError,
    DomainError,
    FamilyError,
    InversionError,
    PoleError,
    SingularError,
    SizeError,
)
from .measure import SpectralMeasure, cauchy_transform, h_transform, r_transform, reciprocal_cauchy
from .outlier import CSV_HEADER, SpikeSet, prediction_rows, solve_outliers
from .rmt import EIGEN_METHODS, run_verification
from .subordination import DEFAULT_LADDER, convolution_density, convolution_support

log = logging.getLogger("freeconv")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


@dataclass
class RunConfig:
    mu: dict
    nu: dict
    spikes: list = field(default_factory=list)
    grid: tuple = (-3.0, 3.0, 201)
    epsilon_ladder: tuple = DEFAULT_LADDER
    N: int = 1000
    trials: int = 10
    epsilon: float = 0.1
    eta: float | None = None
    seed: int = 0
    threshold: float = 0.9
    method: str = "lapack"
    window: tuple | None = None
    output_dir: str = "freeconv_out"
    threads: int = 1

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        try:
            mu, nu = raw["mu"], raw["nu"]
        except KeyError as exc:
            raise ConfigError(f"config is missing {exc.args[0]!r}") from None
        sim = dict(raw.get("simulation", {}))
        grid = raw.get("grid", cls.grid)
        if isinstance(grid, dict):
            grid = (grid.get("lo"), grid.get("hi"), grid.get("points"))
        try:
            cfg = cls(
                mu=mu,
                nu=nu,
                spikes=[[float(t), int(k)] for t, k in raw.get("spikes", [])],
                grid=(float(grid[0]), float(grid[1]), int(grid[2])),
                epsilon_ladder=tuple(float(e) for e in raw.get("epsilon_ladder", DEFAULT_LADDER)),
                N=int(sim.get("N", cls.N)),
                trials=int(sim.get("trials", cls.trials)),
                epsilon=float(sim.get("epsilon", cls.epsilon)),
                eta=None if sim.get("eta") is None else float(sim["eta"]),
                seed=int(sim.get("seed", cls.seed)),
                threshold=float(sim.get("threshold", cls.threshold)),
                method=str(sim.get("method", cls.method)),
                window=None if raw.get("window") is None else tuple(float(v) for v in raw["window"]),
                output_dir=str(raw.get("output_dir", cls.output_dir)),
                threads=int(sim.get("threads", cls.threads)),
            )
        except (TypeError, ValueError, IndexError) as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        cfg.validate()
        return cfg

    def validate(self):
        lo, hi, pts = self.grid
        if not lo < hi or pts < 2:
            raise ConfigError("grid needs lo < hi and at least 2 points")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if self.N < 1:
            raise ConfigError("N must be positive")
        if not self.epsilon > 0 or (self.eta is not None and not self.eta > 0):
            raise ConfigError("epsilon and eta must be positive")
        if not self.epsilon_ladder or any(e <= 0 for e in self.epsilon_ladder):
            raise ConfigError("epsilon ladder entries must be positive")
        if self.method not in EIGEN_METHODS:
            raise ConfigError(f"method must be one of {EIGEN_METHODS}")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.window is not None and not (len(self.window) == 2 and self.window[0] < self.window[1]):
            raise ConfigError("window must be [lo, hi] with lo < hi")

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "nu": self.nu,
            "spikes": self.spikes,
            "grid": list(self.grid),
            "epsilon_ladder": list(self.epsilon_ladder),
            "simulation": {
                "N": self.N,
                "trials": self.trials,
                "epsilon": self.epsilon,
                "eta": self.eta,
                "seed": self.seed,
                "threshold": self.threshold,
                "method": self.method,
            },
            "window": None if self.window is None else list(self.window),
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def measures(self) -> tuple[SpectralMeasure, SpectralMeasure]:
        try:
            return SpectralMeasure.from_spec(self.mu), SpectralMeasure.from_spec(self.nu)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad measure spec: {exc}") from None

    def spike_set(self) -> SpikeSet:
        return SpikeSet.from_pairs(self.spikes)


def write_atomic(path: Path, text: str):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(cfg: RunConfig, header: str, rows: Sequence[str]) -> str:
    return "\n".join([f"# config_sha256={cfg.digest()}", header, *rows]) + "\n"


def _num(v: float) -> str:
    return f"{float(v) + 0.0:.12g}"


def _emit(cfg: RunConfig, name: str, text: str, echo: bool = True) -> Path:
    path = Path(cfg.output_dir) / name
    write_atomic(path, text)
    if echo:
        sys.stdout.write(text)
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

_TRANSFORMS = {
    "G": cauchy_transform,
    "F": reciprocal_cauchy,
    "h": h_transform,
    "R": r_transform,
}


def cmd_transform(cfg: RunConfig, which: str, points: Sequence[complex], measure: str = "mu") -> int:
    tau = cfg.measures()[0 if measure == "mu" else 1]
    fn = _TRANSFORMS[which]
    rows = []
    for z in points:
        arg = z if z.imag != 0 else z.real
        try:
            v = complex(fn(tau, arg))
        except (DomainError, PoleError) as exc:
            print(f"error: {which} undefined at z={z}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        rows.append(f"{_num(z.real)},{_num(z.imag)},{_num(v.real)},{_num(v.imag)}")
    _emit(cfg, f"transform_{which}_{measure}.csv", _csv(cfg, "re_z,im_z,re_val,im_val", rows))
    return EXIT_OK


def cmd_convolve(cfg: RunConfig) -> int:
    mu, nu = cfg.measures()
    lo, hi, pts = cfg.grid
    x, dens = convolution_density(mu, nu, np.linspace(lo, hi, pts), cfg.epsilon_ladder)
    K = convolution_support(mu, nu, eps_ladder=cfg.epsilon_ladder)
    _emit(cfg, "density.csv", _csv(cfg, "x,density", [f"{_num(a)},{_num(b)}" for a, b in zip(x, dens)]), echo=False)
    _emit(cfg, "support.csv", _csv(cfg, "lo,hi", [f"{_num(a)},{_num(b)}" for a, b in K.intervals]))
    return EXIT_OK


def _predict(cfg: RunConfig):
    mu, nu = cfg.measures()
    spikes = cfg.spike_set()
    K = convolution_support(mu, nu, eps_ladder=cfg.epsilon_ladder)
    preds = solve_outliers(mu, nu, spikes, window=cfg.window, K=K)
    return mu, nu, spikes, K, preds


def cmd_outliers(cfg: RunConfig) -> int:
    *_, preds = _predict(cfg)
    _emit(cfg, "outliers.csv", _csv(cfg, CSV_HEADER, prediction_rows(preds)))
    return EXIT_OK


def _simulate(cfg: RunConfig):
    mu, nu, spikes, K, preds = _predict(cfg)
    _emit(cfg, "outliers.csv", _csv(cfg, CSV_HEADER, prediction_rows(preds)), echo=False)
    rep = run_verification(
        mu, nu, spikes, preds, cfg.N, cfg.trials, cfg.epsilon, cfg.eta, cfg.seed, K=K,
        threads=cfg.threads, method=cfg.method,
    )
    _emit(cfg, "simulation.csv", _csv(cfg, "trial,rho,epsilon,expected,observed", rep.csv_rows()), echo=False)
    summary = {"config_hash": cfg.digest(), **rep.summary(), "threshold": cfg.threshold,
               "config": cfg.to_dict(), "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    _emit(cfg, "summary.json", json.dumps(summary, indent=2) + "\n", echo=False)
    print(f"pass_fraction={rep.pass_fraction:.3f} trials={rep.trials} strays={len(rep.strays)} eta={rep.eta:.6g}")
    return rep


def cmd_simulate(cfg: RunConfig) -> int:
    _simulate(cfg)
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    rep = _simulate(cfg)
    ok = rep.pass_fraction >= cfg.threshold
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="freeconv", description="Free additive convolution and spiked-model outliers.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="JSON run configuration")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--n", type=int, help="matrix size N")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--trials", type=int)
        sp.add_argument("--epsilon", type=float, help="window half-width")
        sp.add_argument("--eta", type=float, help="support enlargement for strays")
        sp.add_argument("--threads", type=int, help="worker cap for trials")
        return sp

    t = common(sub.add_parser("transform", help="evaluate G, F, h or R at points"))
    t.add_argument("--which", choices=sorted(_TRANSFORMS), required=True)
    t.add_argument("--measure", choices=("mu", "nu"), default="mu")
    t.add_argument("--point", action="append", required=True, help="complex point, e.g. 2 or 0+1j")
    for name in ("convolve", "outliers", "simulate", "verify"):
        common(sub.add_parser(name))
    return p


def _load(args) -> RunConfig:
    try:
        raw = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    sim = dict(raw.get("simulation", {}))
    for flag, key in (("n", "N"), ("seed", "seed"), ("trials", "trials"), ("epsilon", "epsilon"),
                      ("eta", "eta"), ("threads", "threads")):
        if getattr(args, flag) is not None:
            sim[key] = getattr(args, flag)
    raw["simulation"] = sim
    if args.out is not None:
        raw["output_dir"] = args.out
    return RunConfig.from_dict(raw)


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        if args.command == "transform":
            try:
                pts = [complex(s.replace(" ", "")) for s in args.point]
            except ValueError as exc:
                raise ConfigError(f"bad point: {exc}") from None
            return cmd_transform(cfg, args.which, pts, args.measure)
        return {"convolve": cmd_convolve, "outliers": cmd_outliers, "simulate": cmd_simulate, "verify": cmd_verify}[
            args.command
        ](cfg)
    except (ConfigError, SizeError, FamilyError, DomainError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, InversionError, BoundaryError, SingularError, PoleError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
