"""Command-line pipeline: spectrum -> level statistics -> ETH -> quench.

Verbs
-----
run       execute the stages of a YAML config and write a manifest
report    summarize a manifest
scan      Hilbert-space dimension versus cutoff
validate  check a config against the schema (optionally run synthetic self-checks)

Exit codes
----------
0 success, 2 invalid config, 3 corrupt cache entry, 4 stage failure,
5 output directory locked by another run, 6 manifest missing or unreadable,
7 artifact checksum mismatch found by ``report``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from threadpoolctl import threadpool_limits

from . import __version__
from .eigen import DEFAULT_MAX_DIM, SpectrumFileError, diagonalize, load_spectrum, save_spectrum
from .eth import eth_summary, observable_matrix, sector_filter
from .fock import dimension_scan, enumerate_basis, find_e_max
from .hamiltonian import assemble_one_body, build_hamiltonian, trap_potential_spec
from .quench import InitialStateSpec, reference_initial_state, run_quench
from .spectral import analyze_levels, spacing_distribution

log = logging.getLogger("bosemix")

EXIT_OK, EXIT_CONFIG, EXIT_CACHE, EXIT_STAGE, EXIT_LOCKED, EXIT_MANIFEST, EXIT_CHECKSUM = 0, 2, 3, 4, 5, 6, 7
STAGES = ("spectrum", "stats", "eth", "quench")


# -- configuration -------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemConfig(_Strict):
    n_a: int = Field(2, ge=0)
    n_b: int = Field(2, ge=0)
    e_max: Optional[float] = None
    target_dimension: Optional[int] = Field(None, ge=1)
    parity: Literal["even", "odd", "both"] = "even"
    truncation: Literal["total", "component"] = "component"

    @model_validator(mode="after")
    def _cutoff(self):
        if (self.e_max is None) == (self.target_dimension is None):
            raise ValueError("give exactly one of e_max or target_dimension")
        return self


Coupling = Union[float, list[float]]


class CouplingConfig(_Strict):
    g_a: Coupling = 0.0
    g_b: Coupling = 0.0
    g_ab: Coupling = 0.0

    def points(self):
        def as_list(v):
            return [float(x) for x in (v if isinstance(v, list) else [v])]

        vals = [as_list(self.g_a), as_list(self.g_b), as_list(self.g_ab)]
        for v in vals:
            if not v or any(x < 0 for x in v):
                raise ValueError("couplings must be non-empty and non-negative")
        return list(itertools.product(*vals))


class SpectrumConfig(_Strict):
    interaction: Literal["effective", "bare"] = "effective"
    max_dim: int = DEFAULT_MAX_DIM


class StatsConfig(_Strict):
    discard_low: float = Field(0.05, ge=0, lt=1)
    discard_high: float = Field(0.01, ge=0, lt=1)
    poly_degree: int = Field(10, ge=3, le=20)
    method: Literal["mle", "histogram"] = "mle"
    bins: int = Field(40, ge=5)
    s_max: float = Field(4.0, gt=0)


class EthConfig(_Strict):
    window: tuple[int, int] = (2600, 2800)
    threshold: float = Field(1e-8, ge=0)
    sector_filter: bool = True


class QuenchConfig(_Strict):
    parity: Literal["both", "even"] = "both"
    convention: Literal["fock", "symmetrized"] = "fock"
    t_max: float = Field(400.0, gt=0)
    dt: float = Field(0.1, gt=0)
    delta_e: float = Field(2.0, gt=0)
    t_window: tuple[float, float] = (100.0, 400.0)
    x_max: float = Field(9.0, gt=0)
    n_x: int = Field(361, ge=3)
    k_max: float = Field(9.0, gt=0)
    n_k: int = Field(361, ge=3)
    # (i, j, amplitude) pair lists; None selects the reference state
    pairs_a: Optional[list[tuple[int, int, float]]] = None
    pairs_b: Optional[list[tuple[int, int, float]]] = None

    def initial_state(self) -> InitialStateSpec:
        ref = reference_initial_state(self.convention)
        return InitialStateSpec(tuple(map(tuple, self.pairs_a)) if self.pairs_a else ref.pairs_a,
                                tuple(map(tuple, self.pairs_b)) if self.pairs_b else ref.pairs_b,
                                self.convention)


class CacheConfig(_Strict):
    policy: Literal["use", "refresh", "off"] = "use"
    directory: Optional[str] = None


class RunConfig(_Strict):
    system: SystemConfig = SystemConfig(e_max=20)
    couplings: CouplingConfig = CouplingConfig()
    stages: list[Literal["spectrum", "stats", "eth", "quench"]] = ["spectrum", "stats", "eth"]
    spectrum: SpectrumConfig = SpectrumConfig()
    stats: StatsConfig = StatsConfig()
    eth: EthConfig = EthConfig()
    quench: QuenchConfig = QuenchConfig()
    output: str = "out"
    cache: CacheConfig = CacheConfig()


def load_config(path) -> RunConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError("config must be a mapping")
    return RunConfig.model_validate(data)


# -- helpers -------------------------------------------------------------------


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _dump(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


class StageError(RuntimeError):
    pass


class CacheError(RuntimeError):
    pass


@contextmanager
def _lock(directory: Path):
    """Exclusive ownership of ``directory``; raises ``FileExistsError`` if another run holds it."""
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / ".lock"
    fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


def _resolve_e_max(system: SystemConfig) -> float:
    if system.e_max is not None:
        return system.e_max
    n = system.n_a + system.n_b
    grid = np.arange(0.5 * n, 0.5 * n + 60.0, 0.5)
    e = find_e_max(system.n_a, system.n_b, system.parity, system.target_dimension, grid, system.truncation)
    if e is None:
        raise ValueError(f"no cutoff gives dimension {system.target_dimension}")
    return e


def _tag(point) -> str:
    return "gA{:g}_gB{:g}_gAB{:g}".format(*point)


class Pipeline:
    def __init__(self, cfg: RunConfig, out: Path, cache_dir: Path | None):
        self.cfg = cfg
        self.out = out
        self.cache_dir = cache_dir
        self.artifacts = []
        self.cache_log = []
        self.results = {}

    def _artifact(self, path: Path, stage: str):
        self.artifacts.append({"path": str(path.relative_to(self.out)), "stage": stage, "sha256": _sha256(path)})

    def spectrum(self, basis, point):
        """Diagonalize, going through the cache when enabled."""
        settings = {"mode": "full", "interaction": self.cfg.spectrum.interaction,
                    "max_dim": self.cfg.spectrum.max_dim}
        key = hashlib.sha256(json.dumps({"basis": basis.checksum(), "couplings": list(point),
                                         "solver": settings, "version": __version__},
                                        sort_keys=True).encode()).hexdigest()[:32]
        path = None if self.cache_dir is None else self.cache_dir / f"spectrum_{key}.bin"
        entry = {"key": key, "point": list(point), "parity": basis.meta.parity}
        if path is not None and path.exists() and self.cfg.cache.policy == "use":
            try:
                spec = load_spectrum(path, basis)
            except SpectrumFileError as exc:
                raise CacheError(str(exc)) from exc
            self.cache_log.append({**entry, "hit": True})
            log.info("cache hit %s", key)
            return spec
        H = build_hamiltonian(basis, *point, kind=self.cfg.spectrum.interaction)
        spec = diagonalize(H, max_dim=self.cfg.spectrum.max_dim)
        if path is not None and self.cfg.cache.policy != "off":
            path.parent.mkdir(parents=True, exist_ok=True)
            save_spectrum(path, spec)
        self.cache_log.append({**entry, "hit": False})
        return spec

    def run(self) -> dict:
        cfg = self.cfg
        sysc = cfg.system
        e_max = _resolve_e_max(sysc)
        basis = enumerate_basis(sysc.n_a, sysc.n_b, e_max, sysc.parity, sysc.truncation)
        need_static = any(s in cfg.stages for s in ("spectrum", "stats", "eth"))
        points = cfg.couplings.points()
        rows_beta, rows_kurt = [], []
        stage_status = {s: "absent" for s in STAGES}
        for point in points:
            tag = _tag(point)
            pdir = self.out / "points" / tag
            pdir.mkdir(parents=True, exist_ok=True)
            res = self.results.setdefault(tag, {"couplings": dict(zip(("g_A", "g_B", "g_AB"), point))})
            if need_static:
                spec = self.spectrum(basis, point)
                res["dimension"] = spec.dimension
                res["ground_energy"] = float(spec.energies[0])
                res["residual"] = spec.meta.get("relative_residual")
                p = pdir / "energies.csv"
                np.savetxt(p, spec.energies, header="E", comments="", fmt="%.17g")
                self._artifact(p, "spectrum")
                stage_status["spectrum"] = "done"
                if "stats" in cfg.stages:
                    st = cfg.stats
                    a = analyze_levels(spec.energies, st.discard_low, st.poly_degree, st.discard_high, st.method,
                                       bins=st.bins, s_max=st.s_max)
                    fit = a.fit
                    res["stats"] = {"beta": fit.beta, "fittable": fit.fittable, "reason": fit.reason,
                                    "ks_distance": fit.ks_distance, "poly_degree_used": a.unfolded.poly_degree,
                                    "mean_spacing": a.unfolded.mean_spacing, "n_spacings": fit.n_samples}
                    hist = spacing_distribution(a.unfolded, st.bins, st.s_max)
                    hist.to_csv(pdir / "spacing_histogram.csv")
                    hist.spacings_to_csv(pdir / "spacings.csv")
                    fit.to_json(pdir / "brody_fit.json")
                    for name in ("spacing_histogram.csv", "spacings.csv", "brody_fit.json"):
                        self._artifact(pdir / name, "stats")
                    rows_beta.append(list(point) + [fit.beta if fit.fittable else "", int(fit.fittable)])
                    stage_status["stats"] = "done"
                if "eth" in cfg.stages:
                    U = assemble_one_body(basis, trap_potential_spec(basis.n_modes))
                    obs = observable_matrix(spec, U, cfg.eth.window)
                    labels = None
                    # the equal-occupation filter only separates exchange sectors at g_A = g_B
                    if cfg.eth.sector_filter and sysc.n_a == sysc.n_b and point[0] == point[1]:
                        labels = sector_filter(spec, basis, cfg.eth.threshold)
                    summ = eth_summary(obs, labels)
                    res["eth"] = summ
                    obs.to_csv(pdir / "observable_window.csv")
                    _dump(pdir / "eth_summary.json", summ)
                    for name in ("observable_window.csv", "eth_summary.json"):
                        self._artifact(pdir / name, "eth")
                    rows_kurt.append(list(point) + [summ["inverse_kurtosis"], summ.get("removed_fraction", "")])
                    stage_status["eth"] = "done"
            if "quench" in cfg.stages:
                q = cfg.quench
                qbasis = enumerate_basis(sysc.n_a, sysc.n_b, e_max, q.parity, sysc.truncation)
                qspec = self.spectrum(qbasis, point)
                H = build_hamiltonian(qbasis, *point, kind=cfg.spectrum.interaction)
                U = assemble_one_body(qbasis, trap_potential_spec(qbasis.n_modes))
                x = np.linspace(-q.x_max, q.x_max, q.n_x)
                k = np.linspace(-q.k_max, q.k_max, q.n_k)
                rec = run_quench(qspec, qbasis, H, U, q.initial_state(), q.t_max, q.dt, q.delta_e,
                                 q.t_window, x=x, k=k, project=(q.parity != "both"))
                qdir = pdir / "quench"
                paths = rec.write(qdir)
                for name, grid in (("grid_x.csv", x), ("grid_k.csv", k)):
                    np.savetxt(qdir / name, grid, header=name[5], comments="", fmt="%.17g")
                    paths[name] = qdir / name
                for p in paths.values():
                    self._artifact(Path(p), "quench")
                res["quench"] = {**rec.metrics, "N_mc": rec.ensembles["N_mc"], "E_mid": rec.ensembles["E_mid"]}
                stage_status["quench"] = "done"
        if rows_beta:
            p = self.out / "brody_grid.csv"
            _write_csv(p, ["g_A", "g_B", "g_AB", "beta", "fittable"], rows_beta)
            self._artifact(p, "stats")
        if rows_kurt:
            p = self.out / "inverse_kurtosis_grid.csv"
            _write_csv(p, ["g_A", "g_B", "g_AB", "inverse_kurtosis", "removed_fraction"], rows_kurt)
            self._artifact(p, "eth")
        return {"stages": stage_status, "e_max": e_max, "dimension": len(basis)}


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


# -- verbs ---------------------------------------------------------------------


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError, ValidationError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.output)
    cache_dir = None
    if cfg.cache.policy != "off":
        cache_dir = Path(args.cache_dir or cfg.cache.directory or out / "cache")
    try:
        with _lock(out):
            return _run_locked(args, cfg, out, cache_dir)
    except FileExistsError:
        print(f"{out} is locked by another run", file=sys.stderr)
        return EXIT_LOCKED


def _run_locked(args, cfg: RunConfig, out: Path, cache_dir: Path | None) -> int:
    pipe = Pipeline(cfg, out, cache_dir)
    try:
        with threadpool_limits(args.threads):
            info = pipe.run()
    except CacheError as exc:
        print(f"cache error: {exc}", file=sys.stderr)
        return EXIT_CACHE
    except Exception as exc:  # every stage failure maps to one exit code
        log.exception("stage failure")
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    effective = cfg.model_dump(mode="json")
    _dump(out / "effective_config.json", effective)
    manifest = {"format": "bosemix-manifest", "version": 1, "code_version": __version__,
                "effective_config": effective,
                "config_sha256": hashlib.sha256(json.dumps(effective, sort_keys=True).encode()).hexdigest(),
                "seed": args.seed, "system": info, "results": pipe.results,
                "cache": pipe.cache_log, "artifacts": pipe.artifacts}
    _dump(out / "manifest.json", manifest)
    print(out / "manifest.json")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.manifest)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        man = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        print(f"cannot read manifest: {exc}", file=sys.stderr)
        return EXIT_MANIFEST
    root = path.parent
    bad = []
    for a in man.get("artifacts", []):
        p = root / a["path"]
        if not p.exists() or _sha256(p) != a["sha256"]:
            bad.append(a["path"])
    sysinfo = man.get("system", {})
    print(f"bosemix {man.get('code_version')}  E_max={sysinfo.get('e_max')}  D={sysinfo.get('dimension')}")
    for name, status in sysinfo.get("stages", {}).items():
        print(f"  stage {name:<8} {status}")
    cfg = man.get("effective_config", {})
    if cfg:
        st, eth, q = cfg.get("stats", {}), cfg.get("eth", {}), cfg.get("quench", {})
        print(f"  settings: unfold discard {st.get('discard_low')}/{st.get('discard_high')} degree "
              f"{st.get('poly_degree')} fit {st.get('method')}; ETH window {eth.get('window')} threshold "
              f"{eth.get('threshold')}; quench dE {q.get('delta_e')} dt {q.get('dt')} window {q.get('t_window')}")
    for tag, r in man.get("results", {}).items():
        print(f"[{tag}]")
        st = r.get("stats")
        if st:
            beta = f"{st['beta']:.4f}" if st["fittable"] else f"not fittable ({st['reason']})"
            print(f"  beta = {beta}  (degree {st['poly_degree_used']}, {st['n_spacings']} spacings)")
        eth = r.get("eth")
        if eth:
            line = f"  inverse kurtosis = {eth['inverse_kurtosis']:.4f}  window {eth['window']}"
            if "removed_fraction" in eth:
                line += (f"  removed fraction = {eth['removed_fraction']:.4f}"
                         f"  retained kurtosis = {eth['retained_kurtosis']:.4f}")
            print(line)
        q = r.get("quench")
        if q:
            print(f"  N_mc = {q['N_mc']}  Var[dU] = {q['var_delta_U']:.4e}  dU(DE-ME) = {q['delta_U_DE_ME']:.4e}"
                  f"  dnB(DE-ME) = {q.get('Delta_nB_DE_ME', float('nan')):.4e}")
    hits = sum(1 for c in man.get("cache", []) if c["hit"])
    print(f"cache: {hits} hit(s), {len(man.get('cache', [])) - hits} miss(es)")
    if bad:
        for b in bad:
            print(f"CHECKSUM MISMATCH: {b}")
        return EXIT_CHECKSUM
    return EXIT_OK


def cmd_scan(args) -> int:
    if args.config:
        try:
            s = load_config(args.config).system
        except (OSError, ValueError, ValidationError, yaml.YAMLError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        n_a, n_b, parity, trunc = s.n_a, s.n_b, s.parity, s.truncation
    else:
        n_a, n_b, parity, trunc = args.n_a, args.n_b, args.parity, args.truncation
    grid = np.arange(args.e_min, args.e_max + 1e-9, args.step)
    rows = dimension_scan(n_a, n_b, parity, grid, trunc)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["e_max", "dimension"])
        for e, d in rows:
            w.writerow([e, d])
    finally:
        if args.out:
            out.close()
    if args.target is not None:
        hit = [e for e, d in rows if d == args.target]
        print(f"target {args.target}: " + (f"e_max = {hit[0]}" if hit else "not reached"), file=sys.stderr)
        return EXIT_OK if hit else EXIT_STAGE
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError, ValidationError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True))
    if args.self_check:
        ok = _self_check(args.seed)
        return EXIT_OK if ok else EXIT_STAGE
    return EXIT_OK


def _self_check(seed: int) -> bool:
    """Synthetic checks of the statistics engine."""
    from .eth import kurtosis
    from .spectral import brody_fit, sample_brody, unfold

    rng = np.random.default_rng(seed)
    ok = True
    for beta in (0.0, 0.5, 1.0):
        est = brody_fit(sample_brody(beta, 10_000, rng)).beta
        good = abs(est - beta) <= 0.05
        ok &= good
        print(f"brody mle beta={beta}: {est:.4f} {'ok' if good else 'FAIL'}", file=sys.stderr)
    k = kurtosis(rng.standard_normal(100_000))
    ok &= abs(k - 3) <= 0.1
    print(f"normal kurtosis: {k:.4f}", file=sys.stderr)
    levels = np.cumsum(rng.exponential(size=10_000))
    m = unfold(levels, 0.0, 10).mean_spacing
    ok &= abs(m - 1) <= 0.02
    print(f"poisson unfolded mean spacing: {m:.4f}", file=sys.stderr)
    return bool(ok)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bosemix", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="execute a pipeline config")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--threads", type=int, default=None)
    r.add_argument("--cache-dir")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("report", help="summarize a manifest")
    rp.add_argument("manifest")
    rp.set_defaults(func=cmd_report)

    s = sub.add_parser("scan", help="Hilbert-space dimension versus E_max")
    s.add_argument("--config")
    s.add_argument("--n-a", type=int, default=2)
    s.add_argument("--n-b", type=int, default=2)
    s.add_argument("--parity", choices=("even", "odd", "both"), default="even")
    s.add_argument("--truncation", choices=("total", "component"), default="component")
    s.add_argument("--e-min", type=float, default=2.0)
    s.add_argument("--e-max", type=float, default=25.0)
    s.add_argument("--step", type=float, default=0.5)
    s.add_argument("--target", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_scan)

    v = sub.add_parser("validate", help="check a config against the schema")
    v.add_argument("--config", required=True)
    v.add_argument("--self-check", action="store_true", help="also run synthetic statistics checks")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
