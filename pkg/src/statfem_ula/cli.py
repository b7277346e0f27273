"""Declarative experiment runner and the binary chain-file format.

Usage::

    statfem-ula sample-prior --config configs/prior-small.toml --out runs/prior
    statfem-ula sample-posterior --config configs/posterior-linear.toml --sampler pmala
    statfem-ula condition-study --config configs/conditioning.toml
    statfem-ula verify-bounds --config configs/bounds.toml
    statfem-ula diagnostics runs/prior

``SFEM_OUT`` overrides ``--out``.

Chain file layout (little-endian)::

    b"SFEM" | u32 version | u64 K | u64 d | 4-byte dtype tag b"f8le"
    | K*d float64 payload (row-major) | u64 n | n bytes of JSON metadata

The metadata holds everything needed to rebuild the :class:`ChainRecord`
(theta seeds, log-target trace, acceptance, config echo) but no wall-clock
time, so reruns with the same seed give byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import struct
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .diagnostics import (
    DenseTarget,
    acf,
    condition_study,
    default_k_grid,
    ess,
    summary_errors,
    verify_kl_bound,
    verify_w2_bound,
)
from .fem_poisson import build_observation, random_observation_points
from .gp_theta import GpSpec
from .potentials import (
    LinearLikelihood,
    PriorPotential,
    SigmoidLikelihood,
    build_preconditioner,
    map_estimate,
    sigmoid,
)
from .problem import StatFEMProblem
from .samplers import (
    ChainRecord,
    DivergenceError,
    GaussianPosterior,
    SamplerConfig,
    auto_ula_stepsize,
    chain_streams,
    exact_marginal_samples,
    generate_data,
    initial_stepsize,
    make_potential,
    run_algorithm1,
)

logger = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "ChainFileError",
    "parse_config",
    "render_config",
    "write_chain",
    "read_chain",
    "run_experiment",
    "ConfigError",
    "Setup",
    "make_config",
    "build_setup",
    "sampler_settings",
    "run_chain",
    "SUMMARY_COLUMNS",
    "main",
]

EXPERIMENTS = ("prior", "posterior_linear", "posterior_nonlinear", "conditioning", "bounds")
SAMPLERS = ("ula", "pula", "mala", "pmala", "pcn", "exact")
SUMMARY_COLUMNS = ("sampler", "mesh_n", "eta", "K", "mean_rel_err", "var_rel_err", "ess", "ess_per_sec", "accept_rate")

MAGIC = b"SFEM"
VERSION = 1
DTYPE_TAG = b"f8le"
_HEADER = struct.Struct("<4sIQQ4s")
_LEN = struct.Struct("<Q")

# Seed-sequence key of the stream that draws observation locations and data;
# chains use keys 0, 1, ... so this never collides with them.
_DATA_STREAM = 2**31 - 1


@dataclass
class ExperimentConfig:
    """One experiment; every field has a default mirroring the reference setup.

    ``n_samples`` is ``K``. ``eta`` is a float or ``"auto"``. ``mesh_levels``
    and ``n_theta`` drive the conditioning study; ``n_instances`` and
    ``k_max`` the bound checks.
    """

    experiment: str = "prior"
    mesh_n: int = 32
    sampler: str = "pula"
    eta: float | str = "auto"
    n_inner: int = 10
    n_samples: int = 10_000
    n_warmup: int = 5_000
    n_chains: int = 1
    seed: int = 0
    gp_sigma: float = 0.1
    gp_length_scale: float = 0.2
    beta_xi: float = 0.05
    f_const: float = 1.0
    sigma_e: float = 0.01
    scale_factor: float = 1.2
    n_obs: int = 100
    d_y: int = 128
    n_reference: int = 10_000
    ess_index: int = 100
    pcn_beta: float = 0.1
    target_accept: float = 0.5
    mesh_levels: list = field(default_factory=lambda: [4, 8, 16, 32])
    n_theta: int = 50
    n_instances: int = 50
    k_max: int = 10_000
    output_dir: str = "runs"

    @property
    def gp(self):
        return GpSpec(sigma=self.gp_sigma, length_scale=self.gp_length_scale)

    @property
    def is_posterior(self):
        return self.experiment in ("posterior_linear", "posterior_nonlinear")


# Per-experiment defaults layered over the dataclass defaults.
EXPERIMENT_DEFAULTS = {
    "prior": dict(n_warmup=5_000),
    "posterior_linear": dict(n_warmup=10_000),
    "posterior_nonlinear": dict(n_samples=20_000, n_warmup=20_000, n_reference=0),
    "conditioning": dict(sampler="exact"),
    "bounds": dict(sampler="exact", mesh_n=4),
}

_COUNTS = ("mesh_n", "n_inner", "n_samples", "n_chains", "n_obs", "d_y", "n_theta", "n_instances", "k_max")
_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


class ConfigError(ValueError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


def _coerce(key, value):
    default = getattr(ExperimentConfig(), key)
    if key == "eta":
        if isinstance(value, str):
            if value != "auto":
                raise ConfigError(key, "must be a positive number or 'auto'")
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, "must be a positive number or 'auto'")
        return float(value)
    if isinstance(default, bool) or isinstance(value, bool):
        raise ConfigError(key, "booleans are not accepted")
    if isinstance(default, int):
        if not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(key, "expected a list of integers")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check ranges and the sampler/experiment combination.

    Raises
    ------
    ConfigError
    """
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError("experiment", f"unknown experiment {cfg.experiment!r}; expected one of {EXPERIMENTS}")
    if cfg.sampler not in SAMPLERS:
        raise ConfigError("sampler", f"unknown sampler {cfg.sampler!r}; expected one of {SAMPLERS}")
    for key in _COUNTS:
        if getattr(cfg, key) < 1:
            raise ConfigError(key, "must be positive")
    for key in ("n_warmup", "n_reference", "ess_index", "seed"):
        if getattr(cfg, key) < 0:
            raise ConfigError(key, "must be non-negative")
    for key in ("gp_sigma", "gp_length_scale", "beta_xi", "sigma_e", "scale_factor"):
        if not getattr(cfg, key) > 0:
            raise ConfigError(key, "must be positive")
    if cfg.eta != "auto" and not cfg.eta > 0:
        raise ConfigError("eta", "must be positive")
    if not 0 < cfg.pcn_beta <= 1:
        raise ConfigError("pcn_beta", "must lie in (0, 1]")
    if not 0 < cfg.target_accept < 1:
        raise ConfigError("target_accept", "must lie in (0, 1)")
    if any(n < 1 for n in cfg.mesh_levels) or not cfg.mesh_levels:
        raise ConfigError("mesh_levels", "must be a nonempty list of positive integers")
    if cfg.experiment == "prior" and cfg.sampler == "pcn":
        raise ConfigError("sampler", "pcn needs a likelihood; use a posterior experiment")
    if cfg.experiment == "posterior_nonlinear" and cfg.sampler == "exact":
        raise ConfigError("sampler", "no exact sampler exists for the nonlinear posterior")
    if cfg.experiment == "conditioning" and cfg.n_theta < 20:
        raise ConfigError("n_theta", "must be at least 20")
    if cfg.experiment == "bounds" and (cfg.mesh_n + 1) ** 2 > 200:
        raise ConfigError("mesh_n", "bound checks are dense; need (mesh_n + 1)^2 <= 200")
    return cfg


def make_config(experiment="prior", **overrides) -> ExperimentConfig:
    """Config with experiment defaults filled in and ``overrides`` applied."""
    values = dict(EXPERIMENT_DEFAULTS.get(experiment, {}))
    if experiment == "posterior_nonlinear" and overrides.get("sampler") == "ula":
        values["n_inner"] = 50
    values.update(overrides)
    for key in values:
        if key not in _FIELDS:
            raise ConfigError(key, "unknown key")
    cfg = ExperimentConfig(experiment=experiment)
    for key, value in values.items():
        setattr(cfg, key, _coerce(key, value))
    return validate(cfg)


def parse_config(text: str, experiment: str | None = None) -> ExperimentConfig:
    """Parse a flat TOML document.

    Top-level ``key = value`` lines apply to the experiment named by
    ``experiment``; a ``[<experiment>]`` section adds (and overrides) keys for
    that experiment, while sections for other experiments are ignored.

    Raises
    ------
    ConfigError
        Unknown key, wrong type, non-positive count or an invalid combination.
    """
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError("<document>", str(err)) from err
    exp = doc.pop("experiment", experiment)
    if exp is None:
        exp = "prior"
    if exp not in EXPERIMENTS:
        raise ConfigError("experiment", f"unknown experiment {exp!r}; expected one of {EXPERIMENTS}")
    values = {}
    sections = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            if key not in EXPERIMENTS:
                raise ConfigError(key, "unknown section")
            sections[key] = value
        else:
            values[key] = value
    values.update(sections.get(exp, {}))
    if "experiment" in values:
        raise ConfigError("experiment", "must be set at top level")
    return make_config(exp, **values)


def _toml_value(v):
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return str(v)


def render_config(cfg: ExperimentConfig) -> str:
    """Inverse of :func:`parse_config` (every field written explicitly)."""
    lines = [f"experiment = {_toml_value(cfg.experiment)}"]
    for f in dataclasses.fields(cfg):
        if f.name != "experiment":
            lines.append(f"{f.name} = {_toml_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# chain files


class ChainFileError(ValueError):
    """Malformed, truncated or incompatible chain file."""


def write_chain(path, record: ChainRecord, metadata: dict | None = None):
    """Serialize ``record`` (plus extra ``metadata``) to ``path``."""
    samples = np.ascontiguousarray(record.samples, dtype="<f8")
    K, d = samples.shape
    meta = dict(metadata or {})
    meta.update(record.metadata)
    meta["theta_seeds"] = [int(s) for s in record.theta_seeds]
    meta["log_target"] = [float(v) for v in record.log_target]
    meta["accept_rate"] = record.accept_rate
    meta["eta"] = record.eta
    meta["eta_trace"] = [float(v) for v in record.eta_trace]
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, K, d, DTYPE_TAG))
        fh.write(samples.tobytes(order="C"))
        fh.write(_LEN.pack(len(blob)))
        fh.write(blob)


def read_chain(path) -> ChainRecord:
    """Load a chain file written by :func:`write_chain`.

    Raises
    ------
    ChainFileError
        Bad magic, unsupported version or dtype, or truncated content.
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ChainFileError("truncated header")
    magic, version, K, d, tag = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ChainFileError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ChainFileError(f"unsupported version {version}")
    if tag != DTYPE_TAG:
        raise ChainFileError(f"unsupported dtype tag {tag!r}")
    off = _HEADER.size
    n_payload = K * d * 8
    if len(data) < off + n_payload + _LEN.size:
        raise ChainFileError("truncated payload")
    samples = np.frombuffer(data, dtype="<f8", count=K * d, offset=off).reshape(K, d).astype(np.float64)
    off += n_payload
    (n_meta,) = _LEN.unpack_from(data, off)
    off += _LEN.size
    if len(data) != off + n_meta:
        raise ChainFileError("truncated metadata" if len(data) < off + n_meta else "trailing bytes after metadata")
    try:
        meta = json.loads(data[off:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ChainFileError(f"metadata does not parse: {err}") from err
    seeds = np.array(meta.pop("theta_seeds"), dtype=np.uint64)
    log_target = np.array(meta.pop("log_target"), dtype=np.float64)
    accept = meta.pop("accept_rate")
    eta = meta.pop("eta")
    trace = np.array(meta.pop("eta_trace"), dtype=np.float64)
    return ChainRecord(samples, seeds, log_target, accept, eta, trace, meta)


# ---------------------------------------------------------------------------
# experiments


@dataclass
class Setup:
    """Problem, likelihood, MAP point and exact reference draws shared by all chains."""

    problem: StatFEMProblem
    likelihood: object = None
    u_star: np.ndarray | None = None
    reference: np.ndarray | None = None


def _data_rng(cfg):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed, spawn_key=(_DATA_STREAM,))))


def build_setup(cfg: ExperimentConfig) -> Setup:
    """Problem, synthetic data, MAP point and exact reference draws for ``cfg``."""
    problem = StatFEMProblem(cfg.mesh_n, gp=cfg.gp, f_const=cfg.f_const, beta_xi=cfg.beta_xi)
    rng = _data_rng(cfg)
    setup = Setup(problem)
    if cfg.is_posterior:
        obs = build_observation(problem.mesh, random_observation_points(cfg.d_y, rng), cfg.sigma_e)
        if cfg.experiment == "posterior_linear":
            y = generate_data(problem, obs, cfg.n_obs, cfg.scale_factor, rng)
            setup.likelihood = LinearLikelihood(obs, y)
        else:
            y = generate_data(problem, obs, cfg.n_obs, cfg.scale_factor, rng, sensor=sigmoid)
            setup.likelihood = SigmoidLikelihood(obs, y)
            prior = PriorPotential(problem.mean_system)
            setup.u_star = map_estimate(prior, setup.likelihood, problem.mean_system.mean)
    if cfg.n_reference > 0 and cfg.experiment != "posterior_nonlinear":
        setup.reference = exact_marginal_samples(problem, cfg.n_reference, rng, setup.likelihood)
    return setup


def _preconditioner_kind(cfg):
    if cfg.sampler in ("ula", "mala", "pcn"):
        return "identity"
    return {
        "prior": "prior_mean_theta",
        "posterior_linear": "posterior_mean_theta",
        "posterior_nonlinear": "gauss_newton_map",
    }[cfg.experiment]


def sampler_settings(cfg: ExperimentConfig, setup: Setup):
    """``(SamplerConfig, Preconditioner)`` for a sampling experiment.

    ``eta = "auto"`` resolves to ``d^{-1/3}`` for pULA, to a stable
    ``m / (4 L^2)``-based value for ULA and to ``d^{-1/3} / lambda_max`` of the
    preconditioned Hessian as the MH warmup starting point.
    """
    if cfg.sampler == "exact":
        return None, None
    problem = setup.problem
    system = problem.mean_system
    kind = _preconditioner_kind(cfg)
    precond = build_preconditioner(kind, system, setup.likelihood, setup.u_star)
    kernel = {"ula": "ula", "pula": "ula", "mala": "mala", "pmala": "mala", "pcn": "pcn"}[cfg.sampler]
    eta = cfg.eta
    if eta == "auto":
        if cfg.sampler == "pula":
            eta = problem.dim ** (-1.0 / 3.0)
        elif cfg.sampler == "ula":
            u0 = setup.u_star if setup.u_star is not None else system.mean
            eta = auto_ula_stepsize(system, setup.likelihood, u0)
        elif kernel == "mala":
            eta = initial_stepsize(make_potential(system, setup.likelihood), precond, setup.u_star)
        else:
            eta = 1.0
    # pMALA on the prior uses the exact per-theta Hessian as preconditioner
    refactor = cfg.sampler == "pmala" and cfg.experiment == "prior"
    scfg = SamplerConfig(
        eta=float(eta),
        n_inner=cfg.n_inner,
        preconditioner=kind,
        kernel=kernel,
        target_accept=cfg.target_accept,
        pcn_beta=cfg.pcn_beta,
        n_warmup=cfg.n_warmup if kernel != "ula" else 0,
        refactor_per_theta=refactor,
    )
    return scfg, precond


def _initial_state(cfg, setup, chain):
    """Exact draw from the target (linear cases) or the MAP point (nonlinear)."""
    if setup.u_star is not None:
        return setup.u_star.copy()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed, spawn_key=(chain, 1))))
    return exact_marginal_samples(setup.problem, 1, rng, setup.likelihood)[0]


def run_chain(cfg: ExperimentConfig, setup: Setup, chain=0, settings=None):
    """Run chain ``chain`` of a sampling experiment; returns ``(ChainRecord, seconds)``.

    ``settings`` is the output of :func:`sampler_settings`, computed when omitted.
    """
    scfg, precond = sampler_settings(cfg, setup) if settings is None else settings
    t0 = time.perf_counter()
    if cfg.sampler == "exact":
        theta_rng, noise = chain_streams(cfg.seed, chain)
        problem = setup.problem
        samples = np.empty((cfg.n_samples, problem.dim))
        seeds = np.empty(cfg.n_samples, dtype=np.uint64)
        log_target = np.empty(cfg.n_samples)
        for k in range(cfg.n_samples):
            seeds[k] = theta_rng.integers(0, 2**63)
            theta = problem.draw_theta(np.random.Generator(np.random.Philox(int(seeds[k]))))
            system = problem.system(theta)
            samples[k] = GaussianPosterior(system, setup.likelihood).sample(noise)
            log_target[k] = make_potential(system, setup.likelihood).log_target(samples[k])
        record = ChainRecord(samples, seeds, log_target, None, None)
    else:
        u0 = _initial_state(cfg, setup, chain)
        record = run_algorithm1(setup.problem, scfg, cfg.n_samples, u0, seed=cfg.seed, chain=chain,
                                likelihood=setup.likelihood, precond=precond)
    return record, time.perf_counter() - t0


def _chain_metadata(cfg, chain):
    return {"config": dataclasses.asdict(cfg), "chain": chain, "seed": cfg.seed, "format": "statfem-ula chain"}


def _summary_row(cfg, record, seconds, reference):
    idx = min(cfg.ess_index, record.dim - 1)
    if reference is not None:
        mean_err, var_err = summary_errors(record.samples, reference)
    else:
        mean_err = var_err = float("nan")
    try:
        e = ess(record.samples[:, idx]) if record.n_samples >= 100 else float("nan")
    except ValueError:
        e = float("nan")
    return dict(
        sampler=cfg.sampler, mesh_n=cfg.mesh_n,
        eta=record.eta if record.eta is not None else float("nan"),
        K=record.n_samples, mean_rel_err=mean_err, var_rel_err=var_err,
        ess=e, ess_per_sec=e / seconds if seconds > 0 else float("nan"),
        accept_rate=record.accept_rate if record.accept_rate is not None else float("nan"),
    )


def _write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})


def _run_sampling(cfg, out, threads):
    setup = build_setup(cfg)
    scfg, precond = sampler_settings(cfg, setup)
    logger.info("%s/%s: d=%d eta=%s", cfg.experiment, cfg.sampler, setup.problem.dim, scfg and scfg.eta)

    def work(chain):
        try:
            return chain, run_chain(cfg, setup, chain, (scfg, precond)), None
        except DivergenceError as err:
            return chain, None, err

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(work, range(cfg.n_chains)))

    failures = [(c, err) for c, _, err in results if err is not None]
    rows, timing = [], {}
    for chain, res, err in results:
        if err is not None:
            continue
        record, seconds = res
        write_chain(out / f"chain_{chain:03d}.sfem", record, _chain_metadata(cfg, chain))
        rows.append(_summary_row(cfg, record, seconds, setup.reference))
        timing[f"chain_{chain:03d}"] = seconds
    _write_csv(out / "summary.csv", rows, SUMMARY_COLUMNS)
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True))
    if failures:
        diag = [dict(chain=c, outer=e.outer, inner=e.inner, message=str(e)) for c, e in failures]
        (out / "divergence.json").write_text(json.dumps(diag, indent=2))
        logger.error("%d chain(s) diverged; see %s", len(failures), out / "divergence.json")
        return 1
    return 0


def _run_conditioning(cfg, out):
    rows = condition_study(cfg.mesh_levels, cfg.gp, cfg.n_theta, rng=_data_rng(cfg),
                           f_const=cfg.f_const, beta_xi=cfg.beta_xi)
    _write_csv(out / "conditioning.csv", rows, list(rows[0]))
    return 0


BOUND_COLUMNS = ("instance", "mesh_n", "d", "eta_kl", "eta_w2", "m", "L", "kappa",
                 "kl_violations", "w2_violations", "kl_max_ratio", "w2_max_ratio")


def bound_instances(n_instances, rng, gp=None, max_mesh=9, k_max=10_000, beta_xi=0.05):
    """Random ``(theta, eta)`` instances on meshes with ``d <= 100``.

    Yields ``(mesh_n, DenseTarget, eta_kl, eta_w2, k_grid)``; each stepsize is
    a uniform fraction of its admissible maximum.
    """
    gp = GpSpec() if gp is None else gp
    for _ in range(n_instances):
        n = int(rng.integers(2, max_mesh + 1))
        problem = StatFEMProblem(n, gp=gp, beta_xi=beta_xi)
        target = DenseTarget.from_system(problem.system(problem.draw_theta(rng)))
        lam = target.eigenvalues
        m, L = lam[0], lam[-1]
        eta_kl = rng.uniform(0.05, 1.0) * m / (4 * L * L)
        eta_w2 = rng.uniform(0.05, 1.0) * 2 / (m + L)
        k_grid = default_k_grid(int(rng.integers(10, k_max + 1)), 30)
        yield n, target, eta_kl, eta_w2, k_grid


def _run_bounds(cfg, out):
    rows = []
    rng = _data_rng(cfg)
    for i, (n, target, eta_kl, eta_w2, ks) in enumerate(
            bound_instances(cfg.n_instances, rng, cfg.gp, cfg.mesh_n, cfg.k_max, cfg.beta_xi)):
        kl = verify_kl_bound(target, eta_kl, ks)
        w2 = verify_w2_bound(target, eta_w2, ks)
        rows.append(dict(
            instance=i, mesh_n=n, d=target.dim, eta_kl=eta_kl, eta_w2=eta_w2, m=kl.m, L=kl.L, kappa=kl.kappa,
            kl_violations=kl.violations, w2_violations=w2.violations,
            kl_max_ratio=float(np.max(kl.measured / kl.bound)), w2_max_ratio=float(np.max(w2.measured / w2.bound)),
        ))
    _write_csv(out / "bounds.csv", rows, BOUND_COLUMNS)
    n_bad = sum(r["kl_violations"] + r["w2_violations"] for r in rows)
    logger.info("bound checks: %d instances, %d violations", len(rows), n_bad)
    return 0


def run_experiment(cfg: ExperimentConfig, out=None, threads=1) -> int:
    """Run ``cfg`` and write its outputs under ``out``; returns the exit status.

    Sampling experiments write ``chain_XXX.sfem`` per chain, ``summary.csv``
    and ``timing.json``; a divergence additionally writes
    ``divergence.json`` and returns 1.
    """
    out = Path(out if out is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(render_config(cfg))
    if cfg.experiment == "conditioning":
        return _run_conditioning(cfg, out)
    if cfg.experiment == "bounds":
        return _run_bounds(cfg, out)
    return _run_sampling(cfg, out, threads)


def chain_diagnostics(path, max_lag=50, index=100):
    """ESS / ACF summary for every chain file in ``path`` (file or directory)."""
    path = Path(path)
    files = sorted(path.glob("*.sfem")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"no chain files in {path}")
    rows = []
    for f in files:
        rec = read_chain(f)
        idx = min(index, rec.dim - 1)
        x = rec.samples[:, idx]
        lag = min(max_lag, rec.n_samples - 1)
        rows.append(dict(file=f.name, K=rec.n_samples, d=rec.dim, index=idx,
                         ess=ess(x), acf_lag1=float(acf(x, lag)[1]) if lag >= 1 else float("nan"),
                         accept_rate=rec.accept_rate, eta=rec.eta))
    return rows


# ---------------------------------------------------------------------------
# command line

_SUBCOMMAND_EXPERIMENT = {
    "sample-prior": "prior",
    "sample-posterior": "posterior_linear",
    "condition-study": "conditioning",
    "verify-bounds": "bounds",
}


def _build_parser():
    parser = argparse.ArgumentParser(prog="statfem-ula", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _SUBCOMMAND_EXPERIMENT:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path)
        p.add_argument("--out", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--sampler", choices=SAMPLERS)
        p.add_argument("--eta", type=str, help="stepsize or 'auto'")
        p.add_argument("--mesh-n", type=int)
        if name == "sample-posterior":
            p.add_argument("--nonlinear", action="store_true", help="sigmoid sensor model")
    p = sub.add_parser("diagnostics")
    p.add_argument("path", type=Path, help="chain file or run directory")
    p.add_argument("--out", type=Path)
    p.add_argument("--max-lag", type=int, default=50)
    return parser


def _config_from_args(args):
    experiment = _SUBCOMMAND_EXPERIMENT[args.command]
    if getattr(args, "nonlinear", False):
        experiment = "posterior_nonlinear"
    text = args.config.read_text() if args.config else ""
    base = parse_config(text, experiment)
    if args.config and args.command == "sample-posterior" and base.is_posterior and not args.nonlinear:
        experiment = base.experiment
    if base.experiment != experiment:
        raise ConfigError("experiment", f"config is for {base.experiment!r}, command expects {experiment!r}")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.sampler is not None:
        overrides["sampler"] = args.sampler
    if args.eta is not None:
        try:
            overrides["eta"] = args.eta if args.eta == "auto" else float(args.eta)
        except ValueError:
            raise ConfigError("eta", f"expected a number or 'auto', got {args.eta!r}") from None
    if args.mesh_n is not None:
        overrides["mesh_n"] = args.mesh_n
    if not overrides:
        return base
    values = dataclasses.asdict(base)
    values.pop("experiment")
    values.update(overrides)
    if overrides.get("sampler") == "ula" and experiment == "posterior_nonlinear" and "n_inner" not in text:
        values["n_inner"] = 50
    return make_config(experiment, **values)


def _output_dir(args, default):
    env = os.environ.get("SFEM_OUT")
    if env:
        return Path(env)
    return args.out if args.out is not None else Path(default)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "diagnostics":
            rows = chain_diagnostics(args.path, args.max_lag)
            out = _output_dir(args, args.path if args.path.is_dir() else args.path.parent)
            out.mkdir(parents=True, exist_ok=True)
            _write_csv(out / "diagnostics.csv", rows, list(rows[0]))
            for r in rows:
                print(f"{r['file']}: K={r['K']} ess={r['ess']:.1f} acf1={r['acf_lag1']:.3f}")
            return 0
        cfg = _config_from_args(args)
        out = _output_dir(args, cfg.output_dir)
        status = run_experiment(cfg, out, args.threads)
        print(f"{cfg.experiment}: wrote {out} (exit {status})")
        return status
    except (ConfigError, ChainFileError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
