"""Experiment harness: configs in, artifacts out.

A run is described by a flat JSON config (documented keys below, unknown keys
rejected). The harness builds the target, dispatches to the configured
method, resolves reference moments through the per-target oracle (cached on
disk for the long-run ones), and writes all artifacts atomically:

    config.json             resolved config echo (reparses to itself)
    records.jsonl           one record per iteration (simulated seconds only,
                            so streams are bitwise reproducible)
    samples.csv             final ensemble, constrained space, named columns
    reference_moments.json  reference used for the bias metric, if any
    curve.csv               bias-vs-cost columns, directly plottable
    summary.json            final bias^2, call totals, converged flag,
                            acceptance summary, measured flow-fit seconds
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baselines import run_dlmc_pp, run_langevin, run_mh_only, run_svgd
from .diagnostics import (
    ReferenceMoments,
    bias_squared_second_moment,
    ess_gaussian_equivalent,
)
from .errors import ConfigurationError, DataError
from .references import (
    funnel_quadrature_reference,
    gaussian_mixture_reference,
    mala_reference_moments,
    rosenbrock_reference,
)
from .rng import substream
from .sampler import DlmcConfig, RunResult, run_dlmc
from .targets import (
    TargetDensity,
    make_funnel,
    make_gaussian,
    make_gaussian_mixture,
    make_rosenbrock,
    make_sparse_logistic,
)

__all__ = [
    "CONFIG_DEFAULTS",
    "ExperimentConfig",
    "RunArtifacts",
    "load_config",
    "resolve_config",
    "build_target",
    "resolve_reference",
    "load_german_credit",
    "run_experiment",
    "emit_outputs",
]

log = logging.getLogger(__name__)

METHODS = (
    "dlmc",
    "dlmc-no-mh",
    "dlmc-no-precondition",
    "dlmc-pp",
    "svgd",
    "mala",
    "ula",
    "mh-only",
)

TARGETS = ("gaussian", "gaussian-mixture", "rosenbrock", "funnel", "sparse-logistic")

# every legal config key with its default; None means "must be set" only for
# the keys listed in REQUIRED_KEYS
CONFIG_DEFAULTS: dict = {
    "target": None,
    "method": "dlmc",
    "dim": None,
    "seed": 0,
    "workers": 1,
    "output_dir": None,
    "cost_per_likelihood_call": 0.0,
    # sampler settings
    "n_particles": 200,
    "step_size": 0.05,
    "optimizer": "adagrad",
    "burnin_particles": None,
    "burnin_iterations": None,
    "upsample_to": None,
    "max_iterations": 200,
    "convergence_window": 5,
    "convergence_tol": 0.02,
    "bandwidth": None,  # dlmc-pp / svgd kernel width (None: median heuristic)
    # target parameters
    "weights": [1.0 / 3.0, 2.0 / 3.0],  # gaussian-mixture
    "mode_offset": 0.75,  # gaussian-mixture: modes at +-offset * ones
    "component_std": 1.0,  # gaussian-mixture
    "Q": 0.1,  # rosenbrock
    "prior_variance": 6.0,  # rosenbrock
    "noise_sigma": None,  # funnel; null means infinite noise
    "data_seed": 0,  # funnel synthetic observations
    "dataset_path": None,  # sparse-logistic
    # reference moments
    "reference": "auto",  # auto | analytic | quadrature | mala | none | <path>
    "reference_mala_steps": 5_000_000,
    "reference_seed": 909,
    "reference_cache_dir": "reference_cache",
}

REQUIRED_KEYS = ("target", "output_dir")


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved configuration; ``raw`` is the full echoed key/value map."""

    raw: dict

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def method(self) -> str:
        return self.raw["method"]

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    def sampler_config(self) -> DlmcConfig:
        r = self.raw
        burnin = None
        if r["burnin_particles"] is not None and r["burnin_iterations"] is not None:
            burnin = (int(r["burnin_particles"]), int(r["burnin_iterations"]))
        return DlmcConfig(
            step_size=float(r["step_size"]),
            optimizer=r["optimizer"],
            latent_space=(self.method != "dlmc-no-precondition"),
            mh_enabled=(self.method != "dlmc-no-mh"),
            n_particles=int(r["n_particles"]),
            burnin=burnin,
            upsample_to=None if r["upsample_to"] is None else int(r["upsample_to"]),
            convergence_window=int(r["convergence_window"]),
            convergence_tol=float(r["convergence_tol"]),
            max_iterations=int(r["max_iterations"]),
            seed=int(r["seed"]),
            workers=int(r["workers"]),
        )


@dataclass(frozen=True)
class RunArtifacts:
    """Paths of everything a finished (or failed-with-marker) run wrote."""

    output_dir: Path
    config_path: Path
    records_path: Path
    samples_path: Path
    summary_path: Path
    curve_path: Path
    reference_path: Path | None
    summary: dict


def resolve_config(overrides: dict) -> ExperimentConfig:
    """Fill defaults, reject unknown keys, validate enums."""
    unknown = sorted(set(overrides) - set(CONFIG_DEFAULTS))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    raw = dict(CONFIG_DEFAULTS)
    raw.update(overrides)
    for key in REQUIRED_KEYS:
        if raw[key] is None:
            raise ConfigurationError(f"config key {key!r} is required")
    if raw["target"] not in TARGETS:
        raise ConfigurationError(f"unknown target {raw['target']!r}; one of {TARGETS}")
    if raw["method"] not in METHODS:
        raise ConfigurationError(f"unknown method {raw['method']!r}; one of {METHODS}")
    if raw["dim"] is None and raw["target"] != "sparse-logistic":
        raise ConfigurationError("config key 'dim' is required for this target")
    return ExperimentConfig(raw=raw)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError("config file must hold a JSON object")
    return resolve_config(data)


# ---------------------------------------------------------------------------
# dataset ingestion
# ---------------------------------------------------------------------------


def load_german_credit(
    path, expect_canonical: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Read the whitespace-separated numeric credit dataset.

    Each row holds 24 integer features and a label in {1, 2}; label 2 (bad
    credit) maps to 1. Features are standardized per column with a guarded
    divisor. With ``expect_canonical`` the canonical shape is enforced: 1000
    rows and the documented 700 good / 300 bad class split.
    """
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            tokens = line.split()
            if len(tokens) != 25:
                raise DataError(
                    f"{path}:{lineno}: expected 25 whitespace-separated values, "
                    f"got {len(tokens)}"
                )
            try:
                rows.append([float(tok) for tok in tokens])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric token ({exc})") from exc
    data = np.asarray(rows)
    if expect_canonical and data.shape[0] != 1000:
        raise DataError(f"expected 1000 rows, found {data.shape[0]}")
    raw_labels = data[:, -1]
    if not np.all(np.isin(raw_labels, (1.0, 2.0))):
        raise DataError("labels must be 1 (good) or 2 (bad)")
    labels = (raw_labels == 2.0).astype(float)
    if expect_canonical:
        n_bad = int(labels.sum())
        if n_bad != 300:
            raise DataError(
                f"canonical dataset has 300 bad-credit rows, found {n_bad}"
            )
    features = data[:, :-1]
    std = features.std(axis=0)
    guarded = np.maximum(std, 1e-12)
    if np.any(std < 1e-12):
        log.warning("standardization guard hit for %d constant columns", np.sum(std < 1e-12))
    features = (features - features.mean(axis=0)) / guarded
    return features, labels


# ---------------------------------------------------------------------------
# target and reference construction
# ---------------------------------------------------------------------------


def _mixture_means(cfg: ExperimentConfig):
    d = int(cfg["dim"])
    off = float(cfg["mode_offset"])
    return (np.full(d, -off), np.full(d, off))


def funnel_observations(dim: int, noise_sigma: float, data_seed: int) -> np.ndarray:
    """Simulated funnel data at true scale parameter 0 (deterministic)."""
    rng = substream(data_seed, "funnel-observations")
    z = rng.standard_normal(dim - 1)  # exp(0/2) = 1
    if np.isinf(noise_sigma):
        return np.zeros(dim - 1)
    return z + noise_sigma * rng.standard_normal(dim - 1)


def build_target(cfg: ExperimentConfig) -> TargetDensity:
    name = cfg["target"]
    cost = float(cfg["cost_per_likelihood_call"])
    if name == "gaussian":
        d = int(cfg["dim"])
        return make_gaussian(
            np.zeros(d), np.eye(d), likelihood="all", cost_per_likelihood_call=cost
        )
    if name == "gaussian-mixture":
        return make_gaussian_mixture(
            int(cfg["dim"]),
            means=_mixture_means(cfg),
            weights=tuple(cfg["weights"]),
            component_std=float(cfg["component_std"]),
            cost_per_likelihood_call=cost,
        )
    if name == "rosenbrock":
        return make_rosenbrock(
            int(cfg["dim"]),
            Q=float(cfg["Q"]),
            prior_variance=float(cfg["prior_variance"]),
            cost_per_likelihood_call=cost,
        )
    if name == "funnel":
        sigma = cfg["noise_sigma"]
        sigma = np.inf if sigma is None else float(sigma)
        y = funnel_observations(int(cfg["dim"]), sigma, int(cfg["data_seed"]))
        return make_funnel(
            int(cfg["dim"]), noise_sigma=sigma, observed_data=y,
            cost_per_likelihood_call=cost,
        )
    if name == "sparse-logistic":
        if cfg["dataset_path"] is None:
            raise ConfigurationError("sparse-logistic target needs dataset_path")
        features, labels = load_german_credit(cfg["dataset_path"])
        return make_sparse_logistic(features, labels, cost_per_likelihood_call=cost)
    raise ConfigurationError(f"unknown target {name!r}")


def _reference_cache_key(cfg: ExperimentConfig) -> str:
    r = cfg.raw
    parts = [r["target"], str(r["dim"])]
    if r["target"] == "funnel":
        parts += [str(r["noise_sigma"]), str(r["data_seed"])]
    if r["target"] == "sparse-logistic":
        parts += [Path(str(r["dataset_path"])).name]
    parts += [str(r["reference_mala_steps"]), str(r["reference_seed"])]
    return "mala-" + "-".join(p.replace("/", "_") for p in parts)


def reference_to_dict(ref: ReferenceMoments) -> dict:
    out = {
        "second_moment": np.asarray(ref.second_moment).tolist(),
        "provenance": ref.provenance,
        "detail": ref.detail,
    }
    for name in ("mean", "mean_se", "second_moment_se"):
        val = getattr(ref, name)
        out[name] = None if val is None else np.asarray(val).tolist()
    return out


def reference_from_dict(data: dict) -> ReferenceMoments:
    def arr(key):
        return None if data.get(key) is None else np.asarray(data[key], dtype=float)

    return ReferenceMoments(
        second_moment=np.asarray(data["second_moment"], dtype=float),
        provenance=data["provenance"],
        mean=arr("mean"),
        mean_se=arr("mean_se"),
        second_moment_se=arr("second_moment_se"),
        detail=data.get("detail", {}),
    )


def _compute_mala_reference(cfg: ExperimentConfig, target: TargetDensity):
    init_scale = 0.1 if cfg["target"] == "sparse-logistic" else None
    return mala_reference_moments(
        target,
        total_adjusted_steps=int(cfg["reference_mala_steps"]),
        seed=int(cfg["reference_seed"]),
        init_scale=init_scale,
    )


def resolve_reference(
    cfg: ExperimentConfig, target: TargetDensity
) -> ReferenceMoments | None:
    """Reference moments per the config: an oracle name, a file, or auto.

    Auto picks the declared oracle per target: analytic for the mixture and
    the plain Gaussian, pair quadrature for the banana, a cached long
    adjusted-Langevin run for the funnel and the credit regression.
    """
    choice = cfg["reference"]
    if choice == "none":
        return None
    if choice not in ("auto", "analytic", "quadrature", "mala") and choice is not None:
        path = Path(choice)
        if not path.exists():
            raise ConfigurationError(f"reference file {path} not found")
        with open(path) as fh:
            return reference_from_dict(json.load(fh))

    name = cfg["target"]
    if choice == "auto":
        choice = {
            "gaussian": "analytic",
            "gaussian-mixture": "analytic",
            "rosenbrock": "quadrature",
            "funnel": "mala",
            "sparse-logistic": "mala",
        }[name]

    if choice == "analytic":
        if name == "gaussian":
            d = int(cfg["dim"])
            return ReferenceMoments(
                second_moment=np.ones(d), provenance="analytic", mean=np.zeros(d)
            )
        if name == "gaussian-mixture":
            return gaussian_mixture_reference(
                int(cfg["dim"]),
                means=_mixture_means(cfg),
                weights=tuple(cfg["weights"]),
                component_std=float(cfg["component_std"]),
            )
        raise ConfigurationError(f"no analytic reference for target {name!r}")
    if choice == "quadrature":
        if name == "rosenbrock":
            return rosenbrock_reference(
                int(cfg["dim"]),
                Q=float(cfg["Q"]),
                prior_variance=float(cfg["prior_variance"]),
            )
        if name == "funnel":
            sigma = cfg["noise_sigma"]
            sigma = np.inf if sigma is None else float(sigma)
            y = funnel_observations(int(cfg["dim"]), sigma, int(cfg["data_seed"]))
            return funnel_quadrature_reference(int(cfg["dim"]), sigma, observed_data=y)
        raise ConfigurationError(f"no quadrature reference for target {name!r}")
    if choice == "mala":
        cache_dir = Path(cfg["reference_cache_dir"])
        cache_dir.mkdir(parents=True, exist_ok=True)
        cache_path = cache_dir / f"{_reference_cache_key(cfg)}.json"
        if cache_path.exists():
            with open(cache_path) as fh:
                return reference_from_dict(json.load(fh))
        log.info("computing long-MALA reference (%s)", cache_path.name)
        ref = _compute_mala_reference(cfg, target)
        _atomic_write_json(cache_path, reference_to_dict(ref))
        return ref
    raise ConfigurationError(f"unknown reference choice {choice!r}")


# ---------------------------------------------------------------------------
# running and emitting
# ---------------------------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_json(path: Path, obj) -> None:
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _record_to_dict(rec) -> dict:
    return {
        "iteration": rec.iteration,
        "phase": rec.phase,
        "n_particles": rec.n_particles,
        "mean": rec.moments.mean.tolist(),
        "second_moment": rec.moments.second_moment.tolist(),
        "mh_acceptance": rec.mh_acceptance,
        "likelihood_calls": rec.likelihood_calls,
        "gradient_calls": rec.gradient_calls,
        "sequential_seconds": rec.sequential_seconds,
        "parallel_seconds": rec.parallel_seconds,
        "flow_layers": rec.flow_layers,
        "dl_skipped": rec.dl_skipped,
    }


def _curve_rows(result: RunResult, reference: ReferenceMoments | None) -> list[str]:
    header = (
        "iteration,likelihood_calls,gradient_calls,sequential_seconds,"
        "parallel_seconds,b2_mean,b2_max,mh_acceptance"
    )
    rows = [header]
    for rec in result.records:
        if reference is not None:
            b2_mean, b2_max = bias_squared_second_moment(rec.moments, reference)
            b2m, b2x = repr(b2_mean), repr(b2_max)
        else:
            b2m = b2x = "nan"
        acc = "" if rec.mh_acceptance is None else repr(rec.mh_acceptance)
        rows.append(
            f"{rec.iteration},{rec.likelihood_calls},{rec.gradient_calls},"
            f"{repr(rec.sequential_seconds)},{repr(rec.parallel_seconds)},"
            f"{b2m},{b2x},{acc}"
        )
    return rows


def run_experiment(cfg: ExperimentConfig) -> RunArtifacts:
    """Build the target, dispatch the method, write all artifacts."""
    out_dir = cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    probe = out_dir / ".write-probe"
    try:
        probe.write_text("ok")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out_dir} is not writable: {exc}") from exc

    target = build_target(cfg)
    reference = resolve_reference(cfg, target)
    method = cfg.method
    scfg = cfg.sampler_config()

    try:
        if method in ("dlmc", "dlmc-no-mh", "dlmc-no-precondition"):
            result = run_dlmc(target, scfg)
        elif method == "dlmc-pp":
            bw = cfg["bandwidth"]
            result = run_dlmc_pp(target, scfg, None if bw is None else float(bw))
        elif method == "mh-only":
            result = run_mh_only(target, scfg)
        elif method == "svgd":
            bw = cfg["bandwidth"]
            result = run_svgd(target, scfg, None if bw is None else float(bw))
        elif method == "mala":
            result = run_langevin(target, scfg, adjusted=True)
        elif method == "ula":
            result = run_langevin(target, scfg, adjusted=False)
        else:
            raise ConfigurationError(f"unknown method {method!r}")
    except Exception:
        _atomic_write_json(out_dir / "summary.json", {"failed": True, "method": method})
        raise

    return emit_outputs(cfg, target, result, reference)


def emit_outputs(
    cfg: ExperimentConfig,
    target: TargetDensity,
    result: RunResult,
    reference: ReferenceMoments | None,
) -> RunArtifacts:
    out_dir = cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    config_path = out_dir / "config.json"
    _atomic_write_json(config_path, cfg.raw)

    records_path = out_dir / "records.jsonl"
    lines = [json.dumps(_record_to_dict(r), sort_keys=True) for r in result.records]
    _atomic_write(records_path, "".join(line + "\n" for line in lines))

    samples = target.to_constrained(result.ensemble.positions)
    samples_path = out_dir / "samples.csv"
    header = ",".join(target.coord_names)
    body = "\n".join(",".join(repr(v) for v in row) for row in samples)
    _atomic_write(samples_path, header + "\n" + body + "\n")

    reference_path = None
    if reference is not None:
        reference_path = out_dir / "reference_moments.json"
        _atomic_write_json(reference_path, reference_to_dict(reference))

    curve_path = out_dir / "curve.csv"
    _atomic_write(curve_path, "\n".join(_curve_rows(result, reference)) + "\n")

    final_moments = _final_moments(result, target)
    summary: dict = {
        "method": cfg.method,
        "target": cfg["target"],
        "seed": cfg["seed"],
        "converged": result.converged,
        "iterations": len(result.records),
        "n_particles": result.ensemble.n,
        "likelihood_calls": result.ledger.likelihood_calls,
        "gradient_calls": result.ledger.gradient_calls,
        "sequential_seconds": result.ledger.sequential_seconds,
        "parallel_seconds": result.ledger.parallel_seconds,
        "flow_fit_seconds_measured": result.ledger.flow_fit_seconds,
    }
    if reference is not None:
        b2_mean, b2_max = bias_squared_second_moment(final_moments, reference)
        summary["b2_mean"] = b2_mean
        summary["b2_max"] = b2_max
        summary["ess_gaussian_equivalent"] = ess_gaussian_equivalent(b2_mean)
    acc = [r.mh_acceptance for r in result.records if r.mh_acceptance is not None]
    if acc:
        summary["mh_acceptance"] = {
            "first": acc[0],
            "final": acc[-1],
            "mean": float(np.mean(acc)),
            "min": float(np.min(acc)),
            "max": float(np.max(acc)),
        }
    summary_path = out_dir / "summary.json"
    _atomic_write_json(summary_path, summary)

    return RunArtifacts(
        output_dir=out_dir,
        config_path=config_path,
        records_path=records_path,
        samples_path=samples_path,
        summary_path=summary_path,
        curve_path=curve_path,
        reference_path=reference_path,
        summary=summary,
    )


def _final_moments(result: RunResult, target: TargetDensity):
    from .diagnostics import summarize_moments

    return summarize_moments(
        target.to_constrained(result.ensemble.positions),
        iteration=result.records[-1].iteration if result.records else 0,
    )
