"""Experiment configurations and runners behind the command-line interface.

Each experiment writes ``points.csv``, ``metrics.json`` and ``manifest.json``
(plus ``trace.csv`` and tables where they apply) into its output directory.
The manifest holds the fully resolved configuration, so feeding it back as a
config reproduces the run exactly.
"""

from __future__ import annotations

import difflib
import math
import platform
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .core import (GaussianMixtureTarget, ParticleEnsemble, TargetDensity, WeightedSample,
                   initial_ensemble, kernel_from_dict, target_from_dict)
from .dynamics import (FlowConfig, TemperLadder, anneal, auto_anneal, integrate,
                       ratio_fluctuation)
from .io import write_json, write_points_csv, write_table_csv, write_trace_csv, read_points_csv
from .kde import MixtureApprox, self_score

CATALOG = {
    "generate-points": "integrate the particle flow to KDE points of a target",
    "sample": "draw direct or stratified samples from the KDE mixture, with reweighted estimates",
    "transport-qmc": "transport Halton points to the KDE mixture and fit the error rate in K",
    "evaluate": "score a point set: KL on a grid, ratio fluctuation, stationarity, estimates",
    "herding-compare": "KDE points vs iid, kernel herding and SBQ by MMD and quadrature error",
    "smc-demo": "linear-Gaussian SMC filter with outbedding or multinomial resampling",
    "anneal": "tempered flow over an inverse-temperature ladder, with mode trapping diagnostics",
    "theorem-check": "1D checks of KL decrease along the flow and of its derivative identity",
}

# kind -> keys allowed in `options`, with defaults
OPTIONS = {
    "generate-points": {},
    "sample": {"method": "direct", "L": None},
    "transport-qmc": {"transport": "rosenblatt", "rate_Ks": [2 ** p for p in range(6, 13)],
                      "rate_seeds": 3, "include_mcmc": True, "skip": 0},
    "evaluate": {"points": None, "grid_nodes": 201},
    "herding-compare": {"Js": [10, 20, 40, 80], "seeds": 3, "iid_seeds": 10, "n_funcs": 50,
                        "pool": "sample", "box": [[-6.0, 6.0], [-5.0, 3.0]]},
    "smc-demo": {"steps": 10, "resampler": "outbed", "observations": None, "angle": math.pi / 6,
                 "decay": 0.95, "q": 0.3, "r": 0.5, "p0": 1.0, "mmd_threshold": 0.05,
                 "outbed_init": "systematic"},
    "anneal": {"auto": False, "factor_threshold": 10.0, "temp_multiplier": 3.0,
               "max_rounds": 5},
    "theorem-check": {"h_lo": 0.05, "grid": [-12.0, 12.0], "grid_nodes": 4801, "fd_dt": 1e-3},
}

DEFAULTS = {
    "generate-points": dict(target={"family": "gaussian", "mean": [0.0], "covariance": 1.0},
                            h=0.3, J=40),
    "sample": dict(target={"family": "rezende"}, h=0.5, J=23, K=1024,
                   init={"mean": [0.5, 0.5], "scale": 1.0}),
    "transport-qmc": dict(target={"family": "rezende"}, h=0.5, J=23, K=526,
                          init={"mean": [0.5, 0.5], "scale": 1.0}),
    "evaluate": dict(target={"family": "rezende"}, h=0.3, J=40, K=4096,
                     init={"mean": [0.5, 0.5], "scale": 1.0}),
    "herding-compare": dict(target={"family": "benchmark_mixture", "seed": 20}, h=0.5),
    "smc-demo": dict(h=0.3, J=40),
    "anneal": dict(target={"family": "rezende"}, h=0.3, J=40, ladder=[0.05, 0.2, 1.0],
                   init={"mean": [2.0, 2.0], "scale": 1.0}),
    "theorem-check": dict(target={"family": "gaussian", "mean": [0.0], "covariance": 1.0},
                          h=1.0, J=5, init={"mean": [2.0], "scale": 0.5}),
}

FLOW_FIELDS = {f.name for f in fields(FlowConfig)} - {"h", "beta"}


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit status 2)."""


@dataclass
class ExperimentConfig:
    experiment: str
    target: dict | None = None
    kernel: dict = field(default_factory=lambda: {"family": "gaussian"})
    h: float | None = None
    J: int | None = None
    K: int | None = None
    ladder: list | None = None
    seed: int = 0
    flow: dict = field(default_factory=dict)
    init: dict | None = None
    options: dict = field(default_factory=dict)
    out: str = "out"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        """Build from a config mapping or from a previous run's manifest."""
        if "config" in data and "versions" in data:
            data = data["config"]
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s) {unknown}; "
                              f"{_suggest(unknown[0], known)}")
        if "experiment" not in data:
            raise ConfigError("config must name an experiment")
        cfg = cls(**data)
        cfg.resolve()
        return cfg

    def resolve(self) -> None:
        """Fill kind defaults and check every field before anything runs."""
        kind = self.experiment
        if kind not in CATALOG:
            raise ConfigError(f"unknown experiment {kind!r}; {_suggest(kind, CATALOG)}")
        for key, val in DEFAULTS[kind].items():
            if getattr(self, key) is None:
                setattr(self, key, val)
        bad = sorted(set(self.options) - set(OPTIONS[kind]))
        if bad:
            raise ConfigError(f"unknown option(s) {bad} for {kind}; "
                              f"{_suggest(bad[0], OPTIONS[kind])}")
        self.options = {**OPTIONS[kind], **self.options}
        bad = sorted(set(self.flow) - FLOW_FIELDS)
        if bad:
            raise ConfigError(f"unknown flow field(s) {bad}; {_suggest(bad[0], FLOW_FIELDS)}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        try:
            if self.h is not None:
                self.flow_config()
            if self.target is not None:
                self.make_target()
            if self.ladder is not None and kind == "anneal":
                TemperLadder(tuple(self.ladder))
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        for name in ("J", "K"):
            v = getattr(self, name)
            if v is not None and (not isinstance(v, int) or v < 1):
                raise ConfigError(f"{name} must be a positive integer")
        if self.init is not None and not set(self.init) <= {"mean", "scale"}:
            raise ConfigError("init accepts only 'mean' and 'scale'")

    def flow_config(self, **over) -> FlowConfig:
        return FlowConfig(h=float(self.h), **{**self.flow, **over})

    def make_target(self) -> TargetDensity:
        return target_from_dict(self.target)

    def make_kernel(self, dim: int):
        return kernel_from_dict({**self.kernel, "dim": dim})

    def to_dict(self) -> dict:
        return asdict(self)


def _suggest(name: str, choices) -> str:
    close = difflib.get_close_matches(str(name), sorted(choices), n=1, cutoff=0.0)
    return f"did you mean {close[0]!r}?" if close else "no close match"


def list_experiments(as_json: bool = False):
    if as_json:
        return [{"kind": k, "description": v} for k, v in CATALOG.items()]
    width = max(map(len, CATALOG))
    return "\n".join(f"{k:<{width}}  {v}" for k, v in CATALOG.items())


def versions() -> dict:
    import scipy
    return {"kdeflow": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _seeds(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _initial(cfg: ExperimentConfig, dim: int, J: int, rng) -> ParticleEnsemble:
    init = cfg.init or {}
    return initial_ensemble(J, dim, rng, init.get("mean"), float(init.get("scale", 1.0)), cfg.h)


def _flow_metrics(ens, trace, target, kernel, h) -> dict:
    X = ens.positions
    resid = np.linalg.norm(self_score(X, kernel, h) - target.score(X), axis=1).max()
    return {"converged": trace.converged, "message": trace.message, "t_final": trace.times[-1],
            "nu_final": trace.nu[-1], "n_steps": trace.n_steps, "n_rhs": trace.n_rhs,
            "score_residual": float(resid)}


# ---------------------------------------------------------------------------
# Reusable studies
# ---------------------------------------------------------------------------


def reference_mean(target: TargetDensity, half_width: float = 7.0, nodes: int = 1401):
    """``E[x]`` under the target: exact for Gaussian mixtures, else 1D/2D grid quadrature."""
    if isinstance(target, GaussianMixtureTarget):
        return target.mean()
    from .evaluation import Grid
    grid = Grid([(-half_width, half_width)] * target.dim, nodes)
    lp = target.log_density(grid.points) + np.log(grid.weights)
    w = np.exp(lp - lp.max())
    return w @ grid.points / w.sum()


def kde_mixture(target, kernel, J, h, rng, init_mean=None, init_scale=1.0, config=None):
    config = config or FlowConfig(h=h)
    ens, trace = integrate(initial_ensemble(J, target.dim, rng, init_mean, init_scale, h),
                           target, kernel, config)
    return MixtureApprox(ens.positions, kernel, h), trace


def convergence_study(target, kernel, h, Ks, seeds, reference, methods=("qmc", "direct",
                      "stratified", "mcmc"), init_mean=None, transport="rosenblatt",
                      config=None, mcmc_start=None):
    """Errors ``|estimate - reference|`` of ``E[x]`` for each method, seed and ``K``.

    Mixture-based methods use ``J = ceil(sqrt(K))`` KDE points (one flow per
    seed and ``K``, shared by the methods) and self-normalized reweighting.

    Returns:
        ``{method: (len(seeds), len(Ks)) array}`` and the per-cell ``J``.
    """
    from .sampling import (direct_sample, kde_qmc_points, mcmc_baseline,
                           self_normalized_estimate, stratified_sample)

    def f(Y):
        return Y

    out = {m: np.zeros((len(seeds), len(Ks))) for m in methods}
    for a, seed in enumerate(seeds):
        rngs = _seeds(seed, len(Ks))
        for b, K in enumerate(Ks):
            rng = rngs[b]
            J = int(math.ceil(math.sqrt(K)))
            need_mix = any(m != "mcmc" for m in methods)
            mix = kde_mixture(target, kernel, J, h, rng, init_mean, config=config)[0] \
                if need_mix else None
            for m in methods:
                if m == "qmc":
                    est = self_normalized_estimate(f, kde_qmc_points(mix, K, transport=transport),
                                                   mix, target).value
                elif m == "direct":
                    est = self_normalized_estimate(f, direct_sample(mix, K, rng), mix, target).value
                elif m == "stratified":
                    est = self_normalized_estimate(f, stratified_sample(mix, -(-K // J), rng),
                                                   mix, target).value
                elif m == "mcmc":
                    x0 = mcmc_start if mcmc_start is not None else reference
                    est = mcmc_baseline(target, K, rng=rng, x0=x0).points.mean(axis=0)
                else:
                    raise ValueError(f"unknown method {m!r}")
                out[m][a, b] = float(np.linalg.norm(est - reference))
    return out


def herding_study(rho, kernel, h, Js, seeds, iid_seeds, n_funcs=50, rng_seed=0,
                  pool_mode="sample", box=None, config=None):
    """MMD and quadrature error of KDE points, iid draws, herding and SBQ for each J.

    KDE points target ``rho * kappa^h`` from iid ``rho`` initializations, so they
    approximate ``rho`` itself.

    Returns:
        ``(rows, kde_points)``: table rows (method, J, metric, seed, value) and
        the KDE point sets of the first seed keyed by J.
    """
    from .evaluation import (herding_points, mean_embedding, mmd, quadrature_error_suite,
                             sbq_points, sbq_weights, weighted_mmd)

    tar = rho.convolve_gaussian(h)
    emb = mean_embedding(rho, h)
    config = config or FlowConfig(h=h)
    rows, kde_sets = [], {}
    for J in Js:
        children = np.random.SeedSequence([rng_seed, J]).spawn(len(seeds) + iid_seeds + 3)
        streams = [np.random.default_rng(c) for c in children]
        sets = {}
        for i, s in enumerate(seeds):
            rng = streams[i]
            ens, _ = integrate(ParticleEnsemble(rho.sample(rng, J)), tar, kernel, config)
            X = ens.positions
            rows.append(("kde", J, "mmd", s, mmd(X, emb, h)))
            rows.append(("kde_sbqw", J, "mmd", s, weighted_mmd(X, sbq_weights(X, emb, h), emb, h)))
            if i == 0:
                kde_sets[J] = X
                sets["kde"] = WeightedSample(X)
        for i in range(iid_seeds):
            Y = rho.sample(streams[len(seeds) + i], J)
            rows.append(("iid", J, "mmd", i, mmd(Y, emb, h)))
            if i == 0:
                sets["iid"] = WeightedSample(Y)
        off = len(seeds) + iid_seeds
        H = herding_points(emb, h, J, rng=streams[off], mode=pool_mode, box=box)
        P, W = sbq_points(emb, h, J, rng=streams[off + 1], mode=pool_mode, box=box)
        rows.append(("herding", J, "mmd", 0, mmd(H, emb, h)))
        rows.append(("herding_sbqw", J, "mmd", 0, weighted_mmd(H, sbq_weights(H, emb, h), emb, h)))
        rows.append(("sbq", J, "mmd", 0, weighted_mmd(P, W, emb, h)))
        sets["herding"] = WeightedSample(H)
        errs = quadrature_error_suite(list(sets.values()), emb, h, n_funcs, streams[off + 2])
        for name, e in zip(sets, errs):
            rows.append((name, J, "quadrature_error", 0, float(e)))
        # SBQ weights are signed, so their quadrature error is computed directly
        from .evaluation import RkhsFunction
        qrng = np.random.default_rng(np.random.SeedSequence([rng_seed, J, 1]))
        q = [abs(f.expectation(emb) - W @ f(P))
             for f in (RkhsFunction.random(qrng, emb.sample, h) for _ in range(n_funcs))]
        rows.append(("sbq", J, "quadrature_error", 0, float(np.mean(q))))
    return rows, kde_sets


# ---------------------------------------------------------------------------
# Runners
# ---------------------------------------------------------------------------


def _write_common(out: Path, cfg: ExperimentConfig, metrics: dict) -> None:
    write_json(out / "metrics.json", {"seed": cfg.seed, **metrics})
    write_json(out / "manifest.json", {"config": cfg.to_dict(), "seed": cfg.seed,
                                       "versions": versions()})


def run_generate_points(cfg, out):
    target = cfg.make_target()
    kernel = cfg.make_kernel(target.dim)
    rng = _seeds(cfg.seed, 1)[0]
    ens, trace = integrate(_initial(cfg, target.dim, cfg.J, rng), target, kernel,
                           cfg.flow_config(), trace=True)
    write_points_csv(out / "points.csv", ens.positions)
    write_trace_csv(out / "trace.csv", trace)
    m = _flow_metrics(ens, trace, target, kernel, cfg.h)
    m["ratio_factor"] = ratio_fluctuation(ens, target, kernel, cfg.h)[1]
    return m


def run_sample(cfg, out):
    from .sampling import direct_sample, self_normalized_estimate, stratified_sample
    target = cfg.make_target()
    kernel = cfg.make_kernel(target.dim)
    r_flow, r_samp = _seeds(cfg.seed, 2)
    ens, trace = integrate(_initial(cfg, target.dim, cfg.J, r_flow), target, kernel,
                           cfg.flow_config(), trace=True)
    mix = MixtureApprox(ens.positions, kernel, cfg.h)
    method = cfg.options["method"]
    if method == "direct":
        Y = direct_sample(mix, cfg.K, r_samp)
    elif method == "stratified":
        L = cfg.options["L"] or -(-cfg.K // cfg.J)
        Y = stratified_sample(mix, L, r_samp)
    else:
        raise ConfigError(f"unknown sampling method {method!r}")
    est = self_normalized_estimate(lambda y: y, Y, mix, target)
    lw = target.log_density(Y) - mix.log_density(Y)
    w = np.exp(lw - lw.max())
    write_points_csv(out / "points.csv", Y, w / w.sum())
    write_points_csv(out / "kde_points.csv", ens.positions)
    write_trace_csv(out / "trace.csv", trace)
    return {"flow": _flow_metrics(ens, trace, target, kernel, cfg.h), "estimate": est.to_dict(),
            "K": int(Y.shape[0]), "method": method}


def run_transport_qmc(cfg, out):
    from .evaluation import fit_rate
    from .sampling import QmcSpec, kde_qmc_points, self_normalized_estimate
    target = cfg.make_target()
    kernel = cfg.make_kernel(target.dim)
    o = cfg.options
    if len(o["rate_Ks"]) < 4 or int(o["rate_seeds"]) < 1:
        raise ConfigError("transport-qmc needs at least four rate_Ks and one rate seed")
    ens, trace = integrate(_initial(cfg, target.dim, cfg.J, _seeds(cfg.seed, 1)[0]), target,
                           kernel, cfg.flow_config(), trace=True)
    mix = MixtureApprox(ens.positions, kernel, cfg.h)
    qs = kde_qmc_points(mix, cfg.K, QmcSpec(cfg.K, skip=o["skip"]), transport=o["transport"])
    est = self_normalized_estimate(lambda y: y, qs, mix, target)
    lw = target.log_density(qs.points) - mix.log_density(qs.points)
    w = np.exp(lw - lw.max())
    write_points_csv(out / "points.csv", qs.points, w / w.sum())
    write_points_csv(out / "kde_points.csv", ens.positions)
    write_trace_csv(out / "trace.csv", trace)
    ref = reference_mean(target)
    methods = ("qmc", "direct", "stratified") + (("mcmc",) if o["include_mcmc"] else ())
    seeds = list(range(cfg.seed, cfg.seed + int(o["rate_seeds"])))
    errs = convergence_study(target, kernel, cfg.h, o["rate_Ks"], seeds, ref, methods,
                             init_mean=(cfg.init or {}).get("mean"), transport=o["transport"],
                             config=cfg.flow_config())
    rows = [{"method": m, "K": K, "J": int(math.ceil(math.sqrt(K))), "metric": "mean_error",
             "seed": s, "value": float(errs[m][a, b])}
            for m in methods for a, s in enumerate(seeds) for b, K in enumerate(o["rate_Ks"])]
    write_table_csv(out / "rates.csv", rows, ["method", "K", "J", "metric", "seed", "value"])
    slopes = {m: fit_rate(o["rate_Ks"], errs[m])._asdict() for m in methods}
    return {"flow": _flow_metrics(ens, trace, target, kernel, cfg.h), "estimate": est.to_dict(),
            "reference_mean": ref, "error": float(np.linalg.norm(est.value - ref)),
            "slope": slopes["qmc"]["slope"], "slopes": slopes}


def run_evaluate(cfg, out):
    from .evaluation import Grid, kde_kl
    from .sampling import direct_sample, self_normalized_estimate
    target = cfg.make_target()
    kernel = cfg.make_kernel(target.dim)
    r_flow, r_samp = _seeds(cfg.seed, 2)
    m = {}
    if cfg.options["points"]:
        X, _ = read_points_csv(cfg.options["points"])
    else:
        ens, trace = integrate(_initial(cfg, target.dim, cfg.J, r_flow), target, kernel,
                               cfg.flow_config(), trace=True)
        X = ens.positions
        write_trace_csv(out / "trace.csv", trace)
        m["flow"] = _flow_metrics(ens, trace, target, kernel, cfg.h)
    write_points_csv(out / "points.csv", X)
    m["ratio_factor"] = ratio_fluctuation(X, target, kernel, cfg.h)[1]
    m["score_residual"] = float(np.linalg.norm(self_score(X, kernel, cfg.h) - target.score(X),
                                               axis=1).max())
    mix = MixtureApprox(X, kernel, cfg.h)
    est = self_normalized_estimate(lambda y: y, direct_sample(mix, cfg.K, r_samp), mix, target)
    m["estimate"] = est.to_dict()
    if target.dim <= 2:
        lo = np.min(X, axis=0) - 8 * cfg.h - 4
        hi = np.max(X, axis=0) + 8 * cfg.h + 4
        grid = Grid(list(zip(lo, hi)), cfg.options["grid_nodes"])
        m["kl"] = kde_kl(X, target, kernel, cfg.h, grid)
        ref = reference_mean(target)
        m["reference_mean"] = ref
        m["error"] = float(np.linalg.norm(est.value - ref))
    return m


def run_herding_compare(cfg, out):
    from .evaluation import fit_rate
    rho = cfg.make_target()
    if not isinstance(rho, GaussianMixtureTarget):
        raise ConfigError("herding-compare needs a Gaussian mixture target")
    kernel = cfg.make_kernel(rho.dim)
    o = cfg.options
    seeds = list(range(cfg.seed, cfg.seed + int(o["seeds"])))
    rows, sets = herding_study(rho, kernel, cfg.h, o["Js"], seeds, int(o["iid_seeds"]),
                               int(o["n_funcs"]), cfg.seed, o["pool"], o["box"],
                               cfg.flow_config())
    table = [dict(zip(("method", "J", "metric", "seed", "value"), r)) for r in rows]
    write_table_csv(out / "convergence.csv", table, ["method", "J", "metric", "seed", "value"])
    write_points_csv(out / "points.csv", sets[max(sets)])
    summary = {}
    for meth in sorted({r[0] for r in rows}):
        vals = [np.mean([r[4] for r in rows if r[0] == meth and r[1] == J and r[2] == "mmd"])
                for J in o["Js"]]
        summary[meth] = {"mmd": vals}
        if len(o["Js"]) >= 4:
            summary[meth]["mmd_slope"] = fit_rate(o["Js"], vals).slope
    return {"Js": o["Js"], "methods": summary}


def run_smc_demo(cfg, out):
    from .applications import kalman_filter, make_rotation_model, smc_run
    from .io import read_observations
    o = cfg.options
    if o["resampler"] not in ("outbed", "multinomial"):
        raise ConfigError(f"unknown resampler {o['resampler']!r}")
    if o["outbed_init"] not in ("systematic", "warm", "embedding"):
        raise ConfigError(f"unknown outbed_init {o['outbed_init']!r}")
    model = make_rotation_model(o["angle"], o["decay"], o["q"], o["r"], o["p0"])
    r_sim, r_filt = _seeds(cfg.seed, 2)
    if o["observations"]:
        ys = read_observations(o["observations"])
        xs = None
    else:
        xs, ys = model.simulate(int(o["steps"]), r_sim)
    km, kc = kalman_filter(model, ys)
    run = smc_run(model, model.sample_prior, ys, cfg.J, o["resampler"], r_filt,
                  cfg.flow_config(), cfg.make_kernel(2), outbed_init=o["outbed_init"])
    sd = np.sqrt(np.diagonal(kc, axis1=1, axis2=2))
    z = np.abs(run.means - km) / sd
    rows = run.rows()
    for t, row in enumerate(rows):
        row.update({"kalman_mean_1": km[t, 0], "kalman_mean_2": km[t, 1],
                    "kalman_sd_1": sd[t, 0], "kalman_sd_2": sd[t, 1]})
        if xs is not None:
            row.update({"state_1": xs[t, 0], "state_2": xs[t, 1]})
    cols = list(rows[0])
    write_table_csv(out / "smc.csv", [{k: float(v) if k != "step" else v for k, v in r.items()}
                                      for r in rows], cols)
    write_points_csv(out / "points.csv", run.resampled[-1].points)
    return {"max_kalman_z": float(z.max()), "max_mmd": float(np.max(run.mmd)),
            "mmd": run.mmd, "ess": run.ess, "within_3sd": bool(np.all(z <= 3.0)),
            "mmd_below_threshold": bool(np.max(run.mmd) < o["mmd_threshold"])}


def mode_counts(X, modes) -> list[int]:
    d = ((np.asarray(X)[:, None, :] - np.asarray(modes)[None]) ** 2).sum(-1)
    return np.bincount(np.argmin(d, axis=1), minlength=len(modes)).tolist()


def run_anneal(cfg, out):
    target = cfg.make_target()
    kernel = cfg.make_kernel(target.dim)
    o = cfg.options
    init = _initial(cfg, target.dim, cfg.J, _seeds(cfg.seed, 1)[0])
    flow = cfg.flow_config()
    plain, _ = integrate(init, target, kernel, flow)
    f_plain = ratio_fluctuation(plain, target, kernel, cfg.h)[1]
    if o["auto"]:
        res = auto_anneal(init, target, kernel, flow, o["factor_threshold"],
                          o["temp_multiplier"], o["max_rounds"])
        ens, trace, ladder = res.ensemble, res.trace, list(res.ladder.betas)
    else:
        ens, trace = anneal(init, target, kernel, TemperLadder(tuple(cfg.ladder)), flow,
                            trace=True)
        ladder = list(cfg.ladder)
    f_ann = ratio_fluctuation(ens, target, kernel, cfg.h)[1]
    write_points_csv(out / "points.csv", ens.positions)
    write_points_csv(out / "untempered_points.csv", plain.positions)
    write_trace_csv(out / "trace.csv", trace)
    m = {"ladder": ladder, "factor_untempered": f_plain, "factor_annealed": f_ann,
         "converged": trace.converged}
    modes = getattr(target, "modes", None)
    if modes is not None:
        m["modes"] = np.asarray(modes).tolist()
        m["mode_counts_untempered"] = mode_counts(plain.positions, modes)
        m["mode_counts_annealed"] = mode_counts(ens.positions, modes)
    return m


def theorem_check(target, kernel, init, grid, h_lo=0.05, h_hi=1.0, fd_dt=1e-3, config=None):
    """Bisect ``h*`` at t=0, then test KL monotonicity and the derivative identity."""
    from .evaluation import bisect_bandwidth, kde_kl, kl_flow_derivative, kl_slope_fd
    h = bisect_bandwidth(init, target, kernel, grid, h_lo, h_hi)
    config = replace(config, h=h) if config is not None else FlowConfig(h=h)
    ens, trace = integrate(init, target, kernel, config, trace=True)
    kls = np.array([kde_kl(p, target, kernel, h, grid) for p in trace.positions])
    d0 = kl_flow_derivative(init, target, kernel, h, grid)
    fd = kl_slope_fd(init, target, kernel, h, grid, fd_dt)
    return {"h": h, "kl": kls.tolist(), "times": trace.times,
            "max_kl_increase": float(np.max(np.diff(kls))) if kls.size > 1 else 0.0,
            "derivative_t0": d0, "fd_slope_t0": fd,
            "relative_gap": abs(fd - d0) / abs(d0) if d0 != 0 else float(abs(fd)),
            "trace": trace, "ensemble": ens}


def run_theorem_check(cfg, out):
    from .evaluation import Grid
    target = cfg.make_target()
    if target.dim != 1:
        raise ConfigError("theorem-check runs in one dimension")
    kernel = cfg.make_kernel(1)
    o = cfg.options
    init = _initial(cfg, 1, cfg.J, _seeds(cfg.seed, 1)[0])
    grid = Grid([tuple(o["grid"])], o["grid_nodes"])
    # cfg.h is the upper end of the bisection bracket
    res = theorem_check(target, kernel, init, grid, o["h_lo"], cfg.h, o["fd_dt"],
                        cfg.flow_config())
    write_points_csv(out / "points.csv", res["ensemble"].positions)
    write_trace_csv(out / "trace.csv", res["trace"])
    return {k: v for k, v in res.items() if k not in ("trace", "ensemble")}


RUNNERS = {
    "generate-points": run_generate_points,
    "sample": run_sample,
    "transport-qmc": run_transport_qmc,
    "evaluate": run_evaluate,
    "herding-compare": run_herding_compare,
    "smc-demo": run_smc_demo,
    "anneal": run_anneal,
    "theorem-check": run_theorem_check,
}


def run_experiment(cfg: ExperimentConfig, out=None) -> dict:
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = RUNNERS[cfg.experiment](cfg, out)
    _write_common(out, cfg, {"experiment": cfg.experiment, **metrics})
    return metrics
