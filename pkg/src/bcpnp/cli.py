"""Config-driven experiment runner.

One YAML file declares a problem (synthetic or file-based ground truth),
per-block denoisers, the solver modes to compare, optional convergence
checks, and an output directory.  `run` writes per-mode iterate traces
(CSV), reconstructed images (PGM + full-precision CSV), a metrics table
(relative RMSE of image and operator parameters, SSIM), and a JSON report.
`validate` reports config problems without executing the solver.

Exit codes: 0 success, 1 config error, 2 runtime failure, 3 a strict
convergence check failed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import yaml

from . import fileio
from .blocks import BlockSchedule, BlockVector, complex_to_pairs, pairs_to_complex
from .denoisers import (
    ErrorSchedule,
    GaussianPrior,
    GmmPrior,
    IdentityDenoiser,
    InexactDenoiser,
    MmseDenoiser,
    SoftThresholdDenoiser,
    TvProxDenoiser,
    UnsupportedPriorError,
)
from .forward import (
    BlindConvolutionModel,
    ConvolutionFidelity,
    LinearFidelity,
    LinearModel,
    MultiCoilFidelity,
    MultiCoilModel,
    synthesize,
)
from .solver import (
    MODES,
    NonFiniteIterateError,
    SolverConfig,
    resolve_gamma,
    solve,
)
from .theory import (
    ImplicitObjective,
    TheoryConstants,
    check_descent,
    check_theorem1,
    check_theorem2,
    reference_f_star,
    rmse,
    ssim,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_CHECK_FAILED = 3

_MODE_ALIASES = {"pnp": "pnp-ista"}
DENOISER_KINDS = (
    "identity",
    "soft-threshold",
    "tv-prox",
    "gaussian-mmse",
    "gmm-mmse",
    "inexact",
)


class ConfigError(ValueError):
    """Unusable experiment configuration; message names the field."""


# ---------------------------------------------------------------------------
# synthetic sources
# ---------------------------------------------------------------------------


def synthetic_image(shape, kind="blobs", seed=0):
    """Seeded test image in [0, 1]: a ramp with random smooth bumps."""
    H, W = shape
    if kind != "blobs":
        raise ConfigError(f"unknown synthetic image kind {kind!r}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    img = 0.15 + 0.2 * xx + 0.1 * yy
    for _ in range(6):
        cy, cx = rng.uniform(0.1, 0.9, 2)
        spread = rng.uniform(0.04, 0.18)
        amp = rng.uniform(0.25, 0.7)
        img = img + amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * spread**2))
    img -= img.min()
    img /= img.max()
    return img


def gaussian_kernel(shape, width):
    """Centered normalized Gaussian blur kernel."""
    h, w = shape
    yy, xx = np.mgrid[-(h // 2) : h // 2 + 1, -(w // 2) : w // 2 + 1]
    k = np.exp(-(xx**2 + yy**2) / (2 * float(width) ** 2))
    return k / k.sum()


def uniform_kernel(shape):
    h, w = shape
    return np.full((h, w), 1.0 / (h * w))


def delta_kernel(shape):
    k = np.zeros(shape)
    k[shape[0] // 2, shape[1] // 2] = 1.0
    return k


def cartesian_rows_mask(shape, accel=2, center_rows=4):
    """1-D row undersampling: every accel-th row plus a fully sampled band."""
    H, W = shape
    mask = np.zeros((H, W))
    mask[::accel, :] = 1.0
    lo = max(0, H // 2 - center_rows // 2)
    mask[lo : lo + center_rows, :] = 1.0
    return mask


def smooth_coil_maps(shape, num_coils, seed=0):
    """Low-frequency complex sensitivity profiles, roughly unit magnitude."""
    rng = np.random.default_rng(seed)
    H, W = shape
    maps = np.empty((num_coils, H, W), dtype=np.complex128)
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    for i in range(num_coils):
        cy, cx = rng.uniform(-0.2, 1.2, 2)
        mag = 0.6 + 0.8 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 0.8)
        phase = rng.uniform(-np.pi, np.pi) + 2.0 * (rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy)
        maps[i] = mag * np.exp(1j * phase)
    return maps


# ---------------------------------------------------------------------------
# config loading and validation
# ---------------------------------------------------------------------------


def load_config(path):
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"config parse error: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a mapping")
    return cfg


def _get(cfg, section, field, default=None, required=False):
    sec = cfg.get(section)
    if not isinstance(sec, dict):
        if required:
            raise ConfigError(f"missing section {section!r}")
        return default
    if field not in sec:
        if required:
            raise ConfigError(f"missing field {section}.{field}")
        return default
    return sec[field]


def validate(config_path):
    """Collect configuration diagnostics without executing the solver."""
    diagnostics = []
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        return [str(exc)]

    kind = _get(cfg, "problem", "kind")
    if kind not in ("blind-deconvolution", "multi-coil", "generic-linear"):
        diagnostics.append(f"problem.kind must name a supported model, got {kind!r}")
        return diagnostics

    if kind == "blind-deconvolution":
        ishape = _get(cfg, "problem", "image_shape", [64, 64])
        kshape = _get(cfg, "problem", "kernel_shape", [9, 9])
        if len(ishape) != 2 or len(kshape) != 2:
            diagnostics.append("image_shape and kernel_shape must be 2-D")
        else:
            if kshape[0] % 2 == 0 or kshape[1] % 2 == 0:
                diagnostics.append("kernel dimensions must be odd")
            if kshape[0] > ishape[0] or kshape[1] > ishape[1]:
                diagnostics.append("kernel must not exceed the image")

    modes = _get(cfg, "solver", "modes", ["bc-pnp"])
    if not modes:
        diagnostics.append("solver.modes must not be empty")
    canonical = []
    for m in modes:
        cm = _MODE_ALIASES.get(m, m)
        if cm not in MODES:
            diagnostics.append(f"unknown solver mode {m!r}")
        canonical.append(cm)
    if len(set(canonical)) != len(canonical):
        diagnostics.append("solver.modes contains duplicate modes after aliasing")

    sched = _get(cfg, "solver", "schedule", {"kind": "sequential"})
    if sched.get("kind", "sequential") not in ("sequential", "epoch-shuffle", "random-iid"):
        diagnostics.append(f"unknown schedule kind {sched.get('kind')!r}")

    gamma = _get(cfg, "solver", "gamma", "auto")
    if gamma != "auto" and (not isinstance(gamma, (int, float)) or gamma <= 0):
        diagnostics.append("solver.gamma must be 'auto' or a positive number")

    for name, spec in _denoiser_specs(cfg).items():
        dk = spec.get("kind")
        if dk not in DENOISER_KINDS:
            diagnostics.append(f"unknown denoiser kind {dk!r} for block {name!r}")
        if dk == "tv-prox" and kind != "blind-deconvolution":
            diagnostics.append("tv-prox denoiser needs a real 2-D image block")

    if diagnostics:
        return diagnostics

    # step-rule check needs the certified constants; builds the problem but
    # never iterates
    theory = cfg.get("theory_checks", {}) or {}
    if theory.get("enabled") and gamma != "auto":
        try:
            problem = build_problem(cfg)
            solver_cfg = _solver_config(cfg, canonical[0])
            _, lip = resolve_gamma(problem.fidelity, problem.x0_for(canonical[0]), solver_cfg)
            if lip.l_max > 0 and gamma >= 1.0 / lip.l_max:
                diagnostics.append(
                    "step size violates the convergence step rule "
                    f"(gamma={gamma} >= 1/L_max={1.0 / lip.l_max:.6g})"
                )
        except ConfigError as exc:
            diagnostics.append(str(exc))
    return diagnostics


def _denoiser_specs(cfg):
    dens = cfg.get("denoisers", {}) or {}
    if "blocks" in dens:
        return {i + 1: spec for i, spec in enumerate(dens["blocks"])}
    out = {}
    if "image" in dens:
        out["image"] = dens["image"]
    if "theta" in dens:
        out["theta"] = dens["theta"]
    return out


# ---------------------------------------------------------------------------
# problem construction
# ---------------------------------------------------------------------------


def _load_image_source(spec, shape):
    if isinstance(spec, dict) and "path" in spec:
        path = spec["path"]
        img = (
            fileio.read_pgm(path)
            if str(path).endswith(".pgm")
            else fileio.load_matrix_csv(path)
        )
        if img.shape != tuple(shape):
            raise ConfigError(f"image file shape {img.shape} != {tuple(shape)}")
        return img
    spec = spec or {}
    return synthetic_image(shape, spec.get("synthetic", "blobs"), spec.get("seed", 0))


def _load_kernel_source(spec, shape):
    if isinstance(spec, dict) and "path" in spec:
        k = fileio.load_matrix_csv(spec["path"])
        if k.shape != tuple(shape):
            raise ConfigError(f"kernel file shape {k.shape} != {tuple(shape)}")
        return k
    spec = spec or {}
    kind = spec.get("synthetic", "gaussian")
    if kind == "gaussian":
        return gaussian_kernel(shape, spec.get("width", 1.5))
    if kind == "uniform":
        return uniform_kernel(shape)
    if kind == "delta":
        return delta_kernel(shape)
    raise ConfigError(f"unknown synthetic kernel kind {kind!r}")


def _theta_init(spec, theta_true, shape, problem_seed):
    spec = spec or {}
    if "path" in spec:
        return fileio.load_matrix_csv(spec["path"]).ravel()
    if "synthetic" in spec or "width" in spec:
        return _load_kernel_source({"synthetic": spec.get("synthetic", "gaussian"),
                                    "width": spec.get("width", 2.0)}, shape).ravel()
    if "perturb" in spec:
        rng = np.random.default_rng(spec.get("seed", problem_seed + 1))
        scale = float(spec["perturb"]) * np.linalg.norm(theta_true)
        noise = rng.standard_normal(theta_true.size)
        return theta_true + scale * noise / np.linalg.norm(noise)
    return theta_true.copy()


def balanced_block_scale(model, fidelity, theta0):
    """Unit rescaling (v/s, s*theta) equalizing the two block curvatures.

    The bilinear symmetry A(theta) v = A(s theta)(v/s) leaves measurements
    and per-block relative errors unchanged, while the spectral peaks of
    the initialization determine a scale at which both blocks see
    comparable gradient smoothness; a single step size then drives both.
    """
    v0 = fidelity.adjoint_init(theta0).reshape(model.image_shape)
    peak_v = float(np.abs(np.fft.fft2(v0)).max())
    peak_t = float(np.abs(np.fft.fft2(model._embed(theta0))).max())
    if peak_v <= 0 or peak_t <= 0:
        return 1.0
    return float(np.sqrt(peak_v / peak_t))


def build_problem(cfg, seed_override=None):
    """Instantiate the model, measurements, truth, and per-mode inits."""
    kind = _get(cfg, "problem", "kind", required=True)
    seed = _get(cfg, "problem", "seed", 0)
    if seed_override is not None:
        seed = seed_override
    noise = float(_get(cfg, "problem", "noise_sigma", 0.0))

    if kind == "blind-deconvolution":
        return _build_deconvolution(cfg, seed, noise)
    if kind == "multi-coil":
        return _build_multicoil(cfg, seed, noise)
    if kind == "generic-linear":
        return _build_linear(cfg, seed, noise)
    raise ConfigError(f"problem.kind must name a supported model, got {kind!r}")


def _build_deconvolution(cfg, seed, noise):
    ishape = tuple(_get(cfg, "problem", "image_shape", [64, 64]))
    kshape = tuple(_get(cfg, "problem", "kernel_shape", [9, 9]))
    try:
        model = BlindConvolutionModel(ishape, kshape)
    except ValueError as exc:
        raise ConfigError(str(exc))
    image = _load_image_source(_get(cfg, "problem", "image"), ishape)
    kernel = _load_kernel_source(_get(cfg, "problem", "kernel"), kshape)
    y = synthesize(model, image.ravel(), kernel.ravel(), noise, seed=seed)
    fid = ConvolutionFidelity(model, y)
    theta0 = _theta_init(
        _get(cfg, "problem", "theta_init"), kernel.ravel(), kshape, seed
    )
    scale = 1.0
    if _get(cfg, "problem", "balance_blocks", True):
        scale = balanced_block_scale(model, fid, theta0)

    truth = BlockVector.from_blocks([image.ravel() / scale, scale * kernel.ravel()])
    theta_true = scale * kernel.ravel()
    theta0 = scale * theta0

    def x0_for(mode):
        theta = theta_true if mode == "pnp-oracle-theta" else theta0
        # adjoint initialization in natural units, then into work units
        v0 = fid.adjoint_init(theta / scale) / scale
        return BlockVector.from_blocks([v0, theta])

    def natural_image(x):
        return (scale * x.extract(1)).reshape(ishape)

    def natural_theta(x):
        return (x.extract(2) / scale).reshape(kshape)

    return SimpleNamespace(
        kind="blind-deconvolution",
        model=model,
        fidelity=fid,
        truth=truth,
        image_truth=image,
        theta_truth_natural=kernel,
        scale=scale,
        image_shape=ishape,
        x0_for=x0_for,
        natural_image=natural_image,
        natural_theta=natural_theta,
        block_scales=(1.0 / scale, scale),
    )


def _build_multicoil(cfg, seed, noise):
    ishape = tuple(_get(cfg, "problem", "image_shape", [32, 32]))
    coils = int(_get(cfg, "problem", "num_coils", 2))
    mask_spec = _get(cfg, "problem", "mask", {}) or {}
    if "path" in mask_spec:
        mask = fileio.load_matrix_csv(mask_spec["path"])
    else:
        mask = cartesian_rows_mask(
            ishape, mask_spec.get("accel", 2), mask_spec.get("center_rows", 4)
        )
    try:
        model = MultiCoilModel(ishape, coils, mask)
    except ValueError as exc:
        raise ConfigError(str(exc))
    image = _load_image_source(_get(cfg, "problem", "image"), ishape).astype(
        np.complex128
    )
    maps = smooth_coil_maps(ishape, coils, seed=seed + 7)
    y = synthesize(model, image, maps, noise, seed=seed)
    fid = MultiCoilFidelity(model, y)

    init_spec = _get(cfg, "problem", "theta_init", {}) or {}
    rng = np.random.default_rng(init_spec.get("seed", seed + 1))
    rel = float(init_spec.get("perturb", 0.0))
    noise_maps = rng.standard_normal(maps.shape) + 1j * rng.standard_normal(maps.shape)
    maps0 = maps + rel * np.linalg.norm(maps) * noise_maps / np.linalg.norm(noise_maps)

    truth = BlockVector.from_blocks([complex_to_pairs(image), complex_to_pairs(maps)])
    theta_true = complex_to_pairs(maps)
    theta0 = complex_to_pairs(maps0)

    def x0_for(mode):
        theta = theta_true if mode == "pnp-oracle-theta" else theta0
        return BlockVector.from_blocks([fid.adjoint_init(theta), theta])

    def natural_image(x):
        return np.abs(pairs_to_complex(x.extract(1), ishape))

    def natural_theta(x):
        return x.extract(2)

    return SimpleNamespace(
        kind="multi-coil",
        model=model,
        fidelity=fid,
        truth=truth,
        image_truth=np.abs(image),
        theta_truth_natural=theta_true,
        scale=1.0,
        image_shape=ishape,
        x0_for=x0_for,
        natural_image=natural_image,
        natural_theta=natural_theta,
        block_scales=(1.0, 1.0),
    )


def _build_linear(cfg, seed, noise):
    sizes = tuple(_get(cfg, "problem", "block_sizes", [4, 4]))
    rows = int(_get(cfg, "problem", "rows", sum(sizes)))
    matrix_spec = _get(cfg, "problem", "matrix", {}) or {}
    if "path" in matrix_spec:
        A = fileio.load_matrix_csv(matrix_spec["path"])
    else:
        A = np.random.default_rng(seed + 3).standard_normal((rows, sum(sizes)))
    from .blocks import BlockLayout

    layout = BlockLayout(sizes)
    if A.shape[1] != layout.total:
        raise ConfigError("matrix columns must match the block sizes")
    rng = np.random.default_rng(seed)
    x_true = rng.standard_normal(layout.total)
    model = LinearModel(A)
    y = synthesize(model, x_true, noise_sigma=noise, seed=seed)
    fid = LinearFidelity(model, layout, y)
    truth = BlockVector(layout, x_true)

    def x0_for(mode):
        return BlockVector(layout, fid.adjoint_init())

    return SimpleNamespace(
        kind="generic-linear",
        model=model,
        fidelity=fid,
        truth=truth,
        image_truth=None,
        theta_truth_natural=None,
        scale=1.0,
        image_shape=None,
        x0_for=x0_for,
        natural_image=None,
        natural_theta=None,
        block_scales=tuple(1.0 for _ in sizes),
    )


# ---------------------------------------------------------------------------
# denoiser construction
# ---------------------------------------------------------------------------


def _prior_mean(spec, size, shape, unit_scale):
    if spec is None or spec == "zeros":
        return np.zeros(size)
    if isinstance(spec, dict):
        if "constant" in spec:
            return np.full(size, float(spec["constant"]) * unit_scale)
        if "path" in spec:
            return fileio.load_matrix_csv(spec["path"]).ravel() * unit_scale
        if "gaussian-kernel" in spec:
            return gaussian_kernel(shape, spec["gaussian-kernel"]).ravel() * unit_scale
        if "uniform-kernel" in spec:
            return uniform_kernel(shape).ravel() * unit_scale
    raise ConfigError(f"unknown prior mean spec {spec!r}")


def build_denoiser(spec, size, shape, unit_scale=1.0, block_index=1):
    """Instantiate one block denoiser from its config mapping.

    `unit_scale` converts natural-unit parameters into the work units of
    the (possibly rescaled) block; see `balanced_block_scale`.
    """
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(f"denoiser spec needs a 'kind': {spec!r}")
    kind = spec["kind"]
    if kind == "identity":
        return IdentityDenoiser()
    if kind == "soft-threshold":
        return SoftThresholdDenoiser(float(spec["threshold"]) * unit_scale)
    if kind == "tv-prox":
        if shape is None or len(shape) != 2:
            raise ConfigError("tv-prox denoiser needs a 2-D image block")
        return TvProxDenoiser(
            float(spec["weight"]) * unit_scale,
            shape,
            inner_iters=int(spec.get("inner_iters", 30)),
        )
    if kind == "gaussian-mmse":
        pr = spec.get("prior", {}) or {}
        prior = GaussianPrior(
            _prior_mean(pr.get("mean"), size, shape, unit_scale),
            float(pr["var"]) * unit_scale**2,
        )
        return MmseDenoiser(prior, float(spec["sigma"]) * unit_scale)
    if kind == "gmm-mmse":
        pr = spec.get("prior", {}) or {}
        prior = GmmPrior(
            np.asarray(pr["weights"], dtype=float),
            np.asarray(pr["means"], dtype=float) * unit_scale,
            np.asarray(pr["variances"], dtype=float) * unit_scale**2,
        )
        return MmseDenoiser(prior, float(spec["sigma"]) * unit_scale)
    if kind == "inexact":
        base = build_denoiser(spec["base"], size, shape, unit_scale, block_index)
        sch = spec.get("schedule", {}) or {}
        schedule = ErrorSchedule(
            sch.get("kind", "zero"),
            base=float(sch.get("base", 0.0)) * unit_scale,
            values=tuple(float(v) * unit_scale for v in sch.get("values", ())),
            seed=int(sch.get("seed", 0)),
        )
        return InexactDenoiser(base, schedule, block_index=block_index)
    raise ConfigError(f"unknown denoiser kind {kind!r}")


def _build_denoisers(cfg, problem):
    layout = problem.fidelity.layout
    specs = _denoiser_specs(cfg)
    if problem.kind == "generic-linear":
        ordered = [specs.get(i + 1) for i in range(layout.num_blocks)]
    else:
        ordered = [specs.get("image"), specs.get("theta")]
    out = []
    for i, spec in enumerate(ordered):
        if spec is None:
            raise ConfigError(f"missing denoiser for block {i + 1}")
        shape = problem.image_shape if i == 0 else (
            problem.model.kernel_shape
            if problem.kind == "blind-deconvolution"
            else None
        )
        out.append(
            build_denoiser(
                spec,
                layout.sizes[i],
                shape,
                unit_scale=problem.block_scales[i],
                block_index=i + 1,
            )
        )
    return out


def _solver_config(cfg, mode):
    sched_spec = _get(cfg, "solver", "schedule", {}) or {}
    gamma = _get(cfg, "solver", "gamma", "auto")
    return SolverConfig(
        schedule=BlockSchedule(
            sched_spec.get("kind", "sequential"),
            2,
            seed=int(sched_spec.get("seed", 0)),
        ),
        gamma=None if gamma == "auto" else float(gamma),
        mode=mode,
        max_iters=int(_get(cfg, "solver", "max_iters", 500)),
        stop_tol=float(_get(cfg, "solver", "stop_tol", 1e-5)),
        ball_radius=float(_get(cfg, "solver", "ball_radius", 10.0)),
    )


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def run(config_path, out_override=None, seed_override=None, strict=False):
    """Execute the experiment; returns a process exit code."""
    try:
        cfg = load_config(config_path)
        diagnostics = validate(config_path)
        if diagnostics:
            for d in diagnostics:
                print(f"config error: {d}", file=sys.stderr)
            return EXIT_CONFIG
        problem = build_problem(cfg, seed_override=seed_override)
        denoisers = _build_denoisers(cfg, problem)
        modes = [
            _MODE_ALIASES.get(m, m) for m in _get(cfg, "solver", "modes", ["bc-pnp"])
        ]
        labels = _get(cfg, "solver", "modes", ["bc-pnp"])
        out_dir = Path(out_override or _get(cfg, "output", "directory", "out"))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    theory_cfg = cfg.get("theory_checks", {}) or {}
    strict = strict or bool(theory_cfg.get("strict", False))

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_truth(out_dir, problem)
        metrics_rows = []
        report = {"modes": {}, "checks": {}}
        checks_failed = False

        for label, mode in zip(labels, modes):
            mode_dir = out_dir / label
            mode_dir.mkdir(exist_ok=True)
            solver_cfg = _solver_config(cfg, mode)
            if solver_cfg.schedule.num_blocks != problem.fidelity.layout.num_blocks:
                solver_cfg = dataclasses.replace(
                    solver_cfg,
                    schedule=BlockSchedule(
                        solver_cfg.schedule.kind,
                        problem.fidelity.layout.num_blocks,
                        solver_cfg.schedule.seed,
                    ),
                )
            x0 = problem.x0_for(mode)
            gamma, lip = resolve_gamma(problem.fidelity, x0, solver_cfg)
            solver_cfg = dataclasses.replace(solver_cfg, gamma=gamma)

            objective = None
            constants = None
            if theory_cfg.get("enabled") and mode == "bc-pnp":
                try:
                    objective = ImplicitObjective(problem.fidelity, denoisers, gamma)
                    constants = TheoryConstants.from_problem(
                        gamma,
                        problem.fidelity.layout.num_blocks,
                        lip.l_max,
                        lip.l_full,
                        objective.m_max(),
                    )
                except (UnsupportedPriorError, ValueError) as exc:
                    report["checks"]["objective"] = f"skipped: {exc}"

            result = solve(
                problem.fidelity,
                denoisers,
                solver_cfg,
                x0,
                truth=problem.truth,
                objective=objective,
                lipschitz=lip,
            )
            result.trace.to_csv(mode_dir / "trace.csv")
            row = _mode_metrics(label, problem, result)
            metrics_rows.append(row)
            _write_mode_outputs(mode_dir, problem, result)
            report["modes"][label] = {
                "mode": mode,
                "gamma": result.gamma,
                "l_max": result.lipschitz.l_max,
                "iterations": len(result.trace),
                "reason": result.reason,
                "flags": result.flags,
                "g_norm_initial": result.g_norm_initial,
                "g_norm_final": result.g_norm_final,
                "metrics": row,
            }

            if objective is not None and constants is not None:
                checks = _theory_checks(
                    problem, denoisers, solver_cfg, x0, result, constants, theory_cfg, lip
                )
                report["checks"][label] = checks
                checks_failed = checks_failed or not all(
                    c.get("passed", True) for c in checks.values()
                )

        _write_metrics(out_dir / "metrics.csv", metrics_rows)
        with open(out_dir / "report.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
    except NonFiniteIterateError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    if strict and checks_failed:
        print("strict mode: a convergence check failed", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def _theory_checks(problem, denoisers, solver_cfg, x0, result, constants, theory_cfg, lip):
    """Descent always; the schedule decides which bound check applies."""
    checks = {}
    descent = check_descent(result.trace, constants)
    checks["descent"] = descent.to_dict()

    multiplier = int(theory_cfg.get("reference_multiplier", 10))
    ref_cfg = dataclasses.replace(
        solver_cfg, max_iters=solver_cfg.max_iters * multiplier
    )
    objective = ImplicitObjective(problem.fidelity, denoisers, solver_cfg.gamma)
    ref = solve(
        problem.fidelity, denoisers, ref_cfg, x0, objective=objective, lipschitz=lip
    )
    f_star = reference_f_star(ref.trace)

    if solver_cfg.schedule.kind == "sequential":
        if len(result.trace) >= constants.num_blocks:
            checks["theorem1"] = check_theorem1(
                result.trace, constants, f_star
            ).to_dict()
    elif solver_cfg.schedule.kind == "random-iid":
        seeds = int(theory_cfg.get("ensemble_seeds", 0))
        if seeds >= 10:
            traces = []
            for s in range(seeds):
                cfg_s = dataclasses.replace(
                    solver_cfg,
                    schedule=solver_cfg.schedule.with_seed(
                        solver_cfg.schedule.seed + s
                    ),
                )
                traces.append(
                    solve(
                        problem.fidelity,
                        denoisers,
                        cfg_s,
                        x0,
                        objective=objective,
                        lipschitz=lip,
                    ).trace
                )
            checks["theorem2"] = check_theorem2(
                traces, constants, f_star, floor_ratio=1e-4
            ).to_dict()
    return checks


def _mode_metrics(label, problem, result):
    row = {"mode": label, "rmse_x": float("nan"), "ssim_x": float("nan"),
           "rmse_theta": float("nan")}
    if problem.truth is None:
        return row
    row["rmse_x"] = rmse(result.x.extract(1), problem.truth.extract(1))
    if problem.fidelity.layout.num_blocks >= 2:
        row["rmse_theta"] = rmse(result.x.extract(2), problem.truth.extract(2))
    if problem.natural_image is not None and min(problem.image_shape) >= 16:
        row["ssim_x"] = ssim(
            problem.natural_image(result.x), problem.image_truth, data_range=1.0
        )
    return row


def _write_truth(out_dir, problem):
    if problem.kind == "generic-linear":
        fileio.save_matrix_csv(out_dir / "truth_x.csv", problem.truth.data[None, :])
        return
    fileio.save_matrix_csv(
        out_dir / "truth_image.csv",
        problem.truth.extract(1)[None, :],
    )
    fileio.save_matrix_csv(
        out_dir / "truth_theta.csv", problem.truth.extract(2)[None, :]
    )


def _write_mode_outputs(mode_dir, problem, result):
    fileio.save_matrix_csv(
        mode_dir / "final_image.csv", result.x.extract(1)[None, :]
    )
    if problem.fidelity.layout.num_blocks >= 2:
        fileio.save_matrix_csv(
            mode_dir / "final_theta.csv", result.x.extract(2)[None, :]
        )
    if problem.natural_image is not None:
        fileio.write_pgm(mode_dir / "image.pgm", problem.natural_image(result.x))


def _write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write("mode,rmse_x,ssim_x,rmse_theta\n")
        for row in rows:
            fh.write(
                f"{row['mode']},{row['rmse_x']!r},{row['ssim_x']!r},"
                f"{row['rmse_theta']!r}\n"
            )


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="bcpnp",
        description="Block-coordinate plug-and-play experiments for blind "
        "inverse problems.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config", help="YAML experiment configuration")
    p_run.add_argument("--out", help="override the output directory")
    p_run.add_argument(
        "--seed-override", type=int, help="override the problem seed"
    )
    p_run.add_argument(
        "--strict-checks",
        action="store_true",
        help="exit 3 when an enabled convergence check fails",
    )

    p_val = sub.add_parser("validate", help="check a config without solving")
    p_val.add_argument("config", help="YAML experiment configuration")

    args = parser.parse_args(argv)
    if args.command == "run":
        return run(
            args.config,
            out_override=args.out,
            seed_override=args.seed_override,
            strict=args.strict_checks,
        )
    diagnostics = validate(args.config)
    if diagnostics:
        for d in diagnostics:
            print(d)
        return EXIT_CONFIG
    print("config ok")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
