"""Block-coordinate plug-and-play iteration and its ablated variants.

One iteration picks a block i_k from the schedule and replaces only that
block by D_i(x_i - gamma * grad_i g(x)); all other blocks are carried over
bitwise.  With a single block this is exactly the classic proximal-gradient
plug-and-play iteration.  Variant modes: "pnp-ista" and "pnp-oracle-theta"
freeze the parameter block at its initial value (pre-estimated vs ground
truth), "pnp-gd-theta" updates it by a bare gradient step instead of a
denoiser.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .blocks import BlockSchedule, BlockVector
from .denoisers import IdentityDenoiser, apply_denoiser, error_magnitude
from .forward import LipschitzEstimate, estimate_block_lipschitz
from .theory import TraceBuilder, rmse

BC_PNP = "bc-pnp"
PNP_ISTA = "pnp-ista"
PNP_GD_THETA = "pnp-gd-theta"
PNP_ORACLE_THETA = "pnp-oracle-theta"
MODES = (BC_PNP, PNP_ISTA, PNP_GD_THETA, PNP_ORACLE_THETA)
_FROZEN_THETA_MODES = (PNP_ISTA, PNP_ORACLE_THETA)

DEFAULT_STEP_FRACTION = 0.9  # gamma = 0.9 / l_max keeps gamma < 1/l_max strict


class NonFiniteIterateError(RuntimeError):
    """An iterate block became NaN/inf; names the block and iteration."""


@dataclass(frozen=True)
class SolverConfig:
    """Algorithmic knobs of a solve.

    gamma=None certifies Lipschitz constants at the initialization and uses
    0.9 / l_max.  `sigmas` optionally records the per-block denoiser
    strengths for provenance; the denoiser objects own the operative values.
    """

    schedule: BlockSchedule
    gamma: float | None = None
    sigmas: tuple = ()
    mode: str = BC_PNP
    max_iters: int = 500
    stop_tol: float = 1e-5
    ball_radius: float = 10.0
    theta_block: int = 2
    recertify_every: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.stop_tol <= 0:
            raise ValueError("stop_tol must be positive")
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("gamma must be positive")


@dataclass
class SolveResult:
    x: BlockVector
    trace: "IterateTrace"
    reason: str  # "tolerance" | "max-iters"
    flags: dict
    gamma: float
    lipschitz: LipschitzEstimate
    g_norm_initial: float
    g_norm_final: float


def _active_blocks(config: SolverConfig, num_blocks):
    if num_blocks > 1 and config.mode in _FROZEN_THETA_MODES:
        return [i for i in range(1, num_blocks + 1) if i != config.theta_block]
    return list(range(1, num_blocks + 1))


def _effective_denoisers(config: SolverConfig, denoisers, num_blocks):
    if num_blocks > 1 and config.mode == PNP_GD_THETA:
        out = list(denoisers)
        out[config.theta_block - 1] = IdentityDenoiser()
        return out
    return list(denoisers)


def g_operator(fidelity, denoisers, gamma, x: BlockVector, k=1, active=None):
    """Scaled fixed-point residual (x - D(x - gamma grad g(x))) / gamma.

    The denoiser acts separably per block; blocks outside `active`
    contribute zero (used by variants that freeze the parameter block).
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if active is None:
        active = range(1, fidelity.layout.num_blocks + 1)
    grad = fidelity.grad(x)
    parts = []
    for i in range(1, fidelity.layout.num_blocks + 1):
        xi = x.extract(i)
        if i in active:
            zi = xi - gamma * grad.extract(i)
            di = apply_denoiser(denoisers[i - 1], zi, k)
            parts.append((xi - di) / gamma)
        else:
            parts.append(np.zeros_like(xi))
    return BlockVector.from_blocks(parts)


def step(fidelity, denoisers, config: SolverConfig, x: BlockVector, k):
    """One block update at iteration k; returns (new iterate, block index)."""
    if config.gamma is None:
        raise ValueError("step needs an explicit gamma; resolve it via solve")
    num_blocks = fidelity.layout.num_blocks
    active = _active_blocks(config, num_blocks)
    effective = _effective_denoisers(config, denoisers, num_blocks)
    i_k = _pick_index(config, active, k)
    x_new = _update_block(fidelity, effective[i_k - 1], config.gamma, x, k, i_k)
    return x_new, i_k


def _pick_index(config: SolverConfig, active, k):
    if len(active) == 1:
        return active[0]
    schedule = config.schedule
    if schedule.num_blocks != len(active):
        schedule = BlockSchedule(schedule.kind, len(active), schedule.seed)
    return active[schedule.next_index(k) - 1]


def _update_block(fidelity, denoiser, gamma, x: BlockVector, k, i):
    z = x.extract(i) - gamma * fidelity.grad_block(x, i)
    new_block = apply_denoiser(denoiser, z, k)
    if not np.all(np.isfinite(new_block)):
        raise NonFiniteIterateError(
            f"non-finite values in block {i} at iteration {k}"
        )
    return x.inject(i, new_block)


def initialize(fidelity, theta0=None):
    """Adjoint initialization: image block A(theta0)^H y, parameters theta0."""
    if fidelity.layout.num_blocks == 1 or not hasattr(fidelity, "grad_theta"):
        return BlockVector(fidelity.layout, fidelity.adjoint_init())
    if theta0 is None:
        raise ValueError("blind models need an initial parameter block theta0")
    theta0 = np.asarray(theta0, dtype=np.float64).ravel()
    return BlockVector.from_blocks([fidelity.adjoint_init(theta0), theta0])


def solve(
    fidelity,
    denoisers,
    config: SolverConfig,
    x0: BlockVector,
    truth: BlockVector | None = None,
    objective=None,
    lipschitz: LipschitzEstimate | None = None,
):
    """Run the iteration from x0 until the relative-change tolerance or the
    iteration cap, recording a full per-iteration trace.

    `objective` (see theory.ImplicitObjective) enables f/g/h and gradient
    recording; it must be built with the same gamma the solver uses.
    Raises NonFiniteIterateError when an update produces NaN/inf.
    """
    layout = fidelity.layout
    if x0.layout.sizes != layout.sizes:
        raise ValueError("x0 layout does not match the fidelity layout")
    if len(denoisers) != layout.num_blocks:
        raise ValueError("need exactly one denoiser per block")

    if lipschitz is None:
        lipschitz = estimate_block_lipschitz(fidelity, x0, config.ball_radius)
    gamma = config.gamma
    if gamma is None:
        if lipschitz.l_max <= 0:
            raise ValueError("cannot auto-select gamma: certified l_max is zero")
        gamma = DEFAULT_STEP_FRACTION / lipschitz.l_max
    if objective is not None and abs(objective.gamma - gamma) > 1e-15 * gamma:
        raise ValueError("objective was built with a different gamma")

    num_blocks = layout.num_blocks
    active = _active_blocks(config, num_blocks)
    effective = _effective_denoisers(config, denoisers, num_blocks)
    radii = [config.ball_radius * n for n in x0.block_norms()]

    flags = {
        "left_ball": False,
        "power_iter_warning": not lipschitz.converged,
        "gamma_exceeds_rule": bool(
            lipschitz.l_max > 0 and gamma >= 1.0 / lipschitz.l_max
        ),
    }

    trace = TraceBuilder(num_blocks)
    if objective is not None:
        f0, g0, h0 = objective.value(x0)
        trace.set_initial(f0, g0, h0, objective.grad(x0).norm() ** 2)
    else:
        nan = float("nan")
        trace.set_initial(nan, nan, nan, nan)

    x = x0
    reason = "max-iters"
    k = 0
    for k in range(1, config.max_iters + 1):
        g_res = g_operator(fidelity, effective, gamma, x, k, active)
        i_k = _pick_index(config, active, k)
        prev_norm = x.norm()
        x_new = _update_block(fidelity, effective[i_k - 1], gamma, x, k, i_k)
        step_norm = float(np.linalg.norm(x_new.data - x.data))

        if not flags["left_ball"]:
            flags["left_ball"] = any(
                n > r for n, r in zip(x_new.block_norms(), radii)
            )
        if config.recertify_every and k % config.recertify_every == 0:
            recert = estimate_block_lipschitz(fidelity, x_new, config.ball_radius)
            if recert.l_max > 0 and gamma >= 1.0 / recert.l_max:
                flags["gamma_exceeds_rule"] = True

        if objective is not None:
            f_k, g_k, h_k = objective.value(x_new)
            gradf2 = objective.grad(x_new).norm() ** 2
        else:
            f_k = g_k = h_k = gradf2 = float("nan")
        if truth is not None:
            rmse_blocks = [
                rmse(x_new.extract(i), truth.extract(i))
                for i in range(1, num_blocks + 1)
            ]
        else:
            rmse_blocks = [float("nan")] * num_blocks

        trace.append(
            iters=k,
            block=i_k,
            f=f_k,
            g=g_k,
            h=h_k,
            g_norm2=g_res.norm() ** 2,
            step_norm=step_norm,
            eps=max(error_magnitude(effective[i - 1], k) for i in active),
            grad_f_norm2=gradf2,
            rmse=rmse_blocks,
        )
        x = x_new
        rel = step_norm / prev_norm if prev_norm > 0 else step_norm
        if rel < config.stop_tol:
            reason = "tolerance"
            break

    frozen = trace.freeze()
    g_final = g_operator(fidelity, effective, gamma, x, k + 1, active).norm()
    return SolveResult(
        x=x,
        trace=frozen,
        reason=reason,
        flags=flags,
        gamma=gamma,
        lipschitz=lipschitz,
        g_norm_initial=float(np.sqrt(frozen.g_norm2[0])),
        g_norm_final=g_final,
    )


def resolve_gamma(fidelity, x0, config: SolverConfig):
    """Certify Lipschitz constants at x0 and return (gamma, estimate).

    Useful for building an ImplicitObjective with the same gamma the
    subsequent solve will use; pass the estimate back via `lipschitz=`.
    """
    lip = estimate_block_lipschitz(fidelity, x0, config.ball_radius)
    if config.gamma is not None:
        return config.gamma, lip
    if lip.l_max <= 0:
        raise ValueError("cannot auto-select gamma: certified l_max is zero")
    return DEFAULT_STEP_FRACTION / lip.l_max, lip


def pnp_ista_reference(fidelity, denoiser, gamma, x0_data, num_iters):
    """Plain proximal-gradient plug-and-play loop on a one-block problem.

    Independent of the block machinery; used to pin down the single-block
    reduction of the block-coordinate method.
    """
    layout = fidelity.layout
    if layout.num_blocks != 1:
        raise ValueError("reference iteration expects a one-block fidelity")
    x = np.asarray(x0_data, dtype=np.float64).copy()
    iterates = []
    for k in range(1, num_iters + 1):
        z = x - gamma * fidelity.grad(BlockVector(layout, x)).data
        x = apply_denoiser(denoiser, z, k)
        iterates.append(x.copy())
    return iterates
