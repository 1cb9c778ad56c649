"""Convergence diagnostics: implicit objective, bound constants, checkers.

With exact Gaussian-prior MMSE denoisers the iteration's implicit
objective f = g + h is computable in closed form, so the descent
inequality, the sequential-schedule gradient bound, and the random-schedule
residual bound can be verified numerically along recorded traces, with the
bound constants assembled from the certified smoothness constants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .blocks import BlockVector
from .denoisers import (
    GaussianPrior,
    InexactDenoiser,
    MmseDenoiser,
    UnsupportedPriorError,
    implicit_reg_gradient,
    implicit_reg_lipschitz,
    implicit_reg_value,
)

TRACE_CSV_HEADER = (
    "iter,block,f,g,h,Gnorm2,step_norm,eps,rmse_v,rmse_theta"
)


# ---------------------------------------------------------------------------
# per-iteration trace
# ---------------------------------------------------------------------------


@dataclass
class IterateTrace:
    """Per-iteration record of a solve.

    Row k holds quantities of iteration k >= 1: the objective at the new
    iterate x^k, the squared residual-operator norm at the previous iterate
    x^{k-1}, the step length, the scheduled denoiser error, and per-block
    relative errors against the ground truth when one is known.  Fields are
    NaN when not computable (no Gaussian priors, no ground truth).
    """

    iters: np.ndarray
    block: np.ndarray
    f: np.ndarray
    g: np.ndarray
    h: np.ndarray
    g_norm2: np.ndarray
    step_norm: np.ndarray
    eps: np.ndarray
    rmse: np.ndarray  # shape (n, num_blocks)
    grad_f_norm2: np.ndarray
    f_initial: float = float("nan")
    g_initial: float = float("nan")
    h_initial: float = float("nan")
    grad_f_norm2_initial: float = float("nan")

    def __len__(self):
        return self.iters.size

    def _csv_rows(self):
        def fmt(v):
            return repr(float(v))

        nb = self.rmse.shape[1] if self.rmse.size else 0
        for j in range(len(self)):
            rmse_v = self.rmse[j, 0] if nb >= 1 else float("nan")
            rmse_t = self.rmse[j, 1] if nb >= 2 else float("nan")
            yield ",".join(
                [
                    str(int(self.iters[j])),
                    str(int(self.block[j])),
                    fmt(self.f[j]),
                    fmt(self.g[j]),
                    fmt(self.h[j]),
                    fmt(self.g_norm2[j]),
                    fmt(self.step_norm[j]),
                    fmt(self.eps[j]),
                    fmt(rmse_v),
                    fmt(rmse_t),
                ]
            )

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(TRACE_CSV_HEADER + "\n")
            for row in self._csv_rows():
                fh.write(row + "\n")

    @classmethod
    def from_csv(cls, path):
        raw = np.genfromtxt(path, delimiter=",", skip_header=1, ndmin=2)
        n = raw.shape[0]
        rmse = np.column_stack([raw[:, 8], raw[:, 9]]) if n else np.empty((0, 2))
        return cls(
            iters=raw[:, 0].astype(int),
            block=raw[:, 1].astype(int),
            f=raw[:, 2],
            g=raw[:, 3],
            h=raw[:, 4],
            g_norm2=raw[:, 5],
            step_norm=raw[:, 6],
            eps=raw[:, 7],
            rmse=rmse,
            grad_f_norm2=np.full(n, np.nan),
        )


class TraceBuilder:
    """Accumulates trace rows during a solve; `freeze` yields IterateTrace."""

    def __init__(self, num_blocks):
        self.num_blocks = num_blocks
        self.rows = {
            name: []
            for name in (
                "iters",
                "block",
                "f",
                "g",
                "h",
                "g_norm2",
                "step_norm",
                "eps",
                "grad_f_norm2",
            )
        }
        self.rmse = []
        self.initial = {}

    def set_initial(self, f, g, h, grad_f_norm2):
        self.initial = {
            "f_initial": f,
            "g_initial": g,
            "h_initial": h,
            "grad_f_norm2_initial": grad_f_norm2,
        }

    def append(self, **kwargs):
        rmse = kwargs.pop("rmse")
        self.rmse.append(rmse)
        for name, value in kwargs.items():
            self.rows[name].append(value)

    def freeze(self):
        n = len(self.rows["iters"])
        return IterateTrace(
            iters=np.asarray(self.rows["iters"], dtype=int),
            block=np.asarray(self.rows["block"], dtype=int),
            f=np.asarray(self.rows["f"], dtype=float),
            g=np.asarray(self.rows["g"], dtype=float),
            h=np.asarray(self.rows["h"], dtype=float),
            g_norm2=np.asarray(self.rows["g_norm2"], dtype=float),
            step_norm=np.asarray(self.rows["step_norm"], dtype=float),
            eps=np.asarray(self.rows["eps"], dtype=float),
            rmse=(
                np.asarray(self.rmse, dtype=float)
                if n
                else np.empty((0, self.num_blocks))
            ),
            grad_f_norm2=np.asarray(self.rows["grad_f_norm2"], dtype=float),
            **self.initial,
        )


# ---------------------------------------------------------------------------
# implicit objective f = g + h for Gaussian-prior MMSE denoisers
# ---------------------------------------------------------------------------


def _gaussian_spec(denoiser):
    base = denoiser.base if isinstance(denoiser, InexactDenoiser) else denoiser
    if isinstance(base, MmseDenoiser) and isinstance(base.prior, GaussianPrior):
        return base.prior, base.sigma
    raise UnsupportedPriorError(
        "implicit objective needs a Gaussian-prior MMSE denoiser on every block"
    )


class ImplicitObjective:
    """Evaluates f = g + sum_i h_i and its gradient along block vectors.

    Each block must carry a (possibly inexactness-wrapped) Gaussian-prior
    MMSE denoiser; the regularizer of the wrapped exact denoiser defines h.
    """

    def __init__(self, fidelity, denoisers, gamma):
        self.fidelity = fidelity
        self.gamma = float(gamma)
        if self.gamma <= 0:
            raise ValueError("step size gamma must be positive")
        self.block_priors = [_gaussian_spec(d) for d in denoisers]
        if len(self.block_priors) != fidelity.layout.num_blocks:
            raise ValueError("one denoiser per block required")

    def value(self, x: BlockVector):
        """(f, g, h) at x."""
        g = self.fidelity.value(x)
        h = 0.0
        for i, (prior, sigma) in enumerate(self.block_priors, start=1):
            h += implicit_reg_value(prior, sigma, self.gamma, x.extract(i))
        return g + h, g, h

    def grad(self, x: BlockVector):
        """Full gradient (grad_i g + grad h_i) stacked across blocks."""
        grad_g = self.fidelity.grad(x)
        parts = []
        for i, (prior, sigma) in enumerate(self.block_priors, start=1):
            parts.append(
                grad_g.extract(i)
                + implicit_reg_gradient(prior, sigma, self.gamma, x.extract(i))
            )
        return BlockVector.from_blocks(parts)

    def m_max(self):
        """Largest Lipschitz constant of the per-block regularizer gradients."""
        return max(
            implicit_reg_lipschitz(prior, sigma, self.gamma)
            for prior, sigma in self.block_priors
        )


def eval_objective(fidelity, denoisers, gamma, x):
    return ImplicitObjective(fidelity, denoisers, gamma).value(x)


def eval_grad_f(fidelity, denoisers, gamma, x):
    return ImplicitObjective(fidelity, denoisers, gamma).grad(x)


# ---------------------------------------------------------------------------
# bound constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TheoryConstants:
    """Constants of the convergence bounds, assembled from smoothness data.

    alpha is the inverse step-size ratio 1/(gamma l_max) and must exceed 1;
    all derived constants are then positive and finite.
    """

    alpha: float
    num_blocks: int
    l_max: float
    l_full: float
    m_max: float
    lam: float
    a1: float
    a2: float
    b1: float
    b2: float
    c1: float
    c2: float
    theta_rand: float
    d1: float
    d2: float

    @classmethod
    def from_problem(cls, gamma, num_blocks, l_max, l_full, m_max):
        gamma = float(gamma)
        if gamma <= 0 or l_max <= 0:
            raise ValueError("gamma and l_max must be positive")
        alpha = 1.0 / (gamma * l_max)
        if alpha <= 1.0:
            raise ValueError(
                f"step size gamma={gamma} must be below 1/l_max={1.0 / l_max}"
            )
        b = int(num_blocks)
        lam = alpha * l_max + m_max
        a1 = alpha * l_max + b * l_full
        a2 = a1 + l_full + m_max
        b1 = 4.0 * a1**2 / ((alpha - 1.0) * l_max)
        b2 = 2.0 * b * a2**2 + lam * a1**2
        theta_rand = (alpha - 1.0) / (2.0 * alpha**2 * b * l_max)
        return cls(
            alpha=alpha,
            num_blocks=b,
            l_max=float(l_max),
            l_full=float(l_full),
            m_max=float(m_max),
            lam=lam,
            a1=a1,
            a2=a2,
            b1=b1,
            b2=b2,
            c1=b1,
            c2=b * b2,
            theta_rand=theta_rand,
            d1=1.0 / theta_rand,
            d2=lam / (2.0 * theta_rand),
        )


# ---------------------------------------------------------------------------
# checkers
# ---------------------------------------------------------------------------

_REL_SLACK = 1e-9  # float headroom when comparing measured values to bounds


def mean_squared_errors(eps, t):
    """(1/t) sum_{k<=t} eps_k^2, the inexactness average entering the bounds."""
    if t < 1 or t > eps.size:
        raise ValueError("t out of range")
    return float(np.mean(np.asarray(eps[:t]) ** 2))


@dataclass
class DescentReport:
    passed: bool
    worst_slack: float
    num_checked: int
    violations: list = field(default_factory=list)

    def to_dict(self):
        return {
            "passed": bool(self.passed),
            "worst_slack": float(self.worst_slack),
            "num_checked": int(self.num_checked),
            "violations": [int(v) for v in self.violations],
        }


def check_descent(trace: IterateTrace, constants: TheoryConstants, slack=1e-10):
    """Per-iteration decrease of f with the proven quadratic margin.

    Verifies f(x^k) <= f(x^{k-1}) - (alpha-1)(l_max/2)||step||^2
    + lam eps_k^2 / 2, within slack*(1+|f(x^{k-1})|) headroom per step.
    """
    f_prev = trace.f_initial
    worst = -np.inf
    violations = []
    coeff = (constants.alpha - 1.0) * constants.l_max / 2.0
    for j in range(len(trace)):
        allowed = (
            f_prev
            - coeff * trace.step_norm[j] ** 2
            + 0.5 * constants.lam * trace.eps[j] ** 2
        )
        excess = trace.f[j] - allowed
        worst = max(worst, excess)
        if excess > slack * (1.0 + abs(f_prev)):
            violations.append(int(trace.iters[j]))
        f_prev = trace.f[j]
    return DescentReport(
        passed=not violations,
        worst_slack=float(worst),
        num_checked=len(trace),
        violations=violations,
    )


@dataclass
class Theorem1Report:
    passed: bool
    num_epochs: int
    f_initial: float
    f_star: float
    grad_norm2_epochs: np.ndarray
    running_mean: np.ndarray
    running_min: np.ndarray
    bounds: np.ndarray
    violations: list
    note: str = "only complete epochs are checked"

    def to_dict(self):
        return {
            "passed": bool(self.passed),
            "num_epochs": int(self.num_epochs),
            "f_initial": float(self.f_initial),
            "f_star": float(self.f_star),
            "grad_norm2_epochs": self.grad_norm2_epochs.tolist(),
            "running_mean": self.running_mean.tolist(),
            "running_min": self.running_min.tolist(),
            "bounds": self.bounds.tolist(),
            "violations": [int(v) for v in self.violations],
            "note": self.note,
        }


def check_theorem1(trace: IterateTrace, constants: TheoryConstants, f_star):
    """Sequential-schedule gradient bound along one trace.

    For every number of complete epochs t, checks
    min_{i<=t} ||grad f(x^{ib})||^2 <= mean_{i<=t} <= (c1/t)(f(x^0)-f*)
    + c2 * mean_{k<=tb}(eps_k^2), using the gradient norms recorded at the
    epoch-boundary iterates.
    """
    b = constants.num_blocks
    num_epochs = len(trace) // b
    if num_epochs < 1:
        raise ValueError("trace holds no complete epoch")
    idx = np.arange(1, num_epochs + 1) * b - 1
    gn2 = trace.grad_f_norm2[idx]
    if np.any(np.isnan(gn2)):
        raise ValueError("trace lacks gradient norms; solve with an objective")
    tvals = np.arange(1, num_epochs + 1, dtype=float)
    running_mean = np.cumsum(gn2) / tvals
    running_min = np.minimum.accumulate(gn2)
    gap = trace.f_initial - f_star
    epsbar2 = np.array(
        [mean_squared_errors(trace.eps, int(t) * b) for t in tvals]
    )
    bounds = constants.c1 / tvals * gap + constants.c2 * epsbar2
    headroom = _REL_SLACK * (1.0 + np.abs(bounds))
    bad = (running_mean > bounds + headroom) | (
        running_min > running_mean + headroom
    )
    violations = (np.nonzero(bad)[0] + 1).tolist()
    return Theorem1Report(
        passed=not violations,
        num_epochs=num_epochs,
        f_initial=trace.f_initial,
        f_star=float(f_star),
        grad_norm2_epochs=gn2,
        running_mean=running_mean,
        running_min=running_min,
        bounds=bounds,
        violations=violations,
    )


@dataclass
class Theorem2Report:
    passed: bool
    num_seeds: int
    num_iters: int
    f_star: float
    avg_running_mean: np.ndarray
    bounds: np.ndarray
    violations: list
    final_ratio_fractions: float
    plateau_mean: float
    plateau_bound: float

    def to_dict(self):
        return {
            "passed": bool(self.passed),
            "num_seeds": int(self.num_seeds),
            "num_iters": int(self.num_iters),
            "f_star": float(self.f_star),
            "avg_running_mean": self.avg_running_mean.tolist(),
            "bounds": self.bounds.tolist(),
            "violations": [int(v) for v in self.violations],
            "final_ratio_fractions": float(self.final_ratio_fractions),
            "plateau_mean": float(self.plateau_mean),
            "plateau_bound": float(self.plateau_bound),
        }


def check_theorem2(
    traces, constants: TheoryConstants, f_star, floor_ratio=None, min_seeds=10
):
    """Random-schedule residual bound over an ensemble of seeded traces.

    Checks the seed-averaged (1/t) sum_k ||G(x^{k-1})||^2 against
    (d1/t)(f(x^0) - f*) + d2 * mean_{k<=t}(eps_k^2) at every t (traces are
    truncated to the shortest length).  `floor_ratio`, when given, is the
    almost-sure-convergence surrogate: the report records the fraction of
    seeds whose final ||G|| falls below floor_ratio * ||G(x^0)||.  The
    plateau statistic is the seed-and-tail average of ||G||^2 over the last
    quarter of iterations, to compare against d2 * eps^2 for constant
    inexactness.
    """
    if len(traces) < min_seeds:
        raise ValueError(f"ensemble too small: {len(traces)} < {min_seeds} seeds")
    t_len = min(len(tr) for tr in traces)
    if t_len < 1:
        raise ValueError("empty trace in ensemble")
    g2 = np.stack([tr.g_norm2[:t_len] for tr in traces])
    eps = traces[0].eps[:t_len]
    tvals = np.arange(1, t_len + 1, dtype=float)
    avg_running_mean = np.mean(np.cumsum(g2, axis=1) / tvals[None, :], axis=0)
    gap = float(np.mean([tr.f_initial for tr in traces])) - f_star
    epsbar2 = np.cumsum(eps**2) / tvals
    bounds = constants.d1 / tvals * gap + constants.d2 * epsbar2
    headroom = _REL_SLACK * (1.0 + np.abs(bounds))
    violations = (np.nonzero(avg_running_mean > bounds + headroom)[0] + 1).tolist()

    frac = float("nan")
    if floor_ratio is not None:
        finals = np.sqrt(g2[:, -1])
        starts = np.sqrt(g2[:, 0])
        frac = float(np.mean(finals <= floor_ratio * starts))

    tail = max(1, t_len // 4)
    plateau_mean = float(np.mean(g2[:, -tail:]))
    eps_max2 = float(np.max(eps**2))
    return Theorem2Report(
        passed=not violations,
        num_seeds=len(traces),
        num_iters=t_len,
        f_star=float(f_star),
        avg_running_mean=avg_running_mean,
        bounds=bounds,
        violations=violations,
        final_ratio_fractions=frac,
        plateau_mean=plateau_mean,
        plateau_bound=constants.d2 * eps_max2,
    )


def reference_f_star(trace: IterateTrace, margin=0.01):
    """Lower estimate of inf f from a long reference run.

    The running minimum of f along a trace upper-bounds the true infimum,
    so a margin proportional to the observed descent span is subtracted;
    underestimating f* only loosens the checked bounds, never falsely
    fails them.
    """
    fmin = float(min(trace.f_initial, np.min(trace.f)))
    span = trace.f_initial - fmin
    return fmin - margin * span - 1e-12 * (1.0 + abs(fmin))


# ---------------------------------------------------------------------------
# quality metrics
# ---------------------------------------------------------------------------


def rmse(estimate, truth):
    """Relative error ||estimate - truth|| / ||truth||."""
    estimate = np.asarray(estimate, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    denom = np.linalg.norm(truth)
    if denom == 0:
        raise ValueError("ground truth has zero norm")
    return float(np.linalg.norm(estimate - truth) / denom)


def _gaussian_window(size, sigma):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _window_means(img, kernel):
    from numpy.lib.stride_tricks import sliding_window_view

    wins = sliding_window_view(img, kernel.shape)
    return np.einsum("ijkl,kl->ij", wins, kernel)


def ssim(estimate, truth, data_range=1.0, window_size=11, window_sigma=1.5):
    """Mean structural similarity over a sliding Gaussian window.

    Standard stabilization constants (0.01 and 0.03 of the declared dynamic
    range, squared) and an 11x11 Gaussian window; the mean is taken over
    fully interior windows.
    """
    a = np.asarray(estimate, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.ndim != 2 or a.shape != b.shape:
        raise ValueError("ssim expects two equal-shape 2-D images")
    if min(a.shape) < window_size:
        raise ValueError("image smaller than the ssim window")
    kern = _gaussian_window(window_size, window_sigma)
    mu_a = _window_means(a, kern)
    mu_b = _window_means(b, kern)
    var_a = _window_means(a * a, kern) - mu_a**2
    var_b = _window_means(b * b, kern) - mu_b**2
    cov = _window_means(a * b, kern) - mu_a * mu_b
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def report_to_json(report, path):
    """Serialize a checker report (anything with to_dict) deterministically."""
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
