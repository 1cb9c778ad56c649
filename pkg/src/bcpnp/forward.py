"""Parameterized measurement operators and the bilinear data fidelity.

Models map a parameter vector theta and an image v to measurements
A(theta) v.  The data fidelity g(x) = 0.5 ||y - A(theta) v||^2 with
x = (v, theta) is bilinear, hence nonconvex in the joint variable; its
block gradients, exact Hessian-vector products, and ball-restricted
Lipschitz estimates live here.

Block convention for the two-block fidelities: block 1 is the image v,
block 2 is the operator parameters theta.  Complex quantities (multi-coil
model) are packed as interleaved real pairs, under which the real gradient
of g with respect to the pairs is exactly the pair packing of A^H(residual)
(the usual folding of the Wirtinger factor two).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import BlockLayout, BlockVector, complex_to_pairs, pairs_to_complex

POWER_ITER_TOL = 1e-4
POWER_ITER_MAX = 100
_POWER_SEED = 0x5EED


# ---------------------------------------------------------------------------
# measurement models
# ---------------------------------------------------------------------------


class BlindConvolutionModel:
    """Circular 2-D convolution with an unknown, centered, odd-sized kernel.

    Circular boundary handling makes the operator diagonal in the DFT
    basis, so forward/adjoint pairs are exact and spectral norms are
    attainable by power iteration.
    """

    def __init__(self, image_shape, kernel_shape):
        hI, wI = (int(s) for s in image_shape)
        hK, wK = (int(s) for s in kernel_shape)
        if hK % 2 == 0 or wK % 2 == 0:
            raise ValueError("kernel dimensions must be odd")
        if hK > hI or wK > wI:
            raise ValueError("kernel must not exceed the image")
        self.image_shape = (hI, wI)
        self.kernel_shape = (hK, wK)

    @property
    def layout(self):
        return BlockLayout(
            (self.image_shape[0] * self.image_shape[1],
             self.kernel_shape[0] * self.kernel_shape[1])
        )

    def _embed(self, kernel):
        # pad to image size with the kernel center moved to the origin
        k = np.asarray(kernel, dtype=np.float64).reshape(self.kernel_shape)
        full = np.zeros(self.image_shape)
        full[: k.shape[0], : k.shape[1]] = k
        return np.roll(full, (-(k.shape[0] // 2), -(k.shape[1] // 2)), axis=(0, 1))

    def _extract(self, full):
        rolled = np.roll(
            full, (self.kernel_shape[0] // 2, self.kernel_shape[1] // 2), axis=(0, 1)
        )
        return rolled[: self.kernel_shape[0], : self.kernel_shape[1]]

    def _conv(self, a, b):
        fa = np.fft.rfft2(a)
        fb = np.fft.rfft2(b)
        return np.fft.irfft2(fa * fb, s=self.image_shape)

    def _corr(self, a, b):
        # correlation of a with b == adjoint of convolution-by-a applied to b
        fa = np.fft.rfft2(a)
        fb = np.fft.rfft2(b)
        return np.fft.irfft2(np.conj(fa) * fb, s=self.image_shape)

    def forward(self, theta, v):
        """A(theta) v = theta (*) v, flattened to length H*W."""
        img = np.asarray(v, dtype=np.float64).reshape(self.image_shape)
        return self._conv(self._embed(theta), img).ravel()

    def adjoint_v(self, theta, w):
        """A(theta)^T w: correlate the kernel against a measurement image."""
        img = np.asarray(w, dtype=np.float64).reshape(self.image_shape)
        return self._corr(self._embed(theta), img).ravel()

    def adjoint_theta(self, v, w):
        """Adjoint of theta -> theta (*) v: correlate v with w, crop to kernel."""
        vi = np.asarray(v, dtype=np.float64).reshape(self.image_shape)
        wi = np.asarray(w, dtype=np.float64).reshape(self.image_shape)
        return self._extract(self._corr(vi, wi)).ravel()


class MultiCoilModel:
    """Per-coil weighting, unitary 2-D DFT, then frequency subsampling.

    The image and the per-coil sensitivity maps are complex; the sampling
    mask selects frequencies (1 = sampled).  Measurements are kept as full
    (coils, H, W) complex arrays that are zero off the mask.
    """

    def __init__(self, image_shape, num_coils, mask):
        self.image_shape = tuple(int(s) for s in image_shape)
        self.num_coils = int(num_coils)
        if self.num_coils < 1:
            raise ValueError("need at least one coil")
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != self.image_shape:
            raise ValueError("mask shape must match the image shape")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask entries must be 0 or 1")
        self.mask = mask

    @property
    def layout(self):
        n = self.image_shape[0] * self.image_shape[1]
        return BlockLayout((2 * n, 2 * self.num_coils * n))

    def _as_image(self, v):
        return np.asarray(v, dtype=np.complex128).reshape(self.image_shape)

    def _as_maps(self, maps):
        return np.asarray(maps, dtype=np.complex128).reshape(
            (self.num_coils,) + self.image_shape
        )

    def forward(self, maps, v):
        """Stack of masked unitary DFTs of (map_i * image)."""
        img = self._as_image(v)
        out = np.empty((self.num_coils,) + self.image_shape, dtype=np.complex128)
        for i, m in enumerate(self._as_maps(maps)):
            out[i] = self.mask * np.fft.fft2(m * img, norm="ortho")
        return out

    def adjoint_v(self, maps, w):
        img = np.zeros(self.image_shape, dtype=np.complex128)
        for i, m in enumerate(self._as_maps(maps)):
            img += np.conj(m) * np.fft.ifft2(self.mask * w[i], norm="ortho")
        return img

    def adjoint_maps(self, v, w):
        img = self._as_image(v)
        out = np.empty((self.num_coils,) + self.image_shape, dtype=np.complex128)
        for i in range(self.num_coils):
            out[i] = np.conj(img) * np.fft.ifft2(self.mask * w[i], norm="ortho")
        return out


class LinearModel:
    """Fixed known measurement matrix; no operator parameters."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError("measurement matrix must be 2-D")

    def forward(self, x):
        return self.matrix @ np.asarray(x, dtype=np.float64).ravel()

    def adjoint(self, w):
        return self.matrix.T @ np.asarray(w, dtype=np.float64).ravel()


# ---------------------------------------------------------------------------
# data fidelities g(x) = 0.5 || y - A(theta) v ||^2
# ---------------------------------------------------------------------------


class ConvolutionFidelity:
    """Least-squares fidelity for the blind deconvolution model."""

    def __init__(self, model: BlindConvolutionModel, y):
        self.model = model
        self.y = np.asarray(y, dtype=np.float64).ravel()
        if self.y.size != model.image_shape[0] * model.image_shape[1]:
            raise ValueError("measurement size does not match the image shape")
        self.layout = model.layout

    def residual(self, v, theta):
        return self.model.forward(theta, v) - self.y

    def value(self, x: BlockVector):
        r = self.residual(x.extract(1), x.extract(2))
        return 0.5 * float(np.dot(r, r))

    def grad_v(self, v, theta):
        return self.model.adjoint_v(theta, self.residual(v, theta))

    def grad_theta(self, v, theta):
        return self.model.adjoint_theta(v, self.residual(v, theta))

    def grad_block(self, x: BlockVector, i):
        v, theta = x.extract(1), x.extract(2)
        if i == 1:
            return self.grad_v(v, theta)
        if i == 2:
            return self.grad_theta(v, theta)
        raise IndexError(f"block index {i} out of range 1..2")

    def grad(self, x: BlockVector):
        v, theta = x.extract(1), x.extract(2)
        r = self.residual(v, theta)
        return BlockVector.from_blocks(
            [self.model.adjoint_v(theta, r), self.model.adjoint_theta(v, r)]
        )

    def hessian_vec(self, x: BlockVector, u: BlockVector):
        """Exact Hessian-vector product of the bilinear fidelity at x."""
        v, theta = x.extract(1), x.extract(2)
        dv, dtheta = u.extract(1), u.extract(2)
        r = self.residual(v, theta)
        s = self.model.forward(theta, dv) + self.model.forward(dtheta, v)
        hv = self.model.adjoint_v(theta, s) + self.model.adjoint_v(dtheta, r)
        ht = self.model.adjoint_theta(v, s) + self.model.adjoint_theta(dv, r)
        return BlockVector.from_blocks([hv, ht])

    def adjoint_init(self, theta):
        """Image-block initialization A(theta)^T y."""
        return self.model.adjoint_v(theta, self.y)


class MultiCoilFidelity:
    """Least-squares fidelity for the multi-coil model over real pairs."""

    def __init__(self, model: MultiCoilModel, y):
        self.model = model
        y = np.asarray(y, dtype=np.complex128)
        if y.shape != (model.num_coils,) + model.image_shape:
            raise ValueError("measurements must be (coils, H, W) complex")
        self.y = y
        self.layout = model.layout

    def _unpack(self, x: BlockVector):
        v = pairs_to_complex(x.extract(1), self.model.image_shape)
        maps = pairs_to_complex(
            x.extract(2), (self.model.num_coils,) + self.model.image_shape
        )
        return v, maps

    def residual(self, v, maps):
        return self.model.forward(maps, v) - self.y

    def value(self, x: BlockVector):
        r = self.residual(*self._unpack(x))
        return 0.5 * float(np.sum(np.abs(r) ** 2))

    def grad_v(self, v_pairs, theta_pairs):
        v = pairs_to_complex(v_pairs, self.model.image_shape)
        maps = pairs_to_complex(
            theta_pairs, (self.model.num_coils,) + self.model.image_shape
        )
        r = self.residual(v, maps)
        return complex_to_pairs(self.model.adjoint_v(maps, r))

    def grad_theta(self, v_pairs, theta_pairs):
        v = pairs_to_complex(v_pairs, self.model.image_shape)
        maps = pairs_to_complex(
            theta_pairs, (self.model.num_coils,) + self.model.image_shape
        )
        r = self.residual(v, maps)
        return complex_to_pairs(self.model.adjoint_maps(v, r))

    def grad_block(self, x: BlockVector, i):
        if i == 1:
            return self.grad_v(x.extract(1), x.extract(2))
        if i == 2:
            return self.grad_theta(x.extract(1), x.extract(2))
        raise IndexError(f"block index {i} out of range 1..2")

    def grad(self, x: BlockVector):
        v, maps = self._unpack(x)
        r = self.residual(v, maps)
        return BlockVector.from_blocks(
            [
                complex_to_pairs(self.model.adjoint_v(maps, r)),
                complex_to_pairs(self.model.adjoint_maps(v, r)),
            ]
        )

    def hessian_vec(self, x: BlockVector, u: BlockVector):
        v, maps = self._unpack(x)
        dv, dmaps = self._unpack(u)
        r = self.residual(v, maps)
        s = self.model.forward(maps, dv) + self.model.forward(dmaps, v)
        hv = self.model.adjoint_v(maps, s) + self.model.adjoint_v(dmaps, r)
        ht = self.model.adjoint_maps(v, s) + self.model.adjoint_maps(dv, r)
        return BlockVector.from_blocks([complex_to_pairs(hv), complex_to_pairs(ht)])

    def adjoint_init(self, theta_pairs):
        maps = pairs_to_complex(
            theta_pairs, (self.model.num_coils,) + self.model.image_shape
        )
        return complex_to_pairs(self.model.adjoint_v(maps, self.y))


class LinearFidelity:
    """Least-squares fidelity with a fixed operator; any block partition."""

    def __init__(self, model: LinearModel, layout: BlockLayout, y):
        self.model = model
        if model.matrix.shape[1] != layout.total:
            raise ValueError("matrix columns must match the layout total")
        self.layout = layout
        self.y = np.asarray(y, dtype=np.float64).ravel()
        if self.y.size != model.matrix.shape[0]:
            raise ValueError("measurement length must match matrix rows")

    def value(self, x: BlockVector):
        r = self.model.forward(x.data) - self.y
        return 0.5 * float(np.dot(r, r))

    def grad(self, x: BlockVector):
        r = self.model.forward(x.data) - self.y
        return BlockVector(self.layout, self.model.adjoint(r))

    def grad_block(self, x: BlockVector, i):
        return self.grad(x).extract(i)

    def hessian_vec(self, x: BlockVector, u: BlockVector):
        return BlockVector(self.layout, self.model.adjoint(self.model.forward(u.data)))

    def adjoint_init(self, theta=None):
        return self.model.adjoint(self.y)


# ---------------------------------------------------------------------------
# Lipschitz certification over a norm ball around the current iterate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LipschitzEstimate:
    """Block and full gradient-smoothness constants over the scaled ball."""

    block_constants: tuple
    l_max: float
    l_full: float
    converged: bool


def _power_iteration(apply_op, dim, rng, square=False):
    """Largest |eigenvalue| of a symmetric operator; (value, converged).

    With square=True the operator is applied twice per sweep, which makes
    the estimate robust for indefinite spectra (paired +/- eigenvalues of
    the bilinear Hessian) at the cost of one extra application.
    """
    u = rng.standard_normal(dim)
    nrm = np.linalg.norm(u)
    if nrm == 0:
        return 0.0, True
    u /= nrm
    lam = 0.0
    for _ in range(POWER_ITER_MAX):
        w = apply_op(u)
        if square:
            w = apply_op(w)
        wn = np.linalg.norm(w)
        if wn == 0.0:
            return 0.0, True
        est = float(np.sqrt(wn)) if square else float(wn)
        u = w / wn
        if abs(est - lam) <= POWER_ITER_TOL * max(est, 1e-300):
            return est, True
        lam = est
    return lam, False


def estimate_block_lipschitz(fidelity, x: BlockVector, radius=10.0):
    """Upper bounds for the block Lipschitz constants of the fidelity gradient.

    The bilinear fidelity has no global smoothness constant, so constants
    are certified over the ball {||x_i|| <= radius * ||current x_i||} by
    evaluating block Hessians at the iterate scaled blockwise to the ball
    boundary and running power iteration there.  The full-gradient constant
    is estimated the same way on the joint Hessian and floored at l_max.
    Requires radius >= 1 so the current iterate lies inside the ball.
    """
    if radius < 1.0:
        raise ValueError("ball radius factor must be >= 1 (iterate inside ball)")
    layout = fidelity.layout
    boundary = BlockVector(layout, radius * x.data)
    rng = np.random.default_rng(_POWER_SEED)
    converged = True
    block_constants = []
    for i in range(1, layout.num_blocks + 1):
        size = layout.sizes[i - 1]

        def block_op(u, i=i):
            du = BlockVector(layout, np.zeros(layout.total)).inject(i, u)
            return fidelity.hessian_vec(boundary, du).extract(i)

        lam, ok = _power_iteration(block_op, size, rng)
        converged = converged and ok
        block_constants.append(lam)

    def full_op(u):
        return fidelity.hessian_vec(boundary, BlockVector(layout, u)).data

    l_full, ok = _power_iteration(full_op, layout.total, rng, square=True)
    converged = converged and ok
    l_max = max(block_constants)
    return LipschitzEstimate(
        tuple(block_constants), l_max, max(l_full, l_max), converged
    )


# ---------------------------------------------------------------------------
# measurement synthesis
# ---------------------------------------------------------------------------


def synthesize(model, v, theta=None, noise_sigma=0.0, seed=0):
    """Generate y = A(theta) v + e with seeded white Gaussian noise.

    Noise has standard deviation noise_sigma per real measurement scalar;
    for the multi-coil model it is complex (independent real and imaginary
    parts) and restricted to sampled frequencies.
    """
    if noise_sigma < 0:
        raise ValueError("noise level must be nonnegative")
    rng = np.random.default_rng(seed)
    if isinstance(model, BlindConvolutionModel):
        y = model.forward(theta, v)
        if noise_sigma > 0:
            y = y + noise_sigma * rng.standard_normal(y.size)
        return y
    if isinstance(model, MultiCoilModel):
        y = model.forward(theta, v)
        if noise_sigma > 0:
            e = rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
            y = y + noise_sigma * model.mask * e
        return y
    if isinstance(model, LinearModel):
        y = model.forward(v)
        if noise_sigma > 0:
            y = y + noise_sigma * rng.standard_normal(y.size)
        return y
    raise TypeError(f"cannot synthesize measurements for {type(model).__name__}")
