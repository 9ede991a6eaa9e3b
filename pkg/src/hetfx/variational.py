"""Variational families, reparameterized sampling, KL terms, and the
Gumbel-Softmax categorical relaxation.

Every sampler takes an explicit numpy Generator; nothing here keeps RNG
state, so concurrent use with independent streams is safe.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    _col2im,
    _im2col,
    _pad_spec,
    _record,
    _result,
    add,
    log as tlog,
    matmul,
    mul,
    reshape,
    softmax,
    softplus,
    square,
    sub,
    tsum,
)


def softplus_inv(y):
    """Inverse of softplus; y must be positive."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus_inv needs positive input")
    # log(expm1(y)), stable for large y where expm1 overflows
    out = np.where(y > 30, y, np.log(np.expm1(np.minimum(y, 30))))
    return out


class VariationalGaussian:
    """Diagonal Gaussian over one named parameter group.

    ``sigma = softplus(rho)`` keeps the scale positive by construction;
    mean and rho are the trainable leaves.
    """

    def __init__(self, name: str, mean: np.ndarray, sigma_init):
        mean = np.asarray(mean, dtype=np.float64)
        self.name = name
        self.mean = Tensor(mean, requires_grad=True, name=f"{name}.mean")
        rho = softplus_inv(np.broadcast_to(np.asarray(sigma_init, dtype=np.float64),
                                           mean.shape))
        self.rho = Tensor(rho.copy(), requires_grad=True, name=f"{name}.rho")

    @property
    def shape(self):
        return self.mean.data.shape

    def sigma(self) -> Tensor:
        return softplus(self.rho)

    def sigma_values(self) -> np.ndarray:
        return np.logaddexp(0.0, self.rho.data)

    def sample(self, noise) -> Tensor:
        """Reparameterized draw: mean + softplus(rho) * noise."""
        noise = noise if isinstance(noise, Tensor) else Tensor(noise)
        if noise.data.shape != self.mean.data.shape:
            raise ShapeError(
                f"{self.name}: noise shape {noise.data.shape} != {self.mean.data.shape}"
            )
        return add(self.mean, mul(self.sigma(), noise))

    def sample_values(self, rng: np.random.Generator) -> np.ndarray:
        """Detached draw (no graph), for scoring paths."""
        return self.mean.data + self.sigma_values() * rng.standard_normal(self.shape)

    def leaves(self):
        return [self.mean, self.rho]


def sample_gaussian_reparam(vp: VariationalGaussian, noise) -> Tensor:
    return vp.sample(noise)


class GaussianPrior:
    """Fixed diagonal Gaussian prior for one parameter group."""

    def __init__(self, mean: np.ndarray, sigma):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64),
                                     self.mean.shape).copy()
        if np.any(self.sigma <= 0):
            raise ValueError("prior sigma must be positive")


def kl_gaussian_diag(q: VariationalGaussian, p: GaussianPrior) -> Tensor:
    """Closed-form KL(q || p) for diagonal Gaussians, summed over entries.

    KL = sum( log(p.sigma) - log(q.sigma)
              + (q.sigma^2 + (q.mean - p.mean)^2) / (2 p.sigma^2) - 1/2 )
    """
    if q.mean.data.shape != p.mean.shape:
        raise ShapeError(
            f"KL shapes differ: q {q.mean.data.shape} vs p {p.mean.shape}"
        )
    if np.any(p.sigma <= 0):
        raise ValueError("prior sigma must be positive")
    sig_q = q.sigma()
    diff = sub(q.mean, Tensor(p.mean))
    num = add(square(sig_q), square(diff))
    terms = add(sub(Tensor(np.log(p.sigma)), tlog(sig_q)),
                add(mul(num, 1.0 / (2.0 * p.sigma ** 2)), -0.5))
    return tsum(terms)


def gumbel_softmax(logits, temperature: float, rng: np.random.Generator) -> Tensor:
    """Relaxed categorical draw on the simplex (last axis).

    softmax((logits + Gumbel(0,1)) / temperature); differentiable in the
    logits, with the noise recorded as a constant leaf.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    u = rng.random(logits.data.shape)
    g = -np.log(-np.log(np.clip(u, 1e-300, 1.0 - 1e-16)))
    return softmax(mul(add(logits, Tensor(g)), 1.0 / temperature))


def rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def flipout_dense(x, vg_w: VariationalGaussian, vg_b: VariationalGaussian,
                  rng: np.random.Generator) -> Tensor:
    """Affine layer under flipout: per-example pseudo-independent weight draws.

    One shared weight perturbation dW = sigma*eps per call, decorrelated
    across the batch by per-example sign vectors; biases get fully
    independent per-example Gaussian draws (they are cheap).
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    squeeze = x.data.ndim == 1
    if squeeze:
        x = reshape(x, (1, -1))
    n = x.data.shape[0]
    din, dout = vg_w.shape
    if x.data.shape[1] != din:
        raise ShapeError(f"flipout_dense input width {x.data.shape[1]} != {din}")
    eps = Tensor(rng.standard_normal((din, dout)))
    delta = mul(vg_w.sigma(), eps)
    s_in = Tensor(rademacher(rng, (n, din)))
    s_out = Tensor(rademacher(rng, (n, dout)))
    b_noise = Tensor(rng.standard_normal((n, dout)))
    b = add(vg_b.mean, mul(vg_b.sigma(), b_noise))
    out = add(add(matmul(x, vg_w.mean), mul(matmul(mul(x, s_in), delta), s_out)), b)
    return reshape(out, (-1,)) if squeeze else out


def flipout_conv2d(x, vg_f: VariationalGaussian, vg_b: VariationalGaussian,
                   rng: np.random.Generator, stride: int = 1,
                   padding: str = "same") -> Tensor:
    """Conv layer under flipout, fused so patches are extracted once.

    Sign vectors span the input/output channel axes and are shared across
    space, which lets the perturbation path reuse the mean path's patch
    matrix. Per-example bias draws are independent Gaussians.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"flipout_conv2d needs (N, H, W, C), got {x.data.shape}")
    k, k2, cin, cout = vg_f.shape
    if k != k2:
        raise ShapeError(f"filters must be square, got {vg_f.shape}")
    n, h, w, cx = x.data.shape
    if cx != cin:
        raise ShapeError(f"input channels {cx} != filter channels {cin}")

    eps = Tensor(rng.standard_normal((k, k, cin, cout)))
    delta = mul(vg_f.sigma(), eps)  # graph tensor: gradient flows to rho
    s_in = rademacher(rng, (n, cin))
    s_out = rademacher(rng, (n, cout))
    b_noise = Tensor(rng.standard_normal((n, cout)))
    bias_rows = add(vg_b.mean, mul(vg_b.sigma(), b_noise))  # (n, cout)

    ho, wo, pads_h, pads_w = _pad_spec(h, w, k, stride, padding)
    pt, pb = pads_h
    pl, pr = pads_w
    xd = x.data
    xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else xd
    hp, wp = xp.shape[1], xp.shape[2]
    cols = _im2col(xp, k, stride, ho, wo).reshape(n, ho * wo, k * k, cin)
    cols_flat = cols.reshape(n * ho * wo, k * k * cin)
    cols_s = (cols * s_in[:, None, None, :]).reshape(n * ho * wo, k * k * cin)

    wm = vg_f.mean.data.reshape(k * k * cin, cout)
    dm = delta.data.reshape(k * k * cin, cout)
    y = (cols_flat @ wm).reshape(n, ho, wo, cout)
    y += (cols_s @ dm).reshape(n, ho, wo, cout) * s_out[:, None, None, :]
    y += bias_rows.data[:, None, None, :]
    out = _result(y, "flipout_conv2d")

    def back_mean(g):
        return (cols_flat.T @ g.reshape(-1, cout)).reshape(k, k, cin, cout)

    def back_delta(g):
        gs = (g * s_out[:, None, None, :]).reshape(-1, cout)
        return (cols_s.T @ gs).reshape(k, k, cin, cout)

    def back_bias(g):
        return g.sum(axis=(1, 2))

    def back_x(g):
        gf = g.reshape(n * ho * wo, cout)
        dcols = gf @ wm.T
        gs = (g * s_out[:, None, None, :]).reshape(-1, cout)
        dcols_s = (gs @ dm.T).reshape(n, ho * wo, k * k, cin) * s_in[:, None, None, :]
        dcols = dcols.reshape(n, ho, wo, k, k, cin) + dcols_s.reshape(n, ho, wo, k, k, cin)
        return _col2im(dcols, (n, hp, wp, cin), k, stride, pads_h, pads_w)

    _record(out, [(vg_f.mean, back_mean), (delta, back_delta),
                  (bias_rows, back_bias), (x, back_x)])
    return out


def empirical_bayes_priors(groups: dict[str, np.ndarray],
                           sigma_floor: float = 1e-3) -> dict[str, GaussianPrior]:
    """Priors from a deterministic pre-fit: mean = pre-fit weights, sigma =
    that group's (population) weight standard deviation, floored."""
    priors = {}
    for name, values in groups.items():
        arr = np.asarray(values, dtype=np.float64)
        if arr.size == 0:
            raise ValueError(f"empty parameter group {name!r}")
        sd = float(arr.std())
        priors[name] = GaussianPrior(arr.copy(), max(sd, sigma_floor))
    return priors
