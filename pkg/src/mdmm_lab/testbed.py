"""Synthetic sinusoid task, the VAE analog trained on it, and its metrics."""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DimensionMismatch, EmptyBatch, NonFiniteValue
from .nn import Activation, Net, NetSpec

DATASET_SCHEMA = "mdmm-lab/dataset/1"


@dataclass(frozen=True)
class SignalGenerator:
    """``x[t] = sum_k z_k sin(2 pi f_k t / L + phi_k) + noise`` with ``z ~ N(0, I)``."""

    latent_dim: int = 4
    signal_len: int = 64
    frequencies: tuple = (1.0, 2.0, 3.0, 5.0)
    phases: tuple = (0.0, math.pi / 4, math.pi / 2, 3 * math.pi / 4)
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "frequencies", tuple(float(f) for f in self.frequencies))
        object.__setattr__(self, "phases", tuple(float(p) for p in self.phases))
        if len(self.frequencies) != self.latent_dim or len(self.phases) != self.latent_dim:
            raise ValueError("frequencies and phases need one entry per latent dim")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    def basis(self) -> np.ndarray:
        """``(latent_dim, signal_len)`` matrix of the sinusoid components."""
        t = np.arange(self.signal_len)
        f = np.asarray(self.frequencies)[:, None]
        ph = np.asarray(self.phases)[:, None]
        return np.sin(2.0 * np.pi * f * t / self.signal_len + ph)

    def signal(self, z) -> np.ndarray:
        """Noise-free signals for latent rows ``z``."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return z @ self.basis()


def generate_dataset(gen: SignalGenerator, n: int, seed: Optional[int] = None) -> np.ndarray:
    """Draw ``n`` signals; ``seed`` overrides ``gen.seed`` (used for held-out splits)."""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    rng = np.random.default_rng(gen.seed if seed is None else seed)
    z = rng.standard_normal((n, gen.latent_dim))
    x = gen.signal(z)
    if gen.noise_std > 0:
        x = x + gen.noise_std * rng.standard_normal(x.shape)
    return x


def save_dataset_csv(path, data: np.ndarray, gen: SignalGenerator) -> None:
    buf = io.StringIO()
    buf.write(f"# schema: {DATASET_SCHEMA}\n")
    buf.write(f"# generator: {json.dumps(asdict(gen), sort_keys=True)}\n")
    buf.write(",".join(f"x{i}" for i in range(data.shape[1])) + "\n")
    for row in data:
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    Path(path).write_text(buf.getvalue())


def load_dataset_csv(path) -> Tuple[np.ndarray, SignalGenerator]:
    gen = None
    rows = []
    header_seen = False
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            if line.startswith("# generator:"):
                gen = SignalGenerator(**json.loads(line.split(":", 1)[1]))
            continue
        if not header_seen:
            header_seen = True
            continue
        if line.strip():
            rows.append([float(v) for v in line.split(",")])
    if gen is None:
        raise ValueError(f"{path}: missing generator comment line")
    return np.array(rows, dtype=np.float64).reshape(-1, gen.signal_len), gen


def recon_l1(x, x_hat) -> float:
    """Mean absolute error over every entry."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise DimensionMismatch(f"shapes differ: {x.shape} vs {x_hat.shape}")
    return float(np.mean(np.abs(x - x_hat)))


def kl_diag_gaussian(mu, logvar) -> float:
    """Batch-averaged ``KL(N(mu, diag exp(logvar)) || N(0, I))``, summed over latent dims."""
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    logvar = np.atleast_2d(np.asarray(logvar, dtype=np.float64))
    if mu.shape != logvar.shape:
        raise DimensionMismatch(f"mu {mu.shape} and logvar {logvar.shape} differ")
    if not np.all(np.isfinite(logvar)):
        raise NonFiniteValue("logvar contains non-finite entries")
    per_row = 0.5 * np.sum(mu * mu + np.expm1(logvar) - logvar, axis=1)
    return float(np.mean(per_row))


@dataclass
class LossBreakdown:
    l_recon: float
    l_kl: float
    g_residual: float
    lambda_now: float
    total: float


class VaeModel:
    """Encoder producing ``(mu, logvar)`` halves and a decoder, sharing one parameter vector."""

    def __init__(self, encoder_spec: NetSpec, decoder_spec: NetSpec):
        code = decoder_spec.in_dim
        if encoder_spec.out_dim != 2 * code:
            raise DimensionMismatch(
                f"encoder output {encoder_spec.out_dim} must be twice the code dim {code}"
            )
        if encoder_spec.in_dim != decoder_spec.out_dim:
            raise DimensionMismatch("encoder input and decoder output widths differ")
        ne, nd = encoder_spec.n_params, decoder_spec.n_params
        self.params = np.zeros(ne + nd)
        self.grads = np.zeros(ne + nd)
        self.encoder = Net(encoder_spec, param_buffer=self.params[:ne], grad_buffer=self.grads[:ne])
        self.decoder = Net(decoder_spec, param_buffer=self.params[ne:], grad_buffer=self.grads[ne:])
        init = np.concatenate([Net(encoder_spec).params, Net(decoder_spec).params])
        self.params[...] = init

    @classmethod
    def build(cls, signal_len=64, code_dim=8, encoder_hidden=(64, 64), decoder_hidden=(64, 64),
              activation=Activation.TANH, seed=0) -> "VaeModel":
        enc = NetSpec((signal_len, *encoder_hidden, 2 * code_dim), activation, seed)
        dec = NetSpec((code_dim, *decoder_hidden, signal_len), activation, seed + 1)
        return cls(enc, dec)

    @property
    def code_dim(self) -> int:
        return self.decoder.spec.in_dim

    @property
    def n_params(self) -> int:
        return self.params.size

    def encode(self, x):
        out = self.encoder.forward(x)
        return out[:, : self.code_dim], out[:, self.code_dim:]

    def decode(self, z):
        return self.decoder.forward(z)


def _draw_noise(noise, shape) -> np.ndarray:
    if isinstance(noise, np.random.Generator):
        return noise.standard_normal(shape)
    eta = np.asarray(noise, dtype=np.float64)
    if eta.shape != shape:
        raise DimensionMismatch(f"noise shape {eta.shape}, expected {shape}")
    return eta


def vae_losses(
    model: VaeModel,
    batch,
    noise: Union[np.random.Generator, np.ndarray, None],
    epsilon: float = 0.0,
    lam: float = 0.0,
    damping: float = 0.0,
    deterministic: bool = False,
) -> Tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Forward pass plus separate parameter gradients of the two loss terms.

    Returns ``(breakdown, grad_recon, grad_kl)``; both gradients are flat over
    ``model.params``.  ``deterministic`` decodes ``z = mu`` (plain autoencoder)
    and ignores ``noise``.  ``total`` in the breakdown is the augmented
    Lagrangian ``KL + lam*G + damping/2*G**2`` with ``G = recon - epsilon``.
    """
    x = np.asarray(batch, dtype=np.float64)
    n = x.shape[0]
    mu, logvar = model.encode(x)
    if not np.all(np.isfinite(logvar)):
        raise NonFiniteValue("encoder produced non-finite logvar")
    if deterministic:
        eta = np.zeros_like(mu)
        std = np.zeros_like(mu)
        z = mu
    else:
        eta = _draw_noise(noise, mu.shape)
        std = np.exp(0.5 * logvar)
        z = mu + std * eta
    x_hat = model.decode(z)
    l_recon = recon_l1(x, x_hat)
    l_kl = kl_diag_gaussian(mu, logvar)
    if not (math.isfinite(l_recon) and math.isfinite(l_kl)):
        raise NonFiniteValue("non-finite loss value")

    # reconstruction term through decoder, reparameterisation and encoder
    model.grads[...] = 0.0
    d_xhat = np.sign(x_hat - x) / x.size
    d_z = model.decoder.backward(d_xhat)
    d_enc = np.concatenate([d_z, 0.5 * d_z * std * eta], axis=1)
    model.encoder.backward(d_enc)
    grad_recon = model.grads.copy()

    model.grads[...] = 0.0
    d_kl = np.concatenate([mu / n, 0.5 * np.expm1(logvar) / n], axis=1)
    model.encoder.backward(d_kl)
    grad_kl = model.grads.copy()
    model.grads[...] = 0.0

    G = l_recon - epsilon
    total = l_kl + lam * G + 0.5 * damping * G * G
    return LossBreakdown(l_recon, l_kl, G, lam, total), grad_recon, grad_kl


def _median_bandwidth(sq: np.ndarray) -> float:
    iu = np.triu_indices(sq.shape[0], k=1)
    if iu[0].size == 0:
        return 1.0
    med = float(np.median(np.sqrt(sq[iu])))
    return med if med > 0 else 1.0


def mmd2(gen_batch, data_batch, bandwidth: Optional[float] = None) -> float:
    """Biased squared MMD with a Gaussian kernel.

    The default bandwidth is the median pairwise distance over the pooled
    samples; zero median (all points equal) falls back to 1.
    """
    x = np.atleast_2d(np.asarray(gen_batch, dtype=np.float64))
    y = np.atleast_2d(np.asarray(data_batch, dtype=np.float64))
    if x.shape[0] == 0 or y.shape[0] == 0 or x.size == 0 or y.size == 0:
        raise EmptyBatch("mmd2 needs two non-empty batches")
    if x.shape[1] != y.shape[1]:
        raise DimensionMismatch(f"batch widths differ: {x.shape[1]} vs {y.shape[1]}")
    pooled = np.concatenate([x, y])
    sq = cdist(pooled, pooled, "sqeuclidean")
    sigma = _median_bandwidth(sq) if bandwidth is None else float(bandwidth)
    k = np.exp(-sq / (2.0 * sigma * sigma))
    n = x.shape[0]
    kxx = np.ascontiguousarray(k[:n, :n]).mean()
    kyy = np.ascontiguousarray(k[n:, n:]).mean()
    kxy = np.ascontiguousarray(k[:n, n:]).mean()
    return float(max(kxx + kyy - 2.0 * kxy, 0.0))


def generation_quality(model: VaeModel, heldout, n_gen: int = 1024, seed: int = 0) -> float:
    """MMD² between decoded prior samples and held-out data; lower is better."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_gen, model.code_dim))
    return mmd2(model.decode(z), heldout)
