"""LSTM-VAE and LSTM-LVAE sequence models.

Both models share the architecture: an LSTM encoder produces a Gaussian
posterior per time step, a reparameterised sample is decoded by an LSTM
decoder back into the feature space. They differ only in the prior: the VAE
uses N(0, I) for every latent, the LVAE uses an additive GP over subject
descriptors (one kernel per latent dimension), evaluated on the rows of each
minibatch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import checkpoint
from .core_types import DescriptorKind, GeneratedSeries, MissingSkeleton
from .gp_prior import (
    DescriptorEncoder,
    GramMatrix,
    KernelSpec,
    default_spec,
    eval_gram,
    kl_posterior_vs_gp,
    kl_standard_normal,
    sample_prior,
    spec_from_structure,
    spec_structure,
)
from .numeric import (
    LstmCellParams,
    ShapeMismatch,
    Tensor,
    add,
    dense_init,
    exp,
    index_axis,
    linear,
    lstm_cell,
    masked_mean_square,
    mul,
    no_grad,
    reshape,
    scale,
    stack,
    take_rows,
)
from .pipeline import MinMaxScaler, SequenceBatch
from .training import FitConfig, FitResult, fit


class PriorKind(str, enum.Enum):
    STANDARD = "standard"
    GP = "gp"


@dataclass
class EncoderParams:
    layers: list[LstmCellParams]
    W_mu: Tensor
    b_mu: Tensor
    W_ls: Tensor
    b_ls: Tensor

    def named_parameters(self, prefix="enc.") -> list[tuple[str, Tensor]]:
        out = []
        for k, cell in enumerate(self.layers):
            out += cell.named_parameters(f"{prefix}l{k}.")
        out += [(prefix + "W_mu", self.W_mu), (prefix + "b_mu", self.b_mu)]
        out += [(prefix + "W_ls", self.W_ls), (prefix + "b_ls", self.b_ls)]
        return out

    @classmethod
    def init(cls, D, H, L, rng, depth=1) -> "EncoderParams":
        layers = [LstmCellParams.init(D if k == 0 else H, H, rng) for k in range(depth)]
        W_mu, b_mu = dense_init(L, H, rng)
        W_ls, b_ls = dense_init(L, H, rng)
        return cls(layers, W_mu, b_mu, W_ls, b_ls)


@dataclass
class DecoderParams:
    layers: list[LstmCellParams]
    W_out: Tensor
    b_out: Tensor

    def named_parameters(self, prefix="dec.") -> list[tuple[str, Tensor]]:
        out = []
        for k, cell in enumerate(self.layers):
            out += cell.named_parameters(f"{prefix}l{k}.")
        out += [(prefix + "W_out", self.W_out), (prefix + "b_out", self.b_out)]
        return out

    @classmethod
    def init(cls, L, H, D, rng, depth=1) -> "DecoderParams":
        layers = [LstmCellParams.init(L if k == 0 else H, H, rng) for k in range(depth)]
        W_out, b_out = dense_init(D, H, rng)
        return cls(layers, W_out, b_out)


@dataclass
class ElboConfig:
    beta: float = 1.0
    latent_dim: int = 8
    hidden_dim: int = 16
    depth: int = 1
    lr: float = 1e-2
    max_epochs: int = 200
    patience: int = 10
    min_delta: float = 1e-5
    batch_size: int = 16
    gp_use_time: bool = False

    def __post_init__(self):
        if not self.beta > 0 or self.latent_dim < 1 or self.hidden_dim < 1:
            raise ValueError("need beta > 0, latent_dim >= 1 and hidden_dim >= 1")

    def fit_config(self) -> FitConfig:
        return FitConfig(self.lr, self.max_epochs, self.patience, self.min_delta, self.batch_size)


# ---------------------------------------------------------------------------
# forward pieces


def _as_batched(y) -> tuple[np.ndarray, bool]:
    y = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if y.ndim == 2:
        return y[None], True
    if y.ndim != 3:
        raise ShapeMismatch(f"expected (T, D) or (B, T, D), got {y.shape}")
    return y, False


def _run_lstm(layers: list[LstmCellParams], steps: list[Tensor]) -> list[Tensor]:
    B = steps[0].shape[0]
    for cell in layers:
        H = cell.hidden_size
        h = Tensor(np.zeros((B, H)))
        c = Tensor(np.zeros((B, H)))
        outs = []
        for x in steps:
            if x.shape[1] != cell.input_size:
                raise ShapeMismatch(f"LSTM expects input size {cell.input_size}, got {x.shape[1]}")
            h, c = lstm_cell(cell, x, h, c)
            outs.append(h)
        steps = outs
    return steps


def encode(enc: EncoderParams, y) -> tuple[Tensor, Tensor]:
    """Posterior parameters per step; (T, D) in gives (T, L), (B, T, D) gives (B, T, L)."""
    yb, single = _as_batched(y)
    steps = [Tensor(yb[:, t]) for t in range(yb.shape[1])]
    hs = _run_lstm(enc.layers, steps)
    mu = stack([linear(h, enc.W_mu, enc.b_mu) for h in hs], axis=1)
    ls = stack([linear(h, enc.W_ls, enc.b_ls) for h in hs], axis=1)
    if single:
        return index_axis(mu, 0, 0), index_axis(ls, 0, 0)
    return mu, ls


def reparameterize(mu: Tensor, log_sigma: Tensor, noise) -> Tensor:
    noise = np.asarray(noise, dtype=np.float64)
    if mu.shape != log_sigma.shape or mu.shape != noise.shape:
        raise ShapeMismatch(f"mu {mu.shape}, log_sigma {log_sigma.shape}, noise {noise.shape}")
    return add(mu, mul(exp(log_sigma), Tensor(noise)))


def decode(dec: DecoderParams, z) -> Tensor:
    """Reconstruction per step; (T, L) in gives (T, D), (B, T, L) gives (B, T, D)."""
    if not isinstance(z, Tensor):
        z = Tensor(z)
    single = z.data.ndim == 2
    if single:
        z = reshape(z, (1, *z.shape))
    if z.data.ndim != 3:
        raise ShapeMismatch(f"expected (T, L) or (B, T, L), got {z.shape}")
    steps = [index_axis(z, t, 1) for t in range(z.shape[1])]
    hs = _run_lstm(dec.layers, steps)
    y_hat = stack([linear(h, dec.W_out, dec.b_out) for h in hs], axis=1)
    return index_axis(y_hat, 0, 0) if single else y_hat


def _mask_for(y: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return np.ones(y.shape[:-1], dtype=bool)
    return np.asarray(mask, dtype=bool)


def _real_rows(mu: Tensor, log_sigma: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
    L = mu.shape[-1]
    flat_mu = reshape(mu, (-1, L))
    flat_ls = reshape(log_sigma, (-1, L))
    rows = np.flatnonzero(mask.reshape(-1))
    return take_rows(flat_mu, rows), take_rows(flat_ls, rows)


def elbo_vae(y, y_hat: Tensor, mu: Tensor, log_sigma: Tensor, beta: float = 1.0, mask=None):
    """Negative ELBO with a standard-normal prior.

    recon is the mean squared error over real positions and features; kl is
    the summed Gaussian KL over real positions divided by (positions * L).
    Returns ``(loss, recon, kl)`` with ``loss = recon + beta * kl``.
    """
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if y.shape != y_hat.shape or mu.shape != log_sigma.shape or mu.shape[:-1] != y.shape[:-1]:
        raise ShapeMismatch(f"y {y.shape}, y_hat {y_hat.shape}, mu {mu.shape}, log_sigma {log_sigma.shape}")
    m = _mask_for(y, mask)
    recon = masked_mean_square(y_hat, y, m[..., None])
    mu_r, ls_r = _real_rows(mu, log_sigma, m)
    n = max(mu_r.shape[0] * mu_r.shape[1], 1)
    kl = scale(kl_standard_normal(mu_r, ls_r), 1.0 / n)
    return add(recon, scale(kl, beta)), recon, kl


def elbo_lvae(y, y_hat: Tensor, mu: Tensor, log_sigma: Tensor, grams: Sequence[GramMatrix], beta=1.0, mask=None):
    """Negative ELBO with the GP prior; ``grams`` cover the real positions in row-major order."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if y.shape != y_hat.shape or mu.shape != log_sigma.shape or mu.shape[:-1] != y.shape[:-1]:
        raise ShapeMismatch(f"y {y.shape}, y_hat {y_hat.shape}, mu {mu.shape}, log_sigma {log_sigma.shape}")
    m = _mask_for(y, mask)
    recon = masked_mean_square(y_hat, y, m[..., None])
    mu_r, ls_r = _real_rows(mu, log_sigma, m)
    n = max(mu_r.shape[0] * mu_r.shape[1], 1)
    kl = scale(kl_posterior_vs_gp(mu_r, ls_r, grams), 1.0 / n)
    return add(recon, scale(kl, beta)), recon, kl


# ---------------------------------------------------------------------------
# the model


class SequenceVAE:
    """LSTM-VAE (``prior="standard"``) or LSTM-LVAE (``prior="gp"``)."""

    def __init__(
        self,
        n_features: int,
        config: ElboConfig,
        prior: PriorKind = PriorKind.STANDARD,
        descriptor_kinds: Sequence[DescriptorKind] = (),
        seed: int = 0,
        kernel_factory=None,
    ):
        self.D = n_features
        self.config = config
        self.prior = PriorKind(prior)
        rng = np.random.default_rng(seed)
        H, L = config.hidden_dim, config.latent_dim
        self.enc = EncoderParams.init(n_features, H, L, rng, config.depth)
        self.dec = DecoderParams.init(L, H, n_features, rng, config.depth)
        self.descriptor_encoder: Optional[DescriptorEncoder] = None
        self.kernels: list[KernelSpec] = []
        if self.prior is PriorKind.GP:
            self.descriptor_encoder = DescriptorEncoder(descriptor_kinds, config.gp_use_time)
            extra = [len(descriptor_kinds)] if config.gp_use_time else []
            factory = kernel_factory or (lambda: default_spec(descriptor_kinds, continuous_extra=extra))
            self.kernels = [factory() for _ in range(L)]
        self.trained = False

    # parameters -------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = self.enc.named_parameters() + self.dec.named_parameters()
        for l, spec in enumerate(self.kernels):
            for k, p in enumerate(spec.parameters()):
                out.append((f"gp.{l}.{k}", p))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    # batches ----------------------------------------------------------

    def descriptor_rows(self, batch: SequenceBatch, mask: np.ndarray) -> np.ndarray:
        """Descriptor matrix for the real positions of ``batch`` in row-major order."""
        assert self.descriptor_encoder is not None
        descs, times = [], []
        for b in range(len(batch)):
            for t in np.flatnonzero(mask[b]):
                descs.append(batch.descriptors[b])
                times.append(batch.times[b, t])
        return self.descriptor_encoder.matrix(descs, times)

    def grams_for(self, X: np.ndarray) -> list[GramMatrix]:
        enc = self.descriptor_encoder
        kinds = enc.column_kinds if enc is not None else None
        cache: dict = {}
        return [eval_gram(spec, X, kinds, cache) for spec in self.kernels]

    def loss(self, batch: SequenceBatch, noise: np.ndarray):
        mu, ls = encode(self.enc, batch.y)
        z = reparameterize(mu, ls, noise)
        y_hat = decode(self.dec, z)
        beta = self.config.beta
        if self.prior is PriorKind.GP:
            grams = self.grams_for(self.descriptor_rows(batch, batch.mask))
            return elbo_lvae(batch.y, y_hat, mu, ls, grams, beta, batch.mask)
        return elbo_vae(batch.y, y_hat, mu, ls, beta, batch.mask)

    def evaluate(self, batch: SequenceBatch, noise: np.ndarray, batch_size: Optional[int] = None):
        """Average (loss, recon, kl) over fixed-order chunks of ``batch``, no tape."""
        bs = batch_size or self.config.batch_size
        tot = np.zeros(3)
        weight = 0
        with no_grad():
            for start in range(0, len(batch), bs):
                idx = list(range(start, min(start + bs, len(batch))))
                loss, recon, kl = self.loss(batch.take(idx), noise[idx])
                w = len(idx)
                tot += w * np.array([loss.item(), recon.item(), kl.item()])
                weight += w
        return tuple(float(v) for v in tot / max(weight, 1))

    # training ---------------------------------------------------------

    def fit_descriptors(self, batch: SequenceBatch) -> None:
        if self.descriptor_encoder is not None:
            self.descriptor_encoder.fit(batch.descriptors, batch.times[batch.mask])

    def to_checkpoint(self) -> bytes:
        meta = {
            "model": "lvae" if self.prior is PriorKind.GP else "vae",
            "n_features": self.D,
            "config": self.config.__dict__,
        }
        if self.descriptor_encoder is not None:
            meta["descriptor_encoder"] = self.descriptor_encoder.state()
            meta["kernels"] = [spec_structure(k) for k in self.kernels]
        return checkpoint.dumps([(n, p.data) for n, p in self.named_parameters()], meta)

    def load_state(self, params: dict) -> None:
        for name, p in self.named_parameters():
            if name not in params:
                raise KeyError(f"checkpoint lacks parameter {name!r}")
            if params[name].shape != p.shape:
                raise ShapeMismatch(f"{name}: checkpoint {params[name].shape} vs model {p.shape}")
            p.data = params[name].copy()
        self.trained = True

    @classmethod
    def from_checkpoint(cls, blob: bytes) -> "SequenceVAE":
        params, meta = checkpoint.loads(blob)
        cfg = ElboConfig(**meta["config"])
        prior = PriorKind.GP if meta["model"] == "lvae" else PriorKind.STANDARD
        kinds = meta.get("descriptor_encoder", {}).get("kinds", [])
        layouts = iter(meta.get("kernels", []))
        factory = (lambda: spec_from_structure(next(layouts))) if "kernels" in meta else None
        model = cls(meta["n_features"], cfg, prior, kinds, kernel_factory=factory)
        if "descriptor_encoder" in meta:
            model.descriptor_encoder = DescriptorEncoder.from_state(meta["descriptor_encoder"])
        model.load_state(params)
        return model


def train(
    model: SequenceVAE,
    train_batch: SequenceBatch,
    val_batch: SequenceBatch,
    seed: int = 0,
) -> FitResult:
    """Fit ``model`` with early stopping on the validation ELBO.

    Validation and epoch-0 training losses use noise drawn once from a
    generator derived from ``seed``, so the stopping rule is deterministic.
    """
    cfg = model.config
    model.fit_descriptors(train_batch)
    L = cfg.latent_dim
    eval_rng = np.random.default_rng([seed, 1])
    val_noise = eval_rng.standard_normal((len(val_batch), val_batch.y.shape[1], L))
    tr_noise = eval_rng.standard_normal((len(train_batch), train_batch.y.shape[1], L))

    def step(idx, rng):
        sub = train_batch.take(idx)
        noise = rng.standard_normal((len(idx), sub.y.shape[1], L))
        loss, recon, kl = model.loss(sub, noise)
        return loss, recon.item(), kl.item()

    result = fit(
        model.parameters(),
        len(train_batch),
        step,
        lambda: model.evaluate(val_batch, val_noise),
        lambda: model.evaluate(train_batch, tr_noise)[0],
        cfg.fit_config(),
        seed,
    )
    model.trained = True
    return result


# ---------------------------------------------------------------------------
# generation


class NotTrained(RuntimeError):
    pass


def generate_missing(
    model: SequenceVAE,
    skeletons: Sequence[MissingSkeleton],
    scaler: MinMaxScaler,
    noise_seed: int,
    batch_size: int = 32,
    source: str = "",
) -> list[GeneratedSeries]:
    """Decode latent draws into feature sequences for each skeleton.

    VAE: every latent is standard normal. LVAE: latents for a chunk of
    skeletons are drawn jointly from the GP prior evaluated on their
    descriptors (and times, when the model uses them). Outputs are in the
    original feature units and carry no target.
    """
    if not model.trained:
        raise NotTrained("model must be trained (or loaded) before generating")
    rng = np.random.default_rng(noise_seed)
    L = model.config.latent_dim
    out: list[GeneratedSeries] = []
    for start in range(0, len(skeletons), batch_size):
        chunk = skeletons[start : start + batch_size]
        lengths = [len(s.times) for s in chunk]
        Tmax = max(lengths)
        mask = np.zeros((len(chunk), Tmax), dtype=bool)
        for b, m in enumerate(lengths):
            mask[b, :m] = True
        if model.prior is PriorKind.GP:
            descs, times = [], []
            for s in chunk:
                descs += [s.descriptors] * len(s.times)
                times += list(s.times)
            with no_grad():
                grams = model.grams_for(model.descriptor_encoder.matrix(descs, times))
            z_real = sample_prior(grams, rng)
            z = np.zeros((len(chunk), Tmax, L))
            z[mask] = z_real
        else:
            z = rng.standard_normal((len(chunk), Tmax, L))
        with no_grad():
            y_hat = decode(model.dec, z).data
        for b, s in enumerate(chunk):
            feats = scaler.inverse_scale(y_hat[b, : lengths[b]])
            out.append(
                GeneratedSeries(
                    s.subject_id,
                    tuple(float(t) for t in s.times),
                    tuple(tuple(float(v) for v in row) for row in feats),
                    None,
                    source,
                )
            )
    return out
