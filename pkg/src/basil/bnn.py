"""Mean-field Bayesian MLP head with hand-derived pathwise gradients.

All variational parameters live in two flat float64 vectors: ``mu`` and
``rho``, where the per-weight standard deviation is ``softplus(rho)``.
Sampling uses the reparameterization ``theta = mu + softplus(rho) * eps``
so gradients flow through the draw. Backprop is written out explicitly for
the fixed ReLU-MLP family; there is no autodiff dependency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def softplus(x: np.ndarray) -> np.ndarray:
    """Numerically stable ln(1 + e^x)."""
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Stable logistic function (the derivative of softplus)."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inv_softplus(s):
    """Inverse of softplus for positive s: rho with softplus(rho) == s."""
    s = np.asarray(s, dtype=np.float64)
    return s + np.log(-np.expm1(-s))


@dataclass(frozen=True)
class NetworkArch:
    """Shape of the plastic classifier head: a ReLU MLP over embeddings."""

    input_dim: int
    num_classes: int
    hidden_dims: tuple = (256, 256)

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"hidden_dims must all be >= 1, got {self.hidden_dims}")

    @property
    def layer_dims(self) -> list:
        """(in, out) pairs for every layer, input to output."""
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self) -> int:
        return sum(o * i + o for i, o in self.layer_dims)


@dataclass
class MeanFieldPosterior:
    """Diagonal-Gaussian variational distribution over all head parameters."""

    arch: NetworkArch
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        p = self.arch.num_params
        if self.mu.shape != (p,) or self.rho.shape != (p,):
            raise ValueError(
                f"parameter vectors must have shape ({p},), "
                f"got mu {self.mu.shape} and rho {self.rho.shape}"
            )

    @classmethod
    def initial(cls, arch: NetworkArch, sigma0: float = 0.05,
                mu_std: float = 0.0, rng=None) -> "MeanFieldPosterior":
        """Fresh posterior: sigma = sigma0 everywhere, mu zero or small Gaussian."""
        p = arch.num_params
        if mu_std > 0.0:
            if rng is None:
                raise ValueError("mu_std > 0 requires an rng")
            mu = rng.normal(0.0, mu_std, size=p)
        else:
            mu = np.zeros(p)
        rho = np.full(p, float(inv_softplus(sigma0)))
        return cls(arch, mu, rho)

    @classmethod
    def standard_normal(cls, arch: NetworkArch) -> "MeanFieldPosterior":
        """The N(0, I) prior used before any data has been seen."""
        return cls(arch, np.zeros(arch.num_params), np.full(arch.num_params, float(inv_softplus(1.0))))

    def sigma(self) -> np.ndarray:
        return softplus(self.rho)

    def copy(self) -> "MeanFieldPosterior":
        return MeanFieldPosterior(self.arch, self.mu.copy(), self.rho.copy())


@dataclass
class WeightSample:
    """One reparameterized draw theta = mu + sigma * eps, with its noise."""

    arch: NetworkArch
    theta: np.ndarray
    eps: np.ndarray


def sample_weights(posterior: MeanFieldPosterior, rng) -> WeightSample:
    """Draw theta ~ q via the pathwise trick, recording eps for gradients."""
    eps = rng.standard_normal(posterior.arch.num_params)
    theta = posterior.mu + posterior.sigma() * eps
    return WeightSample(posterior.arch, theta, eps)


# ---------------------------------------------------------------------------
# Flat-vector MLP forward / backward


def unpack_params(arch: NetworkArch, theta: np.ndarray) -> list:
    """Split the flat parameter vector into (W, b) views per layer."""
    params = []
    off = 0
    for in_dim, out_dim in arch.layer_dims:
        w = theta[off:off + out_dim * in_dim].reshape(out_dim, in_dim)
        off += out_dim * in_dim
        b = theta[off:off + out_dim]
        off += out_dim
        params.append((w, b))
    return params


def _forward_cached(params, z_batch):
    """Forward pass keeping activations for backprop. Returns (logits, cache)."""
    acts = [z_batch]
    pres = []
    last = len(params) - 1
    a = z_batch
    for i, (w, b) in enumerate(params):
        pre = a @ w.T + b
        pres.append(pre)
        a = pre if i == last else np.maximum(pre, 0.0)
        acts.append(a)
    return acts[-1], (acts, pres)


def _backward(arch, params, cache, dlogits) -> np.ndarray:
    """Backprop dloss/dlogits through the cached forward pass to dtheta."""
    acts, pres = cache
    grads = [None] * len(params)
    g = dlogits
    for i in range(len(params) - 1, -1, -1):
        w, _ = params[i]
        grads[i] = (g.T @ acts[i], g.sum(axis=0))
        if i > 0:
            g = (g @ w) * (pres[i - 1] > 0.0)
    dtheta = np.empty(arch.num_params)
    off = 0
    for (dw, db), (in_dim, out_dim) in zip(grads, arch.layer_dims):
        dtheta[off:off + out_dim * in_dim] = dw.ravel()
        off += out_dim * in_dim
        dtheta[off:off + out_dim] = db
        off += out_dim
    return dtheta


def forward(sample: WeightSample, z: np.ndarray) -> np.ndarray:
    """Logits of the head at the sampled weights; z is (d,) or (n, d)."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    if zb.shape[1] != sample.arch.input_dim:
        raise ValueError(
            f"input dim {zb.shape[1]} != arch input_dim {sample.arch.input_dim}"
        )
    logits, _ = _forward_cached(unpack_params(sample.arch, sample.theta), zb)
    return logits[0] if single else logits


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


def nll(logits: np.ndarray, y: int) -> float:
    """Negative log-likelihood -log softmax(logits)[y], log-sum-exp stable."""
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.shape[-1]
    if not (0 <= y < k):
        raise ValueError(f"class id {y} out of range for {k} classes")
    return float(-_log_softmax(logits)[y])


def kl_diag_gaussian(q: MeanFieldPosterior, p: MeanFieldPosterior,
                     sq=None, sp=None) -> float:
    """Closed-form KL(q || p) between diagonal Gaussians over the same arch.

    ``sq``/``sp`` optionally pass in precomputed softplus(rho) vectors so a
    caller evaluating several quantities at the same posterior does not pay
    for the softplus more than once.
    """
    if q.arch != p.arch:
        raise ValueError("KL requires posteriors over the same architecture")
    sq = q.sigma() if sq is None else sq
    sp = p.sigma() if sp is None else sp
    var_q, var_p = sq * sq, sp * sp
    d = q.mu - p.mu
    return float(0.5 * np.sum(var_q / var_p + d * d / var_p - 1.0 + np.log(var_p / var_q)))


def _kl_grads(q, p, sq=None, sp=None, sq_prime=None):
    """Gradient of kl_diag_gaussian w.r.t. q's (mu, rho)."""
    sq = q.sigma() if sq is None else sq
    sp = p.sigma() if sp is None else sp
    var_p = sp * sp
    dmu = (q.mu - p.mu) / var_p
    dsigma = sq / var_p - 1.0 / sq
    if sq_prime is None:
        sq_prime = sigmoid(q.rho)
    return dmu, dsigma * sq_prime


def _onehot(ys, k):
    out = np.zeros((len(ys), k))
    out[np.arange(len(ys)), ys] = 1.0
    return out


def elbo_loss_and_grads(posterior: MeanFieldPosterior, prior: MeanFieldPosterior,
                        new_sample, replay_batch, lambda1: float,
                        mc_samples: int, rng, normalize_replay: bool = False,
                        sig=None, sprime=None):
    """Negated streaming ELBO and its exact pathwise gradients.

    Loss = MC mean over weight draws of [ NLL(new) + sum_replay NLL ]
    plus lambda1 * KL(posterior || prior) computed analytically. Returns
    (loss, grads) with grads concatenated over (mu, rho), length 2P.

    The replay likelihoods are summed, not averaged; ``normalize_replay``
    divides the replay term by the batch size for ablation. ``sig`` and
    ``sprime`` optionally supply precomputed softplus(rho) / sigmoid(rho)
    for the posterior, letting one caller share them across calls.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    arch = posterior.arch
    z_new, y_new = new_sample
    z_new = np.asarray(z_new, dtype=np.float64)
    if z_new.shape != (arch.input_dim,):
        raise ValueError(f"embedding shape {z_new.shape} != ({arch.input_dim},)")
    if not (0 <= y_new < arch.num_classes):
        raise ValueError(f"class id {y_new} out of range")
    zs = [z_new]
    ys = [int(y_new)]
    for z, y in replay_batch:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (arch.input_dim,):
            raise ValueError(f"replay embedding shape {z.shape} != ({arch.input_dim},)")
        if not (0 <= y < arch.num_classes):
            raise ValueError(f"replay class id {y} out of range")
        zs.append(z)
        ys.append(int(y))
    zb = np.stack(zs)
    yb = np.asarray(ys)
    weights = np.ones(len(ys))
    if normalize_replay and len(replay_batch) > 0:
        weights[1:] = 1.0 / len(replay_batch)

    if sig is None:
        sig = posterior.sigma()
    if sprime is None:
        sprime = sigmoid(posterior.rho)
    onehot = _onehot(yb, arch.num_classes)
    loss = 0.0
    gmu = np.zeros(arch.num_params)
    grho = np.zeros(arch.num_params)
    for _ in range(mc_samples):
        eps = rng.standard_normal(arch.num_params)
        theta = posterior.mu + sig * eps
        params = unpack_params(arch, theta)
        logits, cache = _forward_cached(params, zb)
        logp = _log_softmax(logits)
        loss += float(-(weights * logp[np.arange(len(yb)), yb]).sum())
        dlogits = (np.exp(logp) - onehot) * weights[:, None]
        dtheta = _backward(arch, params, cache, dlogits)
        gmu += dtheta
        grho += dtheta * eps * sprime
    loss /= mc_samples
    gmu /= mc_samples
    grho /= mc_samples

    if lambda1 != 0.0 and not (np.array_equal(posterior.mu, prior.mu)
                               and np.array_equal(posterior.rho, prior.rho)):
        # When the prior is an exact copy of the current posterior (the
        # first gradient step after a prior refresh) the KL and both of its
        # gradients are identically zero, so the block is skipped.
        sp = prior.sigma()
        loss += lambda1 * kl_diag_gaussian(posterior, prior, sq=sig, sp=sp)
        kmu, krho = _kl_grads(posterior, prior, sq=sig, sp=sp, sq_prime=sprime)
        gmu += lambda1 * kmu
        grho += lambda1 * krho
    return loss, np.concatenate([gmu, grho])


def distill_loss_and_grads(posterior: MeanFieldPosterior, kd_batch,
                           lambda2: float, mc_samples: int, rng,
                           sig=None, sprime=None):
    """Snapshot-distillation loss: lambda2 * sum_j E||h_j - f_theta(z_j)||^2.

    MC estimate with pathwise gradients, summed over the batch with no
    1/N normalization. Returns (loss, grads) like elbo_loss_and_grads;
    ``sig``/``sprime`` share precomputed softplus(rho)/sigmoid(rho).
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    arch = posterior.arch
    if lambda2 == 0.0:
        return 0.0, np.zeros(2 * arch.num_params)
    zs, hs = [], []
    for z, h in kd_batch:
        z = np.asarray(z, dtype=np.float64)
        h = np.asarray(h, dtype=np.float64)
        if z.shape != (arch.input_dim,):
            raise ValueError(f"embedding shape {z.shape} != ({arch.input_dim},)")
        if h.shape != (arch.num_classes,):
            raise ValueError(f"logit shape {h.shape} != ({arch.num_classes},)")
        zs.append(z)
        hs.append(h)
    if not zs:
        raise ValueError("kd_batch must be nonempty")
    zb = np.stack(zs)
    hb = np.stack(hs)

    if sig is None:
        sig = posterior.sigma()
    if sprime is None:
        sprime = sigmoid(posterior.rho)
    loss = 0.0
    gmu = np.zeros(arch.num_params)
    grho = np.zeros(arch.num_params)
    for _ in range(mc_samples):
        eps = rng.standard_normal(arch.num_params)
        theta = posterior.mu + sig * eps
        params = unpack_params(arch, theta)
        logits, cache = _forward_cached(params, zb)
        diff = logits - hb
        loss += lambda2 * float((diff * diff).sum())
        dtheta = _backward(arch, params, cache, 2.0 * lambda2 * diff)
        gmu += dtheta
        grho += dtheta * eps * sprime
    return loss / mc_samples, np.concatenate([gmu, grho]) / mc_samples


def predict_proba(posterior: MeanFieldPosterior, z: np.ndarray,
                  mc_samples: int, rng) -> np.ndarray:
    """Posterior predictive: mean softmax over mc_samples weight draws."""
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    arch = posterior.arch
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    if zb.shape[1] != arch.input_dim:
        raise ValueError(f"input dim {zb.shape[1]} != arch input_dim {arch.input_dim}")
    sig = posterior.sigma()
    acc = np.zeros((zb.shape[0], arch.num_classes))
    for _ in range(mc_samples):
        eps = rng.standard_normal(arch.num_params)
        theta = posterior.mu + sig * eps
        logits, _ = _forward_cached(unpack_params(arch, theta), zb)
        acc += softmax(logits)
    acc /= mc_samples
    return acc[0] if single else acc


def entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats along the last axis, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def predictive_uncertainty(posterior: MeanFieldPosterior, z: np.ndarray,
                           mc_samples: int, rng) -> float:
    """Entropy of the MC-averaged predictive distribution, in [0, ln K]."""
    return float(entropy(predict_proba(posterior, z, mc_samples, rng)))


def batch_metadata(posterior: MeanFieldPosterior, zb: np.ndarray, yb: np.ndarray,
                   mc_samples: int, rng):
    """Cached-slot metadata for a batch in one pass, sharing weight draws.

    Returns (mean logits over draws, per-sample NLL averaged over draws,
    entropy of the mean predictive) as arrays over batch rows.
    """
    arch = posterior.arch
    zb = np.asarray(zb, dtype=np.float64)
    sig = posterior.sigma()
    n = zb.shape[0]
    mean_logits = np.zeros((n, arch.num_classes))
    mean_probs = np.zeros((n, arch.num_classes))
    nlls = np.zeros(n)
    idx = np.arange(n)
    for _ in range(mc_samples):
        eps = rng.standard_normal(arch.num_params)
        theta = posterior.mu + sig * eps
        logits, _ = _forward_cached(unpack_params(arch, theta), zb)
        logp = _log_softmax(logits)
        mean_logits += logits
        mean_probs += np.exp(logp)
        nlls += -logp[idx, yb]
    mean_logits /= mc_samples
    mean_probs /= mc_samples
    nlls /= mc_samples
    return mean_logits, nlls, entropy(mean_probs)


# ---------------------------------------------------------------------------
# Point-estimate (deterministic) helpers, used by the offline reference head


def point_forward(arch: NetworkArch, theta: np.ndarray, zb: np.ndarray) -> np.ndarray:
    """Deterministic logits for a batch under a plain weight vector."""
    logits, _ = _forward_cached(unpack_params(arch, theta), np.asarray(zb, dtype=np.float64))
    return logits


def point_loss_and_grads(arch: NetworkArch, theta: np.ndarray,
                         zb: np.ndarray, yb: np.ndarray):
    """Mean cross-entropy over a batch and its gradient w.r.t. theta."""
    zb = np.asarray(zb, dtype=np.float64)
    yb = np.asarray(yb)
    params = unpack_params(arch, theta)
    logits, cache = _forward_cached(params, zb)
    logp = _log_softmax(logits)
    n = len(yb)
    loss = float(-logp[np.arange(n), yb].mean())
    dlogits = (np.exp(logp) - _onehot(yb, arch.num_classes)) / n
    return loss, _backward(arch, params, cache, dlogits)


def he_init(arch: NetworkArch, rng) -> np.ndarray:
    """He-style initialization for the deterministic reference head."""
    theta = np.empty(arch.num_params)
    off = 0
    for in_dim, out_dim in arch.layer_dims:
        scale = np.sqrt(2.0 / in_dim)
        theta[off:off + out_dim * in_dim] = rng.normal(0.0, scale, size=out_dim * in_dim)
        off += out_dim * in_dim
        theta[off:off + out_dim] = 0.0
        off += out_dim
    return theta
