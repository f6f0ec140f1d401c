"""Stochastic recommender simulator.

Two learned generative components over the observed impression logs: an
exposure model (which items get shown to a user, a per-slot softmax over
the whole catalog with per-item exogenous noise alpha) and a selection
model (which shown slots the user picks, a within-list softmax with
per-slot exogenous noise beta). Variational posteriors over alpha and beta
recover the environment that produced the log, and counterfactual selection
replays the learned response on lists that were never shown.

All gradients are derived by hand and exposed for finite-difference checks.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import textio
from .corpus import InteractionLog
from .mathcore import (
    AdamGroup,
    RandomStream,
    TrainingError,
    logsumexp,
    sigmoid,
    softmax,
    softplus,
)

LOG_2PI = math.log(2.0 * math.pi)
SIGMA_FLOOR = 1e-4


@dataclass
class SimParams:
    """Learned simulator parameters; either half may be absent until trained.

    P, Q, w_r parameterize the exposure model; X, Y, w_s the selection
    model. w_s has one weight per list slot, w_r one per item.
    """

    P: np.ndarray | None = None
    Q: np.ndarray | None = None
    w_r: np.ndarray | None = None
    X: np.ndarray | None = None
    Y: np.ndarray | None = None
    w_s: np.ndarray | None = None

    @property
    def n_items(self):
        ref = self.Q if self.Q is not None else self.Y
        return ref.shape[0]

    @property
    def n_users(self):
        ref = self.P if self.P is not None else self.X
        return ref.shape[0]

    @property
    def list_len(self):
        return self.w_s.shape[0]

    def merged_with(self, other: "SimParams") -> "SimParams":
        return SimParams(
            P=self.P if self.P is not None else other.P,
            Q=self.Q if self.Q is not None else other.Q,
            w_r=self.w_r if self.w_r is not None else other.w_r,
            X=self.X if self.X is not None else other.X,
            Y=self.Y if self.Y is not None else other.Y,
            w_s=self.w_s if self.w_s is not None else other.w_s,
        )


@dataclass
class VariationalPosterior:
    """Diagonal Gaussian posteriors over the exogenous noise variables."""

    mu_alpha: np.ndarray
    sigma_alpha: np.ndarray
    mu_beta: np.ndarray
    sigma_beta: np.ndarray

    def __post_init__(self):
        if np.any(self.sigma_alpha < 0) or np.any(self.sigma_beta < 0):
            raise ValueError("posterior sigmas must be nonnegative")

    def sample_alpha(self, stream: RandomStream) -> np.ndarray:
        return self.mu_alpha + self.sigma_alpha * stream.normal(self.mu_alpha.shape)

    def sample_beta(self, stream: RandomStream) -> np.ndarray:
        return self.mu_beta + self.sigma_beta * stream.normal(self.mu_beta.shape)

    @classmethod
    def prior(cls, n_items: int, list_len: int) -> "VariationalPosterior":
        return cls(
            mu_alpha=np.zeros(n_items),
            sigma_alpha=np.ones(n_items),
            mu_beta=np.zeros(list_len),
            sigma_beta=np.ones(list_len),
        )


@dataclass
class ExogenousDraw:
    alpha: np.ndarray
    beta: np.ndarray


@dataclass
class ImpressionHyper:
    d_r: int = 32
    lr: float = 1e-3
    epochs: int = 20
    neg_per_pos: int = 4
    alpha_draws: int = 2
    batch_size: int = 512


@dataclass
class SelectionHyper:
    d_s: int = 32
    lr: float = 1e-3
    epochs: int = 20
    beta_draws: int = 2
    batch_size: int = 512


@dataclass
class PosteriorHyper:
    lr: float = 0.02
    epochs: int = 150
    mc_samples: int = 8


# ---------------------------------------------------------------------------
# Elementary probabilities


def impression_logit(params: SimParams, u: int, j: int, alpha) -> float:
    """Exposure score P_u . Q_j + w_r[j] * alpha[j]."""
    return float(params.P[u] @ params.Q[j] + params.w_r[j] * alpha[j])


def impression_logits_all(params: SimParams, u: int, alpha) -> np.ndarray:
    return params.P[u] @ params.Q.T + params.w_r * np.asarray(alpha)


def prob_list(params: SimParams, u: int, items, alpha) -> float:
    """Probability of showing the ordered list: product of per-slot softmaxes
    over the whole catalog."""
    z = impression_logits_all(params, u, alpha)
    logp = z - logsumexp(z)
    return float(np.exp(sum(logp[i] for i in items)))


def selection_logits(params: SimParams, u: int, items, beta) -> np.ndarray:
    items = np.asarray(items, dtype=np.int64)
    k = len(items)
    beta = np.asarray(beta, dtype=np.float64)
    return params.X[u] @ params.Y[items].T + params.w_s[:k] * beta[:k]


def slot_probs(params: SimParams, u: int, items, beta) -> np.ndarray:
    """Within-list selection probabilities, one per slot, summing to 1."""
    return softmax(selection_logits(params, u, items, beta))


def prob_select(params: SimParams, u: int, items, t: int, beta) -> float:
    if not 0 <= t < len(items):
        raise ValueError(f"slot index {t} out of range for list of {len(items)}")
    return float(slot_probs(params, u, items, beta)[t])


# ---------------------------------------------------------------------------
# Padded array view of a log, shared by the trainers


@dataclass
class _LogArrays:
    users: np.ndarray  # (n,)
    items: np.ndarray  # (n, K) padded with 0
    mask: np.ndarray  # (n, K) True on real slots
    sel: np.ndarray  # (n, K) 1.0 on selected slots
    n_sel: np.ndarray  # (n,)
    list_len: int
    n_users: int
    n_items: int


def _log_arrays(log: InteractionLog, list_len=None) -> _LogArrays:
    k = list_len if list_len is not None else log.list_len
    n = len(log.records)
    users = np.zeros(n, dtype=np.int64)
    items = np.zeros((n, k), dtype=np.int64)
    mask = np.zeros((n, k), dtype=bool)
    sel = np.zeros((n, k))
    for idx, rec in enumerate(log.records):
        users[idx] = rec.user
        m = len(rec.items)
        items[idx, :m] = rec.items
        mask[idx, :m] = True
        sel[idx, :m] = rec.labels
    return _LogArrays(
        users, items, mask, sel, sel.sum(axis=1), k, log.n_users, log.n_items
    )


# ---------------------------------------------------------------------------
# Exposure model: maximize log sigma on shown items plus log(1 - sigma) on
# negatives sampled from each record's unshown items


def _impression_loss_grads(P, Q, w_r, users, pos_items, pos_mask, neg_items, alpha):
    """Negated exposure objective and its gradients for one batch.

    pos_items/(pos_mask): (B, K) shown slots; neg_items: (B, m) sampled
    unshown items (mask repeated along columns as needed).
    """
    b, k = pos_items.shape
    reps = neg_items.shape[1] // k
    neg_mask = np.tile(pos_mask, reps)

    def logits(item_mat):
        return (
            np.einsum("bd,bkd->bk", P[users], Q[item_mat])
            + w_r[item_mat] * alpha[item_mat]
        )

    z_pos = logits(pos_items)
    z_neg = logits(neg_items)
    loss = float(
        np.sum(softplus(-z_pos) * pos_mask) + np.sum(softplus(z_neg) * neg_mask)
    )
    dz_pos = -sigmoid(-z_pos) * pos_mask
    dz_neg = sigmoid(z_neg) * neg_mask

    gP = np.zeros_like(P)
    gQ = np.zeros_like(Q)
    gw = np.zeros_like(w_r)
    for item_mat, dz in ((pos_items, dz_pos), (neg_items, dz_neg)):
        np.add.at(gP, users, np.einsum("bk,bkd->bd", dz, Q[item_mat]))
        flat_items = item_mat.ravel()
        flat_dz = dz.ravel()
        np.add.at(gQ, flat_items, flat_dz[:, None] * P[np.repeat(users, item_mat.shape[1])])
        np.add.at(gw, flat_items, flat_dz * alpha[flat_items])
    return loss, gP, gQ, gw


def _sample_record_negatives(shown_lookup, rows, n_neg, n_items, stream):
    """Uniform unshown items per record row; vectorized rejection."""
    neg = stream.integers(0, n_items, (len(rows), n_neg))
    for _ in range(1000):
        bad = shown_lookup[rows[:, None], neg]
        if not bad.any():
            return neg
        neg[bad] = stream.integers(0, n_items, int(bad.sum()))
    raise TrainingError("negative sampling failed; a record shows every item")


def train_impression_model(
    log: InteractionLog, hyper: ImpressionHyper, stream: RandomStream
) -> SimParams:
    """Fit the exposure half (P, Q, w_r) by negative-sampled maximum
    likelihood; the exogenous alpha is redrawn per batch and the loss is
    averaged over `alpha_draws` draws."""
    arrays = _log_arrays(log)
    init = stream.substream("init")
    P = 0.1 * init.normal((arrays.n_users, hyper.d_r))
    Q = 0.1 * init.normal((arrays.n_items, hyper.d_r))
    w_r = np.full(arrays.n_items, 0.1)
    if hyper.epochs == 0 or len(log.records) == 0:
        return SimParams(P=P, Q=Q, w_r=w_r)

    shown_lookup = np.zeros((len(log.records), arrays.n_items), dtype=bool)
    rows = np.arange(len(log.records))
    flat_rows = np.repeat(rows, arrays.list_len)[arrays.mask.ravel()]
    shown_lookup[flat_rows, arrays.items.ravel()[arrays.mask.ravel()]] = True

    opt = AdamGroup({"P": P, "Q": Q, "w": w_r}, lr=hyper.lr)
    for epoch in range(hyper.epochs):
        order = stream.permutation(len(log.records))
        epoch_loss = 0.0
        for start in range(0, len(order), hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            neg = _sample_record_negatives(
                shown_lookup,
                idx,
                hyper.neg_per_pos * arrays.list_len,
                arrays.n_items,
                stream,
            )
            gP = np.zeros_like(P)
            gQ = np.zeros_like(Q)
            gw = np.zeros_like(w_r)
            batch_loss = 0.0
            for _ in range(hyper.alpha_draws):
                alpha = stream.normal(arrays.n_items)
                loss, dP, dQ, dw = _impression_loss_grads(
                    P,
                    Q,
                    w_r,
                    arrays.users[idx],
                    arrays.items[idx],
                    arrays.mask[idx],
                    neg,
                    alpha,
                )
                batch_loss += loss
                gP += dP
                gQ += dQ
                gw += dw
            scale = 1.0 / hyper.alpha_draws
            new = opt.step(
                {"P": P, "Q": Q, "w": w_r},
                {"P": gP * scale, "Q": gQ * scale, "w": gw * scale},
            )
            P, Q, w_r = new["P"], new["Q"], new["w"]
            epoch_loss += batch_loss * scale
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"exposure training diverged at epoch {epoch}")
    return SimParams(P=P, Q=Q, w_r=w_r)


# ---------------------------------------------------------------------------
# Selection model: exact within-list softmax likelihood of the selected slots


def _selection_loss_grads(X, Y, w_s, users, items, mask, sel, n_sel, beta):
    """Negated selection likelihood and gradients for one padded batch."""
    k = items.shape[1]
    z = np.einsum("bd,bkd->bk", X[users], Y[items]) + (w_s[:k] * beta[:k])[None, :]
    z = np.where(mask, z, -np.inf)
    lse = logsumexp(z, axis=1)
    logp = z - lse[:, None]
    loss = -float(np.sum(sel * np.where(mask, logp, 0.0)))
    p = np.where(mask, np.exp(logp), 0.0)
    dz = n_sel[:, None] * p - sel  # gradient of the negated objective
    gX = np.zeros_like(X)
    gY = np.zeros_like(Y)
    np.add.at(gX, users, np.einsum("bk,bkd->bd", dz, Y[items]))
    np.add.at(
        gY,
        items.ravel(),
        dz.ravel()[:, None] * X[np.repeat(users, k)],
    )
    gw = (dz * beta[:k][None, :]).sum(axis=0)
    return loss, gX, gY, gw


def train_selection_model(
    log: InteractionLog, hyper: SelectionHyper, stream: RandomStream
) -> SimParams:
    """Fit the selection half (X, Y, w_s) by exact in-list softmax likelihood.

    Records with no selected item contribute no likelihood term and are
    skipped; beta is redrawn per batch, averaged over `beta_draws`.
    """
    arrays = _log_arrays(log)
    init = stream.substream("init")
    X = 0.1 * init.normal((arrays.n_users, hyper.d_s))
    Y = 0.1 * init.normal((arrays.n_items, hyper.d_s))
    w_s = np.full(arrays.list_len, 0.1)
    keep = arrays.n_sel > 0
    if hyper.epochs == 0 or not keep.any():
        return SimParams(X=X, Y=Y, w_s=w_s)
    kept = np.nonzero(keep)[0]

    opt = AdamGroup({"X": X, "Y": Y, "w": w_s}, lr=hyper.lr)
    for epoch in range(hyper.epochs):
        order = kept[stream.permutation(len(kept))]
        epoch_loss = 0.0
        for start in range(0, len(order), hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            gX = np.zeros_like(X)
            gY = np.zeros_like(Y)
            gw = np.zeros_like(w_s)
            batch_loss = 0.0
            for _ in range(hyper.beta_draws):
                beta = stream.normal(arrays.list_len)
                loss, dX, dY, dw = _selection_loss_grads(
                    X,
                    Y,
                    w_s,
                    arrays.users[idx],
                    arrays.items[idx],
                    arrays.mask[idx],
                    arrays.sel[idx],
                    arrays.n_sel[idx],
                    beta,
                )
                batch_loss += loss
                gX += dX
                gY += dY
                gw += dw
            scale = 1.0 / hyper.beta_draws
            new = opt.step(
                {"X": X, "Y": Y, "w": w_s},
                {"X": gX * scale, "Y": gY * scale, "w": gw * scale},
            )
            X, Y, w_s = new["X"], new["Y"], new["w"]
            epoch_loss += batch_loss * scale
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"selection training diverged at epoch {epoch}")
    return SimParams(X=X, Y=Y, w_s=w_s)


# ---------------------------------------------------------------------------
# Variational posteriors over alpha and beta


def _beta_loglik_grad(params, arrays, beta):
    """Selection log-likelihood of the log and its gradient w.r.t. beta."""
    k = arrays.list_len
    if arrays.users.size == 0:
        return 0.0, np.zeros(k)
    z = (
        np.einsum("bd,bkd->bk", params.X[arrays.users], params.Y[arrays.items])
        + (params.w_s[:k] * beta[:k])[None, :]
    )
    z = np.where(arrays.mask, z, -np.inf)
    lse = logsumexp(z, axis=1)
    logp = z - lse[:, None]
    value = float(np.sum(arrays.sel * np.where(arrays.mask, logp, 0.0)))
    p = np.where(arrays.mask, np.exp(logp), 0.0)
    dz = arrays.sel - arrays.n_sel[:, None] * p
    grad = (dz * params.w_s[:k][None, :]).sum(axis=0)
    return value, grad


def _alpha_loglik_grad(params, arrays, alpha, block=512):
    """Exposure log-likelihood of the log and its gradient w.r.t. alpha.

    Softmax normalization runs over the whole catalog, so the computation
    is blocked over users to bound memory.
    """
    n_items = params.Q.shape[0]
    if arrays.users.size == 0:
        return 0.0, np.zeros(n_items)
    slot_users = np.repeat(arrays.users, arrays.list_len)[arrays.mask.ravel()]
    slot_items = arrays.items.ravel()[arrays.mask.ravel()]
    shows_per_user = np.bincount(slot_users, minlength=params.P.shape[0]).astype(
        np.float64
    )
    shows_per_item = np.bincount(slot_items, minlength=n_items).astype(np.float64)
    active = np.nonzero(shows_per_user)[0]

    wa = params.w_r * alpha
    value = float(np.sum(params.P[slot_users] * params.Q[slot_items]))
    value += float(wa[slot_items].sum())
    soft_mass = np.zeros(n_items)
    for start in range(0, len(active), block):
        users = active[start : start + block]
        z = params.P[users] @ params.Q.T + wa[None, :]
        lse = logsumexp(z, axis=1)
        value -= float(shows_per_user[users] @ lse)
        p = np.exp(z - lse[:, None])
        soft_mass += shows_per_user[users] @ p
    grad = (shows_per_item - soft_mass) * params.w_r
    return value, grad


def elbo_value_and_grads(params, arrays, mu_a, rho_a, mu_b, rho_b, eps_a, eps_b):
    """Evidence lower bound with reparameterized likelihood draws.

    The Gaussian prior cross-entropy and the posterior entropy are analytic;
    only the likelihood expectation is Monte-Carlo over the supplied epsilon
    draws, which makes the whole expression deterministic given them (as the
    finite-difference checks require). Returns (elbo, grads) where grads
    are gradients of the *negated* bound for the minimizer.
    """
    sigma_a = np.exp(rho_a)
    sigma_b = np.exp(rho_b)
    dim = mu_a.size + mu_b.size
    prior = -0.5 * (
        np.sum(mu_a**2 + sigma_a**2) + np.sum(mu_b**2 + sigma_b**2)
    ) - 0.5 * dim * LOG_2PI
    entropy = np.sum(rho_a) + np.sum(rho_b) + 0.5 * dim * (1.0 + LOG_2PI)

    n_draws = eps_a.shape[0]
    lik = 0.0
    glik_mu_a = np.zeros_like(mu_a)
    glik_rho_a = np.zeros_like(rho_a)
    glik_mu_b = np.zeros_like(mu_b)
    glik_rho_b = np.zeros_like(rho_b)
    for s in range(n_draws):
        alpha = mu_a + sigma_a * eps_a[s]
        beta = mu_b + sigma_b * eps_b[s]
        va, ga = _alpha_loglik_grad(params, arrays, alpha)
        vb, gb = _beta_loglik_grad(params, arrays, beta)
        lik += va + vb
        glik_mu_a += ga
        glik_rho_a += ga * eps_a[s] * sigma_a
        glik_mu_b += gb
        glik_rho_b += gb * eps_b[s] * sigma_b
    lik /= n_draws
    elbo = float(prior + entropy + lik)

    grads = {
        "mu_a": mu_a - glik_mu_a / n_draws,
        "rho_a": sigma_a**2 - 1.0 - glik_rho_a / n_draws,
        "mu_b": mu_b - glik_mu_b / n_draws,
        "rho_b": sigma_b**2 - 1.0 - glik_rho_b / n_draws,
    }
    return elbo, grads


def fit_posterior(
    params: SimParams,
    log: InteractionLog,
    hyper: PosteriorHyper,
    stream: RandomStream,
) -> VariationalPosterior:
    """Maximize the ELBO over diagonal-Gaussian posteriors for alpha and beta.

    Simulator parameters stay frozen. Sigmas are parameterized through an
    exponential map and floored at 1e-4; hitting the floor is reported once
    as a warning.
    """
    k = params.list_len
    n_items = params.n_items
    arrays = _log_arrays(log, list_len=k)
    values = {
        "mu_a": np.zeros(n_items),
        "rho_a": np.zeros(n_items),
        "mu_b": np.zeros(k),
        "rho_b": np.zeros(k),
    }
    opt = AdamGroup(values, lr=hyper.lr)
    rho_floor = math.log(SIGMA_FLOOR)
    clamped = False
    for epoch in range(hyper.epochs):
        eps_a = stream.normal((hyper.mc_samples, n_items))
        eps_b = stream.normal((hyper.mc_samples, k))
        elbo, grads = elbo_value_and_grads(
            params,
            arrays,
            values["mu_a"],
            values["rho_a"],
            values["mu_b"],
            values["rho_b"],
            eps_a,
            eps_b,
        )
        if not np.isfinite(elbo):
            raise TrainingError(f"posterior fit diverged at epoch {epoch}")
        values = opt.step(values, grads)
        for key in ("rho_a", "rho_b"):
            if np.any(values[key] < rho_floor):
                clamped = True
                values[key] = np.maximum(values[key], rho_floor)
    if clamped:
        warnings.warn("posterior sigma clamped at floor 1e-4", stacklevel=2)
    return VariationalPosterior(
        mu_alpha=values["mu_a"],
        sigma_alpha=np.exp(values["rho_a"]),
        mu_beta=values["mu_b"],
        sigma_beta=np.exp(values["rho_b"]),
    )


# ---------------------------------------------------------------------------
# Counterfactual selection


def counterfactual_select(
    params: SimParams,
    posterior: VariationalPosterior,
    u: int,
    items,
    m: int,
    stream: RandomStream,
):
    """Predict the selected set on an intervened list.

    Draws beta from its posterior, scores every slot, and returns the items
    of the m highest-probability slots (ties to the lower slot index) along
    with all slot probabilities.
    """
    items = list(items)
    if m > len(items):
        raise ValueError(f"cannot select {m} items from a list of {len(items)}")
    if len(set(items)) != len(items):
        raise ValueError("intervened list contains duplicate items")
    beta = posterior.sample_beta(stream)
    probs = slot_probs(params, u, items, beta)
    order = sorted(range(len(items)), key=lambda t: (-probs[t], t))
    chosen_slots = sorted(order[:m])
    return [items[t] for t in chosen_slots], probs


# ---------------------------------------------------------------------------
# Persistence


def save_sim_params(params: SimParams, path) -> None:
    arrays = {}
    for name in ("P", "Q", "w_r", "X", "Y", "w_s"):
        value = getattr(params, name)
        if value is not None:
            arrays[name] = value
    meta = {
        "n_users": params.n_users,
        "n_items": params.n_items,
        "list_len": params.w_s.shape[0] if params.w_s is not None else 0,
        "d_r": params.P.shape[1] if params.P is not None else 0,
        "d_s": params.X.shape[1] if params.X is not None else 0,
    }
    textio.save_matrices(path, arrays, meta)


def load_sim_params(path) -> SimParams:
    arrays, _ = textio.load_matrices(path)
    def get(name, flat=False):
        if name not in arrays:
            return None
        return arrays[name].ravel() if flat else arrays[name]
    return SimParams(
        P=get("P"),
        Q=get("Q"),
        w_r=get("w_r", flat=True),
        X=get("X"),
        Y=get("Y"),
        w_s=get("w_s", flat=True),
    )


def save_posterior(post: VariationalPosterior, path) -> None:
    textio.save_matrices(
        path,
        {
            "mu_alpha": post.mu_alpha,
            "sigma_alpha": post.sigma_alpha,
            "mu_beta": post.mu_beta,
            "sigma_beta": post.sigma_beta,
        },
    )


def load_posterior(path) -> VariationalPosterior:
    arrays, _ = textio.load_matrices(path)
    return VariationalPosterior(
        mu_alpha=arrays["mu_alpha"].ravel(),
        sigma_alpha=arrays["sigma_alpha"].ravel(),
        mu_beta=arrays["mu_beta"].ravel(),
        sigma_beta=arrays["sigma_beta"].ravel(),
    )
