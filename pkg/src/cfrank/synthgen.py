"""Synthetic world generator: Gaussian user/item vectors, a fixed piecewise
impression scorer, softmax impression sampling, and linear/nonlinear user
feedback with controllable label noise."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import textio
from .corpus import InteractionLog, Record
from .mathcore import RandomStream, sigmoid, softmax

FEEDBACK_MODES = ("linear", "nonlinear")


def kappa1(x):
    """x - 0.5 on the positive half-line, else 0."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x - 0.5, 0.0)


def kappa2(x):
    """x on the positive half-line, else 0."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x, 0.0)


def kappa3(x):
    """x + 0.5 on the negative half-line, else 0."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < 0, x + 0.5, 0.0)


@dataclass
class SyntheticWorld:
    user_vecs: np.ndarray  # (n_users, d), i.i.d. standard normal
    item_vecs: np.ndarray  # (n_items, d)
    a: np.ndarray  # all-ones weight vector in R^{2d}
    b: float  # fixed scalar bias, 0
    noise_std: float  # std of the additive label noise N_y (0 = noiseless)

    @property
    def n_users(self):
        return self.user_vecs.shape[0]

    @property
    def n_items(self):
        return self.item_vecs.shape[0]

    @property
    def d(self):
        return self.user_vecs.shape[1]


def make_world(
    n_users=600, n_items=300, d=16, noise_std=0.0, stream: RandomStream | None = None
) -> SyntheticWorld:
    if stream is None:
        stream = RandomStream(0)
    return SyntheticWorld(
        user_vecs=stream.normal((n_users, d)),
        item_vecs=stream.normal((n_items, d)),
        a=np.ones(2 * d),
        b=0.0,
        noise_std=float(noise_std),
    )


def _pair_features(world: SyntheticWorld, u: int):
    """[p_u, q_j] stacked for all items j -> (n_items, 2d)."""
    p = np.broadcast_to(world.user_vecs[u], world.item_vecs.shape)
    return np.concatenate([p, world.item_vecs], axis=1)


def _x1_all(world: SyntheticWorld, u: int):
    return kappa1(kappa2(_pair_features(world, u))) @ world.a + world.b


def _x2_all(world: SyntheticWorld, u: int):
    # kappa3 acts on the negated pair features. It is already zero on the
    # nonnegative half-line, so clamping its input would erase the signal
    # entirely and collapse the nonlinear response onto the linear one.
    return kappa3(-_pair_features(world, u)) @ world.a + world.b


def impression_score(world: SyntheticWorld, u: int, j: int) -> float:
    """Exposure propensity 1 - sigmoid(a^T kappa1(kappa2([p_u, q_j])) + b)."""
    return float(impression_scores(world, u)[j])


def impression_scores(world: SyntheticWorld, u: int) -> np.ndarray:
    return 1.0 - sigmoid(_x1_all(world, u))


def sample_impressions(
    world: SyntheticWorld, u: int, n_lists=25, list_len=5, stream=None
) -> list:
    """Draw impression lists of distinct items, proportional to softmax scores.

    Each list is built by sequential renormalized draws without replacement,
    with per-item probability softmax(r_u.) at each step.
    """
    if list_len > world.n_items:
        raise ValueError("list length exceeds item count")
    base = softmax(impression_scores(world, u))
    lists = []
    for _ in range(n_lists):
        probs = base.copy()
        chosen = []
        for _ in range(list_len):
            probs = probs / probs.sum()
            item = int(stream.choice(world.n_items, p=probs))
            chosen.append(item)
            probs[item] = 0.0
        lists.append(chosen)
    return lists


def user_feedback(world: SyntheticWorld, u: int, j: int, mode: str, stream=None) -> int:
    """Simulated 0/1 response of user u to item j under the given mode."""
    if mode not in FEEDBACK_MODES:
        raise ValueError(f"unknown feedback mode {mode!r}")
    x1 = float(_x1_all(world, u)[j])
    x2 = float(_x2_all(world, u)[j])
    noise = 0.0
    if world.noise_std > 0:
        noise = world.noise_std * float(stream.normal())
    arg = x1 if mode == "linear" else x1 + x1 * x2
    return int(sigmoid(arg) + noise - 0.5 > 0)


def emit_dataset(
    world: SyntheticWorld, mode: str, stream: RandomStream, n_lists=25, list_len=5
) -> InteractionLog:
    """Sample every user's impression lists and label each shown item.

    Impressions and label noise draw from separate per-user substreams, so
    the two feedback modes see identical impression lists for a given seed.
    """
    if mode not in FEEDBACK_MODES:
        raise ValueError(f"unknown feedback mode {mode!r}")
    records = []
    for u in range(world.n_users):
        imp_stream = stream.substream(f"impressions/{u}")
        noise_stream = stream.substream(f"labels/{u}")
        x1 = _x1_all(world, u)
        x2 = _x2_all(world, u)
        arg = x1 if mode == "linear" else x1 + x1 * x2
        response = sigmoid(arg)
        for items in sample_impressions(world, u, n_lists, list_len, imp_stream):
            labels = []
            for j in items:
                noise = 0.0
                if world.noise_std > 0:
                    noise = world.noise_std * float(noise_stream.normal())
                labels.append(int(response[j] + noise - 0.5 > 0))
            records.append(Record(u, items, labels))
    return InteractionLog(world.n_users, world.n_items, records).validate()


def save_world(world: SyntheticWorld, path) -> None:
    textio.save_matrices(
        path,
        {"user_vecs": world.user_vecs, "item_vecs": world.item_vecs},
        meta={"d": world.d, "noise_std": repr(world.noise_std)},
    )


def load_world(path) -> SyntheticWorld:
    arrays, meta = textio.load_matrices(path)
    d = int(meta["d"])
    return SyntheticWorld(
        user_vecs=arrays["user_vecs"],
        item_vecs=arrays["item_vecs"],
        a=np.ones(2 * d),
        b=0.0,
        noise_std=float(meta["noise_std"]),
    )
