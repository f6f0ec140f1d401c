"""Learning-based intervention on recommendation lists.

A small Gaussian policy proposes a continuous item center per user; the K
catalog items scoring highest against that center form the intervened list,
the simulator labels it, and the resulting samples (optionally filtered to
the most- and least-confident slots) are scored by the target model's loss,
which REINFORCE then pushes the policy to increase.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import textio
from .mathcore import RandomStream
from .rankers import loss_pairwise, loss_pointwise
from .simulator import SimParams, VariationalPosterior, counterfactual_select

LOG_2PI = math.log(2.0 * math.pi)
SAMPLE_MODES = ("pairwise", "pointwise")


class GaussianPolicy:
    """Two-layer rectifier network emitting a Gaussian action distribution.

    The network maps a user embedding to the action mean; the log-std vector
    is a free, state-independent parameter.
    """

    def __init__(self, d: int, hidden: int, stream: RandomStream):
        if hidden <= 0:
            raise ValueError("hidden width must be positive")
        self.d = d
        self.hidden = hidden
        self.W1 = stream.normal((hidden, d)) * np.sqrt(2.0 / d)
        self.b1 = np.full(hidden, 0.01)  # off the rectifier kink at init
        self.W2 = stream.normal((d, hidden)) * np.sqrt(2.0 / hidden)
        self.b2 = np.zeros(d)
        self.log_std = np.full(d, math.log(0.5))

    def params(self) -> dict:
        return {
            "W1": self.W1,
            "b1": self.b1,
            "W2": self.W2,
            "b2": self.b2,
            "log_std": self.log_std,
        }

    def set_params(self, values: dict) -> None:
        for name, arr in values.items():
            setattr(self, name, np.asarray(arr, dtype=np.float64))

    def mean(self, x) -> np.ndarray:
        pre = self.W1 @ np.asarray(x, dtype=np.float64) + self.b1
        return self.W2 @ np.maximum(pre, 0.0) + self.b2

    def log_prob(self, x, action) -> float:
        mu = self.mean(x)
        std = np.exp(self.log_std)
        quad = ((np.asarray(action) - mu) / std) ** 2
        return float(-0.5 * np.sum(quad) - np.sum(self.log_std) - 0.5 * self.d * LOG_2PI)


@dataclass
class Episode:
    """One intervention: the action taken, the realized list, and its reward."""

    user: int
    user_embed: np.ndarray
    action: np.ndarray  # the policy's own draw, before exploration noise
    tau: np.ndarray  # action + exploration noise; the center actually used
    logprob: float  # density of `action` under the policy
    items: list
    selected: list
    reward: float
    episode_id: str = ""


@dataclass
class CounterfactualBatch:
    """Synthesized training samples with per-sample confidence and provenance."""

    mode: str
    triplets: list = field(default_factory=list)  # (user, pos_item, neg_item)
    points: list = field(default_factory=list)  # (user, item, label)
    confidences: list = field(default_factory=list)
    provenance: list = field(default_factory=list)

    def __len__(self):
        return len(self.triplets) if self.mode == "pairwise" else len(self.points)

    def extend(self, other: "CounterfactualBatch") -> None:
        if other.mode != self.mode:
            raise ValueError("cannot merge batches of different modes")
        self.triplets.extend(other.triplets)
        self.points.extend(other.points)
        self.confidences.extend(other.confidences)
        self.provenance.extend(other.provenance)

    def rows(self) -> np.ndarray:
        data = self.triplets if self.mode == "pairwise" else self.points
        return (
            np.asarray(data, dtype=np.int64).reshape(-1, 3)
            if data
            else np.zeros((0, 3), dtype=np.int64)
        )

    def to_tsv(self, path) -> None:
        header = (
            "user\tpos_item\tneg_item\tconfidence\tprovenance"
            if self.mode == "pairwise"
            else "user\titem\tlabel\tconfidence\tprovenance"
        )
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"#mode {self.mode}\n{header}\n")
            rows = self.triplets if self.mode == "pairwise" else self.points
            for row, conf, src in zip(rows, self.confidences, self.provenance):
                fields = "\t".join(str(x) for x in row)
                fh.write(f"{fields}\t{conf:.6f}\t{src}\n")

    @classmethod
    def from_tsv(cls, path) -> "CounterfactualBatch":
        with open(path, encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        mode = lines[0].split()[1]
        batch = cls(mode=mode)
        for line in lines[2:]:
            if not line:
                continue
            a, b, c, conf, src = line.split("\t")
            row = (int(a), int(b), int(c))
            (batch.triplets if mode == "pairwise" else batch.points).append(row)
            batch.confidences.append(float(conf))
            batch.provenance.append(src)
        return batch


def policy_sample(
    policy: GaussianPolicy, user_embed, stream: RandomStream, explore_std: float = 0.0
):
    """Draw an action and its log-density; optionally add exploration noise.

    Returns (tau, action, logprob): `action` is the policy's own draw and the
    log-density refers to it, `tau` adds the exploration perturbation and is
    what downstream list realization should use.
    """
    user_embed = np.asarray(user_embed, dtype=np.float64)
    mu = policy.mean(user_embed)
    std = np.exp(policy.log_std)
    action = mu + std * stream.normal(policy.d)
    tau = action.copy()
    if explore_std > 0:
        tau = tau + explore_std * stream.normal(policy.d)
    logprob = policy.log_prob(user_embed, action)
    return tau, action, logprob


def realize_list(params: SimParams, tau, alpha, list_len: int) -> list:
    """The `list_len` items scoring highest against the center tau.

    Scores are tau . Q_k + w_r[k] * alpha[k]; ties break toward the lower
    item id.
    """
    if list_len > params.n_items:
        raise ValueError("list length exceeds item count")
    scores = params.Q @ np.asarray(tau, dtype=np.float64) + params.w_r * np.asarray(
        alpha
    )
    order = np.lexsort((np.arange(len(scores)), -scores))
    return [int(i) for i in order[:list_len]]


def random_list(n_items: int, list_len: int, stream: RandomStream) -> list:
    """Uniform list of distinct items (the random-intervention ablation)."""
    if list_len > n_items:
        raise ValueError("list length exceeds item count")
    return [int(i) for i in stream.choice(n_items, size=list_len, replace=False)]


def _ranked_slots(slot_probs):
    """Slot indices by descending probability, ties to the lower slot."""
    probs = np.asarray(slot_probs, dtype=np.float64)
    return sorted(range(len(probs)), key=lambda t: (-probs[t], t))


def build_samples(
    user: int, items, slot_probs, mode: str, k: int, provenance: str = ""
) -> CounterfactualBatch:
    """Confidence-filtered samples from one labeled list.

    The k highest-probability slots act as selected items and the k lowest
    as rejected ones (one shared ranking, ties to the lower slot, so the two
    sets are disjoint whenever 2k <= K). Pairwise mode emits the k*k cross
    pairs with the probability margin as confidence; pointwise mode labels
    the two sets 1 and 0 with the slot probability (or its complement) as
    confidence.
    """
    if mode not in SAMPLE_MODES:
        raise ValueError(f"unknown sample mode {mode!r}")
    n = len(items)
    if not 1 <= k < n:
        raise ValueError(f"noise-control level k={k} invalid for list of {n}")
    order = _ranked_slots(slot_probs)
    top = order[:k]
    bottom = order[-k:]
    probs = np.asarray(slot_probs, dtype=np.float64)
    batch = CounterfactualBatch(mode=mode)
    if mode == "pairwise":
        for t_pos in top:
            for t_neg in bottom:
                if items[t_pos] == items[t_neg]:
                    continue
                batch.triplets.append((user, items[t_pos], items[t_neg]))
                batch.confidences.append(float(probs[t_pos] - probs[t_neg]))
                batch.provenance.append(provenance)
    else:
        for t in top:
            batch.points.append((user, items[t], 1))
            batch.confidences.append(float(probs[t]))
            batch.provenance.append(provenance)
        for t in bottom:
            batch.points.append((user, items[t], 0))
            batch.confidences.append(float(1.0 - probs[t]))
            batch.provenance.append(provenance)
    return batch


def build_samples_unfiltered(
    user: int, items, selected, mode: str, slot_probs=None, provenance: str = ""
) -> CounterfactualBatch:
    """All selected-vs-rest samples from one labeled list, no filtering."""
    if mode not in SAMPLE_MODES:
        raise ValueError(f"unknown sample mode {mode!r}")
    selected = list(selected)
    if not set(selected) <= set(items):
        raise ValueError("selected items must come from the realized list")
    rest = [i for i in items if i not in selected]
    probs = {
        item: float(p)
        for item, p in zip(items, np.asarray(slot_probs, dtype=np.float64))
    } if slot_probs is not None else {}
    batch = CounterfactualBatch(mode=mode)
    if mode == "pairwise":
        for i in selected:
            for j in rest:
                batch.triplets.append((user, i, j))
                batch.confidences.append(probs.get(i, 1.0) - probs.get(j, 0.0))
                batch.provenance.append(provenance)
    else:
        for i in selected:
            batch.points.append((user, i, 1))
            batch.confidences.append(probs.get(i, 1.0))
            batch.provenance.append(provenance)
        for j in rest:
            batch.points.append((user, j, 0))
            batch.confidences.append(1.0 - probs.get(j, 0.0))
            batch.provenance.append(provenance)
    return batch


# ---------------------------------------------------------------------------
# REINFORCE


def surrogate_loss_grads(policy: GaussianPolicy, episodes, baseline: float):
    """Value and gradients of sum_t (reward_t - baseline) * logprob_t."""
    grads = {k: np.zeros_like(v) for k, v in policy.params().items()}
    value = 0.0
    std = np.exp(policy.log_std)
    for ep in episodes:
        weight = ep.reward - baseline
        x = ep.user_embed
        pre = policy.W1 @ x + policy.b1
        h = np.maximum(pre, 0.0)
        mu = policy.W2 @ h + policy.b2
        diff = (ep.action - mu) / (std**2)
        value += weight * policy.log_prob(x, ep.action)
        # d logprob / d mu = (a - mu) / std^2, then back through the network
        dmu = weight * diff
        grads["W2"] += np.outer(dmu, h)
        grads["b2"] += dmu
        dh = policy.W2.T @ dmu
        dpre = dh * (pre > 0)
        grads["W1"] += np.outer(dpre, x)
        grads["b1"] += dpre
        # d logprob / d log_std = ((a - mu)/std)^2 - 1
        grads["log_std"] += weight * (((ep.action - mu) / std) ** 2 - 1.0)
    return value, grads


def reinforce_update(policy: GaussianPolicy, episodes, lr: float) -> GaussianPolicy:
    """One ascent step on the baseline-subtracted policy-gradient surrogate.

    The baseline is the mean episode reward; equal rewards therefore produce
    an exactly zero update. A non-finite gradient skips the update with a
    warning instead of corrupting the policy.
    """
    episodes = list(episodes)
    if not episodes:
        raise ValueError("reinforce_update needs at least one episode")
    rewards = np.array([ep.reward for ep in episodes], dtype=np.float64)
    if not np.all(np.isfinite(rewards)):
        raise ValueError("episode rewards must be finite")
    baseline = float(rewards.mean())
    _, grads = surrogate_loss_grads(policy, episodes, baseline)
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        warnings.warn("non-finite policy gradient; update skipped", stacklevel=2)
        return policy
    updated = {k: v + lr * grads[k] for k, v in policy.params().items()}
    policy.set_params(updated)
    return policy


# ---------------------------------------------------------------------------
# Episode generation


def run_intervention_round(
    policy: GaussianPolicy | None,
    params: SimParams,
    posterior: VariationalPosterior,
    target_model,
    users,
    actions_per_user: int,
    mode: str,
    k: int,
    stream: RandomStream,
    explore_std: float = 0.0,
    noise_control: bool = True,
    list_source: str = "policy",
    round_tag: str = "round",
):
    """Generate counterfactual samples for each user and score their reward.

    For every user and action: draw alpha and beta from their posteriors,
    propose a center (policy) or a uniform list (random ablation), label the
    realized list with the simulator, assemble samples (noise-controlled at
    level k, or all selected-vs-rest when noise_control is off), and set the
    episode reward to the target model's loss on those samples. Returns the
    merged batch and the episode list.
    """
    if list_source not in ("policy", "random"):
        raise ValueError(f"unknown list source {list_source!r}")
    list_len = params.list_len
    merged = CounterfactualBatch(mode=mode)
    episodes = []
    for user in users:
        for t in range(actions_per_user):
            tag = f"{round_tag}/u{user}/t{t}"
            alpha = posterior.sample_alpha(stream)
            if list_source == "policy":
                embed = params.P[user]
                tau, action, logprob = policy_sample(
                    policy, embed, stream, explore_std
                )
                items = realize_list(params, tau, alpha, list_len)
            else:
                embed = params.P[user]
                tau = action = np.zeros(params.P.shape[1])
                logprob = 0.0
                items = random_list(params.n_items, list_len, stream)
                tag = "random"
            selected, probs = counterfactual_select(
                params, posterior, user, items, m=k, stream=stream
            )
            if noise_control:
                batch = build_samples(user, items, probs, mode, k, provenance=tag)
            else:
                batch = build_samples_unfiltered(
                    user, items, selected, mode, slot_probs=probs, provenance=tag
                )
            if mode == "pairwise":
                reward = loss_pairwise(target_model, batch.rows())
            else:
                reward = loss_pointwise(target_model, batch.rows())
            episodes.append(
                Episode(
                    user=user,
                    user_embed=np.asarray(embed, dtype=np.float64),
                    action=action,
                    tau=tau,
                    logprob=logprob,
                    items=items,
                    selected=selected,
                    reward=reward,
                    episode_id=tag,
                )
            )
            merged.extend(batch)
    return merged, episodes


def pretrain_policy(
    policy: GaussianPolicy,
    params: SimParams,
    posterior: VariationalPosterior,
    target_model,
    n_users: int,
    episodes: int,
    steps_per_episode: int,
    mode: str,
    k: int,
    lr: float,
    stream: RandomStream,
    explore_start: float = 0.5,
    noise_control: bool = True,
) -> GaussianPolicy:
    """Train the policy with REINFORCE against the frozen target model.

    Each episode samples `steps_per_episode` users uniformly, generates one
    intervention per user with exploration noise whose std decays linearly
    from `explore_start` to zero, and takes one policy-gradient step.
    """
    for ep in range(episodes):
        decay = 1.0 - (ep / max(episodes - 1, 1))
        explore = explore_start * decay
        users = [int(u) for u in stream.integers(0, n_users, steps_per_episode)]
        _, eps = run_intervention_round(
            policy,
            params,
            posterior,
            target_model,
            users,
            actions_per_user=1,
            mode=mode,
            k=k,
            stream=stream,
            explore_std=explore,
            noise_control=noise_control,
            round_tag=f"pretrain{ep}",
        )
        reinforce_update(policy, eps, lr)
    return policy


def save_policy(policy: GaussianPolicy, path) -> None:
    textio.save_matrices(
        path,
        policy.params(),
        meta={"d": policy.d, "hidden": policy.hidden},
    )


def load_policy(path) -> GaussianPolicy:
    arrays, meta = textio.load_matrices(path)
    policy = GaussianPolicy(int(meta["d"]), int(meta["hidden"]), RandomStream(0))
    policy.set_params(
        {
            "W1": arrays["W1"],
            "b1": arrays["b1"].ravel(),
            "W2": arrays["W2"],
            "b2": arrays["b2"].ravel(),
            "log_std": arrays["log_std"].ravel(),
        }
    )
    return policy
