"""Scalar reward model trained from pairwise preferences.

A linear head over the encoder's mean-pooled representation maps a
vocalization to one scalar.  Training minimizes the pairwise logistic
loss -ln sigmoid(r_chosen - r_rejected), so rewards are calibrated only
up to an additive constant, which is all a preference dataset can pin
down.  By default the encoder stays frozen and pooled vectors are cached
once per clip; a flag unfreezes the transformer (the conv front end is
always frozen).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDatasetError
from .model import EncoderModel, mean_pool, pooled_backward, pooled_forward
from .signal import AudioClip


@dataclass(eq=False)
class RewardModel:
    """Shared encoder plus a linear reward head (d_model -> 1)."""

    encoder: EncoderModel
    weights: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.encoder.config.d_model,):
            raise ValueError("reward weights must be a d_model vector")


@dataclass(eq=False)
class PreferencePair:
    """One human judgement: ``chosen`` is preferred over ``rejected``."""

    chosen: AudioClip
    rejected: AudioClip
    annotator_id: str = ""

    def __post_init__(self):
        if self.chosen is self.rejected:
            raise ValueError("a pair must involve two distinct clips")


@dataclass
class RewardTrainReport:
    """Training outcome over the full pair set."""

    final_loss: float
    pairwise_accuracy: float
    loss_trace: list = field(default_factory=list)


def init_reward_model(encoder: EncoderModel, seed: int) -> RewardModel:
    """Near-zero head so an untrained model scores every clip around 0."""
    rng = np.random.default_rng(seed)
    d = encoder.config.d_model
    return RewardModel(encoder=encoder,
                       weights=0.01 * rng.standard_normal(d) / math.sqrt(d),
                       bias=0.0)


def reward_score(rm: RewardModel, clip: AudioClip) -> float:
    """Deterministic scalar reward: encoder, mean-pool, linear head."""
    pooled = mean_pool(_encode(rm, clip))
    return float(pooled @ rm.weights + rm.bias)


def _encode(rm: RewardModel, clip: AudioClip):
    from .model import encode

    return encode(rm.encoder, clip)


def preference_loss(r_chosen: float, r_rejected: float) -> float:
    """-ln sigmoid(r_chosen - r_rejected), computed stably."""
    margin = r_chosen - r_rejected
    # softplus(-margin) without overflow for large |margin|
    return float(np.logaddexp(0.0, -margin))


def train_reward(rm: RewardModel, pairs, epochs: int, step_size: float,
                 seed: int, train_encoder: bool = False) -> RewardTrainReport:
    """Full-batch gradient descent on the mean pairwise logistic loss.

    With the encoder frozen (default), each distinct clip is encoded once
    and epochs run on cached pooled vectors.  ``train_encoder=True`` also
    updates the transformer (never the conv front end).  Returns the
    post-training mean loss and pairwise accuracy, plus the per-epoch
    pre-update loss trace.
    """
    pairs = list(pairs)
    if not pairs:
        raise EmptyDatasetError("no preference pairs")
    del seed  # reserved for future stochastic batching; training is full-batch

    if train_encoder:
        return _train_unfrozen(rm, pairs, epochs, step_size)

    cache: dict[int, np.ndarray] = {}

    def pooled(clip):
        key = id(clip)
        if key not in cache:
            cache[key] = mean_pool(_encode(rm, clip))
        return cache[key]

    chosen = np.array([pooled(p.chosen) for p in pairs])
    rejected = np.array([pooled(p.rejected) for p in pairs])
    diff = chosen - rejected

    trace = []
    for _ in range(epochs):
        margins = diff @ rm.weights
        losses = np.logaddexp(0.0, -margins)
        trace.append(float(losses.mean()))
        # d/dw mean softplus(-m) = -mean sigmoid(-m) * diff
        coeff = -1.0 / (1.0 + np.exp(margins))
        rm.weights -= step_size * (coeff[:, None] * diff).mean(axis=0)

    margins = diff @ rm.weights
    final_loss = float(np.logaddexp(0.0, -margins).mean())
    accuracy = float(np.mean(margins > 0))
    return RewardTrainReport(final_loss=final_loss, pairwise_accuracy=accuracy,
                             loss_trace=trace)


def _train_unfrozen(rm: RewardModel, pairs, epochs: int,
                    step_size: float) -> RewardTrainReport:
    from .model import CONV_PREFIXES, _apply_update

    trace = []
    for _ in range(epochs):
        epoch_losses = []
        for pair in pairs:
            pooled_c, ctx_c = pooled_forward(rm.encoder, pair.chosen)
            pooled_r, ctx_r = pooled_forward(rm.encoder, pair.rejected)
            margin = float((pooled_c - pooled_r) @ rm.weights)
            epoch_losses.append(np.logaddexp(0.0, -margin))
            coeff = -1.0 / (1.0 + math.exp(margin))
            dw = coeff * (pooled_c - pooled_r)
            enc_grads_c = pooled_backward(rm.encoder, ctx_c, coeff * rm.weights)
            enc_grads_r = pooled_backward(rm.encoder, ctx_r, -coeff * rm.weights)
            merged = {
                name: enc_grads_c[name] + enc_grads_r[name]
                for name in enc_grads_c
            }
            _apply_update(rm.encoder.params, merged, step_size,
                          frozen_prefixes=CONV_PREFIXES)
            rm.weights -= step_size * dw
        trace.append(float(np.mean(epoch_losses)))

    losses = []
    correct = 0
    for pair in pairs:
        r_c = reward_score(rm, pair.chosen)
        r_r = reward_score(rm, pair.rejected)
        losses.append(preference_loss(r_c, r_r))
        correct += int(r_c > r_r)
    return RewardTrainReport(final_loss=float(np.mean(losses)),
                             pairwise_accuracy=correct / len(pairs),
                             loss_trace=trace)
