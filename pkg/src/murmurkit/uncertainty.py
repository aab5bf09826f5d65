"""Monte-Carlo-dropout predictive distributions and entropy.

Dropout stays active at inference; the model runs N stochastic forward
passes per input and the class distribution is the mean of the per-pass
softmax outputs. Prediction uncertainty is the Shannon entropy of that
mean (natural log, so the range for three classes is [0, ln 3]).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import ModelState, forward

DEFAULT_PASSES = 30


@dataclass(frozen=True)
class McResult:
    mean: np.ndarray               # (n_classes,) probabilities
    entropy: float                 # nats, in [0, ln n_classes]
    n_passes: int
    per_pass: np.ndarray | None    # (N, n_classes) per-pass probabilities


def entropy(p: np.ndarray) -> float | np.ndarray:
    """Shannon entropy in nats over the last axis; zero terms contribute 0."""
    p = np.asarray(p, dtype=np.float64)
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def mc_logits(state: ModelState, features: np.ndarray, n_passes: int,
              seed: int) -> np.ndarray:
    """Per-pass logits, shape (N, S, n_classes).

    Pass n uses dropout masks from the stream (seed, "mc", n), so results
    are a pure function of (seed, n_passes). Passes are independent and the
    caller may evaluate them in parallel; ordering is by pass index.
    """
    if n_passes < 1:
        raise ValueError("n_passes must be >= 1")
    out = np.empty((n_passes, len(features), state.config.n_classes))
    with ad.no_grad():
        for n in range(n_passes):
            logits = forward(state, features, mode="mc", seed=seed, index=n)
            out[n] = logits.data.astype(np.float64)
    return out


def summarize(per_pass_probs: np.ndarray, keep_passes: bool = False) -> McResult:
    """Reduce one segment's (N, n_classes) per-pass probabilities.

    The mean is accumulated in pass order, so fixed inputs give bit-identical
    results regardless of how the passes were computed.
    """
    per_pass_probs = np.asarray(per_pass_probs, dtype=np.float64)
    n_passes = per_pass_probs.shape[0]
    mean = per_pass_probs.sum(axis=0) / n_passes
    return McResult(mean=mean, entropy=float(entropy(mean)), n_passes=n_passes,
                    per_pass=per_pass_probs.copy() if keep_passes else None)


def mc_predict_batch(state: ModelState, features: np.ndarray,
                     n_passes: int = DEFAULT_PASSES, seed: int = 0,
                     keep_passes: bool = False) -> list[McResult]:
    """MC-dropout prediction for a stack of feature maps."""
    logits = mc_logits(state, features, n_passes, seed)
    probs = softmax(logits)  # (N, S, C)
    return [summarize(probs[:, s, :], keep_passes=keep_passes)
            for s in range(len(features))]


def mc_predict(state: ModelState, feature_map: np.ndarray,
               n_passes: int = DEFAULT_PASSES, seed: int = 0,
               keep_passes: bool = False) -> McResult:
    """MC-dropout prediction for a single feature map."""
    return mc_predict_batch(state, feature_map[None], n_passes=n_passes,
                            seed=seed, keep_passes=keep_passes)[0]
