"""A three-armed bandit on the location policy with a closed-form gradient.

The policy is the network's location head with a fixed hidden state:
``l ~ N(tanh(W h + b), sigma2 I)``. The horizontal coordinate of the draw
selects one of three vertical strips (arms) with rewards ``r_k``; the reward
is paid only when the vertical coordinate lies below ``y_cut``. The expected
reward is a product of normal CDF differences, so its gradient with respect
to ``W`` and ``b`` is available exactly and can be compared against the
Monte Carlo policy-gradient estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernel
from .kernel import ParamSlot
from .model import policy_backward, sample_location


def _cdf(z):
    return 0.5 * (1.0 + np.vectorize(math.erf)(np.asarray(z) / math.sqrt(2.0)))


def _pdf(z):
    z = np.asarray(z)
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


@dataclass
class ThreeArmBandit:
    rewards: tuple[float, float, float] = (0.2, 1.0, 0.5)
    edges: tuple[float, float] = (-1.0 / 3.0, 1.0 / 3.0)
    y_cut: float = 0.3
    sigma2: float = 0.22

    def reward(self, raw) -> np.ndarray:
        raw = np.asarray(raw)
        arm = np.searchsorted(np.asarray(self.edges), raw[..., 0], side="right")
        return np.asarray(self.rewards)[arm] * (raw[..., 1] < self.y_cut)

    def _bounds(self):
        return np.array([-np.inf, *self.edges]), np.array([*self.edges, np.inf])

    def expected_reward(self, mu) -> float:
        s = math.sqrt(self.sigma2)
        lo, hi = self._bounds()
        p_arm = _cdf((hi - mu[0]) / s) - _cdf((lo - mu[0]) / s)
        p_y = float(_cdf((self.y_cut - mu[1]) / s))
        return float(np.dot(self.rewards, p_arm) * p_y)

    def mean_gradient(self, mu) -> np.ndarray:
        """Exact ``dJ / d mu``."""
        s = math.sqrt(self.sigma2)
        lo, hi = self._bounds()
        p_arm = _cdf((hi - mu[0]) / s) - _cdf((lo - mu[0]) / s)
        d_arm = (_pdf((lo - mu[0]) / s) - _pdf((hi - mu[0]) / s)) / s
        p_y = float(_cdf((self.y_cut - mu[1]) / s))
        d_y = -float(_pdf((self.y_cut - mu[1]) / s)) / s
        r = np.asarray(self.rewards)
        return np.array([np.dot(r, d_arm) * p_y, np.dot(r, p_arm) * d_y])

    def policy_gradient(self, W, b, h) -> tuple[np.ndarray, np.ndarray]:
        """Exact gradient of the expected reward with respect to ``(W, b)``."""
        mu = np.tanh(W @ h + b)
        dz = self.mean_gradient(mu) * (1.0 - mu * mu)
        return np.outer(dz, h), dz

    def estimate(self, W, b, h, n_episodes: int, rng: np.random.Generator, baseline: float = 0.0):
        """Monte Carlo policy gradient over ``n_episodes`` draws.

        Runs the same score-function backward the trainer uses (which yields
        the gradient of the loss ``-(R - baseline) log pi``) and flips its
        sign.
        """
        Ws, bs = ParamSlot("locator.W", np.array(W, dtype=np.float64)), ParamSlot("locator.b", np.array(b, dtype=np.float64))
        hs = np.tile(h, (n_episodes, 1))
        pre, c_lin = kernel.linear_forward(hs, Ws, bs)
        mu = np.tanh(pre)
        _, raw, _ = sample_location(mu, self.sigma2, rng)
        adv = (self.reward(raw) - baseline) / n_episodes
        policy_backward(raw, (c_lin, mu), adv, self.sigma2, Ws, bs)
        return -Ws.grad, -bs.grad


def unbiasedness_zscores(bandit: ThreeArmBandit, W, b, h, n_chunks: int = 100, chunk: int = 100, seed: int = 0):
    """Z-scores of the estimator mean against the exact gradient, per coordinate.

    The ``n_chunks * chunk`` episodes are split into chunks whose means give
    the standard error.
    """
    rng = kernel.make_rng(seed)
    est = [np.concatenate([g.ravel() for g in bandit.estimate(W, b, h, chunk, rng)]) for _ in range(n_chunks)]
    est = np.array(est)
    exact = np.concatenate([g.ravel() for g in bandit.policy_gradient(W, b, h)])
    se = est.std(axis=0, ddof=1) / math.sqrt(n_chunks)
    return (est.mean(axis=0) - exact) / np.where(se > 0, se, np.inf), est.mean(axis=0), exact, se
