"""Noise backends: an exact binary increment tree and a Monte Carlo sampler.

The tree carries Bernoulli increments +-sqrt(dt) with probability 1/2, so
conditional expectations, martingale increments and all moments are exact
node-by-node.  Non-recombining trees store one node per path prefix
(children of node j at level n are 2j, the down move, and 2j + 1, the up
move).  Recombining trees store one node per (level, W value) pair and are
valid only for quantities that are functions of (t, W(t)) alone, which the
callers enforce.

The Monte Carlo backend draws Gaussian increments from a seeded generator;
adjacent increments can be pairwise summed to produce coarser resolutions
of the same Brownian path for convergence studies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class NoiseTree:
    n_t: int
    T: float
    recombining: bool
    levels: list       # per-level W values, shape (n_nodes,)
    probs: list        # per-level node probabilities

    @property
    def dt(self):
        return self.T / self.n_t

    @property
    def sqrt_dt(self):
        return np.sqrt(self.dt)

    def n_nodes(self, level):
        return len(self.levels[level])

    def path_increments(self, leaf):
        """Increment sequence (length n_t) of the path ending at this leaf."""
        if self.recombining:
            raise ValueError("recombining trees do not store full paths")
        s = self.sqrt_dt
        bits = [(leaf >> (self.n_t - 1 - k)) & 1 for k in range(self.n_t)]
        # child index = 2 j + bit, so the leading bit is the first move
        return np.array([s if b else -s for b in bits])

    def path_nodes(self, leaf):
        """Node index at each level along the path to this leaf."""
        if self.recombining:
            raise ValueError("recombining trees do not store full paths")
        return [leaf >> (self.n_t - n) for n in range(self.n_t + 1)]


def build_tree(n_t, T, recombining=False):
    """Exact binary Brownian-increment tree of given depth."""
    if recombining:
        if not 1 <= n_t <= 4096:
            raise ValueError("recombining tree depth must be in [1, 4096]")
    else:
        if not 1 <= n_t <= 16:
            raise ValueError("full tree depth must be in [1, 16]")
    s = np.sqrt(T / n_t)
    levels = [np.zeros(1)]
    probs = [np.ones(1)]
    for n in range(n_t):
        W = levels[-1]
        p = probs[-1]
        if recombining:
            Wn = np.empty(n + 2)
            Wn[:-1] = W - s
            Wn[-1] = W[-1] + s
            pn = np.zeros(n + 2)
            pn[:-1] += 0.5 * p
            pn[1:] += 0.5 * p
        else:
            Wn = np.empty(2 * len(W))
            Wn[0::2] = W - s
            Wn[1::2] = W + s
            pn = np.repeat(0.5 * p, 2)
        levels.append(Wn)
        probs.append(pn)
    return NoiseTree(n_t=n_t, T=T, recombining=recombining,
                     levels=levels, probs=probs)


def conditional_expectation(tree, level, child_values):
    """Per-node conditional expectation from values on level + 1.

    child_values has leading dimension n_nodes(level + 1); the result has
    leading dimension n_nodes(level).
    """
    if not 0 <= level < tree.n_t:
        raise ValueError(f"level {level} out of range")
    v = np.asarray(child_values)
    if v.shape[0] != tree.n_nodes(level + 1):
        raise ValueError("child values do not match level + 1")
    if tree.recombining:
        return 0.5 * (v[:-1] + v[1:])
    return 0.5 * (v[0::2] + v[1::2])


def martingale_increment(tree, level, child_values):
    """Exact martingale integrand: (up - down) / (2 sqrt(dt)) per node.

    With m the conditional expectation, the children are reconstructed
    exactly as m +- Y sqrt(dt).
    """
    if not 0 <= level < tree.n_t:
        raise ValueError(f"level {level} out of range")
    v = np.asarray(child_values)
    if v.shape[0] != tree.n_nodes(level + 1):
        raise ValueError("child values do not match level + 1")
    if tree.recombining:
        return (v[1:] - v[:-1]) / (2.0 * tree.sqrt_dt)
    return (v[1::2] - v[0::2]) / (2.0 * tree.sqrt_dt)


@dataclass
class PathEnsemble:
    n_paths: int
    n_t: int
    T: float
    seed: int
    increments: np.ndarray   # (n_paths, n_t)

    @property
    def dt(self):
        return self.T / self.n_t

    def cumulative(self):
        """W values at grid times, shape (n_paths, n_t + 1)."""
        W = np.zeros((self.n_paths, self.n_t + 1))
        np.cumsum(self.increments, axis=1, out=W[:, 1:])
        return W


def build_paths(n_paths, n_t, T, seed):
    """Seeded Gaussian increment ensemble."""
    rng = np.random.default_rng(seed)
    inc = rng.standard_normal((n_paths, n_t)) * np.sqrt(T / n_t)
    return PathEnsemble(n_paths=n_paths, n_t=n_t, T=T, seed=seed,
                        increments=inc)


def coarsen_paths(ensemble):
    """Pairwise-sum increments: the same Brownian paths at half resolution."""
    if ensemble.n_t % 2:
        raise ValueError("need an even number of steps to coarsen")
    inc = ensemble.increments[:, 0::2] + ensemble.increments[:, 1::2]
    return PathEnsemble(n_paths=ensemble.n_paths, n_t=ensemble.n_t // 2,
                        T=ensemble.T, seed=ensemble.seed, increments=inc)
