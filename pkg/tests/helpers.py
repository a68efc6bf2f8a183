import numpy as np

from ipwcrit.data import ContrastSpec, Dataset


def two_group_data(n=40, p=3, seed=0, theta=(0.8, 0.0, 0.0), q=1):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    z = rng.standard_normal((n, q))
    e1 = 1 / (1 + np.exp(-z[:, 0]))
    t = np.where(rng.random(n) < e1, 1, 2)
    th = np.zeros(p)
    th[:min(p, len(theta))] = np.asarray(theta)[:p]
    y = np.where(t == 1, x @ th, -x @ th) + z[:, 0] + rng.standard_normal(n)
    e = np.column_stack([e1, 1 - e1])
    return Dataset.build(y, t, x, z, 2), e


def multi_group_binomial(n=120, p=2, H=3, m=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    z = rng.standard_normal((n, 1))
    eta = np.outer(z[:, 0], 0.3 * np.arange(H))
    e = np.exp(eta) / np.exp(eta).sum(axis=1, keepdims=True)
    t = 1 + (rng.random(n)[:, None] > np.cumsum(e, axis=1)).sum(axis=1)
    t = np.minimum(t, H)
    beta = 0.4 * rng.standard_normal((H, p))
    lin = (x @ beta.T)[np.arange(n), t - 1] + 0.3 * z[:, 0]
    y = rng.binomial(m, 1 / (1 + np.exp(-lin)))
    return Dataset.build(y, t, x, z, H, m=m)


CONTRAST = ContrastSpec.two_group()
