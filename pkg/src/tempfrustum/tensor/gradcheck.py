"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor


class KinkError(RuntimeError):
    """The function is non-smooth within ``h`` of the sampled configuration."""


def _scalarize(out: Tensor, proj: np.ndarray | None) -> float:
    if proj is None:
        return float(out.data)
    return float(np.sum(out.data * proj))


def finite_difference_gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-6,
    rng: np.random.Generator | None = None,
    max_coords: int | None = None,
    kink_tol: float = 1e-3,
    wrt: Sequence[int] | None = None,
) -> float:
    """Max over checked coordinates of ``|analytic - central| / max(1, |analytic|)``.

    Non-scalar outputs are composed with a random linear functional.  A
    coordinate whose one-sided differences disagree by more than
    ``kink_tol`` sits on a kink (relu zero, max tie, mask flip); the whole
    configuration is then rejected with :class:`KinkError` so the caller can
    resample it.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    base = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = list(range(len(base))) if wrt is None else list(wrt)

    tensors = [Tensor(x.copy(), requires_grad=(i in wrt)) for i, x in enumerate(base)]
    out = fn(*tensors)
    proj = None if out.size == 1 else rng.standard_normal(out.shape)
    out.backward(proj)

    def f(arrays) -> float:
        return _scalarize(fn(*[Tensor(a) for a in arrays]), proj)

    f0 = f(base)
    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(base[i])
        flat_count = base[i].size
        coords = np.arange(flat_count)
        if max_coords is not None and flat_count > max_coords:
            coords = np.sort(rng.choice(flat_count, size=max_coords, replace=False))
        for c in coords:
            arrays = [a.copy() for a in base]
            flat = arrays[i].reshape(-1)
            orig = flat[c]
            flat[c] = orig + h
            fp = f(arrays)
            flat[c] = orig - h
            fm = f(arrays)
            central = (fp - fm) / (2 * h)
            one_sided_gap = abs((fp - f0) / h - (f0 - fm) / h)
            if one_sided_gap > kink_tol * max(1.0, abs(central)):
                raise KinkError(f"non-smooth at input {i} coordinate {int(c)}")
            a = float(analytic.reshape(-1)[c])
            worst = max(worst, abs(a - central) / max(1.0, abs(a)))
    return worst


def gradcheck_random(
    fn: Callable[..., Tensor],
    sampler: Callable[[np.random.Generator], Sequence[np.ndarray]],
    n_configs: int = 20,
    seed: int = 0,
    h: float = 1e-6,
    max_resamples: int = 100,
    **kwargs,
) -> float:
    """Run :func:`finite_difference_gradcheck` on ``n_configs`` random inputs,
    drawing a fresh configuration whenever one lands on a kink."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    resamples = 0
    done = 0
    while done < n_configs:
        inputs = sampler(rng)
        try:
            err = finite_difference_gradcheck(fn, inputs, h=h, rng=rng, **kwargs)
        except KinkError:
            resamples += 1
            if resamples > max_resamples:
                raise
            continue
        worst = max(worst, err)
        done += 1
    return worst
