"""Compare reverse-mode gradients to central finite differences."""

import numpy as np

from .autograd import Tensor


def gradient_check(loss_fn, params, inputs=None, epsilon=1e-6, max_coords=None, seed=0, floor=1e-8):
    """Max relative error between backprop and central differences.

    ``loss_fn(params, inputs)`` must return a scalar :class:`Tensor`.
    ``params`` is a ``{name: float64 ndarray}`` mapping; every entry is
    perturbed coordinate-wise. With ``max_coords`` set, at most that many
    coordinates per tensor are probed (chosen by ``seed``). The error for a
    coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    loss = loss_fn(leaves, inputs)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite at the check point")
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in arrays.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(loss_fn({k: Tensor(v) for k, v in arrays.items()}, inputs).data)
            flat[i] = orig - epsilon
            down = float(loss_fn({k: Tensor(v) for k, v in arrays.items()}, inputs).data)
            flat[i] = orig
            num = (up - down) / (2 * epsilon)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
