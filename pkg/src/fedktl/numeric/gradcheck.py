import numpy as np

from .tensor import get_dtype


def fd_gradcheck(params, loss_fn, epsilon=1e-4):
    """Compare reverse-mode gradients against central differences.

    ``params`` maps names to leaf Tensors that ``loss_fn`` reads on every
    call; ``loss_fn()`` must rebuild the graph and return a scalar Tensor.
    Returns the largest ``|analytic - fd| / max(|analytic|, |fd|, 1e-8)``
    over all parameter elements. Needs 64-bit precision.
    """
    if get_dtype() is not np.float64:
        raise RuntimeError("fd_gradcheck needs 64-bit precision")
    if not 0 < epsilon <= 1e-2:
        raise ValueError("epsilon must be in (0, 1e-2]")

    base = loss_fn()
    again = loss_fn()
    if base.data.tobytes() != again.data.tobytes():
        raise RuntimeError("loss_fn is not deterministic")
    analytic = base.backward()

    worst = 0.0
    for name, p in params.items():
        a = analytic.get(name, np.zeros_like(p.data))
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            up = loss_fn().item()
            flat[k] = orig - epsilon
            down = loss_fn().item()
            flat[k] = orig
            fd = (up - down) / (2 * epsilon)
            err = abs(a_flat[k] - fd) / max(abs(a_flat[k]), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
