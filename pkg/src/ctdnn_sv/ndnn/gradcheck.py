"""Central finite-difference gradient checking."""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    layer_id: str
    max_rel_error: float
    block_errors: dict = field(default_factory=dict)

    def passed(self, tol=1e-4):
        return self.max_rel_error < tol


def rel_error(analytic, numeric):
    """|a - n| / max(|a|, |n|, 1e-8), taking 2-norms over a block."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / denom)


def _sample(rng, size, max_entries):
    if max_entries is None or size <= max_entries:
        return np.arange(size)
    return np.sort(rng.choice(size, max_entries, replace=False))


def check_blocks(loss_fn, blocks, analytic, eps=1e-3, max_entries=None, seed=0):
    """Compare analytic gradients against central differences.

    ``blocks`` maps a name to an array that ``loss_fn()`` reads; entries are
    perturbed in place and restored. ``analytic`` maps the same names to
    gradients. Returns ``{name: rel_error}``.
    """
    rng = np.random.default_rng(seed)
    errors = {}
    for name, arr in blocks.items():
        flat = arr.reshape(-1)
        idx = _sample(rng, flat.size, max_entries)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn()
            flat[i] = orig - eps
            lm = loss_fn()
            flat[i] = orig
            numeric[j] = (lp - lm) / (2 * eps)
        errors[name] = rel_error(np.asarray(analytic[name]).reshape(-1)[idx], numeric)
    return errors


def grad_check(target, x, eps=1e-3, labels=None, max_entries=None, seed=0, layer_id=None,
               freeze_kinks=True):
    """Gradient check for a single layer or a whole model.

    A layer (anything with ``forward``/``backward``/``params``) is checked
    against the scalar ``sum(forward(x) * R)`` for a fixed random ``R``.
    A model must provide ``loss_and_grads(x, labels)`` returning
    ``(loss, param_grads, input_grad)`` and a ``param_blocks()`` mapping.
    Everything is evaluated in float64.

    With ``freeze_kinks`` the model's ReLU masks and pooling argmaxes are
    taken from the unperturbed pass and held fixed while differencing, so
    the numeric derivative is that of the active linear piece. Without it,
    any unit pushed across a kink by the +-eps step corrupts the estimate.
    """
    x = np.array(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if hasattr(target, "loss_and_grads"):
        target.astype(np.float64)
        blocks = target.param_blocks()
        _, pgrads, dx = target.loss_and_grads(x, labels)

        frozen = target.run(x, keep=True)[1] if freeze_kinks else None

        def loss_fn():
            return target.loss_and_grads(x, labels, need_grads=False, frozen=frozen)[0]

        analytic = dict(pgrads)
        name = layer_id or "model"
    else:
        target.astype(np.float64)
        y, _ = target.forward(x)
        proj = rng.standard_normal(y.shape)

        def loss_fn():
            return float(np.sum(target.forward(x)[0] * proj))

        _, cache = target.forward(x)
        dx, pg = target.backward(cache, proj)
        blocks = dict(target.params)
        analytic = dict(pg)
        name = layer_id or target.kind
    blocks["input"] = x
    analytic["input"] = dx
    errors = check_blocks(loss_fn, blocks, analytic, eps=eps, max_entries=max_entries,
                          seed=seed + 1)
    return GradCheckReport(name, max(errors.values()), errors)
