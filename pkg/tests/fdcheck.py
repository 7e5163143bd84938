"""Central finite-difference gradient checking, shared across test modules."""

from __future__ import annotations

import numpy as np

from histomask import numcore as nc


def finite_diff_check(
    build_loss,
    params: dict[str, nc.Tensor],
    rng: np.random.Generator,
    n_probes: int = 20,
    h: float = 1e-5,
    rtol: float = 1e-4,
) -> None:
    """Compare analytic gradients with central differences at random probes.

    ``build_loss`` must rebuild the scalar loss from ``params`` on every call
    with no other randomness.  Probes where both gradients are below 1e-6 are
    compared absolutely (relative error is meaningless at zero).
    """
    with nc.GradGraph() as graph:
        loss = build_loss()
        grads = nc.grads_by_name(nc.backward(graph, loss), params)
    names = sorted(params)
    for _ in range(n_probes):
        name = names[int(rng.integers(len(names)))]
        tensor = params[name]
        idx = int(rng.integers(tensor.data.size))
        analytic = float(grads[name].flat[idx])
        original = float(tensor.data.flat[idx])
        tensor.data.flat[idx] = original + h
        loss_plus = float(build_loss().data)
        tensor.data.flat[idx] = original - h
        loss_minus = float(build_loss().data)
        tensor.data.flat[idx] = original
        numeric = (loss_plus - loss_minus) / (2.0 * h)
        scale = max(abs(analytic), abs(numeric))
        if scale < 1e-6:
            assert abs(analytic - numeric) < 1e-6, (
                f"{name}[{idx}]: analytic {analytic} vs numeric {numeric}"
            )
        else:
            rel = abs(analytic - numeric) / scale
            assert rel < rtol, (
                f"{name}[{idx}]: analytic {analytic} vs numeric {numeric} (rel {rel:.2e})"
            )
