"""Shared test utilities: oracles and numeric checks."""

import numpy as np
import torch

from ehrsynth.model import EncDecModel


def finite_difference_check(
    model: EncDecModel,
    loss_fn,
    named_params: list[tuple[str, torch.nn.Parameter]],
    n_coords: int,
    rng: np.random.Generator,
    h: float = 1e-5,
    tol: float = 1e-4,
) -> int:
    """Compare autograd gradients against central finite differences.

    Samples n_coords coordinates across the given parameters and asserts
    relative agreement within tol. Returns the number of coordinates
    actually compared (near-zero coordinate pairs are checked absolutely).
    """
    params = [p for _, p in named_params]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    analytic = {name: g for (name, _), g in zip(named_params, grads)}

    sizes = np.array([p.numel() for p in params])
    probs = sizes / sizes.sum()
    checked = 0
    for _ in range(n_coords):
        pi = int(rng.choice(len(params), p=probs))
        name, param = named_params[pi]
        flat_idx = int(rng.integers(0, param.numel()))
        idx = np.unravel_index(flat_idx, param.shape)

        with torch.no_grad():
            original = float(param[idx])
            param[idx] = original + h
            plus = float(loss_fn())
            param[idx] = original - h
            minus = float(loss_fn())
            param[idx] = original
        fd = (plus - minus) / (2 * h)
        an = float(analytic[name][idx])
        denom = max(abs(fd), abs(an))
        if denom < 1e-10:
            assert abs(fd - an) < 1e-8, f"{name}{idx}: fd={fd} analytic={an}"
        else:
            rel = abs(fd - an) / denom
            assert rel <= tol, f"{name}{idx}: fd={fd} analytic={an} rel={rel}"
        checked += 1
    return checked


def featurizer_param_list(model: EncDecModel) -> list[tuple[str, torch.nn.Parameter]]:
    out = []
    for side, feat in (
        ("enc_cat", model.enc_cat),
        ("enc_num", model.enc_num),
        ("dec_cat", model.dec_cat),
        ("dec_num", model.dec_num),
    ):
        out.append((f"{side}.W0", feat.lin0.weight))
        out.append((f"{side}.b", feat.lin0.bias))
        out.append((f"{side}.W1", feat.lin1.weight))
    return out
