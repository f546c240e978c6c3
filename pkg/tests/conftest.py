import numpy as np
import pytest

from e2e_ofdm import autodiff as ad

# Relative error is |a - n| / max(|a|, |n|, FLOOR). The floor keeps
# coordinates whose true gradient is ~0 from dividing round-off by round-off.
FD_STEP = 1e-5
FD_FLOOR = 1e-5


def fd_max_rel_error(build, params, rng=None, max_coords=300):
    """Compare backward() against central differences.

    build(graph, nodes) -> scalar node, where nodes maps name -> param node.
    params: dict name -> ad.Parameter (values perturbed in place and restored).
    """
    rng = np.random.default_rng(0) if rng is None else rng

    def run():
        g = ad.Graph()
        nodes = {k: g.param(p) for k, p in params.items()}
        return g, build(g, nodes)

    g, loss = run()
    grads = ad.backward(g, loss)
    worst = 0.0
    for name, p in params.items():
        if not p.trainable:
            continue
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_coords:
            idx = rng.choice(flat.size, max_coords, replace=False)
        a_all = grads[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + FD_STEP
            lp = float(run()[1].value)
            flat[i] = orig - FD_STEP
            lm = float(run()[1].value)
            flat[i] = orig
            num = (lp - lm) / (2 * FD_STEP)
            a = a_all[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), FD_FLOOR))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
