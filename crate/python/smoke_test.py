"""Smoke test for the Python bindings.

Build and install first:

    pip install maturin
    maturin develop --release -m crates/py/Cargo.toml
"""

import json
import sys
import tempfile

import youla_ren_py as yr


def main() -> int:
    plant = yr.CartPole()
    lo, hi = plant.rho_range
    assert (lo, hi) == (0.2, 2.0)
    a, b = plant.realize(1.0)
    assert len(a) == 4 and len(b) == 4 and len(b[0]) == 1

    alpha = plant.alpha()
    gamma = 0.95 / alpha
    print(f"alpha = {alpha:.6f}, gamma = {gamma:.3f}")
    assert 1 / 120 <= alpha <= 2 / 60

    ren = yr.Ren(4, 16, 2, 2, gamma=10.0, seed=3)
    margin = ren.certificate_margin()
    gain = ren.empirical_gain(n_pairs=50, horizon=30, seed=1)
    print(f"REN: {ren.n_params} params, LMI margin {margin:.3e}, empirical gain {gain:.4f}")
    assert margin > 0 and gain <= 10.0 * (1 + 1e-6)

    x, y = ren.step([0.0] * 4, [1.0, -1.0])
    assert len(x) == 4 and len(y) == 2

    theta = ren.theta
    ren.theta = [2.0 * t for t in theta]
    assert ren.certificate_margin() > 0

    n = yr.hinf([[0.5]], [[1.0]], [[1.0]], [[0.0]])
    assert abs(n - 2.0) < 1e-5, n

    policy = yr.Policy(gamma, n_x=4, n_v=8, seed=1)
    j = policy.cost(plant, m=5, horizon=40, seed=7)
    print(f"untrained Youla-REN ({policy.n_params} params) cost {j:.4f}")
    assert j > 0

    with tempfile.TemporaryDirectory() as out:
        metrics = json.loads(yr.run('experiment = "verify"\n', out))
        assert metrics["experiment"] == "verify"
        print(f"verify run: gamma {metrics['gamma']:.3f}")

    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
