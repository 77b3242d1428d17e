"""Smoke test for the tdac extension module.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`.
"""

import json
import math

import tdac


def main():
    spec = tdac.GarnetSpec(5, 3, 2, 0.0, basis=3, active=2)
    mdp = tdac.Mdp.garnet(spec, 7)
    assert mdp.n_states == 5 and mdp.n_actions == 3
    for u in range(mdp.n_actions):
        for row in mdp.transition(u):
            assert abs(sum(row) - 1.0) < 1e-12

    again = tdac.Mdp.from_json(mdp.to_json())
    assert json.loads(again.to_json()) == json.loads(mdp.to_json())

    features = tdac.FeatureSet.build(spec, 7, "exclude-constant")
    theta = [0.1 * (i % 5) - 0.2 for i in range(features.param_dim)]
    bundle = tdac.evaluate(mdp, features, theta, 0.5)
    assert abs(sum(bundle["pi"]) - 1.0) < 1e-12
    assert bundle["stationarity_residual"] < 1e-10
    assert bundle["td_residual"] < 1e-10
    gap = max(abs(a - b) for a, b in zip(bundle["grad_eta"], bundle["grad_eta_via_h"]))
    assert gap < 1e-9

    samples = tdac.run_single(mdp, features, 3, 2000, 500, 'algorithm = "two_scale"')
    assert [s["n"] for s in samples] == [0, 500, 1000, 1500, 2000]
    assert all(math.isfinite(s["eta_exact"]) for s in samples)

    ok, checks = tdac.verify(5, 3, 3, 1)
    assert ok, checks

    try:
        tdac.GarnetSpec(5, 3, 9, 0.0)
    except ValueError:
        pass
    else:
        raise AssertionError("branching above the state count must be rejected")

    print("tdac smoke test passed: eta =", round(bundle["eta"], 6))


if __name__ == "__main__":
    main()
