"""Smoke test for the dhipf Python bindings.

Run after `pip install --no-build-isolation -e crates/python`:

    python python/smoke_test.py
"""

import math

import dhipf_py as d


def check_weights():
    w = d.normalize_weights([0.0, math.log(3.0)])
    assert abs(w[0] - 0.25) < 1e-12 and abs(w[1] - 0.75) < 1e-12
    shifted = d.normalize_weights([1e3, 1e3 + math.log(3.0)])
    assert max(abs(a - b) for a, b in zip(w, shifted)) < 1e-12
    assert abs(d.effective_sample_size([0.5, 0.5]) - 2.0) < 1e-12
    idx = d.resample_indices([0.0, 1.0, 0.0], seed=4)
    assert idx == [1, 1, 1]
    assert d.resample_indices([0.2, 0.8], seed=9, n=50) == d.resample_indices([0.2, 0.8], seed=9, n=50)


def check_cholesky():
    lower = d.cholesky([[4.0, 2.0], [2.0, 3.0]])
    assert lower[0] == [2.0, 0.0]
    assert abs(lower[1][0] - 1.0) < 1e-15 and abs(lower[1][1] - math.sqrt(2.0)) < 1e-15
    try:
        d.cholesky([[1.0, 2.0], [2.0, 1.0]])
    except ValueError:
        pass
    else:
        raise AssertionError("indefinite matrix accepted")


def check_filters():
    model = d.Model.double_well(1.0, 1.5, 1.5)
    assert model.state_dim == 1
    truth, obs = d.simulate_truth(model, [0.6], 100, seed=3)
    assert len(truth) == 101 and len(obs) == 100
    assert obs.at(7) is not None
    for kind in d.FILTERS:
        res = d.run_filter(model, kind, [0.6], obs, 100, particles=20, enkf_ensemble=50, seed=1)
        assert len(res.estimates) == 101
        err = d.mse(res.estimates[1:], truth[1:])
        assert math.isfinite(err), kind
        print(f"{kind:>9}: mse {err:.3f}")
    a = d.run_filter(model, "dhipf", [0.6], obs, 100, levels=1, seed=2)
    b = d.run_filter(model, "ipf", [0.6], obs, 100, seed=2)
    assert a.estimates == b.estimates
    assert b.max_residual_ratio <= 1e-10


def check_linear_oracle():
    model = d.Model.linear_gaussian(0.9, 1.0, 1.0)
    truth, obs = d.simulate_truth(model, [1.0], 30, seed=5)
    res = d.run_filter(model, "ipf", [1.0], obs, 30, particles=4000, seed=6)
    m, p = 1.0, 0.0
    for n in range(1, 31):
        m, p = 0.9 * m, 0.81 * p + 1.0
        y = obs.at(n)[0]
        k = p / (p + 1.0)
        m, p = m + k * (y - m), (1.0 - k) * p
        assert abs(res.estimates[n][0] - m) <= 5.0 * math.sqrt(p / 4000), n


def check_experiment():
    spec = """{"case": 1, "n_steps": 50, "repeats": 2,
               "filters": [{"kind": "ipf"}, {"kind": "dhipf", "homotopy": {"levels": 2}}]}"""
    rows = d.run_experiment(spec)
    assert [r.filter for r in rows] == ["ipf", "dhipf(L=2)"]
    assert all(r.failed == 0 and r.repeats == 2 for r in rows)
    print(rows)


if __name__ == "__main__":
    check_weights()
    check_cholesky()
    check_filters()
    check_linear_oracle()
    check_experiment()
    print("smoke test passed")
