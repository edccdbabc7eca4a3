"""Smoke test for the `mfgnet` extension module.

Build the module first, for example with
`maturin develop -m crates/python/Cargo.toml --release`, then run
`python python/smoke_test.py`.
"""

import math
import tempfile
from pathlib import Path

import mfgnet


def main():
    names = [name for name, _ in mfgnet.list_experiments()]
    assert "analytic" in names and "quadcopter" in names, names

    sol = mfgnet.AnalyticSolution(0.1)
    assert abs(sol.alpha - 0.951249) < 1e-6
    assert abs(mfgnet.AnalyticSolution(0.0).rho([0.0, 0.0]) - 1 / (2 * math.pi)) < 1e-12

    assert mfgnet.hamiltonian_norm(8.0, [0.0, 0.0]) == 0.0
    p = [0.0] * 12
    p[5] = 1.0
    assert abs(mfgnet.quadcopter_hamiltonian([0.0] * 12, p) - 11.81) < 1e-12

    kde = mfgnet.KdeEstimator([[0.0, 0.0]] * 4096, scale=1.0)
    assert kde.bandwidth == 0.25
    assert mfgnet.relative_error([2.0, 2.0], [1.0, 1.0]) == 1.0

    with tempfile.TemporaryDirectory() as tmp:
        cfg = mfgnet.RunConfig.from_toml(
            'experiment = "analytic"\ndim = 2\nnu = 1.0\nmonitor_size = 256\nlog_interval = 5\n'
        )
        cfg.iterations = 10
        cfg.output_dir = tmp
        rows = mfgnet.train(cfg)
        assert [r["iter"] for r in rows] == [0, 5, 10], rows
        assert all(math.isfinite(r["monitor_residual"]) for r in rows)

        ckpt = str(Path(tmp) / "checkpoint.bin")
        csv = mfgnet.export_trajectories(ckpt, cfg, n_samples=10, n_times=4)
        lines = csv.strip().splitlines()
        assert lines[0] == "sample_id,t,x_1,x_2"
        assert len(lines) == 41

        report = mfgnet.validate(ckpt, cfg)
        assert report["points"] == 16384
        assert report["rel_error_phi"] > 0.0

        try:
            mfgnet.RunConfig.from_toml('experiment = "obstacle"\ndim = 2\n')
        except ValueError as e:
            assert "nu" in str(e)
        else:
            raise AssertionError("missing nu was accepted")

    print("mfgnet smoke test passed")


if __name__ == "__main__":
    main()
