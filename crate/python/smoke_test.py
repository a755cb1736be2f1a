"""Smoke test for the safenvelope Python extension."""

import json
import math
import tempfile

import safenvelope


def main():
    assert set(safenvelope.builtin_scenarios()) >= {"motivating1d", "illustrative2d"}

    assert safenvelope.robust_baseline_1d(8.0, (-2.0, 2.0), (-2.0, 2.0)) is None
    assert safenvelope.robust_baseline_1d(0.0, (-2.0, 2.0), (-2.0, 2.0)) is not None

    gp = safenvelope.GaussianProcess(
        [[0.0, 0.0], [0.5, -0.5], [-0.5, 0.25]],
        [[0.0, 1.0], [0.2, -0.3], [0.1, 0.4]],
        sigma_f=1.0,
        lengthscale=0.5,
    )
    mean, var = gp.posterior([0.5, -0.5])
    assert abs(mean[0] - 0.2) < 1e-6 and abs(mean[1] + 0.3) < 1e-6
    assert all(v <= 1.0 + 1e-10 for v in gp.posterior([3.0, 3.0])[1])

    config = safenvelope.builtin_config("motivating1d")
    assert json.loads(config)["name"] == "motivating1d"
    with tempfile.TemporaryDirectory() as out:
        run = safenvelope.run_scenario(config, "synthesize", out)
        assert run.success, run.report
        cert = safenvelope.Certificate.from_json(run.certificate)
    boundary = math.sqrt(cert.gamma / cert.p[0][0])
    assert 1.8 <= boundary <= 2.0 + 1e-9, boundary

    # Deep inside the set the nominal input passes; at the boundary the gain takes over.
    u, active = cert.filter([0.0], [1.5], [[1.0], [-1.0]], [2.0, 2.0])
    assert u == [1.5] and not active
    u, active = cert.filter([boundary * (1 - 1e-12)], [1.5], [[1.0], [-1.0]], [2.0, 2.0])
    assert active and abs(u[0] - cert.k[0][0] * boundary) < 1e-6

    try:
        safenvelope.builtin_config("nope")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown scenario accepted")

    print("smoke test ok")


if __name__ == "__main__":
    main()
