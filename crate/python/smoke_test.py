"""Smoke test for the trailnav Python module.

Build and install first:

    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/trailnav-*.whl
    python python/smoke_test.py
"""

import json
import math

import trailnav


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    # frames
    assert trailnav.enu_to_ned([1.0, 2.0, 3.0]) == [2.0, 1.0, -3.0]
    assert trailnav.ned_to_enu(trailnav.enu_to_ned([4.0, -5.0, 6.0])) == [4.0, -5.0, 6.0]

    # similarity fit recovers a known transform
    c, s = math.cos(0.7), math.sin(0.7)
    truth = trailnav.SimilarityTransform(2.5, [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], [1.0, -2.0, 0.5])
    src = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 2.0, 3.0]]
    fit = trailnav.umeyama(src, [truth.apply(p) for p in src])
    assert close(fit.scale, 2.5)
    back = fit.inverse().apply(fit.apply([3.0, 1.0, -1.0]))
    assert all(close(a, b) for a, b in zip(back, [3.0, 1.0, -1.0]))
    try:
        trailnav.umeyama([[0, 0, 0], [1, 1, 1], [2, 2, 2]], [[0, 0, 0], [1, 1, 1], [2, 2, 2]])
    except ValueError as e:
        assert "degenerate" in str(e).lower()
    else:
        raise AssertionError("collinear input accepted")

    # trail geometry
    trail = trailnav.Trail.scenario("zigzag250")
    assert close(trail.length, 250.0, 0.5) and trail.width == 1.5
    d, psi, _ = trailnav.Trail.scenario("straight100").relative_state(10.0, 0.3, 0.1)
    assert close(d, 0.3) and close(psi, 0.1)

    # perception, control, loss
    vo, lo = trailnav.oracle_predict(0.0, 0.0)
    assert close(vo[0], vo[2], 1e-12) and close(sum(lo), 1.0)
    assert close(trailnav.turn_angle([0.0, 0.0, 1.0], [0.0, 1.0, 0.0]), math.radians(10.0))
    third = 1.0 / 3.0
    assert close(trailnav.loss_value([third] * 3, "left", epsilon=0.0), 1.0887511, 1e-6)
    assert trailnav.finite_diff_check([0.3, -1.0, 2.0], "right") < 1e-5

    # config and simulation
    cfg = trailnav.parse_config("seed = 4\n")
    assert "seed = 4" in cfg
    csv, summary = trailnav.run_episode("[episode]\nmax_time = 5.0\n")
    assert csv.startswith("t,x,y,")
    assert json.loads(summary)["interventions"] == 0

    files, checks = trailnav.run_experiment("gradcheck", seed=1)
    assert "gradcheck.csv" in files and all(ok for _, ok, _ in checks)
    files2, _ = trailnav.run_experiment("gradcheck", seed=1)
    assert files == files2

    files, checks = trailnav.run_experiment("autonomy", perception="oracle6")
    assert json.loads(files["autonomy_summary.json"])["results"]["oracle6"]["autonomy_percent"] == 100.0

    print("trailnav smoke test passed")


if __name__ == "__main__":
    main()
