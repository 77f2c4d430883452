"""Smoke test for the phri Python extension.

Build and install first:

    pip install --no-build-isolation -e crates/py

then run `python3 python/smoke_test.py` (or `pytest python/smoke_test.py`).
"""

import json
import math
import pathlib
import tempfile

import phri

ROOT = pathlib.Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"


def short(name, duration=0.5):
    scenario = phri.Scenario.load(CONFIGS / name)
    scenario.duration = duration
    return scenario


def test_run_and_write():
    scenario = short("frictionless.json")
    log = phri.run(scenario)
    assert not log.aborted
    assert len(log) == scenario.steps == 500
    assert log.columns[0] == "t" and log.columns[-1] == "status"
    t = log.column("t")
    assert t[0] == 0.0 and math.isclose(t[1], scenario.dt)
    assert log.meta()["seed"] == scenario.seed
    metrics = log.metrics()
    assert "steady" in metrics
    with tempfile.TemporaryDirectory() as tmp:
        log.write(pathlib.Path(tmp) / "run")
        for f in ("log.csv", "meta.json", "metrics.json"):
            assert (pathlib.Path(tmp) / "run" / f).is_file()


def test_runs_are_deterministic():
    a = phri.run(short("frictional.json", 0.2))
    b = phri.run(short("frictional.json", 0.2))
    assert a.column("fm_z") == b.column("fm_z")


def test_bad_config_names_the_field():
    text = (CONFIGS / "frictionless.json").read_text()
    cfg = json.loads(text)
    cfg["env"]["k_e"] = "stiff"
    try:
        phri.Scenario.from_json(json.dumps(cfg))
    except ValueError as e:
        assert "env.k_e" in str(e)
    else:
        raise AssertionError("expected ValueError")


def test_validate():
    report = phri.validate(short("frictional.json"), samples=50)
    assert report["passed"]
    assert report["samples"] == 50
    assert {c["name"] for c in report["checks"]} >= {"skew_symmetry", "mass_positive_definite"}


def test_kinematics_and_dynamics():
    q = [0.1, 0.5, -0.2, 1.6, 0.3, 1.0, -0.4]
    r, p = phri.end_effector_pose(q)
    for i in range(3):
        for j in range(3):
            dot = sum(r[k][i] * r[k][j] for k in range(3))
            assert abs(dot - (1.0 if i == j else 0.0)) < 1e-9
    assert len(p) == 3
    jac = phri.jacobian(q)
    assert len(jac) == 6 and len(jac[0]) == 7
    m, c, g = phri.dynamics(q, [0.0] * 7)
    assert all(abs(m[i][j] - m[j][i]) < 1e-12 for i in range(7) for j in range(7))
    assert all(abs(x) < 1e-12 for row in c for x in row)
    assert len(g) == 7


def test_quaternions():
    q = phri.quat_from_axis_angle([0.0, 0.0, 1.0], math.pi / 2)
    assert math.isclose(q[0], math.cos(math.pi / 4))
    e = phri.quat_error(q, q)
    assert math.isclose(abs(e[0]), 1.0)
    r = phri.quat_to_rotation(q)
    assert abs(r[1][0] - 1.0) < 1e-12


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print(f"ok {name}")
