import json

import numpy as np
import pytest

from ttsa.core.problem_model import LearningRateSchedule, SchedulePair
from ttsa.core.problems import make_langevin_toy, make_maml, make_quadratic_1d
from ttsa.core.sde_engine import NoiseModel, TTSAConfig


@pytest.fixture
def schedules():
    return SchedulePair(
        outer=LearningRateSchedule(gamma0=1.0, delta=1.0, eta=0.9),
        inner=LearningRateSchedule(gamma0=1.0, delta=1.0, eta=0.6),
    )


@pytest.fixture
def quad1d():
    return make_quadratic_1d()


@pytest.fixture
def maml():
    return make_maml(3, 2, seed=11, lam=1.0)


@pytest.fixture
def langevin():
    return make_langevin_toy(np.eye(2), np.zeros((2, 2)), [1.0, 2.0])


@pytest.fixture
def unit_noise():
    return NoiseModel.isotropic(1, 1)


@pytest.fixture
def zero_noise():
    return NoiseModel.zero(1, 1)


@pytest.fixture
def short_config(schedules):
    return TTSAConfig(dt=0.01, T=1.0, schedules=schedules, x0=[1.0], y0=[1.0], seed=3)


@pytest.fixture
def write_config(tmp_path):
    """Write a run configuration document and return its path."""

    def _write(doc, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(doc), encoding="utf-8")
        return path

    return _write


@pytest.fixture
def quad1d_doc(tmp_path):
    """Builder of scalar quadratic run configurations; keyword sections replace the defaults."""

    def _doc(out_dir=None, **sections):
        doc = {
            "problem": {"name": "quadratic1d"},
            "schedules": {
                "outer": {"gamma0": 1.0, "delta": 1.0, "eta": 0.9},
                "inner": {"gamma0": 1.0, "delta": 1.0, "eta": 0.6},
            },
            "noise": {"diff_const": 1.0, "cross_corr": 0.0},
            "engine": {"dt": 0.01, "T": 1.0, "seed": 5, "x0": [1.0], "y0": [1.0]},
            "output": {"dir": str(out_dir if out_dir is not None else tmp_path / "out")},
        }
        doc.update(sections)
        return doc

    return _doc
