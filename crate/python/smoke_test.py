"""Smoke test for the odvff Python module.

Build and install first:
    pip install --no-build-isolation ./crates/python
then run:
    python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import odvff

CONFIG = """
schema_version = 1
name = "smoke"
replications = 2
[dataset]
kind = "synthetic"
n_train = 200
n_test = 50
noise_variance = 0.05
kernel = { families = ["matern32"], lengthscales = [0.3], variance = 1.0, structure = "one_dim" }
[model]
family = "matern32"
lengthscale = 0.5
[[methods]]
method = "odvff"
n_beta = 9
n_gamma = 6
[[methods]]
method = "sgpr"
n_beta = 9
n_gamma = 6
[training]
iterations = 40
batch_size = 50
eval_every = 20
full_batch_iterations = 10
"""


def check_config():
    cfg = odvff.ExperimentConfig.from_toml(CONFIG)
    assert cfg.name == "smoke"
    assert cfg.replications == 2
    assert cfg.methods == [("ODVFF", 9, 6), ("SGPR", 9, 6)]
    again = odvff.ExperimentConfig.from_toml(cfg.to_toml())
    assert again.to_toml() == cfg.to_toml()
    return cfg


def check_errors():
    try:
        odvff.ExperimentConfig.from_toml(CONFIG.replace("n_beta = 9", "n_beta = 0", 1))
    except odvff.ConfigError as e:
        assert "n_beta" in str(e), e
    else:
        raise AssertionError("empty basis accepted")
    try:
        odvff.Checkpoint.load("/nonexistent/checkpoint.json")
    except odvff.DataError:
        pass
    else:
        raise AssertionError("missing checkpoint accepted")
    assert issubclass(odvff.ConfigError, odvff.OdvffError)


def check_run(cfg):
    with tempfile.TemporaryDirectory() as tmp:
        report = cfg.run(out=tmp, jobs=2)
        assert not report["failures"], report["failures"]
        assert len(report["records"]) == 4
        for rec in report["records"]:
            assert math.isfinite(rec["log_lik"]) and rec["rmse"] > 0
            assert 0.0 <= rec["coverage"] <= 1.0
        assert (Path(tmp) / "metrics.csv").exists()

        cp = odvff.Checkpoint.load(str(Path(tmp) / "runs" / "odvff-b9-g6-s0" / "checkpoint.json"))
        assert cp.method == "ODVFF" and cp.seed == 0
        assert cp.config.to_toml() == cfg.to_toml()
        assert "ODVFF (seed 0)" in cp.describe()
        names = dict(cp.hyperparameters)
        assert names["noise_variance"] > 0

        xs = [[i / 10] for i in range(11)]
        mean, var = cp.predict(xs)
        assert len(mean) == len(var) == 11
        assert all(math.isfinite(m) for m in mean)
        assert all(v >= 0 for v in var)
        try:
            cp.predict([[0.0, 1.0]])
        except ValueError:
            pass
        else:
            raise AssertionError("wrong input dimension accepted")


def main():
    cfg = check_config()
    check_errors()
    check_run(cfg)
    print(f"odvff {odvff.__version__}: smoke test passed")


if __name__ == "__main__":
    main()
