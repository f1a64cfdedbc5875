import json
import logging
import os
import shutil

import numpy as np
import pytest
from click.testing import CliRunner

import josa as josa_package
from cli import josa
from josa.storage import read_container, write_container

from .fixtures import *  # noqa


@pytest.fixture(scope="function")
def runner():
    return CliRunner()


@pytest.fixture(autouse=True)
def reset_logging():
    yield
    logger = josa_package.logger
    for handler in list(logger.handlers):
        if not isinstance(handler, logging.NullHandler):
            logger.removeHandler(handler)
            handler.close()
    logger.setLevel(logging.NOTSET)


@pytest.fixture(scope="function")
def cohort_dir(runner, run_dir, josa_config):
    out = os.path.join(run_dir, "cohort")
    result = runner.invoke(josa, ["synth", "--config", josa_config, "--out", out])
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope="function")
def fit_dir(runner, run_dir, cohort_dir, josa_config):
    out = os.path.join(run_dir, "fit")
    result = runner.invoke(
        josa, ["fit", "--cohort", cohort_dir, "--out", out, "--config", josa_config]
    )
    assert result.exit_code == 0, result.output
    return out


def test_help_lists_configuration(runner):
    result = runner.invoke(josa, ["--help"])
    assert result.exit_code == 0
    assert "fit.epochs = 300" in result.output
    assert "check-likelihood" in result.output


def test_synth_writes_cohort(cohort_dir):
    with open(os.path.join(cohort_dir, "manifest.json")) as f:
        manifest = json.load(f)
    assert [s["id"] for s in manifest["subjects"]] == [f"sub-{i:03d}" for i in range(4)]
    for name in ("atlas_true.josa", "config.json", "josa.log"):
        assert os.path.exists(os.path.join(cohort_dir, name))
    geom = read_container(os.path.join(cohort_dir, "subjects", "sub-000.josa"))["geom"]
    assert geom.shape == (8, 16, 2)


def test_fit_then_eval(runner, run_dir, cohort_dir, fit_dir, josa_config):
    with open(os.path.join(fit_dir, "report.json")) as f:
        report = json.load(f)
    assert report["variant"] == "josa"
    assert len(report["epochs"]) == 3
    assert set(read_container(os.path.join(fit_dir, "atlas.josa"))) == {"geom", "func"}

    out = os.path.join(run_dir, "eval")
    result = runner.invoke(
        josa,
        ["eval", "--cohort", cohort_dir, "--run", fit_dir, "--out", out, "--config", josa_config],
    )
    assert result.exit_code == 0, result.output
    for name in ("report.json", "correlations.csv", "geom_mean_after.pgm", "means.josa"):
        assert os.path.exists(os.path.join(out, name))
    with open(os.path.join(out, "correlations.csv")) as f:
        lines = f.read().splitlines()
    assert lines[0] == "subject,modality,before,after,improvement"
    assert len(lines) == 1 + 2 * 4


def test_eval_needs_one_source(runner, run_dir, cohort_dir):
    result = runner.invoke(
        josa, ["eval", "--cohort", cohort_dir, "--out", os.path.join(run_dir, "eval")]
    )
    assert result.exit_code == 2


def test_eval_external_fields(runner, run_dir, cohort_dir, josa_config):
    fields = os.path.join(run_dir, "external.josa")
    zero = np.zeros((8, 16, 2))
    write_container(
        fields, {f"sub-{i:03d}/{m}": zero for i in range(4) for m in ("geom", "func")}
    )
    out = os.path.join(run_dir, "eval")
    result = runner.invoke(
        josa,
        ["eval", "--cohort", cohort_dir, "--fields", fields, "--out", out, "--config", josa_config],
    )
    assert result.exit_code == 0, result.output
    with open(os.path.join(out, "report.json")) as f:
        assert json.load(f)["label"] == "external"


def test_register_ignores_functional_data(runner, run_dir, cohort_dir, fit_dir, josa_config):
    source = os.path.join(cohort_dir, "subjects", "sub-001.josa")
    altered_dir = os.path.join(run_dir, "altered")
    os.makedirs(altered_dir)
    altered = os.path.join(altered_dir, "sub-001.josa")
    tensors = read_container(source)
    tensors["func"] = np.random.default_rng(0).standard_normal(tensors["func"].shape)
    write_container(altered, tensors)

    outputs = []
    for subject, name in ((source, "reg-a"), (altered, "reg-b")):
        out = os.path.join(run_dir, name)
        result = runner.invoke(
            josa,
            [
                "register",
                "--subject",
                subject,
                "--atlas",
                os.path.join(fit_dir, "atlas.josa"),
                "--out",
                out,
                "--config",
                josa_config,
            ],
        )
        assert result.exit_code == 0, result.output
        with open(os.path.join(out, "fields.josa"), "rb") as f:
            outputs.append(f.read())
    assert outputs[0] == outputs[1]
    assert set(read_container(os.path.join(run_dir, "reg-a", "fields.josa"))) == {
        "sub-001/j",
        "sub-001/g",
        "sub-001/f",
    }


def test_ablate(runner, run_dir, cohort_dir, josa_config):
    out = os.path.join(run_dir, "ablate")
    result = runner.invoke(
        josa,
        [
            "ablate",
            "--cohort",
            cohort_dir,
            "--out",
            out,
            "--config",
            josa_config,
            "--variant",
            "josa",
            "--variant",
            "shared",
        ],
    )
    assert result.exit_code == 0, result.output
    with open(os.path.join(out, "ablation.json")) as f:
        body = json.load(f)
    assert set(body["variants"]) == {"josa", "shared"}
    assert [c["name"] for c in body["comparisons"]] == ["func: josa > shared"]


def test_check_grad(runner, run_dir):
    args = ["check-grad", "--grid", "8x16", "--seed", "1", "--max-components", "20"]
    result = runner.invoke(josa, args + ["--out", os.path.join(run_dir, "grad")])
    assert result.exit_code == 0, result.output
    assert "max relative error" in result.output
    assert os.path.exists(os.path.join(run_dir, "grad", "gradcheck.json"))

    result = runner.invoke(josa, args + ["--tolerance", "0"])
    assert result.exit_code == 8


def test_check_likelihood(runner):
    result = runner.invoke(josa, ["check-likelihood", "--sigma", "1.0", "--seed", "4"])
    assert result.exit_code == 0, result.output
    assert "sigma 1.0" in result.output


def test_missing_cohort_exit_code(runner, run_dir):
    result = runner.invoke(
        josa,
        [
            "fit",
            "--cohort",
            os.path.join(run_dir, "absent"),
            "--out",
            os.path.join(run_dir, "fit"),
        ],
    )
    assert result.exit_code == 4
    assert "does not exist" in result.output


def test_bad_config_exit_code(runner, run_dir):
    config = os.path.join(run_dir, "bad.yml")
    with open(config, "w") as f:
        f.write("fit:\n  epoch: 3\n")
    result = runner.invoke(
        josa, ["synth", "--config", config, "--out", os.path.join(run_dir, "out")]
    )
    assert result.exit_code == 3


def test_corrupt_container_exit_code(runner, run_dir, cohort_dir, josa_config):
    atlas = os.path.join(run_dir, "atlas.josa")
    shutil.copy(os.path.join(cohort_dir, "atlas_true.josa"), atlas)
    with open(atlas, "rb") as f:
        data = f.read()
    with open(atlas, "wb") as f:
        f.write(data[:-3])
    result = runner.invoke(
        josa,
        [
            "register",
            "--subject",
            os.path.join(cohort_dir, "subjects", "sub-000.josa"),
            "--atlas",
            atlas,
            "--out",
            os.path.join(run_dir, "reg"),
            "--config",
            josa_config,
        ],
    )
    assert result.exit_code == 7


def test_eval_run_missing_subject_exit_code(runner, run_dir, cohort_dir, fit_dir, josa_config):
    path = os.path.join(fit_dir, "velocities.josa")
    tensors = read_container(path)
    write_container(path, {k: v for k, v in tensors.items() if not k.startswith("sub-002/")})
    result = runner.invoke(
        josa,
        [
            "eval",
            "--cohort",
            cohort_dir,
            "--run",
            fit_dir,
            "--out",
            os.path.join(run_dir, "eval"),
            "--config",
            josa_config,
        ],
    )
    assert result.exit_code == 6
    assert "sub-002" in result.output
