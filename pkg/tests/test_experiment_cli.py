import json

import pytest

from pnpflow import cli, io
from pnpflow.experiment import (
    ConfigError,
    ExperimentConfig,
    config_hash,
    config_to_text,
    grid_search,
    parse_config,
    run_experiment,
    set_option,
)

IMAGE_INI = """
[experiment]
task = denoise
seed = 3
n_items = 2
n_validation = 1

[data]
kind = gmm_images
image_size = 12
n_templates = 3

[operator]
sigma = 0.2

[model]
kind = gmm_indep

[solver]
steps = 10
n_avg = 2
"""


def image_config(tmp_path, **overrides):
    cfg = parse_config(IMAGE_INI)
    cfg.out = str(tmp_path / "run")
    for k, v in overrides.items():
        set_option(cfg, k, v)
    return cfg


def test_config_text_round_trip_and_hash():
    cfg = parse_config(IMAGE_INI)
    assert cfg.data.image_size == 12 and cfg.operator.sigma == 0.2
    again = parse_config(config_to_text(cfg))
    assert config_to_text(again) == config_to_text(cfg)
    assert config_hash(again) == config_hash(cfg)
    set_option(again, "solver.alpha", "0.3")
    assert config_hash(again) != config_hash(cfg)


def test_config_errors():
    with pytest.raises(ConfigError):
        parse_config("[nonsense]\na = 1\n")
    with pytest.raises(ConfigError):
        parse_config("[solver]\nsteps = many\n")
    with pytest.raises(ConfigError):
        set_option(ExperimentConfig(), "solver.unknown", "1")
    cfg = ExperimentConfig(task="deblur")
    with pytest.raises(ConfigError):
        cfg.validate()


def test_optional_and_bool_values():
    cfg = parse_config("[solver]\ngamma = none\ninclude_endpoint = yes\n")
    assert cfg.solver.gamma is None and cfg.solver.include_endpoint is True
    set_option(cfg, "solver.gamma", "1.0")
    assert cfg.solver.gamma == 1.0
    assert parse_config("[experiment]\ntask = deblur  ; inline note\n").task == "deblur"


def test_run_writes_outputs_and_is_deterministic(tmp_path):
    cfg = image_config(tmp_path)
    m1 = run_experiment(cfg)
    text1 = (tmp_path / "run" / "manifest.json").read_text()
    m2 = run_experiment(cfg)
    text2 = (tmp_path / "run" / "manifest.json").read_text()
    assert text1 == text2
    assert m1.aggregate["n_ok"] == 2 and m2.aggregate["n_failed"] == 0
    for name in m1.artifacts:
        assert (tmp_path / "run" / name).is_file()
    img = io.read_netpbm(tmp_path / "run" / "restored_000.pgm")
    assert img.shape == (12, 12)
    data = json.loads(text1)
    assert data["config_hash"] == config_hash(cfg)


def test_degraded_psnr_at_sigma_02(tmp_path):
    cfg = image_config(tmp_path, **{"data.image_size": "64", "n_items": "4", "solver.steps": "1",
                                    "solver.n_avg": "1"})
    m = run_experiment(cfg, write=False)
    assert m.aggregate["degraded_psnr"] == pytest.approx(20.0, abs=0.1)


@pytest.mark.parametrize("task", ["deblur", "superres", "inpaint_box", "inpaint_random",
                                  "blind_deblur"])
def test_image_tasks_run(tmp_path, task):
    cfg = image_config(tmp_path, task=task, **{"operator.sigma": "0.05"})
    m = run_experiment(cfg, write=False)
    assert m.aggregate["n_ok"] == 2, m.items
    assert m.aggregate["psnr"] > m.aggregate["degraded_psnr"] - 3


def test_point_denoise_beats_degraded(tmp_path):
    cfg = ExperimentConfig(out=str(tmp_path / "pts"))
    cfg.data.n_points = 200
    cfg.solver.steps = 50
    m = run_experiment(cfg, write=False)
    assert m.aggregate["mse"] < m.aggregate["degraded_mse"]


def test_failed_item_is_recorded(tmp_path):
    cfg = image_config(tmp_path, **{"operator.sigma": "1e9"})
    m = run_experiment(cfg, write=False)
    assert m.aggregate["n_failed"] == 2
    assert all(it["error"] for it in m.items)


def test_grid_search_singleton_and_table(tmp_path):
    cfg = image_config(tmp_path)
    best, table = grid_search(cfg, alphas=[0.5], steps_grid=[5])
    assert len(table) == 1 and best.solver.alpha == 0.5 and best.solver.steps == 5
    best, table = grid_search(cfg, alphas=[0.3, 1.0], steps_grid=[5, 10])
    assert len(table) == 4
    top = max(r["psnr"] for r in table)
    assert best.solver.alpha in (0.3, 1.0)
    assert any(r["psnr"] == top and r["alpha"] == best.solver.alpha
               and r["steps"] == best.solver.steps for r in table)


def test_grid_search_bad_cell_scores_minus_inf(tmp_path):
    cfg = image_config(tmp_path)
    _, table = grid_search(cfg, alphas=[0.5, 2.0], steps_grid=[5])
    bad = [r for r in table if r["alpha"] == 2.0][0]
    assert bad["psnr"] == float("-inf") and bad["error"]
    with pytest.raises(ConfigError):
        grid_search(cfg, alphas=[], steps_grid=[5])


def test_grid_search_tie_breaks_to_small_n_then_small_alpha(tmp_path):
    # a constant unit step with the endpoint probe returns y for any (alpha, N)
    cfg = image_config(tmp_path, **{"solver.gamma": "1.0", "solver.include_endpoint": "true"})
    best, table = grid_search(cfg, alphas=[0.8, 0.3], steps_grid=[10, 5])
    assert len({r["psnr"] for r in table}) == 1
    assert best.solver.steps == 5 and best.solver.alpha == 0.3


def write_ini(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(IMAGE_INI)
    return str(path)


def test_cli_solve_and_eval(tmp_path, capsys):
    out = str(tmp_path / "cli")
    assert cli.main(["solve", "--config", write_ini(tmp_path), "--out", out]) == 0
    rc = cli.main(["eval", "--reference", f"{out}/degraded_000.pgm",
                   "--estimate", f"{out}/restored_000.pgm"])
    assert rc == 0
    assert "psnr" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path):
    assert cli.main(["solve", "--config", str(tmp_path / "missing.ini")]) == 1
    assert cli.main(["solve", "--config", write_ini(tmp_path), "--set", "solver.alpha=7"]) == 1
    assert cli.main(["solve", "--config", write_ini(tmp_path), "--set", "bogus"]) == 1
    rc = cli.main(["solve", "--config", write_ini(tmp_path), "--out", str(tmp_path / "x"),
                   "--set", "operator.sigma=1e9"])
    assert rc == 2


def test_cli_train_and_sample(tmp_path):
    out = str(tmp_path / "model")
    rc = cli.main(["train", "--out", out, "--set", "train.steps=20", "--set",
                   "train.steps_per_epoch=10", "--set", "train.hidden=8"])
    assert rc == 0
    rc = cli.main(["sample", "--out", out, "--n", "5", "--steps", "3",
                   "--set", "model.kind=mlp", "--set", f"model.path={out}/model.bin"])
    assert rc == 0
    pts = io.read_points_csv(f"{out}/samples.csv")
    assert pts.shape == (5, 2)
    assert io.read_points_csv(f"{out}/loss.csv").shape == (2, 2)


def test_cli_check():
    assert cli.main(["check"]) == 0
