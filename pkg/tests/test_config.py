import json
from pathlib import Path

import pytest

from vtryon.config import ModelConfig, RunConfig, SamplerConfig, TrainingConfig
from vtryon.errors import InvalidArgumentError
from vtryon.pipeline import lock_values

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_default_config_file_matches_code():
    assert RunConfig.load(CONFIGS / "default.json") == RunConfig()


def test_lockfile_regression():
    """Frozen at build time; a change here means the default architecture changed."""
    lock = json.loads((CONFIGS / "default.lock.json").read_text())
    assert lock_values(RunConfig.load(CONFIGS / "default.json").model) == lock


def test_partial_dict_merges_over_defaults():
    cfg = RunConfig.from_dict({"stage2": {"steps": 10}, "model": {"skip": False}})
    assert cfg.stage2.steps == 10 and cfg.stage2.stage == 2
    assert cfg.model.skip is False and cfg.model.d == 128
    assert cfg.training == TrainingConfig()


def test_unknown_key_rejected():
    with pytest.raises(InvalidArgumentError):
        RunConfig.from_dict({"model": {"width": 3}})


def test_toml_and_json_agree(tmp_path):
    (tmp_path / "c.toml").write_text('[model]\nresolution = [32, 16]\ndepth = 4\n[sampler]\nnum_steps = 7\n')
    (tmp_path / "c.json").write_text(json.dumps({"model": {"resolution": [32, 16], "depth": 4},
                                                 "sampler": {"num_steps": 7}}))
    a, b = RunConfig.load(tmp_path / "c.toml"), RunConfig.load(tmp_path / "c.json")
    assert a == b and a.model.resolution == (32, 16)


def test_save_load_roundtrip(tmp_path):
    cfg = RunConfig.from_dict({"training": {"lr_peak": 3e-4}})
    cfg.save(tmp_path / "r.json")
    assert RunConfig.load(tmp_path / "r.json") == cfg


@pytest.mark.parametrize("kw", [{"depth": 3}, {"positional": "alibi"}, {"resolution": (60, 32)},
                                {"d": 120, "heads": 4}])
def test_model_config_validation(kw):
    with pytest.raises(InvalidArgumentError):
        ModelConfig(**kw)


@pytest.mark.parametrize("kw", [{"guidance_scale": -0.5}, {"num_steps": 0}])
def test_sampler_config_validation(kw):
    with pytest.raises(InvalidArgumentError):
        SamplerConfig(**kw)


def test_training_stage_validation():
    with pytest.raises(InvalidArgumentError):
        TrainingConfig(stage=3)
