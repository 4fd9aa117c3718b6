"""End-to-end run of configs/smoke.yaml (a few minutes on one core)."""

from dataclasses import replace
from pathlib import Path

import pytest

from cadet.config import load_config
from cadet.synth import DomainShiftParams, SplitData, make_split
from cadet.training import evaluate_split, fit, load_checkpoint

pytestmark = pytest.mark.slow

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.yaml"


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    cfg = load_config(SMOKE)
    out = tmp_path_factory.mktemp("smoke")
    final = fit(cfg, out, log_every=0)
    return cfg, out, final


def test_smoke_config_learns(smoke_run):
    cfg, _, final = smoke_run
    assert cfg.data.image_size == 64 and cfg.train.total_steps == 500
    assert final["split"] == "source-val"
    assert final["metrics"]["map50"] > 0.5


def test_fog_severity_trend(smoke_run):
    cfg, out, _ = smoke_run
    state, _ = load_checkpoint(out / "checkpoint_last.npz")
    base = cfg.data.gen_params()
    scores = []
    for haze in (0.3, 0.6, 0.9):
        params = replace(base, shift=DomainShiftParams(haze, 1.5, 0.7, 0.05))
        images, anns = make_split("target-val", 200, 123, params)
        scores.append(evaluate_split(state.model, SplitData("target-val", images, anns), cfg).map50)
    assert scores[0] >= scores[1] >= scores[2], scores
