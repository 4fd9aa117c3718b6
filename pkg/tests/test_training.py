import copy
import json

import numpy as np
import pytest
import torch

from cadet.config import ConfigError, load_config
from cadet.synth import SceneAnnotation, SceneObject
from cadet.geometry import Box
from cadet.training import (NumericError, PackedTargets, fit, images_to_tensor, init_state, load_checkpoint,
                            load_data, run_steps, save_checkpoint, train_step, training_data)

TINY = [
    "data.image_size=64", "data.size_range=[12,48]", "data.n_source_train=12", "data.n_source_val=4",
    "data.n_target_train=12", "data.n_target_val=6", "model.channels=16", "model.widths=[8,8,16,16]",
    "model.stem=8", "model.head_convs=1", "model.disc_convs=1", "train.batch_size=2", "train.total_steps=10",
    "train.warmup_steps=3", "train.dtype=float64",
]


def tiny(*extra):
    return load_config(None, TINY + list(extra))


@pytest.fixture(scope="module")
def data():
    cfg = tiny()
    return load_data(cfg, ["source-train", "target-train", "target-val"])


def trajectory(cfg, ds, steps=None):
    d = training_data(cfg, ds)
    packed = PackedTargets(d.source.annotations, cfg)
    state = init_state(cfg)
    reports, params = [], []

    def on_step(st, rep):
        reports.append(rep)
        params.append({n: p.detach().clone() for n, p in st.model.detector_named_parameters()})

    run_steps(state, d, packed, cfg, steps or cfg.train.total_steps, on_step)
    return reports, params, state


def test_zero_weights_match_supervised_only(data):
    zero = tiny("loss.alpha=0", "loss.alpha_warmup=0", "loss.beta=0")
    plain = tiny("loss.use_ga=false", "loss.use_ca=false")
    r0, p0, _ = trajectory(zero, data)
    r1, p1, _ = trajectory(plain, data)
    assert [r.det for r in r0] == [r.det for r in r1]
    assert r0[5].ca is not None and r0[5].ga > 0
    for a, b in zip(p0, p1):
        for name in a:
            assert torch.equal(a[name], b[name]), name


def test_fixed_seed_reproducible(data):
    cfg = tiny()
    r0, p0, _ = trajectory(cfg, data)
    r1, p1, _ = trajectory(cfg, data)
    assert [r.to_record() for r in r0] == [r.to_record() for r in r1]
    assert all(torch.equal(p0[-1][n], p1[-1][n]) for n in p0[-1])
    r2, _, _ = trajectory(tiny("train.seed=1"), data)
    assert [r.total for r in r2] != [r.total for r in r0]


def test_phase_boundary(data):
    cfg = tiny()
    reports, _, _ = trajectory(cfg, data, 5)
    assert [r.phase for r in reports] == ["warmup"] * 3 + ["full"] * 2
    for r in reports[:3]:
        assert r.ca is None and r.beta == 0.0 and r.alpha == cfg.loss.alpha_warmup
    for r in reports[3:]:
        assert r.ca is not None and r.beta == cfg.loss.beta and r.alpha == cfg.loss.alpha
        assert len(r.ca_levels) == 5


def test_default_warmup_is_fifth_of_training():
    cfg = load_config(None, ["train.total_steps=1000"])
    assert cfg.train.warmup == 200


def test_target_annotations_never_used(data):
    cfg = tiny()
    poisoned = copy.deepcopy(data)
    junk = SceneAnnotation("junk", 64, 64, [SceneObject(Box(0, 0, 64, 64), 2, "triangle")])
    poisoned.splits["target-train"].annotations[:] = [junk] * len(poisoned["target-train"].annotations)
    r0, p0, _ = trajectory(cfg, data)
    r1, p1, _ = trajectory(cfg, poisoned)
    assert [r.to_record() for r in r0] == [r.to_record() for r in r1]
    assert all(torch.equal(p0[-1][n], p1[-1][n]) for n in p0[-1])


def test_train_step_rejects_target_labels(data):
    cfg = tiny()
    state = init_state(cfg)
    d = training_data(cfg, data)
    packed = PackedTargets(d.source.annotations, cfg)
    src = (images_to_tensor(d.source.images[:2], torch.float64), packed.batch([0, 1], torch.float64))
    tgt = images_to_tensor(d.target[:2], torch.float64)
    with pytest.raises(TypeError):
        train_step(state, src, (tgt, packed.batch([0, 1], torch.float64)), cfg)
    with torch.no_grad():
        state.model.head.cls_logits.bias.fill_(float("nan"))
    with pytest.raises(NumericError):
        train_step(state, src, tgt, cfg)


def test_resume_equivalence(tmp_path, data):
    cfg = tiny("train.checkpoint_every=4")
    d = training_data(cfg, data)
    fit(cfg, tmp_path / "full", data=d, log_every=0)
    fit(cfg, tmp_path / "resumed", resume=tmp_path / "full" / "checkpoint_000004.npz", data=d, log_every=0)
    a, _ = load_checkpoint(tmp_path / "full" / "checkpoint_last.npz")
    b, _ = load_checkpoint(tmp_path / "resumed" / "checkpoint_last.npz")
    assert a.step == b.step == 10
    for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert torch.equal(p, q), n
    assert a.rng.bit_generator.state == b.rng.bit_generator.state
    last = [json.loads(x) for x in (tmp_path / "full" / "metrics.jsonl").read_text().splitlines()][-1]
    again = [json.loads(x) for x in (tmp_path / "resumed" / "metrics.jsonl").read_text().splitlines()][-1]
    assert last["metrics"] == again["metrics"]
    assert last["config_hash"] == cfg.hash() and last["seed"] == 0


def test_checkpoint_round_trip_and_mismatch(tmp_path):
    cfg = tiny()
    state = init_state(cfg)
    save_checkpoint(state, cfg, tmp_path / "c.npz")
    back, cfg2 = load_checkpoint(tmp_path / "c.npz")
    assert cfg2.to_dict() == cfg.to_dict()
    for (n, p), (_, q) in zip(state.model.named_parameters(), back.model.named_parameters()):
        assert torch.equal(p, q)
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "c.npz", tiny("model.channels=32"))


def test_zero_steps_writes_init_checkpoint_only(tmp_path, data):
    cfg = tiny("train.total_steps=0", "train.warmup_steps=0")
    assert fit(cfg, tmp_path, data=training_data(cfg, data)) == {}
    assert sorted(p.name for p in tmp_path.iterdir()) == ["checkpoint_000000.npz"]


def test_fit_metrics_records(tmp_path, data):
    cfg = tiny("train.eval_every=5")
    final = fit(cfg, tmp_path, data=training_data(cfg, data), log_every=0)
    lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["kind"] for r in lines] == ["eval", "final"]
    assert final == lines[-1]
    for r in lines:
        assert 0.0 <= r["metrics"]["map50"] <= 1.0
        assert r["split"] == "target-val" and r["config_hash"] == cfg.hash()

