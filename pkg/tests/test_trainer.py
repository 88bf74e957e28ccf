import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qgalore.checkpoint import read_checkpoint
from qgalore.model import ModelConfig
from qgalore.optimizer import AdamConfig
from qgalore.trainer import (
    ConfigError,
    DataConfig,
    DivergenceError,
    Method,
    RunConfig,
    SubspaceConfig,
    estimate_memory,
    run_training,
)


def regression(**kw):
    base = dict(
        method="qgalore", total_steps=60, eval_every=20, batch_size=16, seed=1,
        model=ModelConfig(hidden=(12,)),
        subspace=SubspaceConfig(rank=3, base_interval=10),
        data=DataConfig(n_features=10, n_outputs=8),
        optimizer=AdamConfig(lr=0.01),
    )
    base.update(kw)
    return RunConfig(**base)


def stream(result):
    return [r.deterministic_view() for r in result.records]


# -- config ------------------------------------------------------------------------

def test_galore_and_full_adam_carry_no_quantization():
    g = regression(method="galore").normalized()
    assert g.weight_bits >= 16 and g.subspace.proj_bits >= 16 and g.state_bits == 32
    assert not g.subspace.adaptive
    f = regression(method="full_adam").normalized()
    assert f.weight_bits >= 16 and f.state_bits == 32
    q = regression().normalized()
    assert q.weight_bits == 8 and q.state_bits == 8 and q.subspace.proj_bits == 4


def test_config_validation():
    for bad in (dict(weight_bits=4), dict(state_bits=4), dict(total_steps=-1), dict(batch_size=0),
                dict(seed=-1), dict(data=DataConfig(kind="text")),
                dict(subspace=SubspaceConfig(proj_bits=2))):
        with pytest.raises(ConfigError):
            regression(**bad)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": 1})


def test_config_dict_round_trip():
    cfg = regression(subspace=SubspaceConfig(rank=3, full_rank_layers=("fc1",)))
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


# -- run_training ------------------------------------------------------------------------

@pytest.mark.parametrize("method", list(Method))
def test_identical_config_gives_identical_metrics(method):
    a = run_training(regression(method=method))
    b = run_training(regression(method=method))
    assert stream(a) == stream(b)
    steps = [r.step for r in a.records]
    assert steps == [0, 20, 40, 60]
    svd = [r.svd_calls_total for r in a.records]
    assert svd == sorted(svd)


def test_seed_changes_the_run():
    assert stream(run_training(regression(seed=1))) != stream(run_training(regression(seed=2)))


def test_qgalore_in_float_mode_equals_galore_exactly():
    galore = run_training(regression(method="galore"))
    q = run_training(regression(
        weight_bits=32, state_bits=32, rounding="nearest",
        subspace=SubspaceConfig(rank=3, base_interval=10, proj_bits=32, adaptive=False),
    ))
    assert [(r.train_loss, r.val_loss) for r in q.records] == [(r.train_loss, r.val_loss) for r in galore.records]


@pytest.mark.parametrize("total,interval", [(60, 10), (100, 25), (40, 1)])
def test_svd_count_without_adaptivity(total, interval):
    cfg = regression(total_steps=total, eval_every=total,
                     subspace=SubspaceConfig(rank=3, base_interval=interval, adaptive=False))
    result = run_training(cfg)
    n_layers = len(result.trainer.matrix_names)
    assert result.final.svd_calls_total == (total // interval) * n_layers
    assert all(p["interval"] == interval for p in result.final.per_layer)


def test_zero_steps_emits_one_record_and_a_checkpoint(tmp_path):
    result = run_training(regression(total_steps=0), checkpoint_path=tmp_path / "c.qgal",
                          metrics_out=tmp_path / "m.jsonl")
    assert len(result.records) == 1 and result.final.step == 0
    assert result.final.train_loss is None
    tensors, meta = read_checkpoint(tmp_path / "c.qgal")
    assert meta["step"] == 0 and "fc0.weight" in tensors
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["step"] == 0


def test_metrics_jsonl_schema(tmp_path):
    path = tmp_path / "m.jsonl"
    run_training(regression(), metrics_out=path)
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["step"] for r in recs] == [0, 20, 40, 60]
    keys = {"step", "train_loss", "val_loss", "lr", "svd_calls_total", "per_layer",
            "wallclock_ms", "estimated_memory_bytes"}
    assert all(set(r) == keys for r in recs)
    assert {p["layer_id"] for p in recs[-1]["per_layer"]} == {"fc0", "fc1"}
    assert all({"interval", "last_similarity"} <= set(p) for p in recs[-1]["per_layer"])


def test_full_adam_reaches_noise_floor():
    cfg = RunConfig(method="full_adam", total_steps=2000, eval_every=2000, seed=0,
                    optimizer=AdamConfig(lr=0.01))
    final = run_training(cfg).final
    assert cfg.data.n_features == 16 and cfg.data.noise == 0.01
    assert final.val_loss <= 2 * 0.01


def test_qgalore_regression_within_a_quarter_of_full_adam():
    common = dict(total_steps=2000, eval_every=2000, seed=0)
    full = run_training(RunConfig(method="full_adam", optimizer=AdamConfig(lr=0.01), **common)).final
    q = run_training(RunConfig(method="qgalore", optimizer=AdamConfig(lr=0.03),
                               subspace=SubspaceConfig(rank=4), **common)).final
    assert q.val_loss <= 1.25 * full.val_loss


def test_full_rank_layers_skip_projection():
    result = run_training(regression(subspace=SubspaceConfig(rank=3, base_interval=10, full_rank_layers=("fc1",))))
    assert set(result.trainer.proj) == {"fc0"}
    assert result.trainer.adam["fc1.weight"].m_q.shape == (8, 12)
    assert result.trainer.adam["fc0.weight"].m_q.shape == (12, 3)    # tall layer, projected from the right


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_diagnostic_record(tmp_path):
    path = tmp_path / "m.jsonl"
    cfg = regression(optimizer=AdamConfig(lr=1e30, alpha=1.0), weight_bits=32)
    with pytest.raises(DivergenceError) as info:
        run_training(cfg, metrics_out=path)
    rec = info.value.record
    assert math.isnan(rec.val_loss)
    assert {p["layer_id"] for p in rec.per_layer} == {"fc0", "fc1"}
    assert math.isnan(json.loads(path.read_text().splitlines()[-1])["val_loss"])


# -- estimate_memory -------------------------------------------------------------------

def square(n, **kw):
    model = ModelConfig(n_features=n, n_outputs=n)
    run = RunConfig(method="qgalore", model=model, data=DataConfig(n_features=n, n_outputs=n), **kw)
    return model, run


def test_int8_weights_are_half_of_16_bit():
    model, run8 = square(64, weight_bits=8)
    _, run16 = square(64, weight_bits=16)
    assert estimate_memory(model, run8)["weights"] * 2 == estimate_memory(model, run16)["weights"]


@pytest.mark.parametrize("n", [64, 256, 512])
def test_four_bit_projection_saves_a_quarter(n):
    r = n // 4
    model, run16 = square(n, state_bits=16, subspace=SubspaceConfig(rank=r, proj_bits=16))
    _, run4 = square(n, state_bits=16, subspace=SubspaceConfig(rank=r, proj_bits=4))
    m16, m4 = estimate_memory(model, run16), estimate_memory(model, run4)
    vec_states = 2 * n * 2
    a = m16["optimizer_states"] - vec_states + m16["projections"]
    b = m4["optimizer_states"] - vec_states + m4["projections"]
    assert a == 6 * r * n and b == 4.5 * r * n
    assert b / a == 0.75


def test_full_adam_states_are_eight_bytes_per_parameter():
    model = ModelConfig(n_features=10, n_outputs=6, hidden=(7,))
    m = estimate_memory(model, RunConfig(method="full_adam", model=model))
    assert m["optimizer_states"] == 8 * model.param_count()
    assert m["projections"] == 0 and m["quant_metadata"] == 0


def test_metadata_counts_two_floats_per_block():
    model = ModelConfig(n_features=16, n_outputs=32)
    run = RunConfig(method="qgalore", model=model, state_bits=32,
                    subspace=SubspaceConfig(rank=8, proj_bits=16))
    m = estimate_memory(model, run)
    assert m["quant_metadata"] == 2 * 4 * 2    # 512 weights in 2 blocks
    assert m["total_with_metadata"] == m["total"] + m["quant_metadata"]


@settings(max_examples=60, deadline=None)
@given(
    st.sampled_from([8, 16, 32]), st.sampled_from([8, 16, 32]), st.sampled_from([4, 8, 16, 32]),
    st.sampled_from(list(Method)), st.integers(4, 300), st.integers(4, 300),
)
def test_memory_is_monotone_in_bits(wbits, sbits, pbits, method, n_in, n_out):
    model = ModelConfig(n_features=n_in, n_outputs=n_out, hidden=(32,))
    run = RunConfig(method=method, model=model, weight_bits=wbits, state_bits=sbits,
                    subspace=SubspaceConfig(proj_bits=pbits))
    base = estimate_memory(model, run)
    lower = []
    for f, v in (("weight_bits", wbits), ("state_bits", sbits)):
        lower += [dataclasses.replace(run, **{f: b}) for b in (8, 16, 32) if b < v]
    lower += [dataclasses.replace(run, subspace=dataclasses.replace(run.subspace, proj_bits=b))
              for b in (4, 8, 16, 32) if b < pbits]
    for smaller in lower:
        m = estimate_memory(model, smaller)
        for key in ("weights", "optimizer_states", "projections", "total"):
            assert m[key] <= base[key], (key, smaller)


def test_estimate_is_attached_to_records():
    result = run_training(regression(total_steps=0))
    assert result.final.estimated_memory_bytes == result.trainer.memory["total_with_metadata"] > 0
    assert np.isfinite(result.final.val_loss)
