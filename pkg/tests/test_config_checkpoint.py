import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from jkoflow.checkpoint import (Checkpoint, CheckpointError, load_module, load_optimizer,
                                module_tensors, optimizer_tensors)
from jkoflow.config import apply_overrides, content_hash, dump_config, fingerprint, load_config, parse_value
from jkoflow.geometry import ParticleEnsemble
from jkoflow.operator import NeuralJKO, OperatorConfig
from jkoflow.runlog import (EventWriter, LedgerWriter, format_event, parse_event, read_events,
                            read_ledger)
from jkoflow.training import ConfigError, TrainConfig, make_optimizer

SMOKE = "configs/smoke.toml"


def test_parse_value():
    assert parse_value("3") == 3 and parse_value("1e-3") == 1e-3
    assert parse_value("[1, 2]") == [1, 2] and parse_value("true") is True
    assert parse_value("gaussian_mix") == "gaussian_mix"


def test_overrides_reach_nested_tables():
    raw = apply_overrides({"lr": {"value": 1.0}}, ["lr.value=0.5", "operator.heads=4", "seed=3"])
    assert raw == {"lr": {"value": 0.5}, "operator": {"heads": 4}, "seed": 3}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_load_with_overrides():
    cfg, _ = load_config(SMOKE, ["S_max=4", "operator.embed_dim=8"])
    assert cfg.S_max == 4 and cfg.operator.embed_dim == 8


def test_missing_dt_names_key(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('T = 2\n[family]\nkind = "uniform_box"\n[energy]\nkind = "external"\npotential = "quadratic"\n')
    with pytest.raises(ConfigError, match="'dt'"):
        load_config(p)


def test_syntax_error_carries_line(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("dt = 0.1\nT = = 3\n")
    with pytest.raises(ConfigError, match=":2:"):
        load_config(p)


def test_dump_is_canonical_and_round_trips():
    cfg, _ = load_config(SMOKE)
    text = dump_config(cfg)
    again = TrainConfig.from_dict(__import__("tomli").loads(text))
    assert dump_config(again) == text
    assert fingerprint(again) == fingerprint(cfg) == content_hash(text)


def test_content_hash_is_git_blob_hash():
    # `printf 'hello\n' | git hash-object --stdin`
    assert content_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-4, 10.0), st.integers(1, 50), st.integers(0, 2 ** 31 - 1),
       st.sampled_from(["constant", "cosine", "piecewise"]), st.booleans())
def test_config_round_trip_property(dt, T, seed, sched, resample):
    cfg, _ = load_config(SMOKE, [f"dt={dt!r}", f"T={T}", f"seed={seed}", f'lr.schedule="{sched}"',
                                 f"resample_points={str(resample).lower()}"])
    back = TrainConfig.from_dict(__import__("tomli").loads(dump_config(cfg)))
    assert back.to_dict() == cfg.to_dict()


tensor_dicts = st.dictionaries(
    st.text("abcdefgh._0123", min_size=1, max_size=12),
    arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4),
           elements=st.floats(allow_nan=False, allow_infinity=True)),
    max_size=5)


@settings(max_examples=50, deadline=None)
@given(tensor_dicts, st.text(max_size=40), st.integers(0, 10 ** 6))
def test_checkpoint_bytes_round_trip(tensors, text, S):
    text = text.replace("\r", "")
    ck = Checkpoint(text, {"S": S, "fingerprint": "abc"}, tensors)
    data = ck.to_bytes()
    back = Checkpoint.from_bytes(data)
    assert back.config_text == text and back.controller == ck.controller
    assert set(back.tensors) == set(tensors)
    for k, v in tensors.items():
        assert back.tensors[k].shape == v.shape
        assert back.tensors[k].tobytes() == np.asarray(v, dtype="<f8").tobytes()
    assert back.to_bytes() == data


def test_checkpoint_rejects_garbage(tmp_path):
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"not a checkpoint at all")
    data = Checkpoint("x", {}, {"a": np.ones(3)}).to_bytes()
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(data[:-4])
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(data + b"\0")


def test_module_and_optimizer_state_round_trip(tmp_path):
    cfg, _ = load_config(SMOKE)
    op = NeuralJKO(cfg.operator, seed=1)
    opt = make_optimizer(op, cfg)
    x = torch.randn(5, 2, dtype=torch.float64)
    for _ in range(2):
        opt.zero_grad()
        ctx = op.encode_batch(x)
        (op.query_batch(ctx, x) ** 2 + op.query_batch(ctx, x)).sum().backward()
        opt.step()
    tensors = {**module_tensors(op), **optimizer_tensors(opt)}
    Checkpoint(dump_config(cfg), {}, tensors).save(tmp_path / "c.bin")
    back = Checkpoint.load(tmp_path / "c.bin")
    op2 = NeuralJKO(cfg.operator, seed=7)
    opt2 = make_optimizer(op2, cfg)
    load_module(op2, back.tensors)
    load_optimizer(opt2, back.tensors)
    for a, b in zip(op.parameters(), op2.parameters()):
        assert torch.equal(a, b)
    s1, s2 = opt.state_dict()["state"], opt2.state_dict()["state"]
    for k in s1:
        for key in s1[k]:
            assert torch.equal(torch.as_tensor(s1[k][key]).double(), torch.as_tensor(s2[k][key]).double())


def test_load_module_reports_mismatch():
    op = NeuralJKO(OperatorConfig(embed_dim=8, heads=2))
    with pytest.raises(CheckpointError):
        load_module(op, {"param.nonsense": np.zeros(1)})


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 3)), elements=st.floats(-1e6, 1e6)),
       st.integers(0, 99))
def test_ensemble_file_round_trip(x, step):
    rho = np.abs(x[:, 0]) + 0.5
    ens = ParticleEnsemble(x, rho, step=step)
    back = ParticleEnsemble.from_text(ens.to_text())
    assert back == ens and back.step == step


def test_event_format_round_trip(tmp_path):
    rec = {"event": "stop", "outer": 3, "inner": 2, "S": 40, "reason": "btb", "final": [[0.1, -2.5e-7]]}
    line = format_event(rec)
    assert " " not in line.split("final=")[1]
    assert parse_event(line) == rec
    w = EventWriter(tmp_path / "e.log")
    w(rec)
    w({"event": "regen", "outer": 4, "S": 40, "truncated": 0, "reference": [[1.0]]})
    w.close()
    assert read_events(tmp_path / "e.log")[0] == rec


def test_ledger_round_trip(tmp_path):
    w = LedgerWriter(tmp_path / "l.csv")
    rows = [(0, 0, 1, 2, 0.1, -0.3, -0.2, 1e-3)]
    w(rows)
    w.close()
    assert read_ledger(tmp_path / "l.csv") == rows
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == \
        "outer_iter,inner_step,traj,t,transport,energy,total,lr"
