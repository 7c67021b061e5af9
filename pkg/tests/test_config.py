import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmdistill.config import ConfigError, DistillConfig, micro_config


def test_defaults_are_valid():
    cfg = DistillConfig().validate()
    assert (cfg.t_dim, cfg.h_dim, cfg.w_dim, cfg.d_v, cfg.d_a) == (2, 2, 2, 16, 16)
    assert (cfg.margin, cfg.delta, cfg.lam) == (0.2, 1.5, 1.0)
    assert cfg.n_positions == 8 and cfg.n_classes == 8


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 2**31),
    st.sampled_from(["audio->visual", "visual->audio"]),
    st.floats(1.001, 10),
    st.floats(0, 5),
    st.floats(0, 2),
    st.booleans(),
    st.floats(0, 2),
)
def test_round_trip(seed, role, delta, lam, margin, flag, jitter):
    base = DistillConfig()
    cfg = DistillConfig(seed=seed, role=role, delta=delta, lam=lam, margin=margin, enable_L_cl=flag,
                        data=type(base.data)(jitter=jitter, seed=seed))
    back = DistillConfig.from_dict(json.loads(cfg.to_json()))
    assert back == cfg
    assert back.to_json() == cfg.to_json()
    assert back.digest() == cfg.digest()


def test_file_round_trip(tmp_path):
    cfg = micro_config(3)
    cfg.save(tmp_path / "c.json")
    assert DistillConfig.load(tmp_path / "c.json") == cfg


def test_every_violation_is_listed():
    cfg = DistillConfig(delta=1.0, margin=-1, lam=-2, batch_size=1, d_a=8, role="sideways")
    with pytest.raises(ConfigError) as info:
        cfg.validate()
    text = " | ".join(info.value.errors)
    for needle in ("delta", "margin", "lam", "batch_size", "d_a", "role"):
        assert needle in text
    assert len(info.value.errors) == 6


def test_unknown_fields_are_rejected():
    with pytest.raises(ConfigError):
        DistillConfig.from_dict({"seed": 1, "typo": 3})
    with pytest.raises(ConfigError):
        DistillConfig.from_dict({"data": {"n_clases": 3}})


def test_role_properties():
    a = DistillConfig()
    b = DistillConfig(role="visual->audio")
    assert (a.teacher_modality, a.student_modality) == ("audio", "visual")
    assert (b.teacher_modality, b.student_modality) == ("visual", "audio")
