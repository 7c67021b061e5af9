import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from xmdistill.synthgen import Dataset, GenSpec, SpecError, generate, mix_audio


def probe(x_train, y_train, x_eval, k):
    """Ridge least-squares linear probe on one-hot targets."""
    X = np.c_[x_train, np.ones(len(x_train))]
    W = np.linalg.solve(X.T @ X + 1e-3 * np.eye(X.shape[1]), X.T @ np.eye(k)[y_train])
    return np.argmax(np.c_[x_eval, np.ones(len(x_eval))] @ W, axis=1)


def test_same_seed_same_bytes():
    a = generate(GenSpec(seed=3)).to_bytes()
    assert a == generate(GenSpec(seed=3)).to_bytes()
    assert a != generate(GenSpec(seed=4)).to_bytes()


def test_shapes_noise_set_and_rho_range():
    spec = GenSpec(n_samples=100, d_raw_a=11, seed=1)
    d = generate(spec)
    assert d.raw_v.shape == (100, 32) and d.raw_a.shape == (100, 11)
    assert d.noise_channels.size == 5 and np.all(np.diff(d.noise_channels) > 0)
    assert set(d.noise_channels) | set(d.signal_channels) == set(range(11))
    assert np.all((d.rho >= 0) & (d.rho <= 1))
    assert np.all(np.bincount(d.labels) >= 100 // 8)
    assert not d.is_mixed.any()


def test_file_round_trip(tmp_path):
    d = mix_audio(generate(GenSpec(n_samples=40, seed=2)), 0.5, seed=1)
    path = tmp_path / "d.xmds"
    d.save(path)
    back = Dataset.load(path)
    for name in ("raw_v", "raw_a", "labels", "rho", "is_mixed", "noise_channels"):
        assert np.array_equal(getattr(back, name), getattr(d, name)), name
    assert back.n_classes == d.n_classes
    assert back.to_bytes() == path.read_bytes()


def test_file_header_layout():
    d = generate(GenSpec(n_samples=10, n_classes=3, d_raw_v=4, d_raw_a=6, d_z=2, seed=0))
    blob = d.to_bytes()
    assert blob[:4] == b"XMDS"
    assert struct.unpack_from("<6I", blob, 4) == (1, 10, 3, 4, 6, 3)
    assert list(struct.unpack_from("<3I", blob, 28)) == d.noise_channels.tolist()
    record = 4 + 8 + 1 + 8 * (4 + 6)
    assert len(blob) == 40 + 10 * record
    first = blob[40:40 + record]
    assert struct.unpack_from("<I", first)[0] == d.labels[0]
    assert struct.unpack_from("<d", first, 4)[0] == d.rho[0]


def test_bad_file_is_rejected():
    with pytest.raises(ValueError):
        Dataset.from_bytes(b"XXXX" + bytes(40))


def test_separable_case_probe_is_near_perfect():
    d = generate(GenSpec(eta=0.0, rho=1.0, seed=0))
    sig = d.signal_channels
    assert np.mean(probe(d.raw_a[:, sig], d.labels, d.raw_a[:, sig], 8) == d.labels) > 0.95


@pytest.mark.parametrize("seed", range(3))
def test_wrong_class_content_is_near_chance(seed):
    d = generate(GenSpec(rho=0.0, seed=seed))
    tr, te = d.split(0.5, seed)
    acc = np.mean(probe(tr.raw_a, tr.labels, te.raw_a, 8) == te.labels)
    assert abs(acc - 1 / 8) <= 0.10


@pytest.mark.parametrize("seed", range(3))
def test_noise_channels_carry_no_label_information(seed):
    d = generate(GenSpec(seed=seed))
    tr, te = d.split(0.5, seed)
    nz = d.noise_channels
    acc = np.mean(probe(tr.raw_a[:, nz], tr.labels, te.raw_a[:, nz], 8) == te.labels)
    assert abs(acc - 1 / 8) <= 0.10


def test_rho_predicts_teacher_probe_correctness():
    d = generate(GenSpec(seed=0))
    tr, te = d.split(0.5, 0)
    sig = d.signal_channels
    correct = (probe(tr.raw_a[:, sig], tr.labels, te.raw_a[:, sig], 8) == te.labels).astype(float)
    assert spearmanr(te.rho, correct).correlation > 0.3


def test_split_is_stratified_and_disjoint():
    d = generate(GenSpec(seed=5))
    tr, te = d.split(0.25, seed=5)
    assert len(tr) + len(te) == len(d)
    assert np.all(np.bincount(te.labels) == 30)
    rows = {r.tobytes() for r in tr.raw_v}
    assert not any(r.tobytes() in rows for r in te.raw_v)


def test_mix_fraction_zero_is_a_no_op():
    d = generate(GenSpec(n_samples=64, seed=6))
    assert mix_audio(d, 0.0, seed=1).to_bytes() == d.to_bytes()


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 1000))
def test_mix_donors_always_differ_in_label(fraction, seed):
    d = generate(GenSpec(n_samples=48, n_classes=3, seed=7))
    mixed, donors = mix_audio(d, fraction, seed=seed, return_donors=True)
    picked = np.flatnonzero(donors >= 0)
    assert picked.size == int(round(fraction * 48))
    assert np.array_equal(mixed.is_mixed, donors >= 0)
    assert np.all(d.labels[donors[picked]] != d.labels[picked])
    assert np.allclose(mixed.raw_a[picked], 0.5 * d.raw_a[picked] + 0.5 * d.raw_a[donors[picked]], rtol=0, atol=0)
    untouched = donors < 0
    assert np.array_equal(mixed.raw_a[untouched], d.raw_a[untouched])
    assert np.array_equal(mixed.raw_v, d.raw_v)
    assert np.array_equal(mixed.labels, d.labels)


def test_full_mix_covers_everything():
    d = generate(GenSpec(n_samples=40, seed=8))
    assert mix_audio(d, 1.0, seed=0).is_mixed.all()


def test_mix_errors():
    d = generate(GenSpec(n_samples=10, seed=9))
    for bad in (-0.1, 1.5):
        with pytest.raises(ValueError):
            mix_audio(d, bad)
    single = generate(GenSpec(n_samples=10, n_classes=1, rho=1.0, seed=9))
    with pytest.raises(ValueError):
        mix_audio(single, 0.5)


@pytest.mark.parametrize(
    "kw", [dict(n_classes=0), dict(d_raw_a=1), dict(alpha=0.0), dict(eta=-1.0), dict(rho=1.5), dict(n_samples=0)]
)
def test_invalid_specs(kw):
    with pytest.raises(SpecError):
        generate(GenSpec(**kw))
