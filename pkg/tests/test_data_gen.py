import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.neural_network import MLPClassifier

from adaptlab import data_gen
from adaptlab.data_gen import CorruptionSpec, DominoConfig, ShiftConfig
from adaptlab.errors import ConfigError
from adaptlab.numerics import make_rng


def test_directions_orthonormal(gen):
    v = gen.directions
    np.testing.assert_allclose(v.T @ v, np.eye(gen.cfg.C), atol=1e-10)
    allv = np.hstack([v, gen.heldout_directions])
    np.testing.assert_allclose(allv.T @ allv, np.eye(allv.shape[1]), atol=1e-10)


def test_generators_deterministic_and_seed_dependent():
    a = data_gen.build_generators(DominoConfig(seed=3))
    b = data_gen.build_generators(DominoConfig(seed=3))
    c = data_gen.build_generators(DominoConfig(seed=4))
    assert np.array_equal(a.directions, b.directions)
    assert np.linalg.norm(a.directions - c.directions) > 0


@pytest.mark.parametrize("kw", [dict(C=5, d_c=4), dict(rho=1.5), dict(sigma_c=0.0), dict(rho=-0.1)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        DominoConfig(**kw)


def test_rho_one_forces_agreement(gen):
    ds = data_gen.sample(gen, 5000, make_rng(1, "t"), rho=1.0)
    assert np.array_equal(ds.labels, ds.simple_labels)


def test_randomized_variant_matches_at_chance(gen):
    # mismatches are drawn over all classes, so rho=0 gives P(l_s = y) = 1/C
    ds = data_gen.sample(gen, 100000, make_rng(2, "t"), rho=0.0)
    assert abs(np.mean(ds.labels == ds.simple_labels) - 1 / gen.cfg.C) < 0.01


def test_match_rate_formula_at_095(gen):
    ds = data_gen.sample(gen, 100000, make_rng(3, "t"), rho=0.95)
    rate = np.mean(ds.labels == ds.simple_labels)
    assert abs(rate - (0.95 + 0.05 / 5)) < 0.01


def test_sampling_is_bit_deterministic(gen):
    a = data_gen.sample(gen, 300, make_rng(5, "t"), rho=0.9)
    b = data_gen.sample(gen, 300, make_rng(5, "t"), rho=0.9)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.simple_labels, b.simple_labels)


def test_null_shift_is_identical_to_sample(gen):
    a = data_gen.sample(gen, 400, make_rng(6, "t"), rho=0.95)
    b = data_gen.sample_ood(gen, ShiftConfig(0.0, 1.0), 400, make_rng(6, "t"), rho=0.95)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)


@pytest.mark.parametrize("angle", [0.1, np.pi / 6, 1.0])
def test_shift_rotation_is_orthogonal_and_turns_by_angle(gen, angle):
    r = data_gen.shift_rotation(gen, angle)
    np.testing.assert_allclose(r.T @ r, np.eye(gen.cfg.d_c), atol=1e-12)
    rv = r @ gen.directions
    np.testing.assert_allclose(np.linalg.norm(rv, axis=0), 1.0, atol=1e-10)
    np.testing.assert_allclose(np.sum(rv * gen.directions, axis=0), np.cos(angle), atol=1e-10)


def test_default_shift_keeps_complex_oracle_above_half(gen):
    rng = make_rng(7, "t")
    tr = data_gen.sample(gen, 4000, rng, rho=0.0)
    te = data_gen.sample_ood(gen, ShiftConfig(), 2000, rng, rho=0.0)
    C = gen.cfg.C
    clf = MLPClassifier(hidden_layer_sizes=(32,), max_iter=500, random_state=0)
    clf.fit(tr.inputs[:, C:], tr.labels)
    assert clf.score(te.inputs[:, C:], te.labels) >= 0.5


def test_complex_block_is_linearly_inseparable(gen):
    rng = make_rng(8, "t")
    tr, te = data_gen.sample(gen, 10000, rng, rho=0.0), data_gen.sample(gen, 5000, rng, rho=0.0)
    C = gen.cfg.C
    clf = LogisticRegression(max_iter=2000).fit(tr.inputs[:, C:], tr.labels)
    assert clf.score(te.inputs[:, C:], te.labels) <= 1 / C + 0.05


def test_simple_block_is_linearly_separable(gen):
    rng = make_rng(9, "t")
    tr, te = data_gen.sample(gen, 5000, rng, rho=1.0), data_gen.sample(gen, 5000, rng, rho=1.0)
    C = gen.cfg.C
    clf = LogisticRegression(max_iter=2000).fit(tr.inputs[:, :C], tr.simple_labels)
    assert clf.score(te.inputs[:, :C], te.simple_labels) >= 0.99


def _id_test(gen, n=200):
    return data_gen.sample(gen, n, make_rng(10, "t"), rho=1.0, provenance="id_test")


def test_zero_noise_corruption_is_identity(gen):
    ds = _id_test(gen)
    out = data_gen.corrupt(ds, CorruptionSpec("gaussian_noise", 1), make_rng(0, "c"), magnitude=0.0)
    assert np.array_equal(out.inputs, ds.inputs)


def test_mask_zero_count(gen):
    ds = _id_test(gen)
    assert ds.inputs.shape[1] == 13
    out = data_gen.corrupt(ds, CorruptionSpec("mask_zero", 2), make_rng(0, "c"))
    zeroed = (out.inputs == 0.0) & (ds.inputs != 0.0)
    assert np.all(zeroed.sum(axis=1) == 3)
    assert data_gen.mask_count(0.5, 13) == 7  # round half up


def test_scale_down_exact(gen):
    ds = _id_test(gen)
    out = data_gen.corrupt(ds, CorruptionSpec("scale_down", 2), make_rng(0, "c"))
    assert np.array_equal(out.inputs, 0.6 * ds.inputs)


@pytest.mark.parametrize("spec", data_gen.all_corruptions(), ids=lambda s: s.name)
def test_corruptions_preserve_labels_and_count(gen, spec):
    ds = _id_test(gen)
    out = data_gen.corrupt(ds, spec, make_rng(0, "c"))
    assert out.inputs.shape == ds.inputs.shape
    assert np.array_equal(out.labels, ds.labels)


def test_severity_strength_increases():
    for kind, mags in data_gen.CORRUPTION_MAGNITUDES.items():
        strength = [1 - m for m in mags] if kind == "scale_down" else list(mags)
        assert strength[0] < strength[1] < strength[2], kind
    assert len(data_gen.all_corruptions()) == 15


@pytest.mark.parametrize("kw", [dict(kind="blur", severity=1), dict(kind="mask_zero", severity=4)])
def test_bad_corruption_spec(kw):
    with pytest.raises(ConfigError):
        CorruptionSpec(**kw)


def test_gaussian_anomaly_moments(gen):
    x = data_gen.sample_anomalies("gaussian", 10000, gen, make_rng(0, "a"))
    assert np.all(np.abs(x.mean(axis=0)) < 0.05)


def test_blob_anomalies_concentrate_on_one_direction(gen):
    x = data_gen.sample_anomalies("blob", 5000, gen, make_rng(0, "a"))
    cov = np.cov(x, rowvar=False)
    eig = np.linalg.eigvalsh(cov)
    assert eig[-1] / eig.sum() > 0.9


def test_uniform_anomaly_range(gen):
    x = data_gen.sample_anomalies("uniform", 2000, gen, make_rng(0, "a"))
    assert x.min() >= -2 and x.max() <= 2


def test_heldout_anomalies_are_unlabelled_inputs(gen):
    x = data_gen.sample_anomalies("heldout_class", 100, gen, make_rng(0, "a"))
    assert isinstance(x, np.ndarray) and x.shape == (100, gen.cfg.dim)
    # the complex half lies along reserved directions, orthogonal to the training ones
    proj_train = np.abs(x[:, gen.cfg.C:] @ gen.directions).max(axis=1)
    proj_held = np.abs(x[:, gen.cfg.C:] @ gen.heldout_directions).max(axis=1)
    assert np.all(proj_held > proj_train)


def test_anomaly_errors(gen):
    with pytest.raises(ConfigError):
        data_gen.sample_anomalies("gaussian", 0, gen, make_rng(0, "a"))
    with pytest.raises(ConfigError):
        data_gen.sample_anomalies("lsun", 5, gen, make_rng(0, "a"))


def test_csv_round_trip(gen, tmp_path):
    ds = data_gen.sample(gen, 20, make_rng(11, "t"), rho=0.5, provenance="id_test")
    path = tmp_path / "ds.csv"
    ds.to_csv(path)
    header = path.read_text().splitlines()[0].split(",")
    assert header[:2] == ["x_0", "x_1"] and header[-3:] == ["y", "l_s", "provenance"]
    back = data_gen.load_dataset(path)
    assert np.array_equal(back.inputs, ds.inputs)
    assert np.array_equal(back.labels, ds.labels) and back.provenance == "id_test"
