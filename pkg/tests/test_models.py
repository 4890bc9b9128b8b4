import numpy as np
import pytest
from numpy.testing import assert_allclose

from resample_bnn.models import (
    LayerSpec,
    ModelSpec,
    build,
    collapse,
    default_spec,
    parse_spec,
    serialize_spec,
    spec_output_shapes,
)
from resample_bnn.rng import substream
from resample_bnn.tensor import no_grad


class TestSpecFormat:
    def test_roundtrip_default(self):
        spec = default_spec(64)
        assert parse_spec(serialize_spec(spec)) == spec

    def test_serialize_is_canonical_fixed_point(self):
        text = serialize_spec(default_spec(48))
        assert serialize_spec(parse_spec(text)) == text

    def test_parse_ignores_comments_and_blanks(self):
        text = serialize_spec(default_spec(64)) + "\n# trailing comment\n\n"
        assert parse_spec(text) == default_spec(64)

    def test_parse_rejects_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown layer kind"):
            parse_spec("input 64\nclasses 2\nlayer gru units=3\n")

    def test_parse_requires_headers(self):
        with pytest.raises(ValueError, match="must declare"):
            parse_spec("layer relu\n")


class TestBuild:
    def test_bayesian_param_count_is_twice_baseline(self):
        spec = default_spec(64)
        baseline = build(spec, "baseline", seed=0)
        bayes = build(spec, "bayesian", seed=0)
        assert bayes.parameter_count() == 2 * baseline.parameter_count()

    def test_same_seed_same_parameters(self):
        spec = default_spec(64)
        a = build(spec, "bayesian", seed=5)
        b = build(spec, "bayesian", seed=5)
        for (na, ta), (nb, tb) in zip(a.parameters(), b.parameters()):
            assert na == nb
            assert np.array_equal(ta.data, tb.data)

    def test_no_conv_spec_rejected(self):
        spec = ModelSpec(layers=(LayerSpec("flatten"), LayerSpec("dense", units=2)),
                         patch_size=8, classes=2)
        with pytest.raises(ValueError, match="convolution"):
            build(spec, "baseline", seed=0)

    def test_first_layer_must_be_constrained(self):
        spec = ModelSpec(layers=(
            LayerSpec("conv", filters=2, kernel=3),
            LayerSpec("flatten"),
            LayerSpec("dense", units=2),
        ), patch_size=8, classes=2)
        with pytest.raises(ValueError, match="constrained"):
            build(spec, "baseline", seed=0)

    def test_output_must_match_classes(self):
        spec = ModelSpec(layers=(
            LayerSpec("constrained_conv", filters=1, kernel=3),
            LayerSpec("flatten"),
            LayerSpec("dense", units=3),
        ), patch_size=8, classes=2)
        with pytest.raises(ValueError, match="classes"):
            build(spec, "baseline", seed=0)

    def test_constraint_holds_at_init_for_both_modes(self):
        spec = default_spec(64)
        for mode in ("baseline", "bayesian"):
            model = build(spec, mode, seed=9)
            first = model.layers[0]
            k = first.kernel.data if mode == "baseline" else first.weight.mu.data
            for f in range(k.shape[0]):
                assert k[f, 0, 2, 2] == -1.0
                assert abs(k[f, 0].sum() - k[f, 0, 2, 2] - 1.0) < 1e-9

    def test_architecture_symmetry(self):
        spec = default_spec(64)
        baseline = build(spec, "baseline", seed=1)
        bayes = build(spec, "bayesian", seed=1)
        x = np.random.default_rng(0).standard_normal((2, 1, 64, 64))
        with no_grad():
            shapes_b = [t.shape for t in baseline.activations(x)]
            shapes_v = [t.shape for t in bayes.activations(x, substream(0))]
        assert shapes_b == shapes_v
        assert shapes_b == [(2,) + s if isinstance(s, tuple) else s
                            for s in [tuple(sh) for sh in spec_output_shapes(spec)]]


class TestCollapse:
    def test_collapse_matches_sigma_zero_forward(self):
        spec = default_spec(64)
        bayes = build(spec, "bayesian", seed=3)
        for name, t in bayes.parameters():
            if name.endswith("rho"):
                t.data[...] = -40.0
        x = np.random.default_rng(2).standard_normal((3, 1, 64, 64))
        with no_grad():
            stochastic = bayes.forward(x, substream(17)).data
            point = collapse(bayes).forward(x).data
        assert np.abs(stochastic - point).max() < 1e-9

    def test_collapse_preserves_constraint(self):
        bayes = build(default_spec(64), "bayesian", seed=4)
        flat = collapse(bayes)
        k = flat.layers[0].kernel.data
        for f in range(k.shape[0]):
            assert k[f, 0, 2, 2] == -1.0
            assert abs(k[f, 0].sum() - k[f, 0, 2, 2] - 1.0) < 1e-9

    def test_collapse_has_baseline_param_count(self):
        spec = default_spec(64)
        bayes = build(spec, "bayesian", seed=6)
        baseline = build(spec, "baseline", seed=6)
        assert collapse(bayes).parameter_count() == baseline.parameter_count()

    def test_collapse_rejects_baseline(self):
        with pytest.raises(ValueError, match="bayesian"):
            collapse(build(default_spec(64), "baseline", seed=0))
