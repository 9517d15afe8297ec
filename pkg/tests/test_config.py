import pytest
from hypothesis import given
from hypothesis import strategies as st

from dosebma.config import ConfigError, apply_paper_scale, defaults, dump_config, load_config, loads_config


class TestLoad:
    def test_empty_file_gives_defaults(self, tmp_path):
        p = tmp_path / "run.ini"
        p.write_text("")
        tree = load_config(p)
        assert tree == defaults()
        assert tree["mcmc"]["n_samples"] == 40000
        assert tree["mcmc"]["burn_in"] == 10000
        assert tree["priors"]["beta_prior_mean"] == 100.0
        assert tree["priors"]["alpha_variance"] == 1000.0

    def test_unknown_key_named_with_line(self):
        text = "[priors]\nalpha_variance = 10\nbeta_prior_meen = 5\n"
        with pytest.raises(ConfigError, match=r":3: unknown key 'beta_prior_meen'"):
            loads_config(text)

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            loads_config("[mcmcc]\nn_samples = 5\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="n_samples"):
            loads_config("[mcmc]\nn_samples = many\n")
        with pytest.raises(ConfigError, match="sampler"):
            loads_config("[mcmc]\nsampler = gibbs\n")
        with pytest.raises(ConfigError, match="gsd"):
            loads_config("[sweep]\ngsd = 0.5, 2\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.ini")

    def test_partial_override(self):
        tree = loads_config("[benchmark]\nslopes = 5, 7\nmethods = conv-mean, bma-cmd\n")
        assert tree["benchmark"]["slopes"] == (5.0, 7.0)
        assert tree["benchmark"]["methods"] == ("conv-mean", "bma-cmd")
        assert tree["mcmc"] == defaults()["mcmc"]

    def test_paper_scale(self):
        tree = apply_paper_scale(defaults())
        assert tree["dose"]["n_subjects"] == 2376 and tree["dose"]["n_vectors"] == 5000
        assert defaults()["dose"]["n_subjects"] == 500


class TestRoundTrip:
    def test_defaults(self):
        assert loads_config(dump_config(defaults())) == defaults()

    @given(
        st.integers(0, 2**31), st.integers(1, 10**6), st.floats(1.0, 1e5), st.floats(1e-3, 1e4),
        st.lists(st.floats(0, 100), min_size=1, max_size=5), st.sampled_from(["samc", "plain-mh"]),
        st.one_of(st.none(), st.integers(2, 50)), st.booleans(),
    )
    def test_random_trees(self, seed, n, t0, beta_mean, slopes, sampler, regions, adapt):
        tree = defaults()
        tree["run"]["seed"] = seed
        tree["mcmc"].update(n_samples=n, t0=t0, sampler=sampler, n_regions=regions, adapt=adapt)
        tree["priors"]["beta_prior_mean"] = beta_mean
        tree["benchmark"]["slopes"] = tuple(slopes)
        assert loads_config(dump_config(tree)) == tree
