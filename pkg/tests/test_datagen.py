import numpy as np
import pytest

from fairsite.datagen import (
    BigramTable,
    ConfigError,
    GeneratorConfig,
    LabelerConfig,
    admissible_mask_distribution,
    apply_missingness,
    build_site_pool,
    default_labeler,
    full_data_variant,
    generate_dataset,
    make_trials,
    match_top_sites,
    sample_code_sequence,
    sample_mask,
    sample_race,
    simulate_trials,
)
from fairsite.records import instances_equal, validate_instance

from conftest import make_site, make_trial, tiny_manifest


class TestBigram:
    def test_transition_frequencies(self):
        rng = np.random.default_rng(0)
        table = BigramTable.random(6, 2, rng)
        seq = sample_code_sequence(table, 1, 100_001, np.random.default_rng(1))
        counts = np.zeros((6, 6))
        np.add.at(counts, (seq[:-1], seq[1:]), 1)
        for a in range(6):
            n = counts[a].sum()
            if n < 2000:
                continue
            tv = 0.5 * np.abs(counts[a] / n - table.transition[a]).sum()
            assert tv < 0.03

    def test_first_code_from_specialty_row(self):
        initial = np.array([[1.0, 0, 0], [0, 0, 1.0]])
        table = BigramTable(initial, np.full((3, 3), 1 / 3))
        rng = np.random.default_rng(0)
        assert {sample_code_sequence(table, 1, 4, rng)[0] for _ in range(20)} == {2}

    def test_degenerate_row_rejected(self):
        with pytest.raises(ConfigError, match="degenerate"):
            BigramTable(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5], [0.0, 0.0]]))

    def test_zero_length(self):
        table = BigramTable(np.array([[1.0, 0.0]]), np.full((2, 2), 0.5))
        assert sample_code_sequence(table, 0, 0, np.random.default_rng(0)).size == 0


class TestMasks:
    def test_exact_law_over_fifteen_masks(self):
        law = admissible_mask_distribution(0.8)
        assert len(law) == 15
        assert sum(law.values()) == pytest.approx(1.0)
        rng = np.random.default_rng(3)
        n = 60_000
        counts = {}
        for _ in range(n):
            m = sample_mask(0.8, rng)
            counts[m] = counts.get(m, 0) + 1
        for mask, p in law.items():
            assert counts.get(mask, 0) / n == pytest.approx(p, abs=4 * np.sqrt(p * (1 - p) / n) + 1e-3)

    def test_unavailable_never_revealed(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            assert sample_mask(0.9, rng, (True, False, True, False))[1::2] == (False, False)

    def test_nothing_available(self):
        with pytest.raises(Exception):
            sample_mask(0.8, np.random.default_rng(0), (False,) * 4)

    def test_copies_keep_content(self, small_dataset):
        _, instances = small_dataset
        a, b = instances[0], instances[1]
        assert a.trial.trial_id == b.trial.trial_id and a.copy == 0 and b.copy == 1
        for sa, sb in zip(a.sites, b.sites):
            assert sa.site_id == sb.site_id and sa.enrollment == sb.enrollment
            assert np.array_equal(sa.diagnoses, sb.diagnoses)

    def test_copy_count(self):
        config = GeneratorConfig(pool_size=30, n_trials=4, copies_per_trial=7, seed=2)
        manifest, instances = generate_dataset(config)
        assert len(instances) == manifest.record_count == 28

    def test_full_variant(self, small_dataset):
        _, instances = small_dataset
        full = full_data_variant(instances)
        assert len(full) == len({i.trial.trial_id for i in instances})
        for inst in full:
            for site in inst.sites:
                has_history = site.enrollment_history is not None and site.enrollment_history.size > 0
                assert site.mask == (True, True, True, has_history)


class TestRace:
    def test_is_distribution(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            r = sample_race((0.6, 0.17, 0.13, 0.06, 0.03, 0.01), (0.2, 0.1, 0.1, 0.05, 0.02, 0.01), rng)
            assert np.all(r >= 0) and r.sum() == pytest.approx(1.0)

    def test_mean_tracks_prior(self):
        rng = np.random.default_rng(0)
        draws = np.array([sample_race((0.5, 0.2, 0.1, 0.1, 0.05, 0.05), (0.02,) * 6, rng) for _ in range(2000)])
        np.testing.assert_allclose(draws.mean(axis=0), (0.5, 0.2, 0.1, 0.1, 0.05, 0.05), atol=0.01)


class TestLabeler:
    def _setup(self, **lab):
        config = GeneratorConfig(pool_size=20, n_trials=3, seed=1, labeler=LabelerConfig(**lab))
        return config, default_labeler(config)

    def test_monotone_in_history(self):
        config, labeler = self._setup(noise_std=0.0)
        trial = make_trials(config, np.random.default_rng(0))[0]
        static = np.zeros(config.dimensions.n_s)
        width = config.dimensions.n_t_prime + 1
        low = [np.append(np.zeros(width - 1), 1.0)] * 3
        high = [np.append(np.zeros(width - 1), 20.0)] * 3
        assert labeler.expected_input(trial, static, high) > labeler.expected_input(trial, static, low)

    def test_specialty_match_bonus(self):
        config, labeler = self._setup(noise_std=0.0, affinity_scale=0.0)
        trial = make_trials(config, np.random.default_rng(0))[0]
        area = int(np.argmax(trial.features[: config.specialty_count]))
        match = np.zeros(config.dimensions.n_s)
        match[area] = 1.0
        other = np.zeros(config.dimensions.n_s)
        other[(area + 1) % config.specialty_count] = 1.0
        gap = labeler.expected_input(trial, match, []) - labeler.expected_input(trial, other, [])
        assert gap == pytest.approx(config.labeler.specialty_bonus)

    def test_clipped_nonnegative_integer(self):
        config, labeler = self._setup(intercept=-50.0)
        trial = make_trials(config, np.random.default_rng(0))[0]
        value = labeler(trial, np.zeros(config.dimensions.n_s), [], np.random.default_rng(0))
        assert value == 0 and isinstance(value, int)


class TestSimulation:
    def test_history_overlap_trace(self):
        # Two trials forced onto the same sites: the second sees the first's labels.
        config = GeneratorConfig(pool_size=10, n_trials=2, seed=0)
        rng = np.random.default_rng(0)
        pool = build_site_pool(config, rng)
        trials = make_trials(config, rng)
        labeler = default_labeler(config)
        first, second = simulate_trials(pool, trials, labeler, config, np.random.default_rng(4))
        for site in first.sites:
            assert site.enrollment_history is None and site.mask[3] is False
        by_id = {s.site_id: s for s in first.sites}
        for site in second.sites:
            hist = site.enrollment_history
            assert hist.shape == (1, config.dimensions.n_t_prime + 1)
            np.testing.assert_array_equal(hist[0, :-1], trials[0].reduced_features)
            assert hist[0, -1] == by_id[site.site_id].enrollment

    def test_history_truncated(self):
        config = GeneratorConfig(pool_size=10, n_trials=12, seed=0)
        rng = np.random.default_rng(0)
        pool = build_site_pool(config, rng)
        simulate_trials(pool, make_trials(config, rng), default_labeler(config), config, rng)
        assert all(len(site.history) == config.dimensions.n_h for site in pool)

    def test_pool_too_small(self):
        with pytest.raises(ConfigError):
            GeneratorConfig(pool_size=5)


class TestGenerateDataset:
    def test_deterministic(self):
        config = GeneratorConfig(pool_size=30, n_trials=5, copies_per_trial=2, seed=9)
        m1, a = generate_dataset(config)
        m2, b = generate_dataset(config)
        assert m1 == m2 and all(instances_equal(x, y) for x, y in zip(a, b))

    def test_seed_changes_output(self):
        base = dict(pool_size=30, n_trials=5, copies_per_trial=2)
        _, a = generate_dataset(GeneratorConfig(seed=1, **base))
        _, b = generate_dataset(GeneratorConfig(seed=2, **base))
        assert not instances_equal(a[0], b[0])

    def test_validates_against_manifest(self, small_dataset):
        manifest, instances = small_dataset
        for inst in instances:
            validate_instance(inst, manifest)

    def test_config_round_trip(self):
        config = GeneratorConfig(seed=4, p_present=0.7)
        assert GeneratorConfig.from_dict(config.to_dict()) == config

    def test_full_scale_dimensions(self):
        config = GeneratorConfig.from_dict({"scale": "full", "n_trials": 1, "pool_size": 20})
        assert (config.dimensions.n_t, config.dimensions.n_s) == (1827, 669)

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="unknown"):
            GeneratorConfig.from_dict({"pool": 3})

    def test_bad_presence_probability(self):
        with pytest.raises(ConfigError, match="p_present"):
            GeneratorConfig(p_present=0.0)


class TestMatching:
    def test_pads_with_zero_enrollment(self):
        dims = tiny_manifest()
        trial = make_trial(dims=dims)
        cands = [make_site(f"C{i}", enrollment=e) for i, e in enumerate([3, 9, 1])]
        pool = [make_site(f"P{i}", enrollment=5) for i in range(6)]
        inst = match_top_sites(trial, cands, pool, 5, 2, np.random.default_rng(0))
        assert inst.enrollments.tolist() == [9, 3, 1, 0, 0]

    def test_keeps_top_m(self):
        trial = make_trial()
        cands = [make_site(f"C{i}", enrollment=i) for i in range(8)]
        inst = match_top_sites(trial, cands, [], 5, 2, np.random.default_rng(0))
        assert inst.enrollments.tolist() == [7, 6, 5, 4, 3]
