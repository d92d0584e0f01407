import json

import numpy as np
import pytest

from app.core.errors import ConfigError, InvalidArgumentError, MissingArtifactError, ParseError
from app.schemas.data import HEALTHY, PATIENT, Sample, Split, SplitCounts, SynthConfig
from app.schemas.run import ResizeConfig
from app.services.data_service import (
    build_coupling,
    generate_synth,
    harmonize_lengths,
    load_dataset,
    load_matrix,
    load_partition,
    resample_linear,
    save_dataset,
    save_matrix,
    save_partition,
    select,
    simulate_var,
    standardize,
    steady_state_covariance,
    synth_partition,
)


def correlation(cov: np.ndarray) -> np.ndarray:
    sd = np.sqrt(np.diag(cov))
    return cov / np.outer(sd, sd)


class TestStandardize:
    def test_row(self):
        out = standardize(np.array([[1.0, 2.0, 3.0]]))
        assert out.mean() == pytest.approx(0.0, abs=1e-15)
        assert out.std() == pytest.approx(1.0, abs=1e-15)

    def test_constant_row(self):
        assert np.array_equal(standardize(np.array([[5.0, 5.0, 5.0]])), np.zeros((1, 3)))

    def test_idempotent(self, rng):
        once = standardize(rng.standard_normal((6, 40)) * 3 + 2)
        assert np.allclose(standardize(once), once, atol=1e-12)

    def test_needs_two_timepoints(self):
        with pytest.raises(InvalidArgumentError):
            standardize(np.ones((3, 1)))


class TestResample:
    def test_midpoint(self):
        assert np.allclose(resample_linear(np.array([[0.0, 1.0]]), 3), [[0.0, 0.5, 1.0]])

    def test_same_length_is_identity(self, rng):
        x = rng.standard_normal((4, 9))
        assert np.array_equal(resample_linear(x, 9), x)

    @pytest.mark.parametrize("t_new", [2, 5, 17, 64])
    def test_endpoints(self, rng, t_new):
        x = rng.standard_normal((4, 9))
        out = resample_linear(x, t_new)
        assert out.shape == (4, t_new)
        assert np.allclose(out[:, 0], x[:, 0], atol=1e-12)
        assert np.allclose(out[:, -1], x[:, -1], atol=1e-12)

    def test_too_short(self, rng):
        with pytest.raises(InvalidArgumentError):
            resample_linear(rng.standard_normal((2, 5)), 1)

    def test_commutes_with_node_permutation(self, rng):
        x = rng.standard_normal((6, 20))
        perm = rng.permutation(6)
        assert np.allclose(standardize(resample_linear(x, 31))[perm], standardize(resample_linear(x[perm], 31)))


class TestHarmonize:
    def sample(self, rng, sample_id, split, timepoints):
        return Sample(sample_id, rng.standard_normal((3, timepoints)), None, "site0", split)

    def test_resizes_smaller_group(self, rng):
        dataset = [self.sample(rng, f"p{i}", Split.POPULATION, 20) for i in range(4)]
        dataset += [self.sample(rng, f"c{i}", Split.CLINICAL_CV, 30) for i in range(2)]
        out = harmonize_lengths(dataset, ResizeConfig())
        assert {s.timepoints for s in out} == {20}
        assert [s.id for s in out] == [s.id for s in dataset]
        assert out[0] is dataset[0]

    def test_resize_population(self, rng):
        dataset = [self.sample(rng, "p", Split.POPULATION, 20), self.sample(rng, "c", Split.CLINICAL_CV, 30)]
        out = harmonize_lengths(dataset, ResizeConfig(direction="population"))
        assert {s.timepoints for s in out} == {30}

    def test_explicit_target(self, rng):
        dataset = [self.sample(rng, "p", Split.POPULATION, 20), self.sample(rng, "c", Split.CLINICAL_CV, 20)]
        out = harmonize_lengths(dataset, ResizeConfig(target=12))
        assert {s.timepoints for s in out} == {12}

    def test_equal_lengths_untouched(self, rng):
        dataset = [self.sample(rng, "p", Split.POPULATION, 20)]
        assert harmonize_lengths(dataset, ResizeConfig()) is dataset


class TestGenerator:
    def test_counts_and_labels(self, tiny_dataset, tiny_synth_config):
        counts = tiny_synth_config.counts
        assert len(tiny_dataset) == counts.population + counts.clinical_ss_train + counts.clinical_ss_val + counts.clinical_cv
        assert all(s.label is None for s in select(tiny_dataset, Split.POPULATION))
        assert all(s.label == HEALTHY for s in select(tiny_dataset, Split.CLINICAL_SS_TRAIN))
        val = select(tiny_dataset, Split.CLINICAL_SS_VAL)
        assert sum(s.label == PATIENT for s in val) == sum(s.label == HEALTHY for s in val)
        assert len({s.id for s in tiny_dataset}) == len(tiny_dataset)
        assert all(s.x.shape == (8, 32) for s in tiny_dataset)

    def test_samples_are_standardized(self, tiny_dataset):
        x = tiny_dataset[0].x
        assert np.allclose(x.mean(axis=1), 0, atol=1e-12)
        assert np.allclose(x.std(axis=1), 1, atol=1e-12)

    def test_deterministic(self, tiny_synth_config):
        a, b = generate_synth(tiny_synth_config), generate_synth(tiny_synth_config)
        assert all(np.array_equal(s.x, t.x) and s.id == t.id for s, t in zip(a, b))

    def test_seed_matters(self, tiny_synth_config):
        other = generate_synth(tiny_synth_config.model_copy(update={"seed": 4}))
        assert not np.array_equal(other[0].x, generate_synth(tiny_synth_config)[0].x)

    @pytest.mark.parametrize("mode", ["rewire", "scale"])
    def test_no_anomaly_means_identical_processes(self, tiny_synth_config, mode):
        cfg = tiny_synth_config.model_copy(update={"anomaly_strength": 0.0, "anomaly_mode": mode})
        phi, phi_patient = build_coupling(cfg)
        assert np.array_equal(phi, phi_patient)

    @pytest.mark.parametrize("mode", ["rewire", "scale"])
    def test_anomaly_only_touches_its_inputs(self, tiny_synth_config, mode):
        cfg = tiny_synth_config.model_copy(update={"anomaly_mode": mode})
        phi, phi_patient = build_coupling(cfg)
        partition = synth_partition(cfg)
        nodes = partition.networks[cfg.anomaly_network]
        inputs = np.zeros_like(phi, dtype=bool)
        inputs[np.ix_(nodes, [i for i in range(cfg.num_nodes) if i not in nodes])] = True
        common = phi_patient[~inputs][0] / phi[~inputs][0]
        assert np.allclose(phi_patient[~inputs], common * phi[~inputs], rtol=1e-12)
        assert not np.allclose(phi_patient[inputs], common * phi[inputs])

    def test_scale_mode_multiplies_inputs(self, tiny_synth_config):
        cfg = tiny_synth_config.model_copy(update={"anomaly_mode": "scale", "anomaly_strength": 0.5})
        phi, phi_patient = build_coupling(cfg)
        nodes = synth_partition(cfg).networks[cfg.anomaly_network]
        others = [i for i in range(cfg.num_nodes) if i not in nodes]
        common = phi_patient[others[0], others[0]] / phi[others[0], others[0]]
        assert np.allclose(phi_patient[np.ix_(nodes, others)], 1.5 * common * phi[np.ix_(nodes, others)])

    def test_spectral_radius(self, tiny_synth_config):
        phi, phi_patient = build_coupling(tiny_synth_config)
        for matrix in (phi, phi_patient):
            radius = np.abs(np.linalg.eigvals(matrix)).max()
            assert radius == pytest.approx(tiny_synth_config.spectral_radius, abs=1e-12)

    def test_dynamics_dominate_innovations(self):
        cfg = SynthConfig()
        phi, _ = build_coupling(cfg)
        variance = np.diag(steady_state_covariance(phi, cfg.noise_sigma))
        # innovations contribute noise_sigma^2 to each node's stationary variance
        assert np.mean(cfg.noise_sigma ** 2 / variance) < 0.5

    def test_healthy_predictor_degrades_on_patients(self):
        cfg = SynthConfig()
        phi, phi_patient = build_coupling(cfg)
        nodes = synth_partition(cfg).networks[cfg.anomaly_network]
        healthy = correlation(steady_state_covariance(phi, cfg.noise_sigma))
        patient = correlation(steady_state_covariance(phi_patient, cfg.noise_sigma))
        rest = [i for i in range(cfg.num_nodes) if i not in nodes]
        beta = np.linalg.solve(healthy[np.ix_(rest, rest)], healthy[np.ix_(rest, nodes)])

        def error(corr):
            cross = corr[np.ix_(rest, nodes)]
            return np.mean(1.0 - 2.0 * np.diag(beta.T @ cross) + np.diag(beta.T @ corr[np.ix_(rest, rest)] @ beta))

        assert error(healthy) < 1.0
        assert error(patient) > error(healthy)

    def test_partition_covers_nodes(self, tiny_synth_config):
        partition = synth_partition(tiny_synth_config)
        assert partition.names == ["A", "B"]
        assert sorted(sum(partition.networks.values(), [])) == list(range(8))

    def test_unknown_anomaly_network(self):
        with pytest.raises(ValueError, match="anomaly_network"):
            SynthConfig(num_networks=2, anomaly_network="Z")

    def test_stationary_variance(self):
        cfg = SynthConfig(num_nodes=16, num_networks=4, seed=1)
        phi, _ = build_coupling(cfg)
        analytic = np.diag(steady_state_covariance(phi, cfg.noise_sigma))
        x = simulate_var(phi, 4096, cfg.noise_sigma, 200, np.random.default_rng(0))
        ratio = x.var(axis=1) / analytic
        assert ((ratio > 0.5) & (ratio < 2.0)).all()


class TestMatrixFiles:
    def test_binary_round_trip(self, tmp_path, rng):
        x = rng.standard_normal((3, 5)).astype(np.float32)
        path = save_matrix(tmp_path / "m.gs4t", x)
        assert np.array_equal(load_matrix(path), x)
        assert path.read_bytes()[:4] == b"GS4T"
        assert len(path.read_bytes()) == 16 + 4 * 15

    @pytest.mark.parametrize("seed", range(100))
    def test_binary_round_trip_is_bitwise(self, tmp_path, seed):
        rng = np.random.default_rng(seed)
        shape = tuple(int(n) for n in rng.integers(1, 40, size=2))
        bits = rng.integers(0, 2 ** 32, size=shape, dtype=np.uint64).astype(np.uint32)
        x = bits.view(np.float32)
        # every non-NaN bit pattern, subnormals and signed zeros included
        x = np.where(np.isnan(x), np.float32(-0.0), x)
        x.flat[0] = np.float32(1e-45)
        restored = load_matrix(save_matrix(tmp_path / "m.gs4t", x))
        assert restored.dtype == np.float32
        assert restored.shape == shape
        assert restored.tobytes() == x.astype("<f4").tobytes()

    def test_csv_round_trip(self, tmp_path, rng):
        x = rng.standard_normal((4, 7))
        assert np.array_equal(load_matrix(save_matrix(tmp_path / "m.csv", x)), x)

    def test_csv_parse_error(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1,2,3\n4,oops,6\n")
        with pytest.raises(ParseError) as exc:
            load_matrix(path)
        assert (exc.value.line, exc.value.column) == (2, 2)

    def test_csv_ragged(self, tmp_path):
        path = tmp_path / "ragged.csv"
        path.write_text("1,2,3\n4,5\n")
        with pytest.raises(ParseError):
            load_matrix(path)

    def test_binary_bad_magic(self, tmp_path, rng):
        path = save_matrix(tmp_path / "m.gs4t", rng.standard_normal((2, 2)))
        path.write_bytes(b"NOPE" + path.read_bytes()[4:])
        with pytest.raises(ParseError, match="magic"):
            load_matrix(path)

    def test_binary_truncated(self, tmp_path, rng):
        path = save_matrix(tmp_path / "m.gs4t", rng.standard_normal((2, 4)))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ParseError, match="bytes"):
            load_matrix(path)

    def test_missing(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_matrix(tmp_path / "nothing.gs4t")


class TestManifests:
    def write_manifest(self, tmp_path, samples, num_nodes=2):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"num_nodes": num_nodes, "timepoints": 3, "samples": samples}))
        return path

    def test_dataset_round_trip(self, tmp_path, tiny_dataset):
        manifest_path = save_dataset(tiny_dataset[:6], tmp_path / "data", fmt="csv")
        manifest, loaded = load_dataset(manifest_path)
        assert manifest.num_nodes == 8
        for original, restored in zip(tiny_dataset[:6], loaded):
            assert (restored.id, restored.label, restored.split, restored.site) == (
                original.id, original.label, original.split, original.site)
            assert np.array_equal(restored.x, original.x)

    def test_duplicate_ids(self, tmp_path):
        save_matrix(tmp_path / "a.csv", np.zeros((2, 3)))
        entry = {"id": "dup", "path": "a.csv", "label": 0, "split": "clinical_cv"}
        with pytest.raises(ConfigError, match="dup"):
            load_dataset(self.write_manifest(tmp_path, [entry, entry]))

    def test_label_out_of_range(self, tmp_path):
        entry = {"id": "x", "path": "a.csv", "label": 3, "split": "clinical_cv"}
        with pytest.raises(ConfigError, match="label"):
            load_dataset(self.write_manifest(tmp_path, [entry]))

    def test_unknown_split(self, tmp_path):
        entry = {"id": "x", "path": "a.csv", "label": 0, "split": "holdout"}
        with pytest.raises(ConfigError, match="split"):
            load_dataset(self.write_manifest(tmp_path, [entry]))

    def test_node_count_mismatch(self, tmp_path):
        save_matrix(tmp_path / "a.csv", np.zeros((3, 3)))
        entry = {"id": "x", "path": "a.csv", "label": 0, "split": "clinical_cv"}
        with pytest.raises(InvalidArgumentError, match="3 nodes"):
            load_dataset(self.write_manifest(tmp_path, [entry]))

    def test_matrix_longer_than_declared(self, tmp_path):
        save_matrix(tmp_path / "a.gs4t", np.zeros((3, 5)))
        entry = {"id": "x", "path": "a.gs4t", "label": 0, "split": "clinical_cv"}
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"num_nodes": 3, "timepoints": 4, "samples": [entry]}))
        with pytest.raises(InvalidArgumentError, match="5 timepoints"):
            load_dataset(path)

    def test_declared_length_never_reached(self, tmp_path):
        save_matrix(tmp_path / "a.gs4t", np.zeros((3, 5)))
        entry = {"id": "x", "path": "a.gs4t", "label": 0, "split": "clinical_cv"}
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"num_nodes": 3, "timepoints": 400, "samples": [entry]}))
        with pytest.raises(InvalidArgumentError, match="declares 400"):
            load_dataset(path)

    def test_shorter_samples_are_allowed(self, tmp_path):
        save_matrix(tmp_path / "a.csv", np.zeros((2, 3)))
        save_matrix(tmp_path / "b.csv", np.ones((2, 2)))
        entries = [
            {"id": "a", "path": "a.csv", "label": 0, "split": "clinical_cv"},
            {"id": "b", "path": "b.csv", "label": 1, "split": "clinical_cv"},
        ]
        _, loaded = load_dataset(self.write_manifest(tmp_path, entries))
        assert [s.timepoints for s in loaded] == [3, 2]

    def test_partition_round_trip(self, tmp_path, tiny_synth_config):
        partition = synth_partition(tiny_synth_config)
        assert load_partition(save_partition(partition, tmp_path / "p.json")) == partition

    def test_invalid_partition_file(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps({"num_nodes": 2, "networks": {"A": [0]}}))
        with pytest.raises(ConfigError, match="not assigned"):
            load_partition(path)


@pytest.mark.slow
def test_covariance_shift_grows_with_anomaly_strength():
    """Frobenius distance between patient and healthy covariances increases with the planted strength."""
    distances = []
    for strength in (0.0, 0.5, 1.0):
        cfg = SynthConfig(
            num_nodes=32,
            num_networks=4,
            timepoints=256,
            anomaly_strength=strength,
            counts=SplitCounts(population=0, clinical_ss_train=0, clinical_ss_val=400, clinical_cv=0),
            seed=0,
        )
        data = generate_synth(cfg)
        cov = {
            label: np.mean([np.cov(s.x) for s in data if s.label == label], axis=0)
            for label in (HEALTHY, PATIENT)
        }
        distances.append(np.linalg.norm(cov[PATIENT] - cov[HEALTHY]))
    assert distances[0] < distances[1] < distances[2]
