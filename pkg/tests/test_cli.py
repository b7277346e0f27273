import csv
import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from statfem_ula.cli import (
    SUMMARY_COLUMNS,
    ChainFileError,
    ConfigError,
    main,
    make_config,
    parse_config,
    read_chain,
    render_config,
    write_chain,
)
from statfem_ula.samplers import ChainRecord

GOLDEN = Path(__file__).parent / "data" / "golden_chain.sfem"


def _golden_record():
    return ChainRecord(np.array([[1.0, -2.5, 0.125], [3.0, 1e-300, -0.0]]), np.array([7, 2**62], dtype=np.uint64),
                       np.array([-1.5, -0.25]), 0.5, 0.25, np.array([0.3]))


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_posterior_defaults(self):
        cfg = parse_config("", "posterior_linear")
        assert (cfg.mesh_n, cfg.n_obs, cfg.d_y, cfg.n_inner) == (32, 100, 128, 10)
        assert cfg.n_samples == 10_000 and cfg.n_warmup == 10_000

    def test_experiment_key_and_sections(self):
        text = 'experiment = "prior"\nmesh_n = 8\n[prior]\nn_samples = 50\n[posterior_linear]\nn_samples = 7\n'
        cfg = parse_config(text)
        assert cfg.experiment == "prior" and cfg.mesh_n == 8 and cfg.n_samples == 50

    def test_pcn_prior_rejected(self):
        with pytest.raises(ConfigError) as info:
            parse_config('experiment = "prior"\nsampler = "pcn"\n')
        assert info.value.key == "sampler"

    @pytest.mark.parametrize("text, key", [
        ("mesh_size = 4\n", "mesh_size"),
        ("n_chains = 0\n", "n_chains"),
        ("mesh_n = -3\n", "mesh_n"),
        ("n_inner = 2.5\n", "n_inner"),
        ('eta = "fast"\n', "eta"),
        ("[nonsense]\nx = 1\n", "nonsense"),
    ])
    def test_errors_name_the_key(self, text, key):
        with pytest.raises(ConfigError) as info:
            parse_config(text, "prior")
        assert info.value.key == key
        assert key in str(info.value)

    def test_exact_nonlinear_rejected(self):
        with pytest.raises(ConfigError):
            make_config("posterior_nonlinear", sampler="exact")

    def test_ula_nonlinear_inner_default(self):
        assert make_config("posterior_nonlinear", sampler="ula").n_inner == 50

    def test_bundled_configs_parse(self):
        files = sorted((Path(__file__).parents[1] / "configs").glob("*.toml"))
        assert len(files) >= 6
        for f in files:
            parse_config(f.read_text())

    @settings(max_examples=40, deadline=None)
    @given(
        experiment=st.sampled_from(["prior", "posterior_linear", "posterior_nonlinear", "conditioning"]),
        mesh_n=st.integers(1, 64),
        eta=st.one_of(st.just("auto"), st.floats(1e-6, 10.0)),
        seed=st.integers(0, 2**32),
        sigma_e=st.floats(1e-4, 1.0),
        levels=st.lists(st.integers(1, 64), min_size=1, max_size=5),
    )
    def test_round_trip(self, experiment, mesh_n, eta, seed, sigma_e, levels):
        sampler = "pmala" if experiment == "posterior_nonlinear" else "pula"
        cfg = make_config(experiment, mesh_n=mesh_n, eta=eta, seed=seed, sigma_e=sigma_e,
                          mesh_levels=levels, sampler=sampler)
        assert parse_config(render_config(cfg)) == cfg


class TestChainFile:
    def test_round_trip(self, tmp_path, rng):
        rec = ChainRecord(rng.standard_normal((13, 5)), rng.integers(0, 2**63, 13, dtype=np.uint64),
                          rng.standard_normal(13), 0.42, 0.01, np.array([0.1, 0.05]))
        write_chain(tmp_path / "c.sfem", rec, {"chain": 3})
        back = read_chain(tmp_path / "c.sfem")
        assert back.samples.tobytes() == rec.samples.tobytes()
        np.testing.assert_array_equal(back.theta_seeds, rec.theta_seeds)
        np.testing.assert_array_equal(back.log_target, rec.log_target)
        np.testing.assert_array_equal(back.eta_trace, rec.eta_trace)
        assert back.accept_rate == 0.42 and back.eta == 0.01
        assert back.metadata["chain"] == 3

    def test_truncation(self, tmp_path):
        data = GOLDEN.read_bytes()
        for cut in (3, 20, 40, 80, len(data) - 1):
            p = tmp_path / f"t{cut}.sfem"
            p.write_bytes(data[:cut])
            with pytest.raises(ChainFileError):
                read_chain(p)

    @pytest.mark.parametrize("offset, value", [(0, b"XFEM"), (4, struct.pack("<I", 2)), (24, b"f4le")])
    def test_header_mismatch(self, tmp_path, offset, value):
        data = bytearray(GOLDEN.read_bytes())
        data[offset:offset + len(value)] = value
        p = tmp_path / "bad.sfem"
        p.write_bytes(bytes(data))
        with pytest.raises(ChainFileError):
            read_chain(p)

    def test_trailing_garbage(self, tmp_path):
        p = tmp_path / "g.sfem"
        p.write_bytes(GOLDEN.read_bytes() + b"\0")
        with pytest.raises(ChainFileError):
            read_chain(p)

    def test_golden_layout(self):
        data = GOLDEN.read_bytes()
        # magic, version 1, K=2, d=3, dtype tag; all little-endian
        assert data[:28] == bytes.fromhex("5346454d" "01000000" "0200000000000000" "0300000000000000" "66386c65")
        assert data[28:36] == bytes.fromhex("000000000000f03f")  # 1.0
        payload = np.frombuffer(data[28:28 + 48], dtype="<f8").reshape(2, 3)
        np.testing.assert_array_equal(payload, _golden_record().samples)
        (n,) = struct.unpack_from("<Q", data, 76)
        meta = json.loads(data[84:84 + n])
        assert meta["note"] == "golden" and meta["theta_seeds"] == [7, 2**62]

    def test_golden_rewrite_is_identical(self, tmp_path):
        write_chain(tmp_path / "g.sfem", _golden_record(), {"note": "golden"})
        assert (tmp_path / "g.sfem").read_bytes() == GOLDEN.read_bytes()
        rec = read_chain(GOLDEN)
        assert rec.samples[1, 2] == 0.0 and np.signbit(rec.samples[1, 2])


SMALL = 'experiment = "prior"\nmesh_n = 8\nn_samples = 200\nn_chains = 2\nn_reference = 200\n'


@pytest.fixture(scope="module")
def prior_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = root / "small.toml"
    cfg.write_text(SMALL)
    status = main(["sample-prior", "--config", str(cfg), "--out", str(root / "a"), "--seed", "3", "--threads", "2"])
    return root, status


class TestRuns:
    def test_prior_smoke(self, prior_run):
        root, status = prior_run
        out = root / "a"
        assert status == 0
        chains = sorted(out.glob("chain_*.sfem"))
        assert [c.name for c in chains] == ["chain_000.sfem", "chain_001.sfem"]
        for c in chains:
            rec = read_chain(c)
            assert rec.samples.shape == (200, 81) and np.all(np.isfinite(rec.samples))
            assert rec.metadata["config"]["seed"] == 3
        rows = _read_csv(out / "summary.csv")
        assert tuple(rows[0]) == SUMMARY_COLUMNS and len(rows) == 2
        assert float(rows[0]["mean_rel_err"]) < 0.2
        assert (out / "config.toml").exists() and (out / "timing.json").exists()
        assert parse_config((out / "config.toml").read_text()).seed == 3

    def test_rerun_is_byte_identical(self, prior_run):
        root, _ = prior_run
        cfg = root / "small.toml"
        assert main(["sample-prior", "--config", str(cfg), "--out", str(root / "b"), "--seed", "3"]) == 0
        for name in ("chain_000.sfem", "chain_001.sfem"):
            assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes()

    def test_diagnostics_subcommand(self, prior_run, capsys):
        root, _ = prior_run
        assert main(["diagnostics", str(root / "a")]) == 0
        rows = _read_csv(root / "a" / "diagnostics.csv")
        assert len(rows) == 2 and float(rows[0]["ess"]) > 0
        assert "chain_000.sfem" in capsys.readouterr().out

    def test_env_overrides_out(self, tmp_path, monkeypatch):
        cfg = tmp_path / "c.toml"
        cfg.write_text('experiment = "prior"\nmesh_n = 4\nn_samples = 20\nn_reference = 0\n')
        monkeypatch.setenv("SFEM_OUT", str(tmp_path / "env"))
        assert main(["sample-prior", "--config", str(cfg), "--out", str(tmp_path / "flag")]) == 0
        assert (tmp_path / "env" / "chain_000.sfem").exists()
        assert not (tmp_path / "flag").exists()

    def test_divergence_exit(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text('experiment = "prior"\nmesh_n = 4\nn_samples = 20\nn_reference = 0\n')
        status = main(["sample-prior", "--config", str(cfg), "--out", str(tmp_path / "o"),
                       "--sampler", "ula", "--eta", "50"])
        assert status == 1
        diag = json.loads((tmp_path / "o" / "divergence.json").read_text())
        assert diag[0]["chain"] == 0
        assert 0 <= diag[0]["outer"] < 20 and 0 <= diag[0]["inner"] < 10
        assert not (tmp_path / "o" / "chain_000.sfem").exists()

    def test_bad_config_exit(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text('sampler = "pcn"\n')
        assert main(["sample-prior", "--config", str(cfg), "--out", str(tmp_path)]) == 2
        assert "sampler" in capsys.readouterr().err
        assert main(["sample-prior", "--eta", "quick", "--out", str(tmp_path)]) == 2

    def test_conditioning_csv(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text('experiment = "conditioning"\nmesh_levels = [2, 4]\nn_theta = 20\n')
        assert main(["condition-study", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        rows = _read_csv(tmp_path / "o" / "conditioning.csv")
        assert [int(r["mesh_n"]) for r in rows] == [2, 4]
        assert {"mean_kappa", "mean_kappa_M", "kappa_q25", "kappa_q75", "kappa_M_q25", "kappa_M_q75"} <= set(rows[0])

    def test_bounds_csv(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text('experiment = "bounds"\nmesh_n = 3\nn_instances = 3\nk_max = 200\n')
        assert main(["verify-bounds", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        rows = _read_csv(tmp_path / "o" / "bounds.csv")
        assert len(rows) == 3
        assert all(int(r["kl_violations"]) == 0 and int(r["w2_violations"]) == 0 for r in rows)

    def test_posterior_exact_and_pcn(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text('experiment = "posterior_linear"\nmesh_n = 4\nn_samples = 100\nn_warmup = 100\n'
                       'n_reference = 100\nd_y = 8\nn_obs = 5\n')
        for sampler in ("exact", "pcn", "pmala"):
            out = tmp_path / sampler
            assert main(["sample-posterior", "--config", str(cfg), "--out", str(out), "--sampler", sampler]) == 0
            rec = read_chain(out / "chain_000.sfem")
            assert rec.samples.shape == (100, 25)
