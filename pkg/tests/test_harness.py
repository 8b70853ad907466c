import json

import numpy as np
import pytest
import yaml

from restyle.checkpoint import load_encoder, load_generator, save_encoder, save_generator
from restyle.cli import main
from restyle.config import ExperimentConfig, config_from_dict, load_config
from restyle.data import DatasetSpec, make_dataset
from restyle.encoder import build_encoder
from restyle.errors import ConfigurationError, IngestionError
from restyle.pipeline import run_experiment
from restyle.schemes import optimize_latent
from restyle.traces import load_trace

from conftest import randomize_heads

TINY = {
    "generator": {"seed": 3, "k": 4, "d": 8, "resolution": 16, "channels": [8, 8, 8, 8], "avg_samples": 500},
    "data": {"size": 24, "splits": {"train": 16, "test": 8}},
    "train": {"n_steps": 2, "batch_size": 4, "total_iterations": 2},
    "evaluation": {"n_images": 2, "infer_steps": 3, "n_opt_images": 2, "opt_iters": 5, "hybrid_iters": 3,
                   "record_every": 1, "timing_repeats": 2},
    "baselines": {"naive_iterations": 2},
    "bootstrap": {"finetune_steps": 2, "train_iterations": 2, "n_images": 2, "n_steps": 2, "probe_samples": 4},
}


def _tiny_config(tmp_path, **overrides):
    raw = json.loads(json.dumps(TINY))
    for section, values in overrides.items():
        if isinstance(values, dict):
            raw.setdefault(section, {}).update(values)
        else:
            raw[section] = values
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


# -- dataset ------------------------------------------------------------------

def test_empty_dataset(tiny_g):
    data = make_dataset(tiny_g, DatasetSpec(size=0, splits={"train": 0, "test": 0}))
    assert len(data) == 0 and data.images.shape == (0, 16, 16, 3)
    assert len(data.subset("test")) == 0


def test_dataset_deterministic(tiny_g):
    spec = DatasetSpec(size=6, seed=4, splits={"train": 4, "test": 2})
    a, b = make_dataset(tiny_g, spec), make_dataset(tiny_g, spec)
    assert a.item_hashes() == b.item_hashes()
    assert a.ids == b.ids and len(set(a.item_hashes())) == 6
    assert make_dataset(tiny_g, DatasetSpec(size=6, seed=5, splits={"train": 6})).item_hashes() != a.item_hashes()


def test_zero_jitter_latents_reproduce_images(tiny_g):
    data = make_dataset(tiny_g, DatasetSpec(size=3, splits={"test": 3}))
    for x, w in zip(data.images, data.latents):
        tr = optimize_latent(tiny_g, x, w, 0)
        assert tr.final.losses["l2"] == pytest.approx(0.0, abs=1e-10)


def test_dataset_errors(tiny_g, tmp_path):
    with pytest.raises(IngestionError):
        make_dataset(tiny_g, DatasetSpec(source="image_directory", directory=str(tmp_path / "none")))
    with pytest.raises(IngestionError):
        make_dataset(tiny_g, DatasetSpec(source="image_directory", directory=str(tmp_path)))
    with pytest.raises(ConfigurationError):
        make_dataset(tiny_g, DatasetSpec(size=4, splits={"train": 5}))


def test_directory_dataset(tiny_g, tmp_path):
    rng = np.random.default_rng(0)
    for i in range(3):
        np.save(tmp_path / f"img{i}.npy", rng.uniform(-1, 1, size=(16, 16, 3)).astype(np.float32))
    data = make_dataset(tiny_g, DatasetSpec(source="image_directory", directory=str(tmp_path), size=0,
                                            splits={"test": 3}))
    assert data.ids == ["img0.npy", "img1.npy", "img2.npy"] and data.latents is None


# -- checkpoints and config ---------------------------------------------------

def test_generator_checkpoint_round_trip(tiny_g, tmp_path):
    save_generator(tiny_g, tmp_path / "a.zip")
    g2 = load_generator(tmp_path / "a.zip")
    save_generator(g2, tmp_path / "b.zip")
    assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()
    assert g2.checksum() == tiny_g.checksum()


def test_encoder_checkpoint_round_trip(tiny_g, tmp_path):
    for variant in ("simple", "fpn"):
        e = randomize_heads(build_encoder(variant, 6, tiny_g, 2))
        save_encoder(e, tmp_path / f"{variant}_a.zip")
        e2 = load_encoder(tmp_path / f"{variant}_a.zip")
        save_encoder(e2, tmp_path / f"{variant}_b.zip")
        assert (tmp_path / f"{variant}_a.zip").read_bytes() == (tmp_path / f"{variant}_b.zip").read_bytes()
        assert e2.checksum() == e.checksum()


def test_config_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.yaml")
    with pytest.raises(ConfigurationError):
        config_from_dict({"train": {"n_stepz": 3}})
    with pytest.raises(ConfigurationError):
        config_from_dict({"colour": 1})
    with pytest.raises(ConfigurationError):
        config_from_dict({"schemes": ["restyle", "magic"]})
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: [unclosed")
    with pytest.raises(ConfigurationError):
        load_config(bad)


def test_config_hash_stable(tmp_path):
    a = load_config(_tiny_config(tmp_path))
    b = config_from_dict(TINY)
    assert a.config_hash() == b.config_hash()
    b.out_dir = "elsewhere"
    assert a.config_hash() == b.config_hash()
    b.train.seed = 9
    assert a.config_hash() != b.config_hash()
    assert ExperimentConfig().validate().config_hash() == ExperimentConfig().validate().config_hash()


# -- command line -------------------------------------------------------------

def test_cli_help_and_unknown_command(capsys):
    assert main(["--help"]) == 0
    assert "gen-build" in capsys.readouterr().out
    assert main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_cli_missing_config_is_configuration_error(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "o")]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_cli_bad_scheme_and_steps(tmp_path):
    cfg = str(_tiny_config(tmp_path))
    out = str(tmp_path / "o")
    assert main(["invert", "--config", cfg, "--out", out, "--scheme", "magic"]) == 2
    assert main(["invert", "--config", cfg, "--out", out, "--steps", "-1"]) == 2


def test_cli_invert_writes_step_records(tmp_path):
    cfg = str(_tiny_config(tmp_path))
    out = tmp_path / "o"
    assert main(["gen-build", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "checkpoints" / "generator.zip").exists()
    assert main(["data-make", "--config", cfg, "--out", str(out)]) == 0
    assert np.load(out / "data" / "images.npy").shape == (24, 16, 16, 3)
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    assert main(["invert", "--config", cfg, "--out", str(out), "--steps", "5"]) == 0
    dirs = sorted((out / "traces" / "restyle").iterdir())
    assert len(dirs) == 2
    tr = load_trace(dirs[0])
    assert len(tr) == 6 and tr.check_replay()
    assert tr.meta["scheme"] == "restyle"


def test_cli_optimize_and_hybrid(tmp_path):
    cfg = str(_tiny_config(tmp_path))
    out = tmp_path / "o"
    assert main(["optimize", "--config", cfg, "--out", str(out), "--steps", "4"]) == 0
    tr = load_trace(next((out / "traces" / "optimization").iterdir()))
    assert [s.iteration for s in tr.steps] == [0, 1, 2, 3, 4]
    assert main(["hybrid", "--config", cfg, "--out", str(out), "--steps", "2"]) == 0
    tr = load_trace(next((out / "traces" / "hybrid").iterdir()))
    assert len(tr) == 2 + 1 + 2


def test_cli_seed_override(tmp_path):
    cfg = str(_tiny_config(tmp_path))
    out = tmp_path / "o"
    assert main(["gen-build", "--config", cfg, "--out", str(out), "--seed", "11"]) == 0
    assert yaml.safe_load((out / "config.yaml").read_text())["generator"]["seed"] == 11


# -- pipeline -----------------------------------------------------------------

def test_evaluation_only_single_image(tmp_path):
    cfg = load_config(_tiny_config(tmp_path, evaluation={"n_images": 1, "n_opt_images": 1}))
    ws = run_experiment(cfg, tmp_path / "run", stages=("evaluate",))
    for scheme in ("restyle", "single_pass", "naive", "optimization", "hybrid", "fpn"):
        assert len(ws.traces[scheme]) == 1
        assert len(list((tmp_path / "run" / "traces" / scheme).iterdir())) == 1
    lines = (tmp_path / "run" / "timing" / "records.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["_header"]["config_hash"] == cfg.config_hash()


def test_full_tiny_run_has_provenance_everywhere(tmp_path):
    cfg = load_config(_tiny_config(tmp_path))
    ws = run_experiment(cfg, tmp_path / "run")
    root = tmp_path / "run"
    csvs = sorted(root.rglob("*.csv"))
    assert {p.name for p in (root / "summary").glob("*.csv")} >= {"metrics.csv", "latent_table.csv",
                                                                 "alignment.csv", "bootstrap.csv"}
    for p in csvs:
        assert p.read_text().startswith(f"# config_hash={cfg.config_hash()}"), p
    assert len(ws.results["criteria"]) == 12
    assert (root / "report.md").read_text().count("|") > 12
    assert (root / "figures").is_dir()


def test_tiny_run_reproducible(tmp_path):
    from restyle.criteria import compare_summaries

    cfg = load_config(_tiny_config(tmp_path, schemes=["restyle", "single_pass", "naive", "optimization"]))
    run_experiment(cfg, tmp_path / "a", stages=("evaluate", "analyze"))
    run_experiment(load_config(tmp_path / "tiny.yaml"), tmp_path / "b", stages=("evaluate", "analyze"))
    differing, names = compare_summaries(tmp_path / "a", tmp_path / "b")
    assert names and differing == []
