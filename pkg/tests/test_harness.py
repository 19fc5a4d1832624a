import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affinekit.backbone import build_backbone
from affinekit.config import ArchConfig, ConfigError, dump_kv_text, parse_kv_text
from affinekit.harness import experiments as ex
from affinekit.harness.cli import main
from affinekit.harness.data import MIXTURES, ToyDataset, render_shape, silhouette_map
from affinekit.harness.metrics import energy_distance, mmd_rbf, mode_coverage
from affinekit.harness.outputs import read_ppm, scatter_image, tile_grid, write_ppm
from affinekit.registry import load_checkpoint


# -- config text ----------------------------------------------------------------

def test_parse_kv_text():
    text = "# run\nsteps = 10\nlr = 1e-3\nname = 'a b'\nranks = [1, 4]\nflag = true\n"
    assert parse_kv_text(text) == {"steps": 10, "lr": 1e-3, "name": "a b", "ranks": [1, 4], "flag": True}


@pytest.mark.parametrize("text,line", [("a = 1\nb\n", 2), ("a = 1\n\na = 2\n", 3), ("x =\n", 1),
                                       ("ok = 1\nbad key = 2\n", 2)])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError) as info:
        parse_kv_text(text, "run.cfg")
    assert info.value.lineno == line
    assert f"run.cfg:{line}:" in str(info.value)


keys = st.text("abcdefghij_", min_size=1, max_size=8)
values = st.one_of(st.integers(-10 ** 6, 10 ** 6), st.booleans(), st.text("abcxyz-/", min_size=1, max_size=6),
                   st.lists(st.integers(0, 100), max_size=4))


@settings(max_examples=50)
@given(st.dictionaries(keys, values, max_size=6))
def test_kv_text_roundtrip(d):
    assert parse_kv_text(dump_kv_text(d)) == d


def test_arch_config_file_roundtrip(tmp_path):
    arch = ArchConfig("dit", 32, 2, 4, 2, 1, 8, 8, 3)
    path = tmp_path / "arch.cfg"
    path.write_text(arch.to_text())
    assert ArchConfig.load(path) == arch
    path.write_text("kind = dit\nhidden = 30\nheads = 4\n")
    with pytest.raises(ConfigError):
        ArchConfig.load(path)


def test_run_config_roundtrip(tmp_path):
    cfg = ex.RunConfig(steps=7, ranks=[1, 2], tasks=["mixture-b"])
    path = tmp_path / "run.cfg"
    path.write_text(cfg.to_text())
    assert ex.RunConfig.load(path) == cfg


# -- data and metrics ---------------------------------------------------------------

def test_dataset_is_deterministic_and_split():
    a, b = ToyDataset("mixture-a", seed=3, n_train=500, n_eval=200), ToyDataset("mixture-a", seed=3, n_train=500,
                                                                                  n_eval=200)
    assert a.train_x.tobytes() == b.train_x.tobytes()
    assert a.sample_shape == (1, 1, 2)
    rows = {r.tobytes() for r in a.train_x}
    assert not any(r.tobytes() in rows for r in a.eval_x)


def test_target_mixture_alternates_mode_shapes():
    mix = MIXTURES["mixture-b"]()
    assert np.allclose(mix.means.mean(axis=0), [0.9, -0.6])
    for i, a in enumerate(math.pi / 8 + 2 * math.pi * np.arange(8) / 8):
        radial = np.array([math.cos(a), math.sin(a)])
        expected = 0.03 ** 2 if i % 2 == 0 else 0.25 ** 2
        assert radial @ mix.covs[i] @ radial == pytest.approx(expected)
        assert np.linalg.det(mix.covs[i]) == pytest.approx((0.03 * 0.25) ** 2)


@pytest.mark.parametrize("family", ["disks", "bars", "squares", "rings"])
def test_procedural_images(family):
    img, mask = render_shape(family, 32, np.random.default_rng(0))
    assert img.shape == (32, 32) and img.min() >= -1 and img.max() <= 1
    assert 0 < mask.mean() < 1
    cond = silhouette_map(mask)
    assert set(np.unique(cond)) <= {-1.0, 1.0}


def test_paired_dataset_has_conditions():
    d = ToyDataset("paired:disks", n_train=8, n_eval=4)
    assert d.train_cond.shape == d.train_x.shape == (8, 1, 32, 32)
    with pytest.raises(ValueError):
        ToyDataset("images:triangles", n_train=2, n_eval=1)


def test_energy_distance_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((400, 2))
    assert energy_distance(x, x) == pytest.approx(0.0, abs=1e-12)
    # two point masses at distance 3: 2*3 - 0 - 0
    assert energy_distance(np.zeros((5, 2)), np.full((7, 2), [3.0, 0.0])) == pytest.approx(6.0)
    y = rng.standard_normal((400, 2)) + [2.0, 0.0]
    assert energy_distance(x, y) > 10 * energy_distance(x, rng.standard_normal((400, 2)))
    assert mmd_rbf(x, y) > mmd_rbf(x, rng.standard_normal((400, 2)))


def test_mode_coverage():
    means = np.array([[0.0, 0.0], [5.0, 5.0]])
    cov = mode_coverage(np.array([[0.1, 0.0], [0.0, 0.2], [9.0, 9.0], [5.0, 5.1]]), means, 0.3)
    assert np.allclose(cov, [0.5, 0.25])


# -- outputs ------------------------------------------------------------------------

def test_ppm_roundtrip(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    path = write_ppm(tmp_path / "a.ppm", rgb)
    assert path.read_bytes().startswith(b"P6\n7 5\n255\n")
    assert np.array_equal(read_ppm(path), rgb)


def test_grids():
    g = tile_grid(np.zeros((5, 1, 4, 4)) - 1)
    assert g.shape == (2 * 5 + 1, 3 * 5 + 1, 3)
    assert g[1, 1, 0] == 0 and g[0, 0, 0] == 255
    s = scatter_image(np.array([[0.0, 0.0], [10.0, 0.0]]), size=11, extent=1.0)
    assert (s == 0).all(axis=2).sum() == 1 and (s[5, 5] == 0).all()


# -- experiment helpers -----------------------------------------------------------

def test_trainable_fraction_of_rank_one_points_adapter():
    bb = build_backbone(ex.POINTS_2D)
    s = ex.new_adapter_set(ex.RunConfig(d_rank=1), bb, "t", 0)
    report = ex.adapter_report(bb, s)
    assert report["adapter_params"] == s.n_params()
    assert report["trainable_pct"] < 2.0


def test_zero_step_pretrain_equals_init():
    cfg = ex.RunConfig(n_train=64, n_eval=0)
    bb, _ = ex.pretrain(cfg, steps=0)
    assert bb.fingerprint() == build_backbone(ex.POINTS_2D, seed=cfg.seed).fingerprint()


def test_pretrain_divergence_keeps_last_good_weights(monkeypatch):
    cfg = ex.RunConfig(n_train=64, n_eval=0, batch=8)
    calls = {"n": 0}
    real = ex.train_step

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 150:
            raise ex.NumericalError("boom")
        return real(*args, **kwargs)

    monkeypatch.setattr(ex, "train_step", flaky)
    with pytest.raises(ex.DivergenceError) as info:
        ex.pretrain(cfg, steps=300)
    assert info.value.step == 149
    monkeypatch.setattr(ex, "train_step", real)
    ref, _ = ex.pretrain(cfg, steps=100)
    assert info.value.backbone.fingerprint() == ref.fingerprint()


# -- command line ----------------------------------------------------------------

FAST = ["--set", "steps=20", "--set", "adapt_steps=5", "--set", "batch=16", "--set", "n_train=256",
        "--set", "n_eval=0", "--set", "sample_steps=5"]


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    assert main(["pretrain", "--out", str(out), "--seed", "1", *FAST]) == 0
    return out


def test_cli_pretrain_is_reproducible(pretrained, tmp_path):
    assert main(["pretrain", "--out", str(tmp_path), "--seed", "1", *FAST]) == 0
    assert (tmp_path / "checkpoint.afnr").read_bytes() == (pretrained / "checkpoint.afnr").read_bytes()
    manifest = (pretrained / "manifest.txt").read_text()
    assert "sha256.checkpoint.afnr" in manifest and "version.numpy" in manifest and "seed = 1" in manifest


def test_cli_adapt_and_sample(pretrained, tmp_path):
    ckpt = str(pretrained / "checkpoint.afnr")
    fp = load_checkpoint(ckpt).fingerprint()
    assert main(["adapt", "--out", str(tmp_path / "ad"), *FAST, "--set", f"checkpoint={ckpt}"]) == 0
    manifest = (tmp_path / "ad" / "manifest.txt").read_text()
    assert f"backbone_sha256_after = {fp.hex()}" in manifest
    adapter = tmp_path / "ad" / "mixture-b.afnr"
    assert adapter.exists()

    runs = []
    for name, extra in (("s1", [f"adapter={adapter}"]), ("s2", [f"adapter={adapter}"]), ("s0", [])):
        sets = [a for x in extra for a in ("--set", x)]
        assert main(["sample", "--out", str(tmp_path / name), *FAST, "--set", f"checkpoint={ckpt}",
                     "--set", "count=6", *sets]) == 0
        runs.append((tmp_path / name / "points.csv").read_bytes())
    assert runs[0] == runs[1]
    assert (tmp_path / "s0" / "grid.ppm").read_bytes().startswith(b"P6")


def test_cli_sample_fresh_adapter_matches_none(pretrained, tmp_path):
    from affinekit.registry import create_adapter_set, save_adapter

    ckpt = pretrained / "checkpoint.afnr"
    fresh = tmp_path / "fresh.afnr"
    save_adapter(create_adapter_set(load_checkpoint(ckpt), "fresh", 4), fresh)
    for name, sets in (("a", []), ("b", ["--set", f"adapter={fresh}"])):
        assert main(["sample", "--out", str(tmp_path / name), *FAST, "--set", f"checkpoint={ckpt}",
                     "--set", "count=4", *sets]) == 0
    assert (tmp_path / "a" / "points.csv").read_bytes() == (tmp_path / "b" / "points.csv").read_bytes()


def test_cli_sample_zero_count(pretrained, tmp_path):
    assert main(["sample", "--out", str(tmp_path), "--set", f"checkpoint={pretrained / 'checkpoint.afnr'}",
                 "--set", "count=0"]) == 0
    assert "outputs = 0" in (tmp_path / "manifest.txt").read_text()


def test_cli_count_and_errors(tmp_path, capsys):
    arch = tmp_path / "arch.cfg"
    arch.write_text(ArchConfig("dit", 16, 2, 2, 2, 1, 4, 4, 3).to_text())
    assert main(["count", "--out", str(tmp_path / "c"), "--set", f"arch={arch}", "--set", "d_rank=2"]) == 0
    lines = (tmp_path / "c" / "count.csv").read_text().splitlines()
    assert len(lines) == 1 + 14 + 1 and lines[-1].startswith("TOTAL")
    arch.write_text("kind = dit\nhidden 16\n")
    assert main(["count", "--out", str(tmp_path / "d"), "--set", f"arch={arch}"]) == 2
    assert "arch.cfg:2:" in capsys.readouterr().err
    assert main(["adapt", "--out", str(tmp_path / "e")]) == 2
