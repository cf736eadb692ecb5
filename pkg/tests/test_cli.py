import csv
import math

import numpy as np
import pytest

from attnfiqa.cli import main
from attnfiqa.evaluation import EmbeddingSet, Pair, edc_curve
from attnfiqa.heatmap import colorize
from attnfiqa.model_io import (ModelConfig, init_random_weights, preprocess, read_ppm,
                               save_config, save_weights, write_id_list, write_ppm,
                               write_tensors)
from attnfiqa.scoring import quality
from attnfiqa.vit import forward_with_capture

from oracles import brute_edc, random_fixture


@pytest.fixture
def model(tmp_path, toy_cfg, toy_weights):
    save_config(toy_cfg, tmp_path / "model.cfg")
    save_weights(toy_weights, toy_cfg, tmp_path / "model.afqw")
    return tmp_path, toy_cfg, toy_weights


def add_images(root, rng, names, size=(8, 8)):
    (root / "img").mkdir(exist_ok=True)
    rasters = {}
    for name in names:
        raster = rng.integers(0, 256, (*size, 3), dtype=np.uint8)
        write_ppm(root / "img" / name, raster)
        rasters[name] = raster
    write_id_list(root / "list.txt", [f"img/{n}" for n in names])
    return rasters


def model_argv(root, command, *extra):
    return [command, "--config", str(root / "model.cfg"), "--weights", str(root / "model.afqw"),
            "--images", str(root / "list.txt"), *extra]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestScore:
    def test_matches_library(self, model, rng):
        root, cfg, ws = model
        rasters = add_images(root, rng, ["a.ppm", "b.ppm", "c.ppm"])
        assert main(model_argv(root, "score", "--out", str(root / "s.csv"))) == 0
        rows = read_csv(root / "s.csv")
        assert [r["path"] for r in rows] == ["img/a.ppm", "img/b.ppm", "img/c.ppm"]
        for row, raster in zip(rows, rasters.values()):
            _, cap = forward_with_capture(preprocess(raster, cfg), ws, cfg)
            assert float(row["raw_score"]) == quality(cap).value
            assert (row["strategy"], row["metric"], row["block"]) == ("concat", "mean", "2")
        assert "command=score" in (root / "s.csv.manifest").read_text()

    def test_workers_identical(self, model, rng):
        root, *_ = model
        add_images(root, rng, [f"{i}.ppm" for i in range(5)])
        main(model_argv(root, "score", "--out", str(root / "one.csv")))
        main(model_argv(root, "score", "--workers", "3", "--out", str(root / "three.csv")))
        assert (root / "one.csv").read_bytes() == (root / "three.csv").read_bytes()

    def test_options(self, model, rng):
        root, cfg, ws = model
        rasters = add_images(root, rng, ["a.ppm"])
        argv = model_argv(root, "score", "--block", "1", "--strategy", "head_3",
                          "--metric", "median", "--out", str(root / "s.csv"))
        assert main(argv) == 0
        (row,) = read_csv(root / "s.csv")
        _, cap = forward_with_capture(preprocess(rasters["a.ppm"], cfg), ws, cfg, 1)
        assert float(row["raw_score"]) == quality(cap, "head_3", "median").value

    def test_empty_list(self, model):
        root, *_ = model
        write_id_list(root / "list.txt", [])
        assert main(model_argv(root, "score", "--out", str(root / "s.csv"))) == 0
        assert (root / "s.csv").read_text() == "path,raw_score,strategy,metric,block\n"

    @pytest.mark.parametrize("extra", [["--metric", "mode"], ["--strategy", "heads"],
                                       ["--workers", "0"]])
    def test_usage_errors(self, model, extra, capsys):
        root, *_ = model
        write_id_list(root / "list.txt", [])
        with pytest.raises(SystemExit) as exc:
            main(model_argv(root, "score", *extra, "--out", str(root / "s.csv")))
        assert exc.value.code == 2

    def test_bad_image_reported(self, model, rng, capsys):
        root, *_ = model
        add_images(root, rng, ["good.ppm"])
        (root / "img" / "bad.ppm").write_bytes(b"P6\n8 8\n255\n\x00\x01")
        write_ppm(root / "img" / "big.ppm", np.zeros((16, 16, 3), np.uint8))
        write_id_list(root / "list.txt", ["img/good.ppm", "img/bad.ppm", "img/big.ppm"])
        assert main(model_argv(root, "score", "--out", str(root / "s.csv"))) == 1
        err = capsys.readouterr().err
        assert "img/bad.ppm" in err and "img/big.ppm" in err
        assert [r["path"] for r in read_csv(root / "s.csv")] == ["img/good.ppm"]

    def test_block_out_of_range(self, model, rng, capsys):
        root, *_ = model
        add_images(root, rng, ["a.ppm"])
        assert main(model_argv(root, "score", "--block", "3", "--out", str(root / "s.csv"))) == 1
        assert "--block" in capsys.readouterr().err

    def test_weights_mismatch(self, model, rng, capsys):
        root, cfg, _ = model
        other = ModelConfig(image_height=8, image_width=8, patch_size=2, embed_dim=12,
                            num_blocks=2, num_heads=4, mlp_ratio=2.0)
        save_weights(init_random_weights(other), other, root / "model.afqw")
        add_images(root, rng, ["a.ppm"])
        assert main(model_argv(root, "score", "--out", str(root / "s.csv"))) == 1
        assert "patch_embed.weight" in capsys.readouterr().err


class TestAblate:
    def test_rows(self, tmp_path, rng):
        cfg = ModelConfig(image_height=8, image_width=8, patch_size=4, embed_dim=8,
                          num_blocks=1, num_heads=2, mlp_ratio=2.0)
        save_config(cfg, tmp_path / "model.cfg")
        save_weights(init_random_weights(cfg, seed=3, scale=0.3), cfg, tmp_path / "model.afqw")
        add_images(tmp_path, rng, ["a.ppm", "b.ppm"])
        assert main(model_argv(tmp_path, "ablate", "--out", str(tmp_path / "ab.csv"))) == 0
        rows = read_csv(tmp_path / "ab.csv")
        assert len(rows) == 32
        a = {(r["strategy"], r["metric"]): r for r in rows if r["path"] == "img/a.ppm"}
        assert len(a) == 16
        assert {s for s, _ in a} == {"concat", "head_1", "head_2", "avg_of_heads"}
        assert float(a["concat", "mean"]["raw_score"]) == pytest.approx(
            float(a["avg_of_heads", "mean"]["raw_score"]), abs=1e-6)
        assert all(r["flag"] == "" for r in rows)
        assert (tmp_path / "ab.csv.manifest").exists()

    def test_degenerate_flagged(self, tmp_path, rng):
        cfg = ModelConfig(image_height=4, image_width=4, patch_size=4, embed_dim=8,
                          num_blocks=1, num_heads=2, mlp_ratio=2.0)
        save_config(cfg, tmp_path / "model.cfg")
        save_weights(init_random_weights(cfg, seed=3, scale=0.3), cfg, tmp_path / "model.afqw")
        add_images(tmp_path, rng, ["a.ppm"], size=(4, 4))
        # a single patch gives one attention value per head: zero dispersion within a head
        assert main(model_argv(tmp_path, "ablate", "--out", str(tmp_path / "ab.csv"))) == 0
        rows = {r["strategy"]: r for r in read_csv(tmp_path / "ab.csv") if r["metric"] == "inv_std"}
        for strategy in ("head_1", "head_2", "avg_of_heads"):
            assert rows[strategy]["flag"] == "degenerate_dispersion"
            assert rows[strategy]["raw_score"] == "nan"
        # the two heads differ, so the concatenated vector still has spread
        assert rows["concat"]["flag"] == "" and math.isfinite(float(rows["concat"]["raw_score"]))

    def test_empty(self, model):
        root, *_ = model
        write_id_list(root / "list.txt", [])
        assert main(model_argv(root, "ablate", "--out", str(root / "ab.csv"))) == 0
        assert (root / "ab.csv").read_text().strip() == \
            "path,raw_score,strategy,metric,block,flag"


def palette_position(raster):
    """Invert the colour map by nearest match against a fine table."""
    table = colorize(np.linspace(0, 1, 1001)).reshape(-1, 3).astype(float)
    px = raster.reshape(-1, 3).astype(float)
    dist = ((px[:, None, :] - table[None, :, :]) ** 2).sum(-1)
    return dist.argmin(1) / 1000


class TestHeatmap:
    def test_outputs(self, model, rng):
        root, cfg, ws = model
        rasters = add_images(root, rng, ["a.ppm", "b.ppm"])
        out = root / "maps"
        assert main(model_argv(root, "heatmap", "--alpha", "0.25", "--out-dir", str(out))) == 0
        rows = read_csv(out / "scores.csv")
        assert [r["heatmap"] for r in rows] == ["0000_a_heatmap.ppm", "0001_b_heatmap.ppm"]
        assert sorted(float(r["normalized_score"]) for r in rows) == [0.0, 1.0]
        for row, raster in zip(rows, rasters.values()):
            heat = read_ppm(out / row["heatmap"])
            over = read_ppm(out / row["overlay"])
            assert heat.shape == over.shape == (8, 8, 3)
            expect = np.floor(0.75 * raster + 0.25 * heat.astype(float) + 0.5)
            assert np.abs(over.astype(float) - expect).max() <= 1
        assert "command=heatmap" in (out / "run.manifest").read_text()

    def test_lower_score_renders_bluer(self, model, rng):
        root, *_ = model
        add_images(root, rng, ["a.ppm", "b.ppm", "c.ppm"])
        out = root / "maps"
        assert main(model_argv(root, "heatmap", "--out-dir", str(out))) == 0
        rows = read_csv(out / "scores.csv")
        mean_pos = [palette_position(read_ppm(out / r["heatmap"])).mean() for r in rows]
        raw = [float(r["raw_score"]) for r in rows]
        assert np.argsort(raw).tolist() == np.argsort(mean_pos).tolist()

    def test_empty(self, model):
        root, *_ = model
        write_id_list(root / "list.txt", [])
        assert main(model_argv(root, "heatmap", "--out-dir", str(root / "maps"))) == 0
        assert not (root / "maps").exists()

    @pytest.mark.parametrize("alpha", ["1.5", "-0.1", "x"])
    def test_bad_alpha(self, model, alpha):
        root, *_ = model
        with pytest.raises(SystemExit) as exc:
            main(model_argv(root, "heatmap", "--alpha", alpha, "--out-dir", str(root / "m")))
        assert exc.value.code == 2


def write_edc_inputs(root, emb, pairs, qualities):
    ids = list(emb.ids)
    write_tensors(root / "emb.afqw", {"embeddings": np.array([emb.vector(i) for i in ids])})
    write_id_list(root / "ids.txt", ids)
    with open(root / "pairs.csv", "w") as fh:
        fh.write("id_a,id_b,label\n")
        for p in pairs:
            fh.write(f"{p.id_a},{p.id_b},{'genuine' if p.genuine else 'impostor'}\n")
    with open(root / "q.csv", "w") as fh:
        fh.write("path,raw_score,strategy,metric,block\n")
        for sid, q in qualities.items():
            fh.write(f"{sid},{q!r},concat,mean,12\n")


def edc_argv(root, *extra):
    return ["edc", "--embeddings", str(root / "emb.afqw"), "--ids", str(root / "ids.txt"),
            "--pairs", str(root / "pairs.csv"), "--qualities", str(root / "q.csv"), *extra]


class TestEdc:
    def fixture(self, root):
        rng = np.random.default_rng(77)
        emb, pairs, q = random_fixture(rng, max_samples=12, max_pairs=40)
        # stored as float32 in the container; score the rounded vectors
        emb = EmbeddingSet(list(emb.ids), [emb.vector(i).astype(np.float32) for i in emb.ids])
        write_edc_inputs(root, emb, pairs, q)
        return emb, pairs, q

    def test_matches_oracle(self, tmp_path, capsys):
        emb, pairs, q = self.fixture(tmp_path)
        argv = edc_argv(tmp_path, "--target-fmr", "0.2", "--grid", "0:0.5:0.05",
                        "--out", str(tmp_path / "c.csv"))
        assert main(argv) == 0
        rows = read_csv(tmp_path / "c.csv")
        grid = [round(i * 0.05, 12) for i in range(11)]
        t, oracle = brute_edc(emb, pairs, q, 0.2, grid)
        assert [float(r["r"]) for r in rows] == grid
        assert [float(r["fnmr"]) for r in rows] == oracle
        summary = dict(line.split("=") for line in
                       (tmp_path / "c.csv.summary").read_text().splitlines())
        assert float(summary["threshold"]) == pytest.approx(t, abs=1e-12)
        assert float(summary["auc_x1e3"]) == pytest.approx(1e3 * float(summary["auc"]))
        assert "pauc_0.3" in summary
        assert "auc=" in capsys.readouterr().out

    def test_deterministic(self, tmp_path):
        self.fixture(tmp_path)
        main(edc_argv(tmp_path, "--out", str(tmp_path / "a.csv")))
        main(edc_argv(tmp_path, "--out", str(tmp_path / "b.csv")))
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.csv.summary").read_bytes() == \
            (tmp_path / "b.csv.summary").read_bytes()
        assert (tmp_path / "a.csv.manifest").exists()

    def test_scientific_target(self, tmp_path):
        emb, pairs, q = self.fixture(tmp_path)
        main(edc_argv(tmp_path, "--target-fmr", "1e-3", "--out", str(tmp_path / "c.csv")))
        summary = (tmp_path / "c.csv.summary").read_text()
        assert "target_fmr=0.001\n" in summary
        curve = edc_curve(emb, pairs, q, 0.001)
        assert [float(r["fnmr"]) for r in read_csv(tmp_path / "c.csv")] == curve.fnmr.tolist()

    def test_unknown_id(self, tmp_path, capsys):
        self.fixture(tmp_path)
        with open(tmp_path / "pairs.csv", "a") as fh:
            fh.write("s00,ghost,impostor\n")
        assert main(edc_argv(tmp_path, "--out", str(tmp_path / "c.csv"))) == 1
        assert "ghost" in capsys.readouterr().err

    def test_missing_quality(self, tmp_path, capsys):
        emb, pairs, q = self.fixture(tmp_path)
        used = pairs[0].id_a
        del q[used]
        write_edc_inputs(tmp_path, emb, pairs, q)
        assert main(edc_argv(tmp_path, "--out", str(tmp_path / "c.csv"))) == 1
        assert used in capsys.readouterr().err

    def test_stem_key(self, tmp_path):
        emb, pairs, q = self.fixture(tmp_path)
        write_edc_inputs(tmp_path, emb, pairs, {f"faces/{k}.ppm": v for k, v in q.items()})
        assert main(edc_argv(tmp_path, "--key", "stem", "--out", str(tmp_path / "c.csv"))) == 0

    @pytest.mark.parametrize("extra", [["--target-fmr", "0"], ["--target-fmr", "1.5"],
                                       ["--grid", "0.1,0.2"], ["--grid", "0,0.3,0.2"]])
    def test_usage_errors(self, tmp_path, extra):
        self.fixture(tmp_path)
        with pytest.raises(SystemExit) as exc:
            main(edc_argv(tmp_path, *extra, "--out", str(tmp_path / "c.csv")))
        assert exc.value.code == 2


class TestGroupStats:
    def write(self, root, labels):
        with open(root / "s.csv", "w") as fh:
            fh.write("path,raw_score,strategy,metric,block\n")
            for i, v in enumerate([1.0, 2.0, 3.0, 4.0, 10.0, 12.0]):
                fh.write(f"img{i}.ppm,{v},concat,mean,12\n")
        with open(root / "l.csv", "w") as fh:
            fh.write("path,label\n")
            for i, label in labels:
                fh.write(f"img{i}.ppm,{label}\n")

    def test_summary(self, tmp_path):
        self.write(tmp_path, [(i, "Q10" if i >= 4 else "Q2") for i in range(6)])
        argv = ["group-stats", "--scores", str(tmp_path / "s.csv"),
                "--labels", str(tmp_path / "l.csv"), "--out", str(tmp_path / "g.csv")]
        assert main(argv) == 0
        rows = read_csv(tmp_path / "g.csv")
        assert [r["group"] for r in rows] == ["Q2", "Q10"]
        assert float(rows[0]["mean"]) == 2.5 and float(rows[1]["median"]) == 11
        assert (rows[0]["count"], rows[0]["q1"], rows[0]["q3"]) == ("4", "1.75", "3.25")
        assert (tmp_path / "g.csv.manifest").exists()

    def test_unmatched(self, tmp_path, capsys):
        self.write(tmp_path, [(i, "A") for i in range(5)])
        argv = ["group-stats", "--scores", str(tmp_path / "s.csv"),
                "--labels", str(tmp_path / "l.csv"), "--out", str(tmp_path / "g.csv")]
        assert main(argv) == 1
        assert "img5.ppm" in capsys.readouterr().err


def test_missing_subcommand():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_missing_file(tmp_path, capsys):
    argv = ["group-stats", "--scores", str(tmp_path / "nope.csv"),
            "--labels", str(tmp_path / "l.csv"), "--out", str(tmp_path / "g.csv")]
    assert main(argv) == 1
    assert "nope.csv" in capsys.readouterr().err
