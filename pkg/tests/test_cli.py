import json
import subprocess
import sys

import numpy as np
import pytest

from sarmoe import (
    ExperimentConfig,
    compute_descriptors,
    read_labels,
    write_labels,
    write_raster,
)
from sarmoe.cli import main

from conftest import make_labels, make_raster

SUBCOMMANDS = ["synth", "descriptors", "train", "eval", "agreement", "activations"]


def run_cli(args):
    return main(args)


class TestSynth:
    def test_counts_per_domain(self, tmp_path):
        out = tmp_path / "data"
        code = run_cli(
            ["synth", "--looks", "1", "--looks", "16", "--count", "4", "--out", str(out), "--seed", "7"]
        )
        assert code == 0
        for tag in ("L1", "L16"):
            assert len(list((out / tag).glob("*.srf"))) == 4
            assert len(list((out / tag).glob("*.slm"))) == 4

    def test_same_seed_twice_is_identical(self, tmp_path):
        for name in ("a", "b"):
            run_cli(["synth", "--count", "2", "--width", "16", "--height", "16",
                     "--out", str(tmp_path / name), "--seed", "3"])
        for rel in sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.*")):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_labels_stay_below_class_count(self, tmp_path):
        out = tmp_path / "data"
        run_cli(["synth", "--count", "3", "--width", "16", "--height", "16",
                 "--out", str(out), "--seed", "1"])
        for path in out.rglob("*.slm"):
            labels = read_labels(path)
            assert labels.labels.max() < labels.num_classes


class TestDescriptors:
    def test_constant_images_report_degenerate_rows(self, tmp_path):
        for i in range(3):
            write_raster(make_raster(np.full((16, 16), 5.0)), tmp_path / f"c{i}.srf")
        out = tmp_path / "desc.csv"
        code = run_cli(["descriptors", str(tmp_path / "*.srf"), "--out", str(out)])
        assert code == 0
        rows = out.read_text().strip().splitlines()[1:]
        assert len(rows) == 3
        for row in rows:
            _, h, enl, r, flags = row.rsplit(",", 4)
            assert float(h) == 0.0 and float(enl) == 1e12 and float(r) == 0.0
            assert "degenerate_histogram" in flags and "homogeneous_image" in flags

    def test_single_image_matches_library(self, tmp_path, rng):
        # float32-representable values, so the SRF1 round trip is exact
        img = make_raster(rng.uniform(0, 4, size=(16, 16)).astype(np.float32))
        write_raster(img, tmp_path / "one.srf")
        out = tmp_path / "one.csv"
        run_cli(["descriptors", str(tmp_path / "one.srf"), "--out", str(out)])
        row = out.read_text().strip().splitlines()[1]
        _, h, enl, r, _ = row.rsplit(",", 4)
        vec = compute_descriptors(img)
        assert float(h) == vec.h_de and float(enl) == vec.enl and float(r) == vec.r_lr

    def test_synthetic_corpus_orders_enl_by_looks(self, tmp_path):
        data = tmp_path / "data"
        run_cli(["synth", "--looks", "1", "--looks", "16", "--count", "20",
                 "--out", str(data), "--seed", "11"])
        out = tmp_path / "desc.csv"
        code = run_cli(["descriptors", str(data / "*" / "*.srf"), "--out", str(out)])
        assert code == 0
        groups = {"L1": [], "L16": []}
        for row in out.read_text().strip().splitlines()[1:]:
            path, _, enl, _, _ = row.rsplit(",", 4)
            tag = "L1" if "/L1/" in path else "L16"
            groups[tag].append(float(enl))
        assert len(groups["L1"]) == len(groups["L16"]) == 20
        assert np.mean(groups["L16"]) > np.mean(groups["L1"])

    def test_smk_threads_does_not_change_output(self, tmp_path, rng, monkeypatch):
        for i in range(4):
            values = rng.uniform(0, 4, size=(16, 16)).astype(np.float32)
            write_raster(make_raster(values), tmp_path / f"r{i}.srf")
        serial = tmp_path / "serial.csv"
        run_cli(["descriptors", str(tmp_path / "*.srf"), "--out", str(serial)])
        monkeypatch.setenv("SMK_THREADS", "4")
        threaded = tmp_path / "threaded.csv"
        run_cli(["descriptors", str(tmp_path / "*.srf"), "--out", str(threaded)])
        assert serial.read_text() == threaded.read_text()

    def test_unreadable_file_listed_with_nonzero_exit(self, tmp_path, capsys):
        write_raster(make_raster(np.ones((8, 8))), tmp_path / "good.srf")
        (tmp_path / "bad.srf").write_bytes(b"broken")
        out = tmp_path / "d.csv"
        code = run_cli(["descriptors", str(tmp_path / "*.srf"), "--out", str(out)])
        assert code == 2
        captured = capsys.readouterr()
        assert "bad.srf" in captured.err
        assert len(out.read_text().strip().splitlines()) == 2  # header + good row


class TestHelpAndConfig:
    @pytest.mark.parametrize("command", SUBCOMMANDS)
    def test_help_exits_zero(self, command):
        proc = subprocess.run(
            [sys.executable, "-m", "sarmoe.cli", command, "--help"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert command in proc.stdout

    def test_unknown_flag_exits_nonzero_without_side_effects(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "sarmoe.cli", "synth", "--bogus", "--out", str(tmp_path / "x")],
            capture_output=True,
            text=True,
        )
        assert proc.returncode != 0
        assert not (tmp_path / "x").exists()

    def test_dump_config_round_trips(self, tmp_path, capsys):
        code = run_cli(["train", "--dump-config", "--seed", "123"])
        assert code == 0
        dumped = capsys.readouterr().out
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(dumped)
        code = run_cli(["train", "--dump-config", "--config", str(cfg_path)])
        assert code == 0
        assert capsys.readouterr().out == dumped
        assert ExperimentConfig.from_file(cfg_path).optimizer.seed == 123

    def test_contract_violation_exits_two(self, tmp_path, capsys):
        code = run_cli(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")])
        assert code == 2
        assert capsys.readouterr().err


class TestTrainEvalPipeline:
    def test_train_then_eval_beats_majority_baseline(self, tmp_path):
        from conftest import TOY_ARCH
        from sarmoe import ExperimentConfig, ModelConfig, OptimizerConfig

        data = tmp_path / "data"
        assert run_cli(["synth", "--looks", "1", "--looks", "16", "--count", "20",
                        "--out", str(data), "--seed", "1"]) == 0
        cfg = ExperimentConfig(
            model=ModelConfig(**TOY_ARCH),
            optimizer=OptimizerConfig(epochs=30, batch_size=1, seed=1),
        )
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(cfg.to_json())
        run_dir = tmp_path / "run"
        assert run_cli(["train", "--config", str(cfg_path), "--data", str(data),
                        "--out", str(run_dir)]) == 0

        manifest = {
            "name": "train-set sanity",
            "abbreviation": "T2T",
            "source_dir": str(data),
            "target_dir": str(data),
            "num_classes": 2,
            "class_names": ["low", "high"],
            "ignore_value": None,
        }
        manifest_path = tmp_path / "manifest.json"
        manifest_path.write_text(json.dumps(manifest))
        eval_dir = tmp_path / "eval"
        assert run_cli(["eval", "--manifest", str(manifest_path),
                        "--checkpoint", str(run_dir / "checkpoint.smk"),
                        "--out", str(eval_dir)]) == 0
        report = json.loads((eval_dir / "report.json").read_text())

        # majority-class baseline computed directly from the emitted labels
        counts = np.zeros(2, dtype=np.int64)
        truths = [read_labels(p).labels for p in sorted(data.rglob("*.slm"))]
        for labels in truths:
            counts += np.bincount(labels.ravel(), minlength=2)
        majority = int(counts.argmax())
        inter = np.zeros(2)
        union = np.zeros(2)
        for labels in truths:
            for c in range(2):
                t = labels == c
                p = np.full_like(labels, majority) == c
                inter[c] += np.logical_and(t, p).sum()
                union[c] += np.logical_or(t, p).sum()
        baseline = float((inter[union > 0] / union[union > 0]).mean())
        assert report["miou"] > baseline

        # activation tallies on a single image: counts sum to tokens x layers
        one = tmp_path / "one"
        one.mkdir()
        src = sorted((data / "L1").glob("*.srf"))[0]
        (one / "img.srf").write_bytes(src.read_bytes())
        (one / "img.slm").write_bytes(src.with_suffix(".slm").read_bytes())
        act_dir = tmp_path / "act"
        assert run_cli(["activations", "--checkpoint", str(run_dir / "checkpoint.smk"),
                        "--data", str(one), "--out", str(act_dir)]) == 0
        rows = (act_dir / "activations_all.csv").read_text().strip().splitlines()[1:]
        total = sum(int(r.split(",")[2]) for r in rows)
        tokens = (64 // 8) * (64 // 8)
        assert total == tokens * 2  # two MoE blocks, k=1

    def test_numerical_failure_exits_three(self, tmp_path, capsys):
        from sarmoe import init_toy_model, save_checkpoint, substream

        data = tmp_path / "data"
        run_cli(["synth", "--count", "1", "--width", "16", "--height", "16",
                 "--out", str(data), "--seed", "2"])
        model = init_toy_model(substream(0, "init"), channels=8, hidden=8,
                               num_experts=2, top_k=1, num_blocks=1,
                               patch_size=8, num_classes=2)
        model.blocks[0].router.weight[...] = np.nan
        ckpt = tmp_path / "nan.smk"
        save_checkpoint(model, ckpt)
        manifest_path = tmp_path / "m.json"
        manifest_path.write_text(json.dumps({
            "name": "nan", "abbreviation": "N", "source_dir": str(data),
            "target_dir": str(data / "L1"), "num_classes": 2,
            "class_names": ["a", "b"], "ignore_value": None,
        }))
        code = run_cli(["eval", "--manifest", str(manifest_path),
                        "--checkpoint", str(ckpt), "--out", str(tmp_path / "o")])
        assert code == 3
        assert "numerical" in capsys.readouterr().err


class TestAgreementCommand:
    def test_duplicated_prediction_dir_scores_one(self, tmp_path, rng, capsys):
        preds = tmp_path / "preds"
        preds.mkdir()
        for i in range(3):
            write_labels(
                make_labels(rng.integers(0, 3, size=(8, 8)), num_classes=3),
                preds / f"img_{i}.slm",
            )
        out = tmp_path / "agree"
        code = run_cli(["agreement", str(preds), str(preds), "--out", str(out)])
        assert code == 0
        report = json.loads((out / "agreement.json").read_text())
        assert report["mean_agreement"] == 1.0
        assert len(report["per_image"]) == 3

    def test_mismatched_stems_exit_two(self, tmp_path, rng, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir(), b.mkdir()
        write_labels(make_labels([[0]], num_classes=2), a / "x.slm")
        write_labels(make_labels([[0]], num_classes=2), b / "y.slm")
        assert run_cli(["agreement", str(a), str(b), "--out", str(tmp_path / "o")]) == 2
