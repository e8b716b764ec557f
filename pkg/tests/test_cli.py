import csv
import json

import numpy as np
import pytest

from uagan.cli import load_config, main
from uagan.metrics import read_metrics_csv

TINY_INI = """\
[phantom]
image_size = 32
brain_radius_range = [10, 14]
tumor_radius_range = [2.5, 4.0]
edema_width_range = [1.0, 2.0]
slices_per_patient = 4

[unet]
levels = 2
base_channels = 4
d_base_channels = 4
d_layers = 2

[train]
epochs = 1
batch_size = 4

[run]
train_patients = 6
test_patients = 3
"""


def files_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = root / "tiny.ini"
    ini.write_text(TINY_INI)
    assert main(["gen-data", "--config", str(ini), "--seed", "3", "--out", str(root / "data")]) == 0
    return root, ini


@pytest.fixture(scope="module")
def uagan_run(env):
    root, ini = env
    run = root / "run_uagan"
    assert main(["train", "--config", str(ini), "--data", str(root / "data"), "--out", str(run)]) == 0
    return run


class TestGenData:
    def test_layout(self, env):
        root, _ = env
        for split in ("train", "test"):
            m = json.loads((root / "data" / split / "manifest.json").read_text())
            assert len(m["patients"]) == (6 if split == "train" else 3)
        assert (root / "data" / "dataset.json").is_file()

    def test_byte_identical_rerun(self, env, tmp_path):
        root, ini = env
        assert main(["gen-data", "--config", str(ini), "--seed", "3", "--out", str(tmp_path / "d")]) == 0
        assert files_bytes(tmp_path / "d") == files_bytes(root / "data")

    def test_zero_patients(self, tmp_path, capsys):
        assert main(["gen-data", "--patients", "0", "--out", str(tmp_path / "d")]) == 1
        assert "--patients" in capsys.readouterr().err
        assert not (tmp_path / "d").exists()

    def test_bad_phantom_value(self, tmp_path):
        assert main(["gen-data", "--image-size", "0", "--out", str(tmp_path / "d")]) == 1


class TestConfig:
    def test_ini_values(self, env):
        rc = load_config(env[1])
        assert rc.phantom.image_size == 32 and rc.phantom.brain_radius_range == (10, 14)
        assert rc.train.unet.base_channels == 4 and rc.train.epochs == 1 and rc.train_patients == 6

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[train]\nepochz = 3\n")
        assert main(["gen-data", "--config", str(p), "--out", str(tmp_path / "d")]) == 1

    def test_flags_override_config(self, env, tmp_path):
        root, ini = env
        assert main(["gen-data", "--config", str(ini), "--patients", "3", "--test-patients", "3",
                     "--out", str(tmp_path / "d")]) == 0
        m = json.loads((tmp_path / "d" / "train" / "manifest.json").read_text())
        assert len(m["patients"]) == 3


class TestTrain:
    def test_manifest(self, uagan_run):
        m = json.loads((uagan_run / "manifest.json").read_text())
        assert m["variant"]["name"] == "uagan" and m["variant"]["backward_phase"]
        assert m["checkpoints"] == ["checkpoints/final.pt"]
        assert (uagan_run / "logs" / "loss_log.jsonl").stat().st_size > 0
        assert m["parameters"]["G.total"] > 0

    def test_fuse_ablation_manifest(self, env, tmp_path):
        root, ini = env
        assert main(["train", "--config", str(ini), "--data", str(root / "data"), "--variant", "UAGAN-fuse",
                     "--out", str(tmp_path / "r")]) == 0
        m = json.loads((tmp_path / "r" / "manifest.json").read_text())
        assert m["variant"]["fusion_enabled"] is False and m["variant"]["attention_enabled"] is False

    def test_unknown_variant(self, env, tmp_path, capsys):
        root, ini = env
        assert main(["train", "--config", str(ini), "--data", str(root / "data"), "--variant", "bogus",
                     "--out", str(tmp_path / "r")]) == 1
        assert "uagan-atten" in capsys.readouterr().err
        assert not (tmp_path / "r").exists()

    def test_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 1

    def test_runs_dir_env(self, env, tmp_path, monkeypatch):
        root, ini = env
        monkeypatch.setenv("UAGAN_RUNS_DIR", str(tmp_path / "runs"))
        assert main(["train", "--config", str(ini), "--data", str(root / "data"), "--variant", "joint",
                     "--seed", "5"]) == 0
        assert (tmp_path / "runs" / "joint_s5" / "checkpoints" / "final.pt").is_file()

    def test_rerun_from_manifest(self, env, uagan_run, tmp_path):
        root, _ = env
        assert main(["train", "--config", str(uagan_run / "manifest.json"), "--out", str(tmp_path / "again")]) == 0
        a = (uagan_run / "logs" / "loss_log.jsonl").read_text()
        b = (tmp_path / "again" / "logs" / "loss_log.jsonl").read_text()
        assert a == b


class TestEval:
    def test_oracle(self, env, tmp_path):
        root, _ = env
        assert main(["eval", "--oracle", "--data", str(root / "data"), "--out", str(tmp_path / "o")]) == 0
        rows = read_metrics_csv(tmp_path / "o" / "metrics.csv")
        assert rows and all(r["dice"] == 1.0 and r["assd"] == 0.0 for r in rows)

    def test_run(self, env, uagan_run):
        root, _ = env
        assert main(["eval", "--checkpoint", str(uagan_run), "--data", str(root / "data")]) == 0
        rep = uagan_run / "reports"
        for name in ("metrics.csv", "dice_per_patient.csv", "summary.txt", "summary.json"):
            assert (rep / name).is_file()
        rows = read_metrics_csv(rep / "metrics.csv")
        assert len(rows) == 3
        summary = json.loads((rep / "summary.json").read_text())
        assert abs(summary["aggregate"]["overall"]["dice"]["mean"] - np.mean([r["dice"] for r in rows])) < 1e-9

    def test_missing_checkpoint(self, env, tmp_path):
        root, _ = env
        assert main(["eval", "--checkpoint", str(tmp_path / "none.pt"), "--data", str(root / "data")]) != 0

    def test_image_size_mismatch(self, env, uagan_run, tmp_path):
        assert main(["gen-data", "--patients", "3", "--test-patients", "3", "--slices", "2",
                     "--out", str(tmp_path / "d64")]) == 0
        assert main(["eval", "--checkpoint", str(uagan_run), "--data", str(tmp_path / "d64"),
                     "--out", str(tmp_path / "o")]) == 1


class TestVisual:
    def test_translate(self, env, uagan_run, tmp_path):
        root, _ = env
        out = tmp_path / "t"
        assert main(["translate", "--checkpoint", str(uagan_run), "--data", str(root / "data"),
                     "--target", "B", "-n", "2", "--out", str(out)]) == 0
        names = sorted(p.name for p in out.iterdir())
        assert sum(n.endswith("_translated.pgm") for n in names) == 2
        assert sum(n.endswith("_recovered.uag") for n in names) == 2

    def test_translate_bad_target(self, env, uagan_run, tmp_path):
        root, _ = env
        assert main(["translate", "--checkpoint", str(uagan_run), "--data", str(root / "data"),
                     "--target", "Z", "--out", str(tmp_path / "t")]) == 1

    def test_translate_seg_only(self, env, tmp_path, capsys):
        root, ini = env
        run = tmp_path / "j"
        assert main(["train", "--config", str(ini), "--data", str(root / "data"), "--variant", "joint",
                     "--out", str(run)]) == 0
        assert main(["translate", "--checkpoint", str(run), "--data", str(root / "data"),
                     "--target", "A", "--out", str(tmp_path / "t")]) == 1
        assert "no translation stream" in capsys.readouterr().err

    def test_heatmap(self, env, uagan_run, tmp_path):
        root, _ = env
        out = tmp_path / "h"
        assert main(["heatmap", "--checkpoint", str(uagan_run), "--data", str(root / "data"),
                     "-n", "1", "--out", str(out)]) == 0
        names = [p.name for p in out.iterdir()]
        assert any("attn" in n for n in names) and any("seg_enc" in n for n in names)
        head = (out / next(n for n in names if "attn" in n)).read_bytes()
        assert head.startswith(b"P5")


class TestAblate:
    def test_sweep_and_resume(self, env, tmp_path, capsys):
        root, ini = env
        sweep = tmp_path / "sweep"
        argv = ["ablate", "--config", str(ini), "--data", str(root / "data"), "--seeds", "2",
                "--variants", "uagan,joint", "--out", str(sweep)]
        assert main(argv) == 0
        with open(sweep / "ablation.csv") as f:
            rows = list(csv.DictReader(f))
        assert {r["method"] for r in rows} == {"uagan", "joint"}
        overall = next(r for r in rows if r["method"] == "uagan" and r["modality"] == "overall")
        per_run = []
        for seed in (0, 1):
            per_run += read_metrics_csv(sweep / f"uagan_s{seed}" / "reports" / "metrics.csv")
        assert abs(float(overall["dice_mean"]) - np.mean([r["dice"] for r in per_run])) < 1e-9
        assert "Dice(%)" in (sweep / "ablation_summary.txt").read_text()

        stamp = (sweep / "uagan_s0" / "checkpoints" / "final.pt").stat().st_mtime_ns
        capsys.readouterr()
        assert main(argv) == 0
        assert (sweep / "uagan_s0" / "checkpoints" / "final.pt").stat().st_mtime_ns == stamp
