import numpy as np
import pytest

from melo.backbone import preset, save_backbone
from melo.cli import main
from melo.images import write_tensor
from melo.lora import init_adapter, save_adapter

from conftest import random_adapter


def kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


@pytest.fixture
def toy_files(tmp_path, toy_cfg, toy_weights, rng):
    save_backbone(toy_cfg, toy_weights, tmp_path / "b.melb")
    save_adapter(random_adapter(toy_cfg, 2, 4, seed=0, name="tb"), tmp_path / "tb.melo")
    save_adapter(random_adapter(toy_cfg, 4, 4, seed=1, name="blood"), tmp_path / "blood.melo")
    save_adapter(init_adapter(toy_cfg, 2, task_name="zero"), tmp_path / "zero.melo")
    for i in range(3):
        write_tensor(tmp_path / f"img{i}.t", rng.standard_normal((3, 16, 16)).astype(np.float32))
    return tmp_path


class TestCountParams:
    def test_vit_base(self, capsys):
        assert main(["count-params", "--preset", "vit-base", "--rank", "4", "--classes", "2"]) == 0
        out = kv(capsys.readouterr().out)
        assert out["lora"] == "147456"
        assert out["head"] == "1538"
        assert out["backbone"] == "85798656"
        assert float(out["trainable_fraction"].rstrip("%")) < 0.2


class TestInitAndInfer:
    def test_init_backbone(self, tmp_path, capsys):
        assert main(["init-backbone", "--preset", "vit-toy", "--seed", "1", "--out", str(tmp_path / "b.melb")]) == 0
        assert (tmp_path / "b.melb").exists()

    def test_zero_adapter_equals_head_only(self, toy_files, capsys):
        args = ["infer", "--backbone", str(toy_files / "b.melb"), "--input", str(toy_files / "img0.t")]
        main(args + ["--adapter", str(toy_files / "zero.melo")])
        with_adapter = kv(capsys.readouterr().out)
        main(args + ["--head", str(toy_files / "zero.melo")])
        head_only = kv(capsys.readouterr().out)
        assert with_adapter["logits"] == head_only["logits"]

    def test_features_without_adapter(self, toy_files, capsys):
        main(["infer", "--backbone", str(toy_files / "b.melb"), "--input", str(toy_files / "img0.t")])
        out = kv(capsys.readouterr().out)
        assert len(out["features"].split(",")) == 16

    def test_incompatible_adapter_exit_code(self, toy_files, capsys):
        big = preset("vit-toy", dim=32, mlp_dim=64)
        save_adapter(init_adapter(big, 2, task_name="big"), toy_files / "big.melo")
        code = main(["infer", "--backbone", str(toy_files / "b.melb"), "--adapter", str(toy_files / "big.melo"),
                     "--input", str(toy_files / "img0.t")])
        assert code == 1
        assert "d=32" in capsys.readouterr().err

    def test_missing_file_exit_code(self, tmp_path, capsys):
        assert main(["infer", "--backbone", str(tmp_path / "nope.melb"), "--input", "x"]) == 1

    def test_usage_error(self):
        with pytest.raises(SystemExit) as info:
            main(["infer"])
        assert info.value.code == 2


class TestTrain:
    def test_train_writes_adapter(self, toy_files, capsys):
        out_path = toy_files / "new.melo"
        code = main(["train", "--backbone", str(toy_files / "b.melb"), "--task-spec", "classes=2,samples=60,margin=2",
                     "--epochs", "2", "--out", str(out_path), "--history", str(toy_files / "h.jsonl")])
        assert code == 0
        out = kv(capsys.readouterr().out)
        assert out["trainable.lora"] == str(4 * 2 * 4 * 16)
        assert out["trainable.head"] == str(2 * 16 + 2)
        assert out_path.exists()
        assert len((toy_files / "h.jsonl").read_text().splitlines()) == 2

    def test_bad_task_spec(self, toy_files, capsys):
        code = main(["train", "--backbone", str(toy_files / "b.melb"), "--task-spec", "colour=red",
                     "--out", str(toy_files / "x.melo")])
        assert code == 1


class TestRegistry:
    def test_workload(self, toy_files, capsys, toy_cfg, toy_weights):
        (toy_files / "w.txt").write_text("tb img0.t\nblood img1.t\n# skip\ntb img2.t\n")
        report = toy_files / "r.txt"
        adapters = f"{toy_files / 'tb.melo'},{toy_files / 'blood.melo'}"
        assert main(["registry", "--backbone", str(toy_files / "b.melb"), "--adapters", adapters,
                     "--workload", str(toy_files / "w.txt"), "--report", str(report)]) == 0
        out = kv(report.read_text())
        assert out["switches"] == "3"
        assert out["item.1.task"] == "blood"
        assert len(out["item.1.logits"].split(",")) == 4
        assert out["inferences.tb"] == "2"

    def test_concurrent_matches_serial(self, toy_files, capsys):
        (toy_files / "w.txt").write_text("tb img0.t\nblood img1.t\ntb img2.t\nblood img0.t\n")
        base = ["registry", "--backbone", str(toy_files / "b.melb"),
                "--adapters", f"{toy_files / 'tb.melo'},{toy_files / 'blood.melo'}", "--workload", str(toy_files / "w.txt")]
        main(base)
        serial = kv(capsys.readouterr().out)
        main(base + ["--concurrent", "3"])
        threaded = kv(capsys.readouterr().out)
        for i in range(4):
            assert serial[f"item.{i}.logits"] == threaded[f"item.{i}.logits"]

    def test_unknown_task(self, toy_files, capsys):
        (toy_files / "w.txt").write_text("derm img0.t\n")
        code = main(["registry", "--backbone", str(toy_files / "b.melb"), "--adapters", str(toy_files / "tb.melo"),
                     "--workload", str(toy_files / "w.txt")])
        assert code == 1


class TestBench:
    def test_small_bench(self, tmp_path, capsys):
        report = tmp_path / "bench.txt"
        code = main(["bench", "--preset", "vit-toy", "--per-task", "2", "--report", str(report)])
        assert code == 0
        table = capsys.readouterr().out
        assert "in-order A-ST" in table and "random TT" in table
        out = kv(report.read_text())
        assert out["melo-shared.in-order.switches"] == "3"
        assert "env.numpy" in out
        assert (tmp_path / "bench.txt.txt").exists()

    def test_unknown_strategy(self, capsys):
        assert main(["bench", "--preset", "vit-toy", "--strategies", "lazy"]) == 1


class TestEval:
    def test_hand_counts(self, tmp_path, capsys):
        (tmp_path / "p.txt").write_text("0 1\n0 1\n1 0\n0 1\n1 0\n")
        (tmp_path / "y.txt").write_text("1\n1\n1\n0\n0\n")
        assert main(["eval", "--pred", str(tmp_path / "p.txt"), "--labels", str(tmp_path / "y.txt")]) == 0
        out = kv(capsys.readouterr().out)
        assert float(out["acc"]) == pytest.approx(0.6)
        assert float(out["f1s"]) == pytest.approx(2 / 3)
