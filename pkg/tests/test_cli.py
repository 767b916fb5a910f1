import csv
import hashlib

import pytest

from mce_fss import config
from mce_fss.cli import main
from mce_fss.config import ConfigError, RunConfig

SMALL = ["--dataset.image_size=16", "--dataset.samples_per_class=5", "--dataset.radius=[0.32, 0.4]",
         "--model.backbone_widths=[8, 8, 8]", "--model.stem_width=8", "--model.token_dim=8",
         "--model.cross_channels=8", "--model.aspp_channels=8", "--model.decoder_channels=8",
         "--train.iterations=2", "--train.batch=2", "--eval.episodes=6"]


def digest(folder):
    h = hashlib.sha256()
    for p in sorted(folder.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(folder)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestConfig:
    def test_defaults(self):
        cfg = config.from_dict({})
        assert cfg == RunConfig()
        assert cfg.train.lr == 0.0025 and cfg.train.batch == 4 and cfg.eval.episodes == 1000

    def test_nested_keys(self):
        cfg = config.from_dict({"train": {"lr": 0.01}, "model": {"levels": [3]}})
        assert cfg.train.lr == 0.01 and cfg.model.levels == (3,)

    @pytest.mark.parametrize("data", [{"bogus": 1}, {"train": {"lrr": 0.1}}, {"train": 3},
                                      {"model": {"output": "both"}}, {"ablation": {"variants": ["nope"]}}])
    def test_rejects_bad_trees(self, data):
        with pytest.raises(ConfigError):
            config.from_dict(data)

    def test_yaml_round_trip(self, tmp_path):
        cfg = config.apply_overrides(RunConfig(), ["train.lr=0.5", "seeds=[4, 5]"])
        path = tmp_path / "c.yaml"
        path.write_text(config.dump(cfg))
        again = config.load(path)
        assert again == cfg and again.fingerprint() == cfg.fingerprint()

    def test_fingerprint_tracks_content(self):
        a = RunConfig().fingerprint()
        assert a == RunConfig().fingerprint()
        assert a != config.apply_overrides(RunConfig(), ["train.lr=0.1"]).fingerprint()
        assert 0 <= a < 2**64

    def test_bad_override(self):
        with pytest.raises(ConfigError):
            config.apply_overrides(RunConfig(), ["train.lr"])
        with pytest.raises(ConfigError):
            config.apply_overrides(RunConfig(), ["nosuch.key=1"])

    def test_shipped_configs_parse(self):
        from pathlib import Path
        root = Path(__file__).resolve().parents[1] / "configs"
        for path in sorted(root.glob("*.yaml")):
            config.load(path)


class TestCommands:
    def test_gen_data(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "a"), *SMALL]) == 0
        assert main(["gen-data", "--out", str(tmp_path / "b"), *SMALL]) == 0
        assert digest(tmp_path / "a") == digest(tmp_path / "b")
        dirs = [p for p in (tmp_path / "a").iterdir() if p.is_dir()]
        assert len(dirs) == 8
        for d in dirs:
            images = sorted(d.glob("*.ppm"))
            masks = sorted(d.glob("*_mask.pgm"))
            assert len(images) == len(masks) == 5
            assert [m.name.replace("_mask.pgm", "") for m in masks] == [i.stem for i in images]
        rows = list(csv.DictReader((tmp_path / "a" / "index.csv").open()))
        assert len(rows) == 40

    def test_oracle_eval(self, tmp_path, capsys):
        out = tmp_path / "oracle.csv"
        assert main(["eval", "--oracle", "--out", str(out), *SMALL]) == 0
        row = next(csv.DictReader(out.open()))
        assert float(row["miou"]) == 1.0 and float(row["fb_iou"]) == 1.0

    def test_train_eval_predict(self, tmp_path):
        assert main(["train", "--out", str(tmp_path / "run"), *SMALL]) == 0
        model = tmp_path / "run" / "model.mcec"
        assert model.exists() and (tmp_path / "run" / "loss.csv").exists()
        assert main(["eval", "--checkpoint", str(model), "--out", str(tmp_path / "e.csv"), *SMALL]) == 0
        serial = (tmp_path / "e.csv").read_text()
        assert main(["eval", "--checkpoint", str(model), "--jobs", "2", "--out", str(tmp_path / "p.csv"),
                     *SMALL]) == 0
        assert (tmp_path / "p.csv").read_text() == serial
        assert main(["gen-data", "--out", str(tmp_path / "data"), "--episodes", "1", *SMALL]) == 0
        pred = tmp_path / "pred"
        assert main(["predict", "--checkpoint", str(model), "--episode", str(tmp_path / "data/episodes/ep0000"),
                     "--out", str(pred), *SMALL]) == 0
        assert sorted(p.name for p in pred.iterdir()) == ["ground_truth.pgm", "prediction.pgm", "query.ppm"]

    def test_ablate(self, tmp_path):
        out = tmp_path / "abl.csv"
        assert main(["ablate", "--out", str(out), *SMALL, "--seeds=[0]", "--ablation.folds=[1]",
                     "--ablation.variants=[full, baseline]", "--train.iterations=1"]) == 0
        assert len(list(csv.DictReader(out.open()))) == 2
        assert (tmp_path / "abl_summary.csv").exists()

    def test_gradcheck_subset(self, capsys):
        assert main(["gradcheck", "--instances", "2", "--only", "matmul", "masked_softmax", "query_branch"]) == 0
        assert "matmul" in capsys.readouterr().out


class TestExitCodes:
    def test_usage(self):
        assert main([]) == 1
        assert main(["train"]) == 1
        assert main(["frobnicate"]) == 1
        assert main(["gradcheck", "--only", "nosuch"]) == 1

    def test_malformed_config(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("train: {lr: [unclosed\n")
        assert main(["eval", "--oracle", "--config", str(bad)]) == 1
        bad.write_text("train:\n  nonsense: 1\n")
        assert main(["eval", "--oracle", "--config", str(bad)]) == 1

    def test_missing_and_corrupt_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.mcec"), *SMALL]) == 2
        assert main(["train", "--out", str(tmp_path / "run"), *SMALL]) == 0
        path = tmp_path / "run" / "model.mcec"
        raw = bytearray(path.read_bytes())
        raw[100] ^= 1
        path.write_bytes(bytes(raw))
        assert main(["eval", "--checkpoint", str(path), *SMALL]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow on the way to NaN is the point
    def test_divergence(self, tmp_path):
        assert main(["train", "--out", str(tmp_path / "run"), *SMALL, "--train.lr=1e30",
                     "--train.iterations=20"]) == 3
