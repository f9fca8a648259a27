import hashlib
from pathlib import Path

import pytest

from adaptloc.cli import (
    ABLATION_ROWS,
    DataConfig,
    config_digest,
    default_config_text,
    entrypoint,
    experiment_from_kv,
    experiment_to_kv,
)
from adaptloc.config import parse_kv_text, read_kv
from adaptloc.adaptation import read_loss_log
from adaptloc.evaluation import read_detections, read_metrics_report

TINY_CFG = """\
data.num_train_clips = 4
data.num_test_clips = 2
data.clip_length = 10
data.image_size = 64
source.seed = 7
target.name = target
target.background_style = noise
target.actor_palette = #911eb4,#f58231,#46f0f0,#bcf60c
target.noise_sigma = 0.08
target.seed = 7
train.pretrain_steps = 3
train.adapt_steps = 3
train.n_s = 2
train.n_t = 2
"""


def _tree_digest(root: Path) -> dict[str, str]:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_ws")
    cfg_path = root / "exp.cfg"
    cfg_path.write_text(TINY_CFG)
    data = root / "data"
    assert entrypoint(["generate", "--config", str(cfg_path), "--out", str(data)]) == 0
    return root, cfg_path, data


@pytest.fixture(scope="module")
def pretrained(ws):
    root, cfg_path, data = ws
    out = root / "run"
    code = entrypoint(
        ["train", "--config", str(cfg_path), "--mode", "pretrain",
         "--data", str(data), "--out", str(out)]
    )
    assert code == 0
    return out / "pretrain.npz"


class TestExperimentConfig:
    def test_default_text_round_trips(self):
        kv = parse_kv_text(default_config_text())
        cfg = experiment_from_kv(kv)
        assert experiment_to_kv(cfg) == kv
        assert config_digest(cfg) == config_digest(experiment_from_kv(experiment_to_kv(cfg)))

    def test_unknown_key_rejected(self):
        kv = parse_kv_text(default_config_text())
        kv["trian.seed"] = "3"
        with pytest.raises(ValueError, match="trian.seed"):
            experiment_from_kv(kv)

    def test_run_keys_tolerated(self):
        kv = parse_kv_text(default_config_text())
        kv["run.verb"] = "train"
        experiment_from_kv(kv)

    def test_data_config_validation(self):
        with pytest.raises(ValueError):
            DataConfig(num_train_clips=0)
        with pytest.raises(ValueError):
            DataConfig(image_size=8)

    def test_digest_tracks_content(self):
        kv = parse_kv_text(default_config_text())
        a = config_digest(experiment_from_kv(kv))
        kv["train.seed"] = "99"
        b = config_digest(experiment_from_kv(kv))
        assert a != b


class TestGenerate:
    def test_layout_and_manifest(self, ws):
        _, _, data = ws
        for split in ("source_train", "source_test", "target_train", "target_test"):
            assert (data / split / "annotations.csv").exists()
            assert (data / split / "manifest.cfg").exists()
        manifest = read_kv(data / "generate_manifest.cfg")
        assert manifest["run.verb"] == "generate"
        assert "run.config_sha256" in manifest

    def test_idempotent_regeneration(self, ws, tmp_path):
        _, cfg_path, data = ws
        again = tmp_path / "data2"
        assert entrypoint(["generate", "--config", str(cfg_path), "--out", str(again)]) == 0
        assert _tree_digest(again) == _tree_digest(data)

    def test_invalid_config_exits_nonzero(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("source.background_style = plaid\n")
        code = entrypoint(["generate", "--config", str(bad), "--out", str(tmp_path / "d")])
        assert code == 1
        assert "error" in capsys.readouterr().err


class TestTrain:
    def test_pretrain_artifacts(self, ws, pretrained):
        root, _, _ = ws
        out = root / "run"
        entries = read_loss_log(out / "pretrain_loss.log")
        assert [s for s, _ in entries] == [0, 1, 2]
        manifest = read_kv(out / "pretrain_manifest.cfg")
        assert manifest["run.mode"] == "pretrain"
        assert manifest["run.modules"] == "none"
        assert len(manifest["run.config_sha256"]) == 64
        assert pretrained.exists()

    def test_pretrain_reproducible(self, ws, tmp_path):
        root, cfg_path, data = ws
        out2 = tmp_path / "run2"
        assert entrypoint(
            ["train", "--config", str(cfg_path), "--mode", "pretrain",
             "--data", str(data), "--out", str(out2)]
        ) == 0
        a = (root / "run" / "pretrain_loss.log").read_bytes()
        b = (out2 / "pretrain_loss.log").read_bytes()
        assert a == b

    def test_adapt_requires_checkpoint(self, ws, capsys):
        root, cfg_path, data = ws
        code = entrypoint(
            ["train", "--config", str(cfg_path), "--mode", "adapt",
             "--data", str(data), "--out", str(root / "runx")]
        )
        assert code == 1
        assert "checkpoint" in capsys.readouterr().err

    def test_adapt_single_module_zero_columns(self, ws, pretrained, tmp_path):
        _, cfg_path, data = ws
        out = tmp_path / "adapt_run"
        code = entrypoint(
            ["train", "--config", str(cfg_path), "--mode", "adapt", "--modules", "Simg",
             "--checkpoint", str(pretrained), "--data", str(data), "--out", str(out)]
        )
        assert code == 0
        entries = read_loss_log(out / "adapt_Simg_loss.log")
        assert len(entries) == 3
        assert [s for s, _ in entries] == [3, 4, 5]
        assert all(b.l_dtimg == 0.0 and b.l_dtinst == 0.0 for _, b in entries)
        assert all(b.l_ds > 0.0 for _, b in entries)
        assert (out / "adapt_Simg.npz").exists()
        manifest = read_kv(out / "adapt_Simg_manifest.cfg")
        assert manifest["run.modules"] == "Simg"


class TestEvaluate:
    def test_writes_report_and_dump(self, ws, pretrained, tmp_path):
        _, cfg_path, data = ws
        out = tmp_path / "eval"
        code = entrypoint(
            ["evaluate", "--checkpoint", str(pretrained), "--data", str(data / "source_test"),
             "--out", str(out), "--config", str(cfg_path)]
        )
        assert code == 0
        metrics = read_metrics_report(out / "metrics.cfg")
        assert "frame_map" in metrics and "num_detections" in metrics
        read_detections(out / "detections.csv")

    def test_missing_checkpoint(self, ws, capsys):
        _, _, data = ws
        code = entrypoint(
            ["evaluate", "--checkpoint", "/nonexistent/x.npz", "--data", str(data / "source_test")]
        )
        assert code == 1
        assert "checkpoint" in capsys.readouterr().err


class TestAblate:
    def test_grid_rows_and_resume(self, ws, tmp_path, capsys):
        _, cfg_path, data = ws
        out = tmp_path / "abl"
        code = entrypoint(
            ["ablate", "--config", str(cfg_path), "--data", str(data), "--out", str(out)]
        )
        assert code == 0
        capsys.readouterr()
        rows = sorted(p.stem for p in (out / "rows").glob("*.cfg"))
        assert len(rows) == len(ABLATION_ROWS)
        summary = read_kv(out / "ablation.cfg")
        for row in ABLATION_ROWS:
            assert f"row.{row}.frame_map" in summary
        first_summary = (out / "ablation.cfg").read_bytes()

        code = entrypoint(
            ["ablate", "--config", str(cfg_path), "--data", str(data), "--out", str(out)]
        )
        assert code == 0
        text = capsys.readouterr().out
        assert text.count("cached") == len(ABLATION_ROWS)
        assert (out / "ablation.cfg").read_bytes() == first_summary


class TestAnalyzeErrors:
    def test_breakdown_output(self, ws, pretrained, tmp_path, capsys):
        _, cfg_path, data = ws
        eval_out = tmp_path / "eval"
        entrypoint(
            ["evaluate", "--checkpoint", str(pretrained), "--data", str(data / "source_test"),
             "--out", str(eval_out)]
        )
        capsys.readouterr()
        report = tmp_path / "errors.cfg"
        code = entrypoint(
            ["analyze-errors", "--detections", str(eval_out / "detections.csv"),
             "--annotations", str(data / "source_test" / "annotations.csv"),
             "--top-k", "50", "--out", str(report)]
        )
        assert code == 0
        assert "analyzed" in capsys.readouterr().out
        kv = read_kv(report)
        total = sum(float(kv[f"error.{k}"]) for k in ("correct", "mislocalized", "background", "incorrect"))
        assert abs(total - 1.0) <= 1e-9

    def test_empty_dump_fails_cleanly(self, ws, tmp_path, capsys):
        _, _, data = ws
        empty = tmp_path / "empty.csv"
        empty.write_text("")
        code = entrypoint(
            ["analyze-errors", "--detections", str(empty),
             "--annotations", str(data / "source_test" / "annotations.csv")]
        )
        assert code == 1
        assert "detection" in capsys.readouterr().err


class TestParser:
    def test_unknown_verb_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            entrypoint(["frobnicate"])
        assert exc.value.code == 2

    def test_missing_required_flag(self):
        with pytest.raises(SystemExit) as exc:
            entrypoint(["train", "--mode", "pretrain"])
        assert exc.value.code == 2
