import json

import numpy as np
import pytest

from multisample import cli
from multisample.probe import ProbeReport


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.WORKDIR_ENV, str(tmp_path))
    return tmp_path


def small_config(path, **kw):
    cfg = dict(epochs=2, batch_size=4, learning_rate=1e-3,
               encoder={"d": 16, "channels": [4, 4, 8, 8, 8]}, checkpoint_every=1)
    cfg.update(kw)
    path.write_text(json.dumps(cfg))
    return path


def test_pipeline_end_to_end(workdir, capsys):
    assert cli.main(["gen", "--kind", "texture_clips", "--n-clips", "12", "--duration", "1.2",
                     "--seed", "1", "--out", "corpus"]) == cli.EXIT_OK
    manifest = workdir / "corpus" / "manifest.jsonl"
    assert manifest.exists() and (workdir / "corpus" / "effective_config.json").exists()

    config = small_config(workdir / "train.json")
    assert cli.main(["pretrain", "--manifest", str(manifest), "--config", str(config),
                     "--epochs", "3", "--out", "run"]) == cli.EXIT_OK
    effective = json.loads((workdir / "run" / "effective_config.json").read_text())
    assert effective["epochs"] == 3 and effective["batch_size"] == 4  # flag overrides file
    ckpt = workdir / "run" / "checkpoint_final.pt"

    assert cli.main(["embed", "--ckpt", str(ckpt), "--manifest", str(manifest), "--out", "emb.npz"]) == 0
    assert cli.main(["probe", "--archive", str(workdir / "emb.npz"), "--task", "clip", "--n-classes", "4",
                     "--epochs", "20", "--label", "full", "--out", "reports/full.json"]) == 0
    report = ProbeReport.load(workdir / "reports" / "full.json")
    assert 0 <= report.metrics["accuracy"] <= 1 and report.label == "full"

    capsys.readouterr()
    assert cli.main(["report", "--glob", "reports/*.json", "--format", "json"]) == 0
    table = json.loads(capsys.readouterr().out)
    assert [r["label"] for r in table["rows"]] == ["full"]
    assert "not the published numbers" in table["banner"]


def test_resume_via_cli(workdir):
    cli.main(["gen", "--kind", "tone_bank", "--n-clips", "8", "--duration", "1.2", "--out", "c"])
    manifest = str(workdir / "c" / "manifest.jsonl")
    config = str(small_config(workdir / "t.json"))
    assert cli.main(["pretrain", "--manifest", manifest, "--config", config, "--out", "a"]) == 0
    assert cli.main(["pretrain", "--manifest", manifest, "--resume", str(workdir / "a" / "checkpoint_final.pt"),
                     "--epochs", "3", "--lr", "5e-4", "--out", "b"]) == 0
    assert json.loads((workdir / "b" / "effective_config.json").read_text())["learning_rate"] == 5e-4


class TestExitCodes:
    def test_config_error(self, workdir):
        bad = workdir / "bad.json"
        bad.write_text(json.dumps({"epochz": 1}))
        cli.main(["gen", "--kind", "tone_bank", "--n-clips", "4", "--out", "c"])
        assert cli.main(["pretrain", "--manifest", str(workdir / "c" / "manifest.jsonl"),
                         "--config", str(bad)]) == cli.EXIT_CONFIG

    def test_data_error(self, workdir):
        assert cli.main(["pretrain", "--manifest", str(workdir / "missing.jsonl")]) == cli.EXIT_DATA

    def test_short_clip_is_data_error(self, workdir):
        cli.main(["gen", "--kind", "tone_bank", "--n-clips", "8", "--duration", "0.5", "--out", "c"])
        config = str(small_config(workdir / "t.json"))
        assert cli.main(["pretrain", "--manifest", str(workdir / "c" / "manifest.jsonl"),
                         "--config", config]) == cli.EXIT_DATA

    def test_codes_are_distinct(self):
        codes = [cli.EXIT_OK, cli.EXIT_CONFIG, cli.EXIT_DATA, cli.EXIT_NUMERIC, cli.EXIT_ACCEPTANCE,
                 cli.EXIT_INTEGRITY]
        assert len(set(codes)) == len(codes) and codes[0] == 0

    def test_probe_needs_classes(self, workdir):
        assert cli.main(["probe", "--archive", "x.npz", "--task", "clip", "--out", "r.json"]) in (
            cli.EXIT_CONFIG, cli.EXIT_DATA)


def report(label, task, kind, metrics):
    return ProbeReport(task, kind, metrics, 10, 10, "h", label)


def three_tasks(label, scale=1.0):
    return [
        report(label, "texture", "clip_classification", {"accuracy": 0.9 * scale}),
        report(label, "events", "frame_classification_sed", {"frame_f1": 0.5, "onset_f1": 0.4 * scale}),
        report(label, "pitch", "pitch_classification", {"pitch_accuracy": 0.3, "chroma_accuracy": 0.35}),
    ]


class TestTable:
    def test_two_configs(self):
        table = cli.cmd_table(three_tasks("full") + three_tasks("clip", 0.5))
        assert len(table.rows) == 2 and all(len(v) == 4 for _, v in table.rows)
        assert table.rows[0] == ("full", [0.9, 0.4, 0.3, 0.35])
        text = table.to_text()
        assert "not the published numbers" in text and "chroma" in text

    def test_single_report(self):
        table = cli.cmd_table([report("x", "texture", "clip_classification", {"accuracy": 1.0})])
        assert table.rows == [("x", [1.0, None, None, None])]

    def test_paper_values(self):
        table = cli.cmd_table(three_tasks("full"), paper_values=True)
        assert ("[paper] COLA", [0.459, 0.232, 0.434, 0.470]) in table.rows

    def test_mismatched_task_sets(self):
        with pytest.raises(ValueError, match="clip"):
            cli.cmd_table(three_tasks("full") + three_tasks("clip")[:2])

    def test_empty(self):
        with pytest.raises(ValueError):
            cli.cmd_table([])


class TestRunManifest:
    def test_clean_chain(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        a.write_bytes(b"corpus")
        m = cli.RunManifest()
        m.add("gen", "h0", outputs=[a])
        b.write_bytes(b"weights")
        m.add("pretrain", "h1", inputs=[a], outputs=[b])
        m.verify()
        back = cli.RunManifest.load(m.save(tmp_path / "run.json"))
        back.verify()
        assert [s.stage for s in back.stages] == ["gen", "pretrain"]

    def test_tampered_checkpoint(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "ckpt.pt"
        a.write_bytes(b"corpus")
        b.write_bytes(b"weights")
        m = cli.RunManifest()
        m.add("gen", "h0", outputs=[a])
        m.add("pretrain", "h1", inputs=[a], outputs=[b])
        b.write_bytes(b"tampered")
        with pytest.raises(cli.IntegrityError):
            m.verify()
        with pytest.raises(cli.IntegrityError):
            m.add("embed", "h2", inputs=[b])


def test_acceptance_checks_logic():
    reps = three_tasks("random") + three_tasks("clip") + three_tasks("clip+frame+pitch")
    checks = cli.acceptance_checks(reps, {"run": np.array([2.0, 1.0])})
    assert checks["loss decreases (run)"] and checks["chroma >= pitch"]
    assert checks["pitch: full > clip-only > random"] is False
