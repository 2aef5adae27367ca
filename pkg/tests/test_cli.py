import json

import numpy as np
import pytest

from re2re import cli
from re2re.report import MetricsReport
from re2re.separator import load_checkpoint
from re2re.signal import si_sdr
from re2re.synthdata import Manifest, load_arrays

TINY_TRAIN = {"train": {"batch_size": 4, "epochs": 1, "pretrain_epochs": 1, "lr": 1e-2,
                        "separator": {"num_filters": 8, "kernel_taps": 9, "hop": 4,
                                      "num_blocks": 1, "context_taps": 3}}}
SMALL = ["--num-utterances", "8", "--num-eval", "4", "--chunk-seconds", "0.2"]


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(TINY_TRAIN))
    assert cli.main(["generate", "--domain", "ood", "--out", str(root / "ood"), *SMALL]) == 0
    assert cli.main(["generate", "--domain", "indomain", "--out", str(root / "ind"), *SMALL]) == 0
    assert cli.main(["pretrain", "--ood", str(root / "ood"), "--out", str(root / "pre"),
                     "--config", str(cfg)]) == 0
    return root


class TestGenerate:
    def test_writes_manifest(self, workdir):
        m = Manifest.load(workdir / "ood")
        assert len(m.split("train")) == 8 and len(m.split("eval")) == 4
        assert (workdir / "ood" / "run.log").exists()

    def test_invalid_spec_names_field(self, tmp_path, capsys):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"corpus": {"snr_std_db": -2.0}}))
        code, _, err = run(["generate", "--config", spec, "--out", tmp_path / "c"], capsys)
        assert code == 1 and "snr_std_db" in err

    def test_bad_flag_is_validation_error(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["generate", "--out", str(tmp_path), "--noise-kind", "brown"])
        assert exc.value.code == 1

    def test_seed_overrides_spec(self, tmp_path, capsys):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"corpus": {"seed": 1, "num_utterances": 2, "num_eval": 0,
                                               "chunk_seconds": 0.1}}))
        run(["generate", "--config", spec, "--out", tmp_path / "a"], capsys)
        run(["generate", "--config", spec, "--out", tmp_path / "b", "--seed", 7], capsys)
        run(["generate", "--config", spec, "--out", tmp_path / "c", "--seed", 1], capsys)
        a, b, c = ((tmp_path / d / "train" / "ood-train-00000_mix.wav").read_bytes() for d in "abc")
        assert a != b and a == c
        assert json.loads((tmp_path / "b" / "manifest.jsonl").read_text().splitlines()[0])

    def test_unwritable_is_io_error(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code, _, _ = run(["generate", "--out", blocker / "c", *SMALL], capsys)
        assert code == 2


class TestPipeline:
    def test_pretrain_checkpoint(self, workdir):
        ck = load_checkpoint(workdir / "pre" / "pretrained.npz")
        assert ck.config.num_filters == 8 and ck.meta["train_config"]["epochs"] == 1

    def test_adapt_default_recipe(self, workdir, capsys):
        code, out, _ = run(["adapt", "--checkpoint", workdir / "pre" / "pretrained.npz",
                            "--indomain", workdir / "ind", "--out", workdir / "ad",
                            "--config", workdir / "run.json", "--mode", "re2re", "--gamma", 0.01,
                            "--beta", 100, "--batch", 4], capsys)
        assert code == 0 and "re2re" in out
        ck = load_checkpoint(workdir / "ad" / "adapted_re2re.npz")
        assert "teacher" in ck.arrays

    def test_adapt_rejects_supervised(self, workdir, capsys):
        code, _, err = run(["adapt", "--checkpoint", workdir / "pre" / "pretrained.npz",
                            "--indomain", workdir / "ind", "--out", workdir / "x",
                            "--mode", "supervised"], capsys)
        assert code == 1 and "mode" in err

    def test_identity_prints_noisy_baseline(self, workdir, capsys):
        code, out, _ = run(["evaluate", "--manifest", workdir / "ind", "--identity",
                            "--out", workdir / "ev"], capsys)
        assert code == 0
        m = Manifest.load(workdir / "ind")
        recs = sorted(m.split("eval"), key=lambda r: r.id)
        arrays = load_arrays(m, recs, with_references=True)
        direct = np.mean([si_sdr(x, s) for x, s in zip(arrays["mixture"], arrays["speech"])])
        row = MetricsReport.read_csv(workdir / "ev" / "metrics.csv").get("input")
        assert abs(row.mean - direct) < 1e-12
        assert f"{direct:.2f}" in out

    def test_table_matches_csv(self, workdir, capsys):
        _, out, _ = run(["evaluate", "--manifest", workdir / "ind", "--out", workdir / "ev2",
                         "--checkpoint", workdir / "pre" / "pretrained.npz"], capsys)
        report = MetricsReport.read_csv(workdir / "ev2" / "metrics.csv")
        for row in report.rows:
            assert f"{row.mean:.2f}" in out
        assert report.methods == ["pretrained"]

    def test_evaluate_needs_one_source(self, workdir, capsys):
        code, _, _ = run(["evaluate", "--manifest", workdir / "ind", "--out", workdir / "e3"], capsys)
        assert code == 1

    def test_idempotent(self, workdir, capsys):
        args = ["adapt", "--checkpoint", workdir / "pre" / "pretrained.npz", "--indomain",
                workdir / "ind", "--config", workdir / "run.json", "--mode", "remixit"]
        run(args + ["--out", workdir / "i1"], capsys)
        run(args + ["--out", workdir / "i2", "--workers", 2], capsys)
        a = (workdir / "i1" / "adapted_remixit.npz").read_bytes()
        assert a == (workdir / "i2" / "adapted_remixit.npz").read_bytes()

    def test_trials_table(self, workdir, capsys):
        code, out, _ = run(["trials", "--ood", workdir / "ood", "--indomain", workdir / "ind",
                            "--n", 2, "--out", workdir / "tr", "--config", workdir / "run.json"],
                           capsys)
        assert code == 0
        report = MetricsReport.read_csv(workdir / "tr" / "trials.csv")
        assert report.get("re2re").n == 2 and report.get("remixit").std is not None
        assert "±" in out

    def test_trials_need_two(self, workdir, capsys):
        code, _, _ = run(["trials", "--ood", workdir / "ood", "--indomain", workdir / "ind",
                          "--n", 1, "--out", workdir / "tr1"], capsys)
        assert code == 1


class TestErrors:
    def test_missing_manifest(self, tmp_path, capsys):
        code, _, err = run(["evaluate", "--manifest", tmp_path / "nope", "--identity",
                            "--out", tmp_path / "o"], capsys)
        assert code == 2 and err.startswith("error:")

    def test_checkpoint_version_mismatch(self, workdir, tmp_path, capsys):
        ck = load_checkpoint(workdir / "pre" / "pretrained.npz")
        from re2re.separator import save_checkpoint
        path = save_checkpoint(tmp_path / "v.npz", ck.config, ck.params, meta={})
        data = np.load(path)
        arrays = {k: data[k] for k in data.files}
        header = json.loads(bytes(arrays["header"]).decode())
        header["version"] = 99
        arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
        np.savez(path, **arrays)
        code, _, err = run(["evaluate", "--manifest", workdir / "ind", "--checkpoint", path,
                            "--out", tmp_path / "o"], capsys)
        assert code == 2 and "version" in err

    def test_bad_json_config(self, workdir, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{not json")
        code, _, _ = run(["pretrain", "--ood", workdir / "ood", "--out", tmp_path / "p",
                          "--config", cfg], capsys)
        assert code == 1


class TestVerify:
    def test_passes(self, capsys):
        code, out, _ = run(["verify", "--quick"], capsys)
        assert code == 0 and "FAIL" not in out

    def test_corrupt_op_is_named(self, capsys):
        code, out, _ = run(["verify", "--quick", "--corrupt-op", "depthwise_conv1d"], capsys)
        assert code == 3
        assert "FAIL  gradient[depthwise_conv1d]" in out
        assert out.strip().splitlines()[-1].startswith("failed: gradient[depthwise_conv1d]")
