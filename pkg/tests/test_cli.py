import json
import subprocess
import sys

import numpy as np
import pytest

from mfae import cli
from mfae import data as D
from mfae import evaluation as E
from mfae import model as M

SMALL_ARCH = ["--n-mixtures", "3", "--embed-dim", "4", "--tdnn-hidden", "8", "--ff-hidden", "8",
              "--decoder-hidden", "8"]
SMALL_TRAIN = ["--epochs", "2", "--batch-size", "8", "--segment-frames", "20"]


def error_line(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-synth, then train, then extract embeddings, on a tiny corpus."""
    root = tmp_path_factory.mktemp("pipe")
    synth = root / "synth"
    assert cli.main(["gen-synth", "--out", str(synth), "--k-true", "3", "--n-classes", "4", "--utts-per-class", "5",
                     "--frames-per-utt", "20", "--feat-dim", "5", "--n-trials", "60", "--quiet"]) == 0
    assert cli.main(["train", "--features", str(synth / "features.feat"), "--out", str(root / "run"),
                     *SMALL_TRAIN, *SMALL_ARCH, "--quiet"]) == 0
    assert cli.main(["extract-embeddings", "--model", str(root / "run" / "final.mfae"),
                     "--features", str(synth / "features.feat"), "--out", str(root / "emb.feat"), "--quiet"]) == 0
    return root


class TestUsage:
    def test_no_arguments(self, capsys):
        assert cli.main([]) == cli.EXIT_USAGE
        assert "commands:" in capsys.readouterr().out

    def test_help(self, capsys):
        assert cli.main(["--help"]) == 0
        assert "gen-synth" in capsys.readouterr().out

    def test_unknown_command(self, capsys):
        assert cli.main(["fly"]) == cli.EXIT_USAGE
        err = capsys.readouterr().err
        assert "usage: mfae" in err
        assert json.loads(err.strip().splitlines()[-1])["code"] == 64

    def test_command_help_exits_cleanly(self, capsys):
        with pytest.raises(SystemExit) as info:
            cli.main(["train", "-h"])
        assert info.value.code == 0
        assert "--lr-start" in capsys.readouterr().out


class TestExitCodes:
    def test_missing_required(self, capsys):
        assert cli.main(["gen-synth"]) == cli.EXIT_CONFIG
        assert error_line(capsys)["error"] == "config"

    def test_unknown_flag(self, capsys):
        assert cli.main(["gen-synth", "--out", "x", "--colour", "red"]) == cli.EXIT_CONFIG

    def test_bad_value(self, tmp_path, capsys):
        assert cli.main(["gen-synth", "--out", str(tmp_path), "--k-true", "eight"]) == cli.EXIT_CONFIG

    def test_bad_choice(self, tmp_path, pipeline, capsys):
        code = cli.main(["eval-sv", "--embeddings", str(pipeline / "emb.feat"), "--trials",
                         str(pipeline / "synth" / "trials.txt"), "--out", str(tmp_path / "r"), "--backend", "lr"])
        assert code == cli.EXIT_CONFIG

    def test_missing_input_file(self, tmp_path, capsys):
        code = cli.main(["train", "--features", str(tmp_path / "none.feat"), "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_IO
        assert error_line(capsys) == {"error": "io", "code": 66,
                                      "message": f"features: no such file {tmp_path / 'none.feat'}"}

    def test_corrupt_archive(self, tmp_path, capsys):
        (tmp_path / "bad.feat").write_bytes(b"JUNKJUNKJUNK")
        assert cli.main(["train", "--features", str(tmp_path / "bad.feat"), "--out", str(tmp_path / "o")]) == cli.EXIT_IO

    def test_missing_output_directory(self, pipeline, tmp_path):
        code = cli.main(["extract-embeddings", "--model", str(pipeline / "run" / "final.mfae"), "--features",
                         str(pipeline / "synth" / "features.feat"), "--out", str(tmp_path / "no" / "e.feat")])
        assert code == cli.EXIT_IO

    def test_invalid_training_config(self, pipeline, tmp_path):
        code = cli.main(["train", "--features", str(pipeline / "synth" / "features.feat"), "--out",
                         str(tmp_path / "o"), "--lr-start", "1e-5", "--lr-end", "1e-3"])
        assert code == cli.EXIT_CONFIG

    def test_workers_must_be_positive(self, tmp_path):
        assert cli.main(["gen-synth", "--out", str(tmp_path), "--workers", "0"]) == cli.EXIT_CONFIG

    def test_plda_needs_training_embeddings(self, pipeline, tmp_path):
        code = cli.main(["eval-sv", "--embeddings", str(pipeline / "emb.feat"), "--trials",
                         str(pipeline / "synth" / "trials.txt"), "--out", str(tmp_path / "r"), "--backend", "plda"])
        assert code == cli.EXIT_CONFIG

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, tmp_path, capsys):
        seqs = [D.FeatureSequence(f"u{i}", np.full((20, 3), 1e30) * (i + 1)) for i in range(4)]
        D.save_features(tmp_path / "big.feat", seqs)
        code = cli.main(["train", "--features", str(tmp_path / "big.feat"), "--out", str(tmp_path / "o"),
                         *SMALL_TRAIN, *SMALL_ARCH, "--quiet"])
        assert code == cli.EXIT_DIVERGED
        assert error_line(capsys)["error"] == "divergence"


class TestRunConfig:
    def test_precedence(self, tmp_path):
        (tmp_path / "c.txt").write_text("# comment\nk-true = 5\nn_classes=7  # trailing\n\n")
        items = cli.read_config_file(tmp_path / "c.txt")
        assert items == {"k_true": "5", "n_classes": "7"}
        cfg = cli.build_run_config("gen-synth", items, {"out": str(tmp_path), "n_classes": "9"})
        assert cfg["k_true"] == 5 and cfg["n_classes"] == 9 and cfg["seed"] == 0

    def test_unknown_file_key(self, tmp_path):
        with pytest.raises(cli.ConfigError):
            cli.build_run_config("gen-synth", {"colour": "red"}, {"out": str(tmp_path)})

    def test_malformed_line(self, tmp_path):
        (tmp_path / "c.txt").write_text("k_true 5\n")
        with pytest.raises(cli.ConfigError):
            cli.read_config_file(tmp_path / "c.txt")

    def test_digest_stable(self, tmp_path):
        (tmp_path / "c.txt").write_text("epochs=3\nlr_start=0.01\n")
        (tmp_path / "f.feat").write_bytes(b"")
        flags = {"features": str(tmp_path / "f.feat"), "out": str(tmp_path / "o"), "seed": "4"}
        a = cli.build_run_config("train", cli.read_config_file(tmp_path / "c.txt"), flags)
        b = cli.build_run_config("train", cli.read_config_file(tmp_path / "c.txt"), dict(flags))
        assert a.digest() == b.digest() and len(a.digest()) == 16
        c = cli.build_run_config("train", cli.read_config_file(tmp_path / "c.txt"), {**flags, "seed": "5"})
        assert c.digest() != a.digest()

    def test_file_and_flag_spellings_agree(self, tmp_path):
        (tmp_path / "c.txt").write_text("epochs=3\n")
        (tmp_path / "f.feat").write_bytes(b"")
        paths = {"features": str(tmp_path / "f.feat"), "out": str(tmp_path / "o")}
        via_file = cli.build_run_config("train", cli.read_config_file(tmp_path / "c.txt"), paths)
        via_flag = cli.build_run_config("train", {}, {**paths, "epochs": "3"})
        assert via_file.digest() == via_flag.digest()

    def test_bool_parsing(self, tmp_path):
        (tmp_path / "f.feat").write_bytes(b"")
        base = {"features": str(tmp_path / "f.feat"), "out": str(tmp_path / "o")}
        assert cli.build_run_config("train", {"resume": "yes"}, base)["resume"] is True
        with pytest.raises(cli.ConfigError):
            cli.build_run_config("train", {"resume": "maybe"}, base)


class TestPipeline:
    def test_gen_synth_outputs(self, pipeline):
        synth = pipeline / "synth"
        seqs = D.load_features(synth / "features.feat")
        assert len(seqs) == 20 and seqs[0].frames.shape == (20, 5)
        classes, labels = D.read_labels(synth / "labels.txt")
        assert set(classes) == {s.utt_id for s in seqs}
        assert len(E.read_trials(synth / "trials.txt")) == 60
        assert "sequence_vectors" in np.load(synth / "oracle.npz").files

    def test_train_outputs(self, pipeline):
        run = pipeline / "run"
        assert (run / "run_config.txt").read_text().count("epochs=2") == 1
        params = M.load_params(run / "final.mfae")
        assert params.config.feat_dim == 5 and params.config.n_mixtures == 3

    def test_embeddings_are_rows(self, pipeline):
        emb = D.load_features(pipeline / "emb.feat")
        assert all(s.frames.shape == (1, 4) for s in emb)
        assert emb[0].spk_id == "c000"

    @pytest.mark.parametrize("backend", ["cosine", "plda"])
    def test_eval_sv_report(self, pipeline, tmp_path, backend, capsys):
        args = ["eval-sv", "--embeddings", str(pipeline / "emb.feat"), "--trials", str(pipeline / "synth" / "trials.txt"),
                "--out", str(tmp_path / "report.txt"), "--backend", backend, "--scores-out", str(tmp_path / "s.txt")]
        if backend == "plda":
            args += ["--train-embeddings", str(pipeline / "emb.feat"), "--lda-dim", "3"]
        assert cli.main(args + ["--quiet"]) == 0
        report = E.read_report(tmp_path / "report.txt")
        assert set(report) == {"eer", "mdcf", "n_trials"}
        assert 0 <= report["eer"] <= 1 and report["n_trials"] == 60
        assert len((tmp_path / "s.txt").read_text().splitlines()) == 60
        assert capsys.readouterr().out.startswith("eer=")

    def test_workers_do_not_change_embeddings(self, pipeline, tmp_path):
        code = cli.main(["extract-embeddings", "--model", str(pipeline / "run" / "final.mfae"), "--features",
                         str(pipeline / "synth" / "features.feat"), "--out", str(tmp_path / "e.feat"),
                         "--workers", "3", "--quiet"])
        assert code == 0
        assert (tmp_path / "e.feat").read_bytes() == (pipeline / "emb.feat").read_bytes()

    def test_tokenize_and_abx(self, pipeline, tmp_path):
        feats = str(pipeline / "synth" / "features.feat")
        model = str(pipeline / "run" / "final.mfae")
        assert cli.main(["tokenize", "--model", model, "--features", feats, "--out", str(tmp_path / "post.feat"),
                         "--labels-out", str(tmp_path / "lab.txt"), "--quiet"]) == 0
        post = D.load_features(tmp_path / "post.feat")
        assert post[0].frames.shape == (20, 3)
        np.testing.assert_allclose(post[0].frames.sum(axis=1), 1.0, atol=1e-5)
        assert len((tmp_path / "lab.txt").read_text().split("\n")[0].split()) == 21
        found = D.read_frame_labels(tmp_path / "lab.txt")
        np.testing.assert_array_equal(found[post[0].utt_id], post[0].frames.argmax(axis=1))
        classes, _ = D.read_labels(pipeline / "synth" / "labels.txt")
        (tmp_path / "cats.txt").write_text("".join(f"{u} {c}\n" for u, c in classes.items()))
        (tmp_path / "task.txt").write_text("c000_u000 c001_u000 c000_u001 within\n"
                                           "c001_u002 c002_u000 c001_u003 across\n")
        assert cli.main(["eval-abx", "--features", str(tmp_path / "post.feat"), "--task", str(tmp_path / "task.txt"),
                         "--categories", str(tmp_path / "cats.txt"), "--out", str(tmp_path / "abx.txt"), "--quiet"]) == 0
        report = E.read_report(tmp_path / "abx.txt")
        assert set(report) == {"abx_across", "abx_within"}
        assert all(0 <= v <= 1 for v in report.values())

    def test_reconstruct_settings(self, pipeline, tmp_path):
        feats = str(pipeline / "synth" / "features.feat")
        model = str(pipeline / "run" / "final.mfae")
        assert cli.main(["reconstruct", "--model", model, "--features", feats, "--out", str(tmp_path / "r.feat"),
                         "--quiet"]) == 0
        assert cli.main(["reconstruct", "--model", model, "--features", feats, "--out", str(tmp_path / "u.feat"),
                         "--setting", "unified", "--train-features", feats, "--quiet"]) == 0
        per, uni = D.load_features(tmp_path / "r.feat"), D.load_features(tmp_path / "u.feat")
        assert [s.frames.shape for s in per] == [s.frames.shape for s in uni] == [(20, 5)] * 20
        assert cli.main(["reconstruct", "--model", model, "--features", feats, "--out", str(tmp_path / "x.feat"),
                         "--setting", "unified", "--quiet"]) == cli.EXIT_CONFIG

    def test_resume_flag(self, pipeline, tmp_path):
        feats = str(pipeline / "synth" / "features.feat")
        args = ["train", "--features", feats, "--out", str(tmp_path / "run"), *SMALL_TRAIN, *SMALL_ARCH, "--quiet"]
        assert cli.main(args) == 0
        assert cli.main(args + ["--resume"]) == 0
        assert (tmp_path / "run" / "final.mfae").read_bytes() == (pipeline / "run" / "final.mfae").read_bytes()

    def test_train_deterministic(self, pipeline, tmp_path):
        feats = str(pipeline / "synth" / "features.feat")
        assert cli.main(["train", "--features", feats, "--out", str(tmp_path / "again"), *SMALL_TRAIN,
                         *SMALL_ARCH, "--quiet"]) == 0
        for name in ("final.mfae", "loss_log.jsonl", "epoch000.mfae"):
            assert (tmp_path / "again" / name).read_bytes() == (pipeline / "run" / name).read_bytes()

    def test_config_file_run(self, pipeline, tmp_path):
        (tmp_path / "train.cfg").write_text("epochs = 2\nbatch_size = 8\nsegment_frames = 20\nn_mixtures = 3\n"
                                            "embed_dim = 4\ntdnn_hidden = 8\nff_hidden = 8\ndecoder_hidden = 8\n")
        assert cli.main(["train", "--config", str(tmp_path / "train.cfg"), "--features",
                         str(pipeline / "synth" / "features.feat"), "--out", str(tmp_path / "c"), "--quiet"]) == 0
        assert (tmp_path / "c" / "final.mfae").read_bytes() == (pipeline / "run" / "final.mfae").read_bytes()


class TestSelfcheck:
    def test_all_suites_pass(self, capsys):
        assert cli.main(["selfcheck", "--quiet"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == len(cli.selfcheck.SUITES)
        assert all(": PASS (" in line for line in lines)


class TestEntryPoint:
    def test_module_invocation(self):
        proc = subprocess.run([sys.executable, "-m", "mfae", "nope"], capture_output=True, text=True)
        assert proc.returncode == 64
        assert json.loads(proc.stderr.strip().splitlines()[-1])["error"] == "usage"
