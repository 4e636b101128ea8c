"""Acceptance criteria, each checked at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL`` line; the lines are repeated
in the terminal summary.
"""

import time

import numpy as np
import pytest
from scipy import stats

from mfae import cli, selfcheck
from mfae import data as D
from mfae import evaluation as E
from mfae import losses as L
from mfae import model as M
from mfae.sampling import gumbel_max_sample, gumbel_softmax_sample

from conftest import ACCEPTANCE_LINES
from test_evaluation import brute_dtw, oracle_eer, oracle_mdcf

# corpus and model sizes of the synthetic recovery criterion
SYNTH = ["--k-true", "8", "--n-classes", "20", "--utts-per-class", "30", "--frames-per-utt", "200",
         "--feat-dim", "20", "--noise-scale", "0.3", "--n-trials", "2000"]
# the criterion leaves contexts and optimization open; the synthetic frames depend on
# their own label only, so the decoder sees the current indicator alone
ARCH = ["--n-mixtures", "8", "--embed-dim", "32", "--tdnn-hidden", "64", "--ff-hidden", "64",
        "--decoder-hidden", "64", "--decoder-context", "0"]
PROTOCOL = ["--epochs", "30", "--batch-size", "32", "--segment-frames", "200", "--lr-start", "1e-2",
            "--lr-end", "1e-3", "--tau", "1.0"]


def record(criterion, passed, detail):
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert passed, line


def run_cli(*args):
    code = cli.main([str(a) for a in args] + ["--quiet"])
    assert code == 0, f"{args[0]} exited with {code}"


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    run_cli("gen-synth", "--out", out, *SYNTH)
    return out


@pytest.fixture(scope="session")
def trained(synth_dir, tmp_path_factory):
    """The mFAE trained for the recovery criterion, with its wall-clock cost."""
    out = tmp_path_factory.mktemp("mfae")
    start = time.perf_counter()
    run_cli("train", "--features", synth_dir / "features.feat", "--out", out, *PROTOCOL, *ARCH)
    return out, time.perf_counter() - start


def cosine_eer(model_dir, synth_dir, tmp):
    run_cli("extract-embeddings", "--model", model_dir / "final.mfae", "--features", synth_dir / "features.feat",
            "--out", tmp / "emb.feat")
    run_cli("eval-sv", "--embeddings", tmp / "emb.feat", "--trials", synth_dir / "trials.txt",
            "--out", tmp / "report.txt")
    return E.read_report(tmp / "report.txt")


def test_criterion_1_gradients():
    start = time.perf_counter()
    result = selfcheck.gradient_suite(0)
    elapsed = time.perf_counter() - start
    record(1, result.passed and elapsed < 60, f"{result.detail}; {elapsed:.1f}s")


def test_criterion_2_kl():
    start = time.perf_counter()
    result = selfcheck.kl_suite(0)
    elapsed = time.perf_counter() - start
    record(2, result.passed and elapsed < 60, f"{result.detail}; {elapsed:.1f}s")


def test_criterion_3_sampler():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    k, n = 8, 10**5
    logits = rng.standard_normal(k)
    pi = np.exp(logits - logits.max())
    pi /= pi.sum()
    hard = gumbel_max_sample(np.broadcast_to(logits, (n, k)), rng).sum(axis=0)
    z = np.max(np.abs(hard / n - pi) / np.sqrt(pi * (1 - pi) / n))
    soft = np.bincount(gumbel_softmax_sample(np.broadcast_to(logits, (n, k)), 0.01, rng).argmax(axis=1), minlength=k)
    p_chi2 = stats.chi2_contingency(np.stack([hard, soft])).pvalue
    sharp = (gumbel_softmax_sample(np.zeros((n, k)), 0.01, rng).max(axis=1) > 0.99).mean()
    elapsed = time.perf_counter() - start
    ok = z <= 3 and p_chi2 > 0.01 and sharp >= 0.99 and elapsed < 60
    record(3, ok, f"max |z| {z:.2f}; chi2 p {p_chi2:.3f}; sharp(tau=0.01) {sharp:.4f} (need >= 0.99); {elapsed:.1f}s")


def test_criterion_4_sampled_vs_exact():
    start = time.perf_counter()
    cfg = M.ArchConfig(feat_dim=8, n_mixtures=4, embed_dim=4, tdnn_hidden=16, ff_hidden=16, decoder_hidden=16)
    params = M.init_params(cfg, 0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((16, 8))
    mu = M.embed_utterance(params, x).mu_omega
    exact = L.exact_expected_reconstruction(params, x, mu)
    draws = L.sampled_reconstruction_draws(params, x, mu, 0.01, rng, 10**4)
    rel = abs(draws.mean() - exact) / exact
    elapsed = time.perf_counter() - start
    record(4, rel < 0.01 and elapsed < 60, f"exact {exact:.5f}; MC {draws.mean():.5f}; rel {rel:.2e}; {elapsed:.1f}s")


def test_criterion_5_jensen_gap():
    result = selfcheck.jensen_suite(0)
    record(5, result.passed, result.detail)


@pytest.mark.slow
def test_criterion_6_recovery(synth_dir, trained, tmp_path):
    model_dir, train_seconds = trained
    run_cli("tokenize", "--model", model_dir / "final.mfae", "--features", synth_dir / "features.feat",
            "--out", tmp_path / "post.feat", "--labels-out", tmp_path / "labels.txt")
    _, truth = D.read_labels(synth_dir / "labels.txt")
    found = D.read_frame_labels(tmp_path / "labels.txt")
    order = sorted(truth)
    nmi = E.clustering_nmi(np.concatenate([truth[u] for u in order]), np.concatenate([found[u] for u in order]))
    report = cosine_eer(model_dir, synth_dir, tmp_path)
    ok = nmi >= 0.5 and report["eer"] <= 0.15 and report["n_trials"] == 2000 and train_seconds < 900
    record(6, ok, f"NMI {nmi:.3f} (>= 0.5); EER {report['eer']:.4f} (<= 0.15); training {train_seconds:.0f}s")


@pytest.mark.slow
def test_criterion_7_beta_trend(synth_dir, tmp_path):
    eers = {}
    for beta in ("3", "0.01"):
        runs = []
        for seed in range(3):
            run_dir = tmp_path / f"b{beta}_s{seed}"
            run_cli("train", "--features", synth_dir / "features.feat", "--out", run_dir, "--variant", "mfvae",
                    "--beta-omega", beta, "--beta-y", "0", "--seed", seed, *PROTOCOL, *ARCH)
            runs.append(cosine_eer(run_dir, synth_dir, run_dir)["eer"])
        eers[beta] = runs
    high, low = np.mean(eers["3"]), np.mean(eers["0.01"])
    detail = f"mean EER beta_omega=3 {high:.4f} {np.round(eers['3'], 4).tolist()}; " \
             f"beta_omega=0.01 {low:.4f} {np.round(eers['0.01'], 4).tolist()}"
    record(7, high > low, detail)


def test_criterion_8_metric_oracles():
    rng = np.random.default_rng(0)
    worst_eer = worst_dcf = 0.0
    for _ in range(50):
        tar = np.round(rng.normal(1, 1, rng.integers(1, 100)), int(rng.integers(0, 3)))
        non = np.round(rng.normal(0, 1, rng.integers(1, 100)), int(rng.integers(0, 3)))
        worst_eer = max(worst_eer, abs(E.compute_eer(tar, non) - oracle_eer(tar.tolist(), non.tolist())))
        worst_dcf = max(worst_dcf, abs(E.compute_mdcf(tar, non) - oracle_mdcf(tar.tolist(), non.tolist())))
    worst_dtw = 0.0
    for n in range(1, 6):
        for m in range(1, 6):
            a, b = rng.standard_normal((n, 3)), rng.standard_normal((m, 3))
            worst_dtw = max(worst_dtw, abs(E.dtw_distance(a, b) - brute_dtw(a, b)))
    ok = worst_eer == 0.0 and worst_dcf == 0.0 and worst_dtw < 1e-12
    record(8, ok, f"max |EER - oracle| {worst_eer:.1e}; max |mDCF - oracle| {worst_dcf:.1e}; "
                  f"max |DTW - brute force| {worst_dtw:.1e} over 25 shape pairs")


def test_criterion_9_determinism(tmp_path):
    run_cli("gen-synth", "--out", tmp_path / "data", "--n-classes", "6", "--utts-per-class", "6",
            "--frames-per-utt", "60", "--n-trials", "100")
    args = ["--features", tmp_path / "data" / "features.feat", "--epochs", "3", "--batch-size", "8",
            "--segment-frames", "50", "--seed", "7", "--n-mixtures", "8", "--embed-dim", "16",
            "--tdnn-hidden", "32", "--ff-hidden", "32", "--decoder-hidden", "32"]
    run_cli("train", "--out", tmp_path / "a", *args)
    run_cli("train", "--out", tmp_path / "b", *args)
    # run_config.txt records each run's own output directory
    names = sorted(p.name for p in (tmp_path / "a").iterdir() if p.name != "run_config.txt")
    same = [(tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names]
    ok = all(same) and "loss_log.jsonl" in names and "final.mfae" in names
    record(9, ok, f"{sum(same)}/{len(names)} files bit-identical: {', '.join(names)}")


@pytest.mark.slow
def test_criterion_10_reconstruction_settings(synth_dir, trained):
    params = M.load_params(trained[0] / "final.mfae")
    corpus = D.load_features(synth_dir / "features.feat")
    one = corpus[:1]
    single_equal = (E.reconstruct(params, one, "per_utt")[0].frames.tobytes()
                    == E.reconstruct(params, one, "unified", train_corpus=one)[0].frames.tobytes())
    classes, _ = D.read_labels(synth_dir / "labels.txt")
    gap_per = E.class_mean_gap(E.reconstruct(params, corpus, "per_utt"), classes)
    gap_uni = E.class_mean_gap(E.reconstruct(params, corpus, "unified", train_corpus=corpus), classes)
    record(10, single_equal and gap_uni < gap_per,
           f"single utterance identical: {single_equal}; class-mean gap unified {gap_uni:.4f} < per_utt {gap_per:.4f}")
