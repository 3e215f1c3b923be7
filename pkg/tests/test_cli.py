import subprocess
import sys

import numpy as np
import pytest

from oracles import dictionary_from_stats, triple_sum_stats
from usmkit import Codebook, FeatureSequence, PosteriorSequence, SemanticDictionary
from usmkit import storage as io
from usmkit.cli import main
from usmkit.metrics import F0Contour, write_f0_text


@pytest.fixture
def toy(tmp_path):
    """Two utterances from two speakers plus a manifest."""
    rng = np.random.default_rng(7)
    lines = []
    lists = []
    for i, spk in enumerate(["sA", "sB"]):
        x = rng.normal(size=(6, 3)).astype(np.float32)
        g = rng.random((6, 4)).astype(np.float32)
        g /= g.sum(axis=1, keepdims=True)
        io.write_features(tmp_path / f"u{i}.usmf", FeatureSequence(x, f"u{i}", spk))
        io.write_posteriors(tmp_path / f"u{i}.usmp", PosteriorSequence.from_dense(g, f"u{i}"))
        lines.append(f"u{i}.usmf u{i}.usmp {spk}\n")
        lists.append((x.astype(np.float64).tolist(), g.astype(np.float64).tolist()))
    (tmp_path / "all.txt").write_text("".join(lines))
    (tmp_path / "a.txt").write_text(lines[0])
    (tmp_path / "b.txt").write_text(lines[1])
    return tmp_path, lists


def run(*argv):
    return main([str(a) for a in argv])


def test_accumulate_matches_oracle(toy):
    d, lists = toy
    assert run("stats", "accumulate", "--manifest", d / "all.txt", "--classes", 4, "--dim", 3,
               "--out", d / "acc.usma", "--threads", 1) == 0
    acc = io.read_accumulator(d / "acc.usma")
    n, s, frames = triple_sum_stats(lists, 4, 3)
    np.testing.assert_allclose(acc.counts, n, rtol=1e-12)
    np.testing.assert_allclose(acc.sums, s, rtol=1e-12, atol=1e-12)
    assert acc.frames_seen == frames
    first = (d / "acc.usma").read_bytes()
    run("stats", "accumulate", "--manifest", d / "all.txt", "--classes", 4, "--dim", 3,
        "--out", d / "acc.usma", "--threads", 1)
    assert (d / "acc.usma").read_bytes() == first


def test_speaker_filter_and_empty_corpus(toy):
    d, lists = toy
    assert run("stats", "accumulate", "--manifest", d / "all.txt", "--classes", 4, "--dim", 3,
               "--out", d / "b.usma", "--speaker", "sB") == 0
    n, _, _ = triple_sum_stats(lists[1:], 4, 3)
    np.testing.assert_allclose(io.read_accumulator(d / "b.usma").counts, n, rtol=1e-12)
    assert run("stats", "accumulate", "--manifest", d / "all.txt", "--classes", 4, "--dim", 3,
               "--out", d / "x.usma", "--speaker", "nobody") == 3


def test_shape_error_exit_code(toy, capsys):
    d, _ = toy
    assert run("stats", "accumulate", "--manifest", d / "all.txt", "--classes", 5, "--dim", 3,
               "--out", d / "x.usma") == 2
    assert "u0" in capsys.readouterr().err


def test_merge_equals_whole_and_finalize(toy):
    d, lists = toy
    for name in ("a", "b", "all"):
        run("stats", "accumulate", "--manifest", d / f"{name}.txt", "--classes", 4, "--dim", 3,
            "--out", d / f"{name}.usma", "--threads", 1)
    assert run("stats", "merge", d / "a.usma", d / "b.usma", "--out", d / "m.usma") == 0
    m, whole = io.read_accumulator(d / "m.usma"), io.read_accumulator(d / "all.usma")
    np.testing.assert_allclose(m.sums, whole.sums, rtol=1e-10)
    assert run("stats", "finalize", d / "m.usma", "--out", d / "m.usmd", "--speaker-tag", "sA+sB") == 0
    dic = io.read_dictionary(d / "m.usmd")
    assert dic.speaker_tag == "sA+sB"
    n, s, _ = triple_sum_stats(lists, 4, 3)
    np.testing.assert_allclose(dic.entries, dictionary_from_stats(n, s), rtol=1e-6)


def test_finalize_zero_accumulator(tmp_path):
    from usmkit import new_accumulator
    io.write_accumulator(tmp_path / "z.usma", new_accumulator(3, 2))
    assert run("stats", "finalize", tmp_path / "z.usma", "--out", tmp_path / "z.usmd") == 0
    assert io.read_dictionary(tmp_path / "z.usmd").empty.all()


@pytest.fixture
def transform_inputs(tmp_path):
    rng = np.random.default_rng(3)
    entries = rng.normal(size=(4, 3)).astype(np.float32)
    io.write_dictionary(tmp_path / "d.usmd", SemanticDictionary(entries, np.ones(4)))
    io.write_dictionary(tmp_path / "s.usmd", SemanticDictionary(entries[::-1].copy(), np.ones(4), "sB"))
    x = rng.normal(size=(5, 3)).astype(np.float32)
    g = rng.random((5, 4)).astype(np.float32)
    g /= g.sum(axis=1, keepdims=True)
    io.write_features(tmp_path / "f.usmf", FeatureSequence(x, "u", "sA"))
    io.write_posteriors(tmp_path / "p.usmp", PosteriorSequence.from_dense(g))
    P = g.astype(np.float64) / g.astype(np.float64).sum(axis=1, keepdims=True)
    return tmp_path, entries.astype(np.float64), x.astype(np.float64), P


def _transform(d, *extra):
    return run("transform", "--dict", d / "d.usmd", "--features", d / "f.usmf",
               "--posteriors", d / "p.usmp", "--out", d / "o.usmf", *extra)


def test_transform_pure_cfr_and_preset(transform_inputs):
    d, M, x, P = transform_inputs
    assert _transform(d, "--w1", 1, "--w2", 0) == 0
    np.testing.assert_array_equal(io.read_features(d / "o.usmf").frames, (P @ M).astype(np.float32))
    assert _transform(d, "--preset", "vits-usm") == 0
    preset = io.read_features(d / "o.usmf").frames.tobytes()
    assert _transform(d, "--w1", 0.8, "--w2", 0.2) == 0
    assert io.read_features(d / "o.usmf").frames.tobytes() == preset
    np.testing.assert_allclose(io.read_features(d / "o.usmf").frames, 0.8 * P @ M + 0.2 * x, rtol=1e-6)


def test_transform_usm_star(transform_inputs):
    d, M, x, P = transform_inputs
    assert _transform(d, "--preset", "vits-usm-star", "--speaker-dict", d / "s.usmd") == 0
    expected = 0.2 * P @ M + 0.6 * x + 0.2 * P @ M[::-1]
    np.testing.assert_allclose(io.read_features(d / "o.usmf").frames, expected, rtol=1e-5, atol=1e-6)


def test_transform_errors(transform_inputs):
    d, *_ = transform_inputs
    assert _transform(d, "--w1", 0.8, "--w2", 0.3) == 4
    assert _transform(d, "--preset", "nope") == 4
    assert _transform(d, "--w1", 0.2, "--w2", 0.6, "--w3", 0.2) == 4
    io.write_features(d / "f.usmf", FeatureSequence(np.zeros((2, 3))))
    assert _transform(d, "--preset", "lm-usm") == 2


def test_kmeans_commands(tmp_path, capsys):
    io.write_features(tmp_path / "toy.usmf", FeatureSequence(np.array([[0.0], [1.0], [10.0], [11.0]])))
    (tmp_path / "m.txt").write_text("toy.usmf\n")
    assert run("kmeans", "train", "--manifest", tmp_path / "m.txt", "--k", 2, "--seed", 0,
               "--max-iters", 50, "--tol", 0, "--out", tmp_path / "cb.usmc") == 0
    cb = io.read_codebook(tmp_path / "cb.usmc")
    assert sorted(cb.centroids[:, 0].tolist()) == [0.5, 10.5]
    assert cb.training_inertia == 1.0
    assert run("kmeans", "train", "--manifest", tmp_path / "m.txt", "--k", 9,
               "--out", tmp_path / "x.usmc") == 5

    cents = np.array([[0.0, 1.0], [2.0, 2.0], [5.0, -1.0]], np.float32)
    io.write_codebook(tmp_path / "c.usmc", Codebook(cents))
    io.write_features(tmp_path / "c.usmf", FeatureSequence(cents))
    capsys.readouterr()
    assert run("kmeans", "assign", "--codebook", tmp_path / "c.usmc", "--features", tmp_path / "c.usmf") == 0
    assert capsys.readouterr().out.split() == ["0", "1", "2"]
    assert run("kmeans", "posteriors", "--codebook", tmp_path / "c.usmc", "--features",
               tmp_path / "c.usmf", "--temperature", 1e-6, "--out", tmp_path / "p.usmp") == 0
    np.testing.assert_array_equal(io.read_posteriors(tmp_path / "p.usmp").dense, np.eye(3))
    assert run("kmeans", "posteriors", "--codebook", tmp_path / "c.usmc", "--features",
               tmp_path / "c.usmf", "--topk", 2, "--out", tmp_path / "q.usmp") == 0
    assert io.read_posteriors(tmp_path / "q.usmp").representation == "sparse"


def test_eval_commands(tmp_path, capsys):
    src = F0Contour.from_hz([0, 100, 120, 0, 150, 140])
    write_f0_text(tmp_path / "src.txt", src)
    f0_scaled = F0Contour.from_hz(np.where(src.voiced, src.values * 1.7, 0))
    write_f0_text(tmp_path / "pred.txt", f0_scaled)
    write_f0_text(tmp_path / "same.txt", src)
    argv = ["eval", "fpc", "--src", tmp_path / "src.txt", "--mean-tar", 200, "--mean-src", 127.5]
    assert run(*argv, "--pred", tmp_path / "same.txt") == 0
    assert run(*argv, "--pred", tmp_path / "pred.txt") == 0
    assert capsys.readouterr().out.split() == ["1.000000", "1.000000"]
    write_f0_text(tmp_path / "flat.txt", F0Contour.from_hz([0, 0, 0, 0, 0, 100]))
    assert run(*argv, "--pred", tmp_path / "flat.txt") == 5

    io.write_features(tmp_path / "a.usmf", FeatureSequence(np.array([[1.0, 0.0]])))
    io.write_features(tmp_path / "b.usmf", FeatureSequence(np.array([[1.0, 1.0]])))
    io.write_features(tmp_path / "z.usmf", FeatureSequence(np.array([[0.0, 0.0]])))
    assert run("eval", "ssim", "--a", tmp_path / "a.usmf", "--b", tmp_path / "b.usmf") == 0
    assert capsys.readouterr().out.strip() == "0.707107"
    assert run("eval", "ssim", "--a", tmp_path / "a.usmf", "--b", tmp_path / "z.usmf") == 5


def test_eval_fpc_reads_feature_contours(tmp_path, capsys):
    hz = np.array([[0.0], [110.0], [115.0], [121.0]], np.float32)
    io.write_features(tmp_path / "f0.usmf", FeatureSequence(hz))
    assert run("eval", "fpc", "--pred", tmp_path / "f0.usmf", "--src", tmp_path / "f0.usmf",
               "--mean-tar", 220) == 0
    assert capsys.readouterr().out.strip() == "1.000000"


def test_missing_file_is_format_error(tmp_path):
    assert run("stats", "finalize", tmp_path / "nope.usma", "--out", tmp_path / "o.usmd") == 2


def test_console_script_entry(tmp_path):
    io.write_features(tmp_path / "a.usmf", FeatureSequence(np.array([[3.0, 4.0]])))
    out = subprocess.run([sys.executable, "-m", "usmkit.cli", "eval", "ssim", "--a", str(tmp_path / "a.usmf"),
                          "--b", str(tmp_path / "a.usmf")], capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "1.000000"
