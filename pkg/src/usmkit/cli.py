"""``usmkit`` command line.

Results go to stdout, diagnostics to stderr. Exit codes: 0 success,
2 shape/format error, 3 empty corpus, 4 invalid weights, 5 insufficient data.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import cfr, metrics, stats, storage, units
from .errors import (
    EmptyCorpusError,
    FormatError,
    InsufficientDataError,
    InvalidWeightsError,
    USMError,
)
from .model import MixWeights

log = logging.getLogger("usmkit")

EXIT_OK, EXIT_FORMAT, EXIT_EMPTY, EXIT_WEIGHTS, EXIT_DATA = 0, 2, 3, 4, 5


# ------------------------------------------------------------------- stats

def cmd_stats_accumulate(args) -> int:
    entries = storage.read_manifest(args.manifest)
    corpus = storage.iter_corpus(entries, speaker=args.speaker)
    acc = stats.accumulate_corpus(corpus, args.classes, args.dim,
                                  speaker_filter=args.speaker, threads=args.threads)
    if acc.frames_seen == 0:
        raise EmptyCorpusError("no frames matched the manifest"
                               + (f" for speaker {args.speaker!r}" if args.speaker else ""))
    storage.write_accumulator(args.out, acc)
    log.info("accumulated %d frames into %s", acc.frames_seen, args.out)
    return EXIT_OK


def cmd_stats_merge(args) -> int:
    acc = stats.merge_all(storage.read_accumulator(p) for p in args.inputs)
    storage.write_accumulator(args.out, acc)
    log.info("merged %d accumulators (%d frames)", len(args.inputs), acc.frames_seen)
    return EXIT_OK


def cmd_stats_finalize(args) -> int:
    acc = storage.read_accumulator(args.accumulator)
    d = stats.finalize(acc, speaker_tag=args.speaker_tag)
    storage.write_dictionary(args.out, d)
    log.info("dictionary: %d entries, %d empty", d.K, int(d.empty.sum()))
    return EXIT_OK


# --------------------------------------------------------------- transform

def _weights(args) -> MixWeights:
    if args.preset is not None:
        if args.w1 is not None or args.w2 is not None or args.w3 is not None:
            raise InvalidWeightsError("--preset excludes --w1/--w2/--w3")
        return cfr.load_preset(args.preset)
    if args.w1 is None or args.w2 is None:
        raise InvalidWeightsError("give --preset or both --w1 and --w2")
    return MixWeights(args.w1, args.w2, args.w3)


def cmd_transform(args) -> int:
    w = _weights(args)
    dictionary = storage.read_dictionary(args.dict)
    speaker_dict = storage.read_dictionary(args.speaker_dict) if args.speaker_dict else None
    feats = storage.read_features(args.features)
    posts = storage.read_posteriors(args.posteriors)
    out = cfr.transform(feats, posts, dictionary, w, speaker_dictionary=speaker_dict)
    storage.write_features(args.out, out)
    log.info("wrote %d frames with weights %s", out.num_frames, w.as_tuple())
    return EXIT_OK


# ------------------------------------------------------------------ kmeans

def _load_features(manifest):
    return [storage.read_features(e.feature_path) for e in storage.read_manifest(manifest)]


def cmd_kmeans_train(args) -> int:
    feats = _load_features(args.manifest)
    cb = units.kmeans_train(feats, K=args.k, max_iters=args.max_iters, tol=args.tol,
                            seed=args.seed, threads=args.threads)
    storage.write_codebook(args.out, cb)
    log.info("codebook K=%d d=%d inertia=%.6g", cb.K, cb.d, cb.training_inertia)
    return EXIT_OK


def cmd_kmeans_assign(args) -> int:
    cb = storage.read_codebook(args.codebook)
    feats = storage.read_features(args.features)
    labels, _ = units.assign_sequence(cb, feats, threads=args.threads)
    sys.stdout.write("".join(f"{u}\n" for u in labels.tolist()))
    return EXIT_OK


def cmd_kmeans_posteriors(args) -> int:
    cb = storage.read_codebook(args.codebook)
    feats = storage.read_features(args.features)
    tau = args.temperature
    if tau is None:
        tau = units.calibrate_temperature(cb, feats)
        log.info("calibrated temperature %.6g", tau)
    post = units.soft_posterior_sequence(cb, feats, tau)
    mode = "dense" if args.topk is None else "sparse"
    storage.write_posteriors(args.out, post, mode=mode, topk=args.topk)
    return EXIT_OK


# -------------------------------------------------------------------- eval

def _read_contour(path):
    p = Path(path)
    with open(p, "rb") as fh:
        head = fh.read(4)
    if head == storage.MAGIC_FEATURES:
        seq = storage.read_features(p)
        if seq.dim != 1:
            raise FormatError(f"{p}: F0 feature file must have d=1, got {seq.dim}")
        return metrics.F0Contour.from_hz(seq.frames[:, 0])
    return metrics.read_f0_text(p)


def cmd_eval_fpc(args) -> int:
    pred = _read_contour(args.pred)
    src = _read_contour(args.src)
    mean_src = args.mean_src if args.mean_src is not None else src.mean()
    gt = metrics.f0_ground_truth(src, args.mean_tar, mean_src)
    value = metrics.fpc(pred, gt, log_scale=args.log)
    print(f"{value:.6f}")
    return EXIT_OK


def _embedding(path):
    seq = storage.read_features(path)
    if seq.num_frames == 0:
        raise InsufficientDataError(f"{path}: no embedding frames")
    # several rows are averaged into one utterance-level embedding
    return seq.frames.astype(np.float64).mean(axis=0)


def cmd_eval_ssim(args) -> int:
    value = metrics.cosine_ssim(_embedding(args.a), _embedding(args.b))
    print(f"{value:.6f}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $USM_THREADS, else CPU count)")
    p = argparse.ArgumentParser(prog="usmkit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    st = sub.add_parser("stats", help="corpus statistics and dictionaries")
    st_sub = st.add_subparsers(dest="action", required=True)
    a = st_sub.add_parser("accumulate", parents=[common])
    a.add_argument("--manifest", required=True)
    a.add_argument("--classes", type=int, required=True)
    a.add_argument("--dim", type=int, required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--speaker")
    a.set_defaults(func=cmd_stats_accumulate)
    m = st_sub.add_parser("merge", parents=[common])
    m.add_argument("inputs", nargs="+")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_stats_merge)
    f = st_sub.add_parser("finalize", parents=[common])
    f.add_argument("accumulator")
    f.add_argument("--out", required=True)
    f.add_argument("--speaker-tag", default="")
    f.set_defaults(func=cmd_stats_finalize)

    t = sub.add_parser("transform", parents=[common], help="re-express features and apply the residual mix")
    t.add_argument("--dict", required=True)
    t.add_argument("--features", required=True)
    t.add_argument("--posteriors", required=True)
    t.add_argument("--preset", help="one of: " + ", ".join(sorted(cfr.PRESETS)))
    t.add_argument("--w1", type=float)
    t.add_argument("--w2", type=float)
    t.add_argument("--w3", type=float)
    t.add_argument("--speaker-dict")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_transform)

    k = sub.add_parser("kmeans", help="speech-unit codebooks")
    k_sub = k.add_subparsers(dest="action", required=True)
    kt = k_sub.add_parser("train", parents=[common])
    kt.add_argument("--manifest", required=True)
    kt.add_argument("--k", type=int, default=units.DEFAULT_K)
    kt.add_argument("--seed", type=int, default=0)
    kt.add_argument("--max-iters", type=int, default=100)
    kt.add_argument("--tol", type=float, default=1e-4)
    kt.add_argument("--out", required=True)
    kt.set_defaults(func=cmd_kmeans_train)
    ka = k_sub.add_parser("assign", parents=[common])
    ka.add_argument("--codebook", required=True)
    ka.add_argument("--features", required=True)
    ka.set_defaults(func=cmd_kmeans_assign)
    kp = k_sub.add_parser("posteriors", parents=[common])
    kp.add_argument("--codebook", required=True)
    kp.add_argument("--features", required=True)
    kp.add_argument("--temperature", type=float,
                    help="softmin temperature (default: calibrated on the input)")
    kp.add_argument("--topk", type=int, help="store sparse, keeping this many classes per frame")
    kp.add_argument("--out", required=True)
    kp.set_defaults(func=cmd_kmeans_posteriors)

    e = sub.add_parser("eval", help="objective metrics")
    e_sub = e.add_subparsers(dest="action", required=True)
    ef = e_sub.add_parser("fpc", parents=[common])
    ef.add_argument("--pred", required=True)
    ef.add_argument("--src", required=True)
    ef.add_argument("--mean-tar", type=float, required=True)
    ef.add_argument("--mean-src", type=float,
                    help="source mean F0 (default: mean over voiced source frames)")
    ef.add_argument("--log", action="store_true", help="correlate log F0 instead of Hz")
    ef.set_defaults(func=cmd_eval_fpc)
    es = e_sub.add_parser("ssim", parents=[common])
    es.add_argument("--a", required=True)
    es.add_argument("--b", required=True)
    es.set_defaults(func=cmd_eval_ssim)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except USMError as exc:
        print(f"usmkit: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"usmkit: error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
