"""Command-line entry point: ``singerid <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 no vocal content.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import classifier as clf
from . import nn
from . import pipeline as pl
from . import segmenter as sgm
from . import separator as sep
from . import signal as sg
from . import synthdata as sd

log = logging.getLogger("singerid")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NO_VOCAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers

@contextlib.contextmanager
def bundle_lock(directory):
    """Advisory lock file held while a bundle directory is being written."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{directory} is locked by another writer (remove {lock} if that process died)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])


def sidecar(report_path, suffix):
    report_path = Path(report_path)
    return report_path.with_name(f"{report_path.stem}{suffix}")


def manifest_rows(path, split):
    rows = sd.read_manifest(path, None if split == "all" else split)
    if not rows:
        raise ValueError(f"manifest {path} has no entries for split {split!r}")
    return rows


def pipeline_config(args):
    cfg = pl.PipelineConfig.load(args.config) if args.config else pl.PipelineConfig()
    for flag in ("segmenter", "separator", "classifier", "p_stay_vocal", "p_stay_nonvocal", "prior_vocal",
                 "min_segment", "snippet_seconds"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, flag, value)
    cfg.__post_init__()
    return cfg


def training_log(directory, stage, args, losses, extra=None):
    write_json(Path(directory) / "training_log.json",
               {"stage": stage, "epochs": args.epochs, "seed": args.seed, "losses": losses, **(extra or {})})


# ---------------------------------------------------------------------------
# commands

def cmd_synth_data(args):
    paths = sd.build_dataset(args.singers, args.clips_per_singer, args.out, args.seed,
                             clip_seconds=args.clip_seconds, test_fraction=args.test_fraction)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))
    return EXIT_OK


def cmd_train_seg(args):
    rows = manifest_rows(args.data, args.split)
    data = [(sg.load_audio(r["path"]), sgm.SegmentTimeline.from_json(r)) for r in rows]
    res = sgm.train_segmenter(data, epochs=args.epochs, seed=args.seed, windows_per_epoch=args.windows_per_epoch)
    with bundle_lock(args.out):
        sgm.save_segmenter(res.params, args.out)
        training_log(args.out, "segmenter", args, res.losses, {"songs": len(data)})
    return EXIT_OK


def cmd_train_sep(args):
    rows = manifest_rows(args.data, args.split)
    cfg = sep.SeparatorConfig(skip_kind=args.skip_kind)
    res = sep.train_separator(sep.load_pairs(rows), cfg, epochs=args.epochs, seed=args.seed)
    with bundle_lock(args.out):
        sep.save_separator(res.params, args.out, cfg)
        training_log(args.out, "separator", args, res.losses, {"skip_kind": args.skip_kind, "pairs": len(rows)})
    return EXIT_OK


def song_features(rows, models, modes):
    """{mode: [snippet features per song]} for the requested feature modes."""
    out = {m: [] for m in modes}
    for i, r in enumerate(rows):
        song = sg.load_audio(r["path"])
        audio, _ = pl.vocal_audio(song, models)
        for m in modes:
            mags = pl.snippet_magnitudes(audio, models, raw=(m == "raw"))
            out[m].append([clf.features_from_spectrogram(x) for x in mags])
        log.info("features %d/%d (%s)", i + 1, len(rows), r.get("id", r["path"]))
    return out


def cmd_train_cls(args):
    cfg = pipeline_config(args)
    models = pl.Models.load(cfg, need=("segmenter",) if args.raw else ("segmenter", "separator"))
    all_rows = sd.read_manifest(args.data)
    labels = clf.LabelMap.from_labels(r["singer"] for r in all_rows)
    rows = manifest_rows(args.data, args.split)
    mode = "raw" if args.raw else "separated"
    feats = song_features(rows, models, [mode])[mode]
    data = [(f, labels.index(r["singer"])) for r, fs in zip(rows, feats) for f in fs]
    cls_cfg = clf.ClassifierConfig(num_singers=len(labels))
    res = clf.train_classifier(data, cls_cfg, epochs=args.epochs, seed=args.seed)
    with bundle_lock(args.out):
        clf.save_classifier(res.params, args.out, cls_cfg, labels)
        training_log(args.out, "classifier", args, res.losses, {"features": mode, "songs": len(rows)})
    return EXIT_OK


def cmd_segment(args):
    cfg = pipeline_config(args)
    params, _ = sgm.load_segmenter(cfg.segmenter) if cfg.segmenter else (None, None)
    if params is None:
        raise UsageError("segment needs --segmenter or a --config naming one")
    timeline, _ = sgm.segment(sg.load_audio(args.input), params, cfg.transition_model, cfg.min_segment)
    text = json.dumps(timeline.to_json(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_separate(args):
    cfg = pipeline_config(args)
    if not cfg.separator:
        raise UsageError("separate needs --separator or a --config naming one")
    params, sep_cfg = sep.load_separator(cfg.separator)
    _, vocal = sep.separate(sg.load_audio(args.input), params, sep_cfg)
    sg.write_wav(args.out, vocal)
    return EXIT_OK


def cmd_identify(args):
    cfg = pipeline_config(args)
    need = ("segmenter", "classifier") if args.raw else ("segmenter", "separator", "classifier")
    models = pl.Models.load(cfg, need=need)
    pred = pl.predict_song(sg.load_audio(args.input), models, raw=args.raw)
    print(json.dumps(pred.to_json(models.labels), indent=2))
    return EXIT_OK


def cmd_eval_seg(args):
    cfg = pipeline_config(args)
    if not cfg.segmenter:
        raise UsageError("eval-seg needs --segmenter or a --config naming one")
    params, _ = sgm.load_segmenter(cfg.segmenter)
    rows = manifest_rows(args.data, args.split)
    per_song, cnn_all, vit_all, truth_all = [], [], [], []
    example = None
    for r in rows:
        audio = sg.load_audio(r["path"])
        truth_tl = sgm.SegmentTimeline.from_json(r)
        probs = sgm.frame_probabilities(audio, params)
        n = min(len(probs.p_vocal), int(round(truth_tl.duration / truth_tl.hop_seconds)))
        truth = truth_tl.frame_labels(n)
        cnn = (probs.p_vocal[:n] > 0.5).astype(np.int64)
        smoothed = sgm.viterbi_smooth(probs.p_vocal, cfg.transition_model)
        vit = sgm.timeline_from_labels(smoothed, probs.hop_seconds, cfg.min_segment).frame_labels(n)
        per_song.append({"id": r.get("id", r["path"]), "cnn": sgm.label_precision(cnn, truth),
                         "cnn_viterbi": sgm.label_precision(vit, truth)})
        cnn_all.append(cnn)
        vit_all.append(vit)
        truth_all.append(truth)
        if example is None:
            example = (probs.p_vocal[:n], vit, truth)
    truth = np.concatenate(truth_all)
    report = {
        "songs": len(rows),
        "frames": int(len(truth)),
        "hmm": {"p_stay_vocal": cfg.p_stay_vocal, "p_stay_nonvocal": cfg.p_stay_nonvocal,
                "prior_vocal": cfg.prior_vocal, "min_segment": cfg.min_segment},
        "cnn": sgm.label_precision(np.concatenate(cnn_all), truth),
        "cnn_viterbi": sgm.label_precision(np.concatenate(vit_all), truth),
        "per_song": per_song,
    }
    write_json(args.report, report)
    write_csv(sidecar(args.report, ".csv"), ["id", "cnn_mean", "cnn_viterbi_mean", "cnn_accuracy",
                                             "cnn_viterbi_accuracy"],
              [(s["id"], s["cnn"]["mean"], s["cnn_viterbi"]["mean"], s["cnn"]["accuracy"],
                s["cnn_viterbi"]["accuracy"]) for s in per_song])
    if not args.no_figures:
        from . import plotting
        plotting.segmentation_figure(report, sidecar(args.report, ".png"), example)
    return EXIT_OK


def cmd_eval_sep(args):
    cfg = pipeline_config(args)
    if not cfg.separator:
        raise UsageError("eval-sep needs --separator or a --config naming one")
    params, sep_cfg = sep.load_separator(cfg.separator)
    rows = manifest_rows(args.data, args.split)
    report = sep.eval_separation(sep.load_pairs(rows), params, sep_cfg)
    write_json(args.report, report)
    write_csv(sidecar(args.report, ".csv"), ["id", "si_sdr", "baseline", "improvement"],
              [(t["id"], t["si_sdr"], t["baseline"], t["improvement"]) for t in report["per_track"]])
    if not args.no_figures:
        from . import plotting
        plotting.separation_figure(report, sidecar(args.report, ".png"))
    return EXIT_OK


def _eval_predictions(args):
    rows = [json.loads(line) for line in Path(args.predictions).read_text(encoding="utf-8").splitlines()
            if line.strip()]
    labels = clf.LabelMap.from_labels([r["singer"] for r in rows] + [r["predicted"] for r in rows])
    truth = [labels.index(r["singer"]) for r in rows]
    pred = [labels.index(r["predicted"]) for r in rows]
    report = {"labels": list(labels.names), "song": clf.prf_metrics(pred, truth, len(labels))}
    write_json(args.report, report)
    return EXIT_OK


def cmd_eval_cls(args):
    if args.predictions:
        return _eval_predictions(args)
    if not args.data:
        raise UsageError("eval-cls needs --data (or --predictions)")
    cfg = pipeline_config(args)
    modes = ["separated", "raw"] if args.features == "both" else [args.features]
    need = ("segmenter", "separator") if "separated" in modes else ("segmenter",)
    models = pl.Models.load(cfg, need=need)
    rows = manifest_rows(args.data, args.split)
    labels = clf.LabelMap.from_labels(r["singer"] for r in rows)
    y = [labels.index(r["singer"]) for r in rows]
    feats = song_features(rows, models, modes)
    report = {"labels": list(labels.names), "songs": len(rows), "k": args.folds, "epochs": args.epochs}
    for m in modes:
        cv = pl.cross_validate(feats[m], y, len(labels), k=args.folds, seed=args.seed, epochs=args.epochs)
        cv["song_predictions"] = [labels.names[i] for i in cv["song_predictions"]]
        report[m] = cv
    write_json(args.report, report)
    write_csv(sidecar(args.report, ".csv"), ["id", "singer", *[f"predicted_{m}" for m in modes]],
              [(r.get("id", r["path"]), r["singer"], *[report[m]["song_predictions"][i] for m in modes])
               for i, r in enumerate(rows)])
    if not args.no_figures:
        from . import plotting
        plotting.fold_figure({m: report[m] for m in modes}, sidecar(args.report, "_folds.png"))
        for m in modes:
            pred = [labels.index(n) for n in report[m]["song_predictions"]]
            plotting.confusion_figure(pred, y, labels.names, sidecar(args.report, f"_confusion_{m}.png"),
                                      title=f"{m} features")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="pipeline config JSON (bundle paths, HMM, snippets)")
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS if suppress else 0)
    parser.add_argument("--threads", type=int, default=default, help="cap BLAS threads")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def _pipeline_flags(parser):
    parser.add_argument("--segmenter", help="segmenter bundle (overrides the config)")
    parser.add_argument("--separator", help="separator bundle (overrides the config)")
    parser.add_argument("--classifier", help="classifier bundle (overrides the config)")
    parser.add_argument("--p-stay-vocal", type=float)
    parser.add_argument("--p-stay-nonvocal", type=float)
    parser.add_argument("--prior-vocal", type=float)
    parser.add_argument("--min-segment", type=float, help="shortest kept segment in seconds")
    parser.add_argument("--snippet-seconds", type=float)


def build_parser():
    parser = argparse.ArgumentParser(prog="singerid", description="Singer identification pipeline")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _global_flags(p, suppress=True)
        p.set_defaults(func=fn)
        return p

    p = command("synth-data", cmd_synth_data, "generate the synthetic dataset and manifests")
    p.add_argument("--out", required=True)
    p.add_argument("--singers", type=int, default=6)
    p.add_argument("--clips-per-singer", type=int, default=20)
    p.add_argument("--clip-seconds", type=float, default=10.0)
    p.add_argument("--test-fraction", type=float, default=0.2)

    p = command("train-seg", cmd_train_seg, "train the vocal/non-vocal segmenter")
    p.add_argument("--data", required=True, help="segmentation manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--windows-per-epoch", type=int, default=6400)
    p.add_argument("--split", default="train")

    p = command("train-sep", cmd_train_sep, "train the vocal separator")
    p.add_argument("--data", required=True, help="separation pair manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--skip-kind", choices=sep.SKIP_KINDS, default="gru")
    p.add_argument("--split", default="train")

    p = command("train-cls", cmd_train_cls, "train the singer classifier on pipeline features")
    p.add_argument("--data", required=True, help="classification manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--split", default="train")
    p.add_argument("--raw", action="store_true", help="use mixture features instead of separated vocals")
    _pipeline_flags(p)

    p = command("segment", cmd_segment, "print the vocal/non-vocal timeline of a WAV file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    _pipeline_flags(p)

    p = command("separate", cmd_separate, "write the estimated vocal stem of a WAV file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    _pipeline_flags(p)

    p = command("identify", cmd_identify, "identify the singer of a WAV file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--raw", action="store_true", help="bypass separation")
    _pipeline_flags(p)

    for name, fn, text in (("eval-seg", cmd_eval_seg, "segmentation precision with and without Viterbi"),
                           ("eval-sep", cmd_eval_sep, "SI-SDR of separated vocals against the mixture")):
        p = command(name, fn, text)
        p.add_argument("--data", required=True)
        p.add_argument("--report", required=True)
        p.add_argument("--split", default="test", help="manifest split to evaluate ('all' for every entry)")
        p.add_argument("--no-figures", action="store_true")
        _pipeline_flags(p)

    p = command("eval-cls", cmd_eval_cls, "stratified k-fold singer classification report")
    p.add_argument("--data")
    p.add_argument("--predictions", help="JSON lines of {singer, predicted}; scores them directly")
    p.add_argument("--report", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--split", default="all")
    p.add_argument("--features", choices=("both", "separated", "raw"), default="both")
    p.add_argument("--no-figures", action="store_true")
    _pipeline_flags(p)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    limiter = contextlib.nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(args.threads)
    try:
        with limiter:
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"singerid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pl.NoVocalContentError as exc:
        print(f"singerid: {exc}", file=sys.stderr)
        return EXIT_NO_VOCAL
    except (ValueError, OSError, RuntimeError, KeyError, nn.BundleError, json.JSONDecodeError) as exc:
        print(f"singerid: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
