import json

import numpy as np
import pytest

from singerid import classifier as clf
from singerid import cli
from singerid import segmenter as sgm
from singerid import separator as sep
from singerid import signal as sg
from singerid import synthdata as sd


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    sd.build_dataset(2, 5, root, seed=3, clip_seconds=8.0)
    return root


def biased_segmenter(directory, vocal):
    """A segmenter whose output ignores its input: always vocal or never."""
    params = sgm.init_segnet(sgm.SegmenterConfig(), 0)
    params["out.W"].data[:] = 0.0
    params["out.b"].data[:] = [-10.0, 10.0] if vocal else [10.0, -10.0]
    sgm.save_segmenter(params, directory)
    return directory


@pytest.fixture(scope="module")
def bundles(tmp_path_factory):
    root = tmp_path_factory.mktemp("bundles")
    cfg = sep.SeparatorConfig(channels=(8, 8, 8))
    sep.save_separator(sep.init_sepnet(cfg, 0), root / "sep", cfg)
    return {"vocal": biased_segmenter(root / "seg_vocal", True),
            "silent": biased_segmenter(root / "seg_silent", False),
            "sep": root / "sep"}


def test_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["synth-data"])
    assert exc.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_synth_data_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        code, _, _ = run(capsys, "synth-data", "--out", tmp_path / name, "--singers", 2, "--clips-per-singer", 2,
                         "--clip-seconds", 8, "--seed", 42)
        assert code == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len([f for f in files if f.name.endswith("_mix.wav")]) == 4
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_seg_zero_epochs_writes_init_bundle(dataset, tmp_path, capsys):
    code, _, err = run(capsys, "train-seg", "--data", dataset / "segmentation.jsonl", "--out", tmp_path / "seg",
                       "--epochs", 0, "--seed", 4)
    assert code == 0, err
    params, _ = sgm.load_segmenter(tmp_path / "seg")
    init = sgm.init_segnet(sgm.SegmenterConfig(), 4)
    assert np.array_equal(params["conv1.k"].data, init["conv1.k"].data)
    log = json.loads((tmp_path / "seg" / "training_log.json").read_text())
    assert log["losses"] == [] and log["stage"] == "segmenter"
    assert not (tmp_path / "seg" / ".lock").exists()


def test_train_sep_variants_differ_only_in_skip_kind(dataset, tmp_path, capsys):
    for kind in ("gru", "lstm"):
        code, _, err = run(capsys, "train-sep", "--data", dataset / "separation.jsonl", "--out", tmp_path / kind,
                           "--epochs", 0, "--skip-kind", kind)
        assert code == 0, err
    g = json.loads((tmp_path / "gru" / "arch.json").read_text())
    lstm = json.loads((tmp_path / "lstm" / "arch.json").read_text())
    diff = {k for k in g["hyperparameters"] if g["hyperparameters"][k] != lstm["hyperparameters"][k]}
    assert diff == {"skip_kind"}
    assert g["architecture"] == lstm["architecture"] == "sepnet"


def test_locked_bundle_is_runtime_error(dataset, tmp_path, capsys):
    (tmp_path / "seg").mkdir()
    (tmp_path / "seg" / ".lock").write_text("123")
    code, _, err = run(capsys, "train-seg", "--data", dataset / "segmentation.jsonl", "--out", tmp_path / "seg",
                       "--epochs", 0)
    assert code == 1
    assert "locked" in err


def test_eval_cls_perfect_predictions(tmp_path, capsys):
    preds = tmp_path / "preds.jsonl"
    preds.write_text("".join(json.dumps({"singer": s, "predicted": s}) + "\n" for s in ["a", "b", "c", "a"]))
    code, _, _ = run(capsys, "eval-cls", "--predictions", preds, "--report", tmp_path / "r.json")
    assert code == 0
    assert json.loads((tmp_path / "r.json").read_text())["song"]["macro"]["f1"] == 1.0


def test_identify_and_no_vocal_exit(dataset, bundles, tmp_path, capsys):
    code, _, err = run(capsys, "train-cls", "--data", dataset / "classification.jsonl", "--out", tmp_path / "cls",
                       "--epochs", 0, "--segmenter", bundles["vocal"], "--separator", bundles["sep"])
    assert code == 0, err
    config = {"segmenter": str(bundles["vocal"]), "separator": str(bundles["sep"]), "classifier": str(tmp_path / "cls")}
    (tmp_path / "pipe.json").write_text(json.dumps(config))
    song = sd.read_manifest(dataset / "classification.jsonl")[0]["path"]
    code, out, err = run(capsys, "identify", "--config", tmp_path / "pipe.json", "--in", song)
    assert code == 0, err
    pred = json.loads(out)
    assert sum(pred["distribution"].values()) == pytest.approx(1.0, abs=1e-9)
    assert pred["singer"] in ("singer_00", "singer_01")
    assert pred["prob"] == max(pred["distribution"].values())

    code, _, err = run(capsys, "identify", "--config", tmp_path / "pipe.json", "--in", song,
                       "--segmenter", bundles["silent"])
    assert code == 3
    assert "no vocal" in err


def test_identify_bad_bundle(dataset, bundles, tmp_path, capsys):
    cls_dir = tmp_path / "cls"
    cfg = clf.ClassifierConfig(num_singers=2)
    clf.save_classifier(clf.init_classnet(cfg), cls_dir, cfg, clf.LabelMap(("a", "b")))
    blob = bytearray((cls_dir / "weights.bin").read_bytes())
    blob[10] ^= 0xFF
    (cls_dir / "weights.bin").write_bytes(bytes(blob))
    song = sd.read_manifest(dataset / "classification.jsonl")[0]["path"]
    code, _, err = run(capsys, "identify", "--in", song, "--segmenter", bundles["vocal"],
                       "--separator", bundles["sep"], "--classifier", cls_dir)
    assert code == 1
    assert "CRC32" in err


def test_eval_seg_report_blocks_and_figure(dataset, bundles, tmp_path, capsys):
    report = tmp_path / "seg.json"
    code, _, err = run(capsys, "eval-seg", "--data", dataset / "segmentation.jsonl", "--report", report,
                       "--segmenter", bundles["vocal"])
    assert code == 0, err
    r = json.loads(report.read_text())
    assert {"cnn", "cnn_viterbi"} <= set(r)
    # an always-vocal segmenter has perfect vocal precision only if every frame is vocal
    assert r["cnn"]["non_vocal"] == 0.0 and 0 < r["cnn"]["vocal"] < 1
    assert (tmp_path / "seg.png").stat().st_size > 0
    assert (tmp_path / "seg.csv").read_text().startswith("id,cnn_mean")


def test_eval_sep_report(dataset, bundles, tmp_path, capsys):
    report = tmp_path / "sep.json"
    code, _, err = run(capsys, "eval-sep", "--data", dataset / "separation.jsonl", "--report", report,
                       "--separator", bundles["sep"])
    assert code == 0, err
    r = json.loads(report.read_text())
    assert len(r["per_track"]) == 2
    assert all({"si_sdr", "baseline", "improvement"} <= set(t) for t in r["per_track"])
    assert (tmp_path / "sep.png").exists() and (tmp_path / "sep.csv").exists()


def test_separate_and_segment_commands(dataset, bundles, tmp_path, capsys):
    song = sd.read_manifest(dataset / "classification.jsonl")[0]["path"]
    code, _, err = run(capsys, "separate", "--in", song, "--out", tmp_path / "v.wav", "--separator", bundles["sep"])
    assert code == 0, err
    assert len(sg.read_wav(tmp_path / "v.wav")) == len(sg.read_wav(song))
    code, out, err = run(capsys, "segment", "--in", song, "--segmenter", bundles["vocal"])
    assert code == 0, err
    tl = sgm.SegmentTimeline.from_json(json.loads(out))
    assert [s.label for s in tl.segments] == ["vocal"]


def test_missing_manifest_is_runtime_error(tmp_path, capsys, bundles):
    code, _, err = run(capsys, "eval-sep", "--data", tmp_path / "nope.jsonl", "--report", tmp_path / "r.json",
                       "--separator", bundles["sep"])
    assert code == 1
    assert "nope.jsonl" in err
