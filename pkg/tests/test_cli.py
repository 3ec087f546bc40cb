import json

import numpy as np
import pytest

from app.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from app.export import export_json, summarize
from app.merging import InstanceMap
from app.models import RunConfig
from app.sequence import frame_path, read_intrinsics, read_sequence
from app.weights import MAGIC, PREAMBLE, VERSION, WeightBundle, flatten


def synthesize(path, *extra: str) -> None:
    args = ["synth", str(path), "--seed", "7", "--objects", "5", "--frames", "8", "--width", "80", "--height", "60", *extra]
    assert main(args) == EXIT_OK


def last_json(capsys) -> dict:
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_synth_run_eval_recovers_clean_scene(tmp_path, capsys):
    sequence = tmp_path / "seq"
    synthesize(sequence)
    out = tmp_path / "map.json"
    ply = tmp_path / "map.ply"
    timings = tmp_path / "timings.json"
    assert main(["run", str(sequence), "--out", str(out), "--ply", str(ply), "--timings", str(timings)]) == EXIT_OK
    assert ply.read_bytes().startswith(b"ply\n")
    assert len(json.loads(timings.read_text())) == 8

    capsys.readouterr()
    assert main(["eval", "--pred", str(out), "--gt", str(sequence)]) == EXIT_OK
    scores = last_json(capsys)
    assert scores == {"ap": 1.0, "ap50": 1.0, "ap25": 1.0}


def test_eval_against_itself(tmp_path, capsys):
    sequence = tmp_path / "seq"
    synthesize(sequence, "--noise", "0.2")
    out = tmp_path / "map.json"
    assert main(["run", str(sequence), "--out", str(out)]) == EXIT_OK
    capsys.readouterr()
    report = tmp_path / "eval.json"
    assert main(["eval", "--pred", str(out), "--gt", str(out), "--out", str(report)]) == EXIT_OK
    assert last_json(capsys)["ap"] == pytest.approx(1.0)
    assert "0.50" in json.loads(report.read_text())["curves"]


def test_run_records_overrides(tmp_path):
    sequence = tmp_path / "seq"
    synthesize(sequence)
    out = tmp_path / "map.json"
    assert main(["run", str(sequence), "--out", str(out), "--set", "prune_threshold=1.5", "--set", "pooling=\"average\""]) == EXIT_OK
    provenance = json.loads(out.read_text())["provenance"]
    assert provenance["overrides"] == {"prune_threshold": 1.5, "pooling": "average"}


def test_bench_reports_stage_latencies(capsys):
    assert main(["bench", "--prev", "20", "--cur", "10", "--channels", "8", "--repeats", "2", "--decoder-points", "100"]) == EXIT_OK
    line = last_json(capsys)
    assert set(line) == {"similarity_ms", "matching_ms", "updating_ms", "merging_ms", "decoder_ms"}
    assert line["merging_ms"] == pytest.approx(line["similarity_ms"] + line["matching_ms"] + line["updating_ms"])


def test_bad_override_exits_with_config_code(tmp_path, capsys):
    sequence = tmp_path / "seq"
    synthesize(sequence)
    assert main(["run", str(sequence), "--out", str(tmp_path / "m.json"), "--set", "mask_threshold=2"]) == EXIT_CONFIG
    assert main(["run", str(sequence), "--out", str(tmp_path / "m.json"), "--set", "no_such_key=1"]) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_missing_frame_exits_with_runtime_code(tmp_path, capsys):
    sequence = tmp_path / "seq"
    synthesize(sequence)
    frame_path(sequence, "depth", 1, "png").unlink()
    assert main(["run", str(sequence), "--out", str(tmp_path / "m.json")]) == EXIT_RUNTIME
    assert "00001" in capsys.readouterr().err


def test_missing_sequence_is_a_config_error(tmp_path):
    assert main(["run", str(tmp_path / "absent"), "--out", str(tmp_path / "m.json")]) == EXIT_CONFIG


def test_malformed_weights_exit_with_config_code(tmp_path, capsys):
    sequence = tmp_path / "seq"
    synthesize(sequence)
    tensors = flatten(WeightBundle.random(channels=32, num_classes=20))
    tensors["decoder.layers.0.cross_norm.gamma"] = np.ones(32)
    header = json.dumps({"tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]}).encode("utf-8")
    weights = tmp_path / "model.sw"
    payload = b"".join(np.asarray(v, dtype="<f4").tobytes() for v in tensors.values())
    weights.write_bytes(MAGIC + PREAMBLE.pack(VERSION, len(header)) + header + payload)
    assert main(["run", str(sequence), "--out", str(tmp_path / "m.json"), "--weights", str(weights)]) == EXIT_CONFIG
    assert "cross_norm.beta" in capsys.readouterr().err


def test_synth_takes_sizes_from_the_profile(tmp_path):
    profile = tmp_path / "profile.json"
    profile.write_text(json.dumps({**RunConfig().model_dump(mode="json"), "depth_scale": 0.0005, "channels": 8}))
    sequence = tmp_path / "seq"
    synthesize(sequence, "--config", str(profile), "--set", "num_classes=6")
    _, depth_scale = read_intrinsics(sequence)
    frame = next(iter(read_sequence(sequence)))
    assert depth_scale == 0.0005
    assert frame.features.shape[1] == 8 and frame.meta.semantics.shape[1] == 6

    flagged = tmp_path / "flagged"
    synthesize(flagged, "--config", str(profile), "--channels", "4", "--depth-scale", "0.002")
    assert read_intrinsics(flagged)[1] == 0.002
    assert next(iter(read_sequence(flagged))).features.shape[1] == 4


def test_eval_empty_score_comes_from_the_profile(tmp_path, capsys):
    pred = tmp_path / "empty.json"
    export_json(summarize(InstanceMap(), RunConfig()), pred)
    gt = tmp_path / "gt.json"
    gt.write_text("[]")
    assert main(["eval", "--pred", str(pred), "--gt", str(gt)]) == EXIT_OK
    assert last_json(capsys)["ap"] == 1.0
    assert main(["eval", "--pred", str(pred), "--gt", str(gt), "--set", "empty_ap=0.0"]) == EXIT_OK
    assert last_json(capsys)["ap"] == 0.0
    assert main(["eval", "--pred", str(pred), "--gt", str(gt), "--set", "empty_ap=0.0", "--empty-ap", "0.5"]) == EXIT_OK
    assert last_json(capsys)["ap"] == 0.5
    assert main(["eval", "--pred", str(pred), "--gt", str(gt), "--set", "depth_scale=-1"]) == EXIT_CONFIG
