import json
import re

import numpy as np
import pytest

from gated_res2net.blocks import BackboneConfig
from gated_res2net.cli import UsageError, main, read_config_file, resolve, worker_count
from gated_res2net.corpus import SynthConfig
from gated_res2net.features import load_features


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def total_params(capsys, arch, *extra):
    code, out, _ = run(capsys, "param-count", "--arch", arch, *extra)
    assert code == 0
    return int(re.search(r"^total (\d+)$", out, re.M).group(1))


def test_unknown_arch_is_usage_error(capsys):
    code, _, err = run(capsys, "param-count", "--arch", "resnet")
    assert code == 2 and "invalid choice" in err


def test_missing_required_flag_is_usage_error(capsys):
    assert run(capsys, "train", "--arch", "mcg")[0] == 2


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("stem_chanels = 4\n")
    code, _, err = run(capsys, "param-count", "--arch", "scg", "--config", str(cfg))
    assert code == 2 and "stem_chanels" in err


def test_runtime_failure_exit_code(tmp_path, capsys):
    code, _, err = run(capsys, "metrics", "--scores", str(tmp_path / "missing.txt"))
    assert code == 1 and "error" in err


def test_metrics_on_perfect_scores(tmp_path, capsys):
    p = tmp_path / "perfect.txt"
    lines = [f"B{i} bonafide {1.0 + i}" for i in range(5)] + [f"S{i} spoof {-1.0 - i}" for i in range(7)]
    p.write_text("\n".join(lines) + "\n")
    code, out, _ = run(capsys, "metrics", "--scores", str(p), "--out", str(tmp_path / "r.csv"))
    assert code == 0
    assert re.search(r"^EER 0\.0$", out, re.M)
    report = (tmp_path / "r.csv").read_text().splitlines()
    assert report[0] == "section,key,value" and "summary,eer,0.0" in report
    assert (tmp_path / "r.csv.manifest.json").exists()


def test_metrics_with_tdcf_and_attacks(tmp_path, capsys):
    from importlib.resources import files

    scores = tmp_path / "s.txt"
    scores.write_text("T1 bonafide 2.0\nT2 bonafide 1.0\nT3 spoof -1.0\nT4 spoof 1.5\n")
    proto = tmp_path / "p.txt"
    proto.write_text("S1 T1 - - bonafide\nS1 T2 - - bonafide\nS2 T3 - A07 spoof\nS2 T4 - A08 spoof\n")
    params = files("gated_res2net") / "data" / "tdcf_params.sample.txt"
    code, out, _ = run(capsys, "metrics", "--scores", str(scores), "--tdcf-params", str(params),
                       "--attacks", str(proto))
    assert code == 0
    assert "min t-DCF" in out
    assert re.search(r"^accuracy A07 1\.0000 \(n=1\)$", out, re.M)
    assert re.search(r"^accuracy A08 0\.0000 \(n=1\)$", out, re.M)


def test_param_count_deltas(capsys):
    cfg = BackboneConfig()
    s = cfg.scale
    groups = [width // s for blocks, width, _ in cfg.stages for _ in range(blocks)]
    base = total_params(capsys, "res2net")
    assert total_params(capsys, "scg") - base == sum((s - 2) * c * c for c in groups)
    assert total_params(capsys, "mcg") - base == sum((s - 2) * 2 * c * c for c in groups)
    assert total_params(capsys, "mlcg") - base == sum((s - 2) * 4 * c * c // cfg.reduction for c in groups)


def test_param_count_reads_config(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# tiny\nstages = ((1, 8, 1),)\nstem_channels = 8\nreduction = 2\n")
    small = total_params(capsys, "mlcg", "--config", str(cfg))
    base = total_params(capsys, "res2net", "--config", str(cfg))
    assert small - base == 2 * 4 * 2 * 2 // 2


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("seed = 5\nspeakers = 7\nf0_range = (100, 200)\n")
    values = read_config_file(cfg)
    assert values == {"seed": 5, "speakers": 7, "f0_range": (100, 200)}
    out = resolve(SynthConfig, values, {"seed": 9, "speakers": None})
    assert (out.seed, out.speakers, out.f0_range, out.sample_rate) == (9, 7, (100, 200), 16000)
    bad = tmp_path / "bad.txt"
    bad.write_text("no equals sign\n")
    with pytest.raises(UsageError, match=":1:"):
        read_config_file(bad)


def test_worker_cap(monkeypatch):
    monkeypatch.setenv("GATED_RES2NET_THREADS", "2")
    assert worker_count(8) == 2
    assert worker_count(None) <= 2
    monkeypatch.delenv("GATED_RES2NET_THREADS")
    assert worker_count(3) == 3


def test_grad_check_command(capsys):
    code, out, _ = run(capsys, "grad-check", "--arch", "scg", "--seed", "1")
    assert code == 0 and "block_scg" in out
    code, out, _ = run(capsys, "grad-check", "--arch", "scg", "--seed", "1", "--tol", "1e-30")
    assert code == 1 and "FAIL" in out


TINY_TRAIN = "stages = ((1, 8, 2),)\nstem_channels = 4\nstem_stride = 4\nbatch_size = 8\n"


def test_small_pipeline(tmp_path, capsys):
    synth_cfg = tmp_path / "synth.txt"
    synth_cfg.write_text("train = (4, 4)\ndev = (2, 2)\neval = (2, 2)\n")
    corpus = tmp_path / "corpus"
    assert run(capsys, "synth-data", "--out", str(corpus), "--seed", "3", "--config", str(synth_cfg))[0] == 0
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert manifest["command"] == "synth-data" and manifest["seed"] == 3
    assert manifest["config"]["train"] == [4, 4] and manifest["config"]["sample_rate"] == 16000

    feats = tmp_path / "feats"
    assert run(capsys, "extract", "--wav-list", str(corpus / "wav_list.txt"), "--out", str(feats))[0] == 0
    files = sorted(feats.glob("*.feat"))
    assert len(files) == 16
    spec = load_features(files[0])
    assert spec.shape == (432, 400) and spec.dtype == np.float32
    assert json.loads((feats / "manifest.json").read_text())["config"]["f_min"] == 15.0

    train_cfg = tmp_path / "train.txt"
    train_cfg.write_text(TINY_TRAIN)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code, log, _ = run(capsys, "train", "--features", str(feats), "--protocols", str(corpus / "protocols"),
                           "--arch", "mcg", "--out", str(out), "--epochs", "2", "--config", str(train_cfg))
        assert code == 0 and "best epoch" in log
        scores = tmp_path / f"{name}.scores"
        assert run(capsys, "evaluate", "--checkpoint", str(out / "best.ckpt"), "--features", str(feats),
                   "--protocol", str(corpus / "protocols" / "eval.txt"), "--out", str(scores))[0] == 0
        outs.append((out, scores))
    (a, sa), (b, sb) = outs
    assert (a / "best.ckpt").read_bytes() == (b / "best.ckpt").read_bytes()
    assert sa.read_bytes() == sb.read_bytes()
    assert (a / "train_log.csv").read_text() == (b / "train_log.csv").read_text()
    m = json.loads((a / "manifest.json").read_text())
    assert m["config"]["arch"] == "mcg" and m["config"]["train"]["epochs"] == 2
    assert m["config"]["train"]["batch_size"] == 8 and m["config"]["adam"]["lr"] == 3e-4
    lines = sa.read_text().splitlines()
    assert len(lines) == 4 and all(float(line.split()[2]) <= 0 for line in lines)
    assert run(capsys, "metrics", "--scores", str(sa), "--attacks", str(corpus / "protocols" / "eval.txt"))[0] == 0
