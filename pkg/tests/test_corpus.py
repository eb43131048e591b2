import hashlib
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gated_res2net.blocks import BackboneConfig, build_backbone
from gated_res2net.corpus import (
    SEEN_CLICK_RANGE,
    SEEN_NOTCH_RANGE,
    UNSEEN_CLICK_RANGE,
    UNSEEN_NOTCH_RANGE,
    CheckpointError,
    ProtocolError,
    SynthConfig,
    Trial,
    click_periodicity,
    detect_artifacts,
    load_checkpoint,
    parse_protocol,
    save_checkpoint,
    synth_corpus,
    synth_utterance,
    write_protocol,
)
from gated_res2net.features import read_wav
from gated_res2net.tensor import DimensionError

TINY = BackboneConfig(input_shape=(16, 12), stem_channels=8, stages=((1, 8, 1), (1, 16, 2)), reduction=2)
SMALL = SynthConfig(train=(4, 4), dev=(2, 2), eval=(2, 2))


def test_parse_examples(tmp_path):
    p = tmp_path / "p.txt"
    p.write_text("LA_0001 LA_T_100 - - bonafide\nLA_0002 LA_T_200 - A03 spoof\n\n")
    a, b = parse_protocol(p)
    assert a == Trial("LA_T_100", "LA_0001", "-", "bonafide")
    assert b.attack_id == "A03" and b.label == "spoof"
    assert parse_protocol(p, audio_dir="/x")[0].path == "/x/LA_T_100.wav"


@pytest.mark.parametrize("line,match", [
    ("LA_0001 LA_T_100 bonafide", ":2: expected 5 fields"),
    ("LA_0001 LA_T_100 - A01 bonafide", ":2:"),
    ("LA_0001 LA_T_100 - - spoof", ":2:"),
    ("LA_0001 LA_T_100 x - bonafide", ":2:"),
    ("LA_0001 LA_T_100 - - unknown", ":2:"),
])
def test_parse_errors_name_the_line(tmp_path, line, match):
    p = tmp_path / "p.txt"
    p.write_text("S T - - bonafide\n" + line + "\n")
    with pytest.raises(ProtocolError, match=match):
        parse_protocol(p)


ident = st.text(alphabet="ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_", min_size=1, max_size=10)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(ident, ident, st.one_of(st.just("-"), ident.map(lambda s: "A" + s))), max_size=20))
def test_protocol_roundtrip(tmp_path_factory, rows):
    trials = [Trial(t, s, a, "bonafide" if a == "-" else "spoof") for s, t, a in rows]
    p = tmp_path_factory.mktemp("proto") / "p.txt"
    write_protocol(p, trials)
    assert parse_protocol(p) == trials


def test_attack_ranges_are_disjoint():
    cfg = SynthConfig()
    assert SEEN_CLICK_RANGE[1] < UNSEEN_CLICK_RANGE[0] or UNSEEN_CLICK_RANGE[1] < SEEN_CLICK_RANGE[0]
    assert SEEN_NOTCH_RANGE[1] < UNSEEN_NOTCH_RANGE[0]
    seen = {(a.click_interval, a.notch_spacing) for a in cfg.seen_attacks}
    for a in cfg.unseen_attacks:
        assert UNSEEN_CLICK_RANGE[0] <= a.click_interval <= UNSEEN_CLICK_RANGE[1]
        assert UNSEEN_NOTCH_RANGE[0] <= a.notch_spacing <= UNSEEN_NOTCH_RANGE[1]
    for c, n in seen:
        assert SEEN_CLICK_RANGE[0] <= c <= SEEN_CLICK_RANGE[1]
        assert SEEN_NOTCH_RANGE[0] <= n <= SEEN_NOTCH_RANGE[1]
    assert not {a.attack_id for a in cfg.seen_attacks} & {a.attack_id for a in cfg.unseen_attacks}


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_corpus_layout_and_determinism(tmp_path):
    splits = synth_corpus(SMALL, tmp_path / "a")
    synth_corpus(SMALL, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    train = parse_protocol(tmp_path / "a" / "protocols" / "train.txt")
    assert len(train) == 8 and sum(t.label == "spoof" for t in train) == 4
    assert [t.trial_id for t in train] == [t.trial_id for t in splits["train"]]
    eval_attacks = {t.attack_id for t in parse_protocol(tmp_path / "a" / "protocols" / "eval.txt")} - {"-"}
    assert eval_attacks <= {a.attack_id for a in SMALL.unseen_attacks}
    lines = (tmp_path / "a" / "wav_list.txt").read_text().split()
    assert len(lines) == 16
    w = read_wav(tmp_path / "a" / lines[0])
    assert w.sample_rate == 16000 and w.samples.size == 16000 and np.abs(w.samples).max() <= 0.51


def test_corpus_differs_with_seed(tmp_path):
    synth_corpus(SMALL, tmp_path / "a")
    synth_corpus(replace(SMALL, seed=1), tmp_path / "b")
    assert _digest(tmp_path / "a") != _digest(tmp_path / "b")


def test_parallel_generation_is_identical(tmp_path):
    synth_corpus(SMALL, tmp_path / "a")
    synth_corpus(replace(SMALL, workers=2), tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(train=(-1, 2)).validate()
    with pytest.raises(ValueError):
        SynthConfig(duration=(2.0, 1.0)).validate()


def test_detector_separates_train_classes():
    cfg = SynthConfig()
    correct = 0
    n = 40
    for i in range(n):
        rng = np.random.default_rng(i)
        correct += not detect_artifacts(synth_utterance(rng, cfg, None), cfg.sample_rate)
        correct += detect_artifacts(synth_utterance(rng, cfg, cfg.seen_attacks[i % 6]), cfg.sample_rate)
    assert correct / (2 * n) >= 0.95


def test_periodicity_of_click_train():
    x = np.random.default_rng(0).standard_normal(16000) * 1e-3
    x[::800] += 1.0  # 50 ms impulse train
    assert click_periodicity(x, 16000) > 0.9
    assert click_periodicity(np.zeros(16000), 16000) == 0.0


def _model(arch="scg", seed=3):
    m = build_backbone(TINY.with_arch(arch), seed=seed)
    x = np.random.default_rng(0).standard_normal((4, 16, 12)).astype(np.float32)
    m(x)  # move running statistics away from their defaults
    return m.eval(), x


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    m, x = _model()
    save_checkpoint(m, tmp_path / "m.ckpt", metadata={"epoch": 2, "dev_eer": 0.125})
    loaded, info = load_checkpoint(tmp_path / "m.ckpt")
    loaded.eval()
    assert info["metadata"] == {"epoch": 2, "dev_eer": 0.125}
    assert loaded.cfg == m.cfg
    for (n1, a), (n2, b) in zip(sorted(m.state_dict().items()), sorted(loaded.state_dict().items())):
        assert n1 == n2 and a.dtype == b.dtype and a.tobytes() == b.tobytes()
    assert m(x).data.tobytes() == loaded(x).data.tobytes()


def test_checkpoint_with_optimizer_state(tmp_path):
    from gated_res2net.training import Adam, ce_loss

    m, x = _model()
    m.train()
    opt = Adam(m.named_parameters())
    ce_loss(m(x), np.array([0, 1, 0, 1])).backward()
    opt.step()
    save_checkpoint(m, tmp_path / "m.ckpt", opt)
    _, info = load_checkpoint(tmp_path / "m.ckpt")
    state = info["optimizer"]
    assert state["step"] == 1
    for k, v in opt.state.m.items():
        np.testing.assert_array_equal(state["m"][k], v)


def test_truncated_checkpoint(tmp_path):
    m, _ = _model()
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p)
    blob = p.read_bytes()
    for cut in (10, len(blob) // 2, len(blob) - 1):
        p.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(p)
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    p.write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_wrong_architecture_is_shape_mismatch(tmp_path):
    m, _ = _model("scg")
    save_checkpoint(m, tmp_path / "m.ckpt")
    with pytest.raises(DimensionError, match="shape"):
        load_checkpoint(tmp_path / "m.ckpt", cfg=TINY.with_arch("mcg"))
    with pytest.raises(DimensionError):
        load_checkpoint(tmp_path / "m.ckpt", cfg=TINY.with_arch("mlcg"))


def test_version_mismatch(tmp_path):
    import struct
    import zlib

    m, _ = _model()
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p)
    body = bytearray(p.read_bytes()[:-4])
    body[8:12] = struct.pack("<I", 99)
    p.write_bytes(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)
