import json
import struct

import numpy as np
import pytest

from slotground.config import RunConfig, RunConfigError, build_config, parse_config, parse_text, save_config
from slotground.io import Checkpoint, FormatError, load_checkpoint, read_svtf, save_checkpoint, write_svtf


# ---------------------------------------------------------------- SVTF


def test_svtf_round_trip(tmp_path):
    f = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
    p = tmp_path / "a.svtf"
    write_svtf(p, f)
    raw = p.read_bytes()
    assert raw[:4] == b"SVTF"
    assert struct.unpack("<IIII", raw[4:20]) == (1, 3, 4, 5)
    assert len(raw) == 20 + 4 * 3 * 4 * 5
    assert read_svtf(p).tobytes() == f.tobytes()


def test_svtf_rejects_bad_files(tmp_path):
    p = tmp_path / "b.svtf"
    write_svtf(p, np.ones((1, 2, 3)))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(FormatError):
        read_svtf(p)
    p.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(FormatError):
        read_svtf(p)
    with pytest.raises(FormatError):
        write_svtf(p, np.array([[[np.nan]]]))
    with pytest.raises(FormatError):
        write_svtf(p, np.ones((2, 3)))


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    arrays = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4), "s": np.array(1e-300)}
    opt = {"step": 7, "m": {"w": rng.normal(size=(3, 4))}, "v": {"w": rng.random((3, 4))}}
    ck = Checkpoint({"lr": 5e-5}, arrays, opt, {"step": 7})
    p = tmp_path / "c.sgck"
    save_checkpoint(p, ck)
    back = load_checkpoint(p)
    assert back.config == {"lr": 5e-5} and back.meta == {"step": 7}
    for k in arrays:
        assert back.arrays[k].tobytes() == arrays[k].tobytes() and back.arrays[k].shape == arrays[k].shape
    assert back.optimizer["step"] == 7
    assert back.optimizer["m"]["w"].tobytes() == opt["m"]["w"].tobytes()
    save_checkpoint(tmp_path / "d.sgck", back)
    assert (tmp_path / "d.sgck").read_bytes() == p.read_bytes()


def test_checkpoint_corruption(tmp_path):
    p = tmp_path / "c.sgck"
    save_checkpoint(p, Checkpoint({}, {"w": np.ones(3)}))
    data = p.read_bytes()
    p.write_bytes(data[:-3])
    with pytest.raises(FormatError):
        load_checkpoint(p)
    p.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        load_checkpoint(p)


# ---------------------------------------------------------------- config


def test_empty_config_gives_reported_defaults():
    c = parse_config()
    assert (c.adapter_dim, c.n_slots, c.slot_iters, c.slot_heads) == (512, 4, 3, 8)
    assert (c.lambda_sa, c.epochs, c.lr) == (0.1, 5, 5e-5)
    assert (c.lora_rank, c.lora_alpha, c.frames_per_video) == (16, 64.0, 20)


def test_overrides_and_aliases(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nlambda = 0.2\nadapter_layers = 1,2\nn_slots=3\n")
    c = parse_config(p, ["n_slots=5", "train_base=true"])
    assert c.lambda_sa == 0.2 and c.n_slots == 5 and c.train_base is True
    assert c.adapter_layers == (1, 2)
    j = tmp_path / "run.json"
    j.write_text(json.dumps({"lambda": 0.2, "lora_layers": [3, 4]}))
    assert parse_config(j).lora_layers == (3, 4)


@pytest.mark.parametrize(
    "over, key",
    [
        (["n_slots=0"], "n_slots"),
        (["nonsense=1"], "nonsense"),
        (["n_slots=abc"], "n_slots"),
        (["lr=-1"], "lr"),
        (["recon_mode=foo"], "recon_mode"),
        (["adapter_layers=2,3"], "adapter_layers"),
        (["adapter_type=none", "lora_layers=", "lambda=0"], "adapter_type"),
        (["adapter_type=self_attention"], "lambda_sa"),
        (["slot_heads=3"], "slot_heads"),
    ],
)
def test_errors_name_the_key(over, key):
    with pytest.raises(RunConfigError) as e:
        parse_config(None, over)
    assert e.value.key == key


def test_missing_file():
    with pytest.raises(RunConfigError):
        parse_config("/nonexistent/cfg")


def test_config_echo_reparses_equal(tmp_path):
    c = parse_config(None, ["lambda=0.2", "dim=64", "heads=4", "adapter_dim=32", "slot_heads=4"])
    save_config(c, tmp_path / "config.json")
    assert parse_config(tmp_path / "config.json") == c


def test_parse_text_rejects_garbage():
    with pytest.raises(RunConfigError):
        parse_text("just words")
    with pytest.raises(RunConfigError):
        parse_text("{not json")


def test_component_configs():
    c = build_config({"dim": 64, "adapter_dim": 32, "slot_heads": 4, "tokens_per_frame": 16})
    assert c.adapter_config().D == 64
    assert c.synth_spec().grid == (4, 4)
    d = c.decoder_config()
    assert d.max_len >= 20 * (16 + 5) + 1 + 14
    assert isinstance(c, RunConfig)
