import json

import numpy as np
import pytest

from lcgan.checkpoint import CheckpointError, load_checkpoint, prefixed, save_checkpoint, strip_prefix
from lcgan.config import DEFAULT_CONFIG, ConfigError, apply_overrides, load_config, write_snapshot


def test_default_config_is_a_copy():
    cfg = load_config()
    cfg["run"]["iterations"] = 1
    assert DEFAULT_CONFIG["run"]["iterations"] == 3000
    assert load_config("default") == DEFAULT_CONFIG


def test_partial_file_merges(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"run": {"iterations": 7}, "loss": {"lambda_seg": 0.5}}))
    cfg = load_config(str(p))
    assert cfg["run"]["iterations"] == 7
    assert cfg["loss"]["lambda_seg"] == 0.5
    assert cfg["loss"]["lambda_cyc"] == 5.0


@pytest.mark.parametrize("payload", ['{"run": {"iterationz": 1}}', '{"run": 3}', "[1, 2]", "{not json"])
def test_bad_files_rejected(tmp_path, payload):
    p = tmp_path / "c.json"
    p.write_text(payload)
    with pytest.raises(ConfigError):
        load_config(str(p))


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.json")


def test_dotted_overrides():
    cfg = apply_overrides(load_config(), {"run.iterations": 5, "optim.lr": None, "data.size": 32})
    assert cfg["run"]["iterations"] == 5 and cfg["data"]["size"] == 32
    assert cfg["optim"]["lr"] == 8e-5
    with pytest.raises(ConfigError):
        apply_overrides(cfg, {"run.bogus": 1})


def test_snapshot_reloads_identically(tmp_path):
    cfg = apply_overrides(load_config(), {"run.seeds": [4, 5]})
    path = write_snapshot(cfg, tmp_path / "out")
    assert load_config(str(path)) == cfg


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.w": rng.normal(size=(3, 2, 2)).astype(np.float32), "a.b": np.float32(rng.normal(size=()))
               , "c": rng.normal(size=(5,)).astype(np.float32)}
    save_checkpoint(tmp_path / "ck", tensors, {"kind": "test"}, {"step": 3})
    back, arch, meta = load_checkpoint(tmp_path / "ck")
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
    assert arch == {"kind": "test"} and meta == {"step": 3}
    assert (tmp_path / "ck" / "params.bin").stat().st_size == 4 * (12 + 1 + 5)


def test_checkpoint_is_deterministic(tmp_path):
    tensors = {"x": np.arange(6, dtype=np.float32).reshape(2, 3)}
    save_checkpoint(tmp_path / "a", tensors, {"k": 1})
    save_checkpoint(tmp_path / "b", tensors, {"k": 1})
    for name in ("params.bin", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")
    save_checkpoint(tmp_path / "ck", {"x": np.zeros(4, np.float32)}, {})
    (tmp_path / "ck" / "params.bin").write_bytes(b"\0" * 12)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    manifest["format"] = "other/9"
    (tmp_path / "ck" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")


def test_prefix_helpers():
    state = {"w": 1, "b": 2}
    tagged = prefixed("G", state)
    assert list(tagged) == ["G.w", "G.b"]
    assert dict(strip_prefix("G", {**tagged, "F.w": 3})) == state


def test_published_hyperparameters_are_the_defaults():
    from lcgan.losses import LossConfig
    cfg = load_config()
    loss = LossConfig(**cfg["loss"])
    assert (loss.lambda_cyc, loss.lambda_ssim, loss.lambda_seg) == (5.0, 1.0, 2.0)
    assert loss.gamma[1:] == (0.05, 0.33, 0.35, 0.27)
    assert cfg["optim"]["lr"] == 0.00008
    assert cfg["optim"]["constant_fraction"] == 0.5
    assert cfg["run"]["buffer_capacity"] == 50
