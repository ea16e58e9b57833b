import numpy as np
import pytest

from timesplat.errors import FormatError
from timesplat.scene_io import (
    load_checkpoint,
    load_scene,
    model_to_bytes,
    save_checkpoint,
    save_scene,
)

from helpers import make_model


def _models_equal(a, b):
    pa, pb = a.parameters(), b.parameters()
    assert pa.keys() == pb.keys()
    for k in pa:
        np.testing.assert_array_equal(pa[k], pb[k], err_msg=k)
    assert a.scene_extent == pytest.approx(b.scene_extent, rel=1e-6)
    assert a.encoder_mode == b.encoder_mode


def test_scene_roundtrip_bitwise(tmp_path):
    model = make_model(seed=3, dtype=np.float32)
    path = tmp_path / "m.gtms"
    save_scene(model, path)
    _models_equal(model, load_scene(path))


def test_scene_roundtrip_positional(tmp_path):
    model = make_model(seed=4, dtype=np.float32, encoder_mode="positional")
    path = tmp_path / "m.gtms"
    save_scene(model, path)
    assert load_scene(path).encoder_mode == "positional"


def test_corrupted_magic(tmp_path):
    model = make_model(seed=0, dtype=np.float32)
    path = tmp_path / "m.gtms"
    save_scene(model, path)
    data = bytearray(path.read_bytes())
    data[:4] = b"NOPE"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError) as exc:
        load_scene(path)
    assert "magic" in str(exc.value)


def test_truncated_file_reports_offset(tmp_path):
    model = make_model(seed=0, dtype=np.float32)
    path = tmp_path / "m.gtms"
    save_scene(model, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 40])
    with pytest.raises(FormatError) as exc:
        load_scene(path)
    assert "truncated at byte" in str(exc.value)


def test_header_count_payload_mismatch(tmp_path):
    model = make_model(seed=0, dtype=np.float32)
    raw = bytearray(model_to_bytes(model))
    # bump the declared anchor count without growing the payload
    n = model.anchors.n_anchors
    raw[8:12] = int(n + 3).to_bytes(4, "little")
    path = tmp_path / "m.gtms"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_scene(path)


def test_version_mismatch(tmp_path):
    model = make_model(seed=0, dtype=np.float32)
    raw = bytearray(model_to_bytes(model))
    raw[4:6] = (99).to_bytes(2, "little")
    path = tmp_path / "m.gtms"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as exc:
        load_scene(path)
    assert "version" in str(exc.value)


def test_missing_scene_file():
    with pytest.raises(FormatError):
        load_scene("/nonexistent/scene.gtms")


def test_checkpoint_roundtrip(tmp_path):
    model = make_model(seed=5, dtype=np.float32)
    params = model.parameters()
    rng = np.random.default_rng(0)
    moments = {
        k: (rng.normal(0, 1, p.shape).astype(np.float32),
            rng.uniform(0, 1, p.shape).astype(np.float32))
        for k, p in params.items()
    }
    gen = np.random.default_rng(123)
    gen.integers(10)  # advance so the state is non-trivial
    stats = {
        "grad_accum": rng.uniform(0, 1, (5, 3)).astype(np.float32),
        "grad_count": rng.integers(0, 9, (5, 3)).astype(np.int64),
        "opacity_max": np.full((5, 3), -np.inf, dtype=np.float32),
    }
    config = {"iterations": 77, "seed": 3}
    path = tmp_path / "c.gtmc"
    save_checkpoint(path, model, 42, 42, moments, gen.bit_generator.state, stats, config)
    ck = load_checkpoint(path)
    assert ck.iteration == 42 and ck.adam_step == 42
    _models_equal(model, ck.model)
    for k, (m, v) in moments.items():
        np.testing.assert_array_equal(ck.moments[k][0], m)
        np.testing.assert_array_equal(ck.moments[k][1], v)
    assert ck.rng_state == gen.bit_generator.state
    for k in stats:
        np.testing.assert_array_equal(ck.stats[k], stats[k])
    assert ck.config == config
    # restoring the state continues the same stream
    gen2 = np.random.default_rng(0)
    gen2.bit_generator.state = ck.rng_state
    assert gen2.integers(1 << 30) == gen.integers(1 << 30)


def test_checkpoint_version_mismatch(tmp_path):
    model = make_model(seed=0, dtype=np.float32)
    moments = {k: (np.zeros_like(p), np.zeros_like(p)) for k, p in model.parameters().items()}
    path = tmp_path / "c.gtmc"
    save_checkpoint(path, model, 0, 0, moments, np.random.default_rng(0).bit_generator.state, {}, {})
    raw = bytearray(path.read_bytes())
    raw[4:6] = (77).to_bytes(2, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_fresh_checkpoint_iteration_zero(tmp_path):
    model = make_model(seed=1, dtype=np.float32)
    moments = {k: (np.zeros_like(p), np.zeros_like(p)) for k, p in model.parameters().items()}
    path = tmp_path / "c.gtmc"
    save_checkpoint(path, model, 0, 0, moments, np.random.default_rng(0).bit_generator.state, {}, {})
    assert load_checkpoint(path).iteration == 0


def test_float64_model_saved_as_float32(tmp_path):
    model = make_model(seed=2, dtype=np.float64)
    path = tmp_path / "m.gtms"
    save_scene(model, path)
    loaded = load_scene(path)
    assert loaded.dtype == np.float32
    np.testing.assert_allclose(
        loaded.anchors.centers, model.anchors.centers.astype(np.float32), rtol=0
    )
