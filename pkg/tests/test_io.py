import json
import os
import struct

import numpy as np
import pytest

from oodlinear import calibrate, datasets, io, mlp
from oodlinear.errors import CorruptionError, FormatError
from oodlinear.pipeline import CellAggregate


def test_round_trip_dtypes_and_ranks(tmp_path):
    rng = np.random.default_rng(0)
    sections = {
        "f64": rng.normal(size=(4, 3)),
        "f32": rng.normal(size=(2, 5)).astype("<f4"),
        "bytes": rng.integers(0, 256, size=17).astype("u1"),
        "vec": rng.normal(size=6),
        "cube": rng.normal(size=(2, 3, 4)),
        "scalar": np.array(3.25),
    }
    path = str(tmp_path / "data.etlt")
    io.write_container(path, sections)
    back = io.read_container(path)
    assert list(back.keys()) == list(sections.keys())
    for name, arr in sections.items():
        assert back[name].dtype == arr.dtype
        assert back[name].shape == arr.shape
        assert np.array_equal(back[name], arr)


def test_round_trip_empty_dimension(tmp_path):
    path = str(tmp_path / "empty.etlt")
    io.write_container(path, {"none": np.zeros((0, 4))})
    back = io.read_container(path)
    assert back["none"].shape == (0, 4)


def test_frozen_byte_layout(tmp_path):
    # the wire format itself is a contract: header, name, dtype code,
    # rank, u64 dims, then the raw row-major payload
    path = str(tmp_path / "tiny.etlt")
    arr = np.array([1.0, 2.0])
    io.write_container(path, {"a": arr})
    with open(path, "rb") as fh:
        blob = fh.read()
    expected = (
        b"ETLT"
        + struct.pack("<II", 1, 1)
        + struct.pack("<H", 1)
        + b"a"
        + struct.pack("<BB", 2, 1)
        + struct.pack("<Q", 2)
        + arr.astype("<f8").tobytes()
    )
    assert blob == expected


def test_float32_widens_exactly(tmp_path):
    path = str(tmp_path / "f32.etlt")
    vals = np.array([0.1, 7.25, -3.5], dtype="<f4")
    io.write_container(path, {"features": vals.reshape(3, 1)})
    back = io.read_container(path)
    widened = np.asarray(back["features"], dtype=np.float64)
    assert np.array_equal(widened, vals.astype(np.float64).reshape(3, 1))


def test_write_rejects_unsupported_dtype(tmp_path):
    path = str(tmp_path / "bad.etlt")
    with pytest.raises(FormatError):
        io.write_container(path, {"ints": np.arange(4, dtype=np.int64)})
    with pytest.raises(FormatError):
        io.write_container(path, {"cplx": np.zeros(2, dtype=complex)})


def test_atomic_write_leaves_no_temp_files(tmp_path):
    path = str(tmp_path / "out.etlt")
    io.write_container(path, {"a": np.zeros(3)})
    io.write_container(path, {"a": np.ones(3)})  # overwrite in place
    assert sorted(os.listdir(tmp_path)) == ["out.etlt"]
    assert np.array_equal(io.read_container(path)["a"], np.ones(3))


def test_bad_magic_and_version(tmp_path):
    path = str(tmp_path / "bad.etlt")
    with open(path, "wb") as fh:
        fh.write(b"NOPE" + struct.pack("<II", 1, 0))
    with pytest.raises(FormatError, match="magic"):
        io.read_container(path)
    with open(path, "wb") as fh:
        fh.write(io.MAGIC + struct.pack("<II", 9, 0))
    with pytest.raises(FormatError, match="version"):
        io.read_container(path)


def test_truncation_reports_byte_offset(tmp_path):
    path = str(tmp_path / "ok.etlt")
    io.write_container(path, {"abc": np.arange(10.0)})
    with open(path, "rb") as fh:
        blob = fh.read()
    cut = str(tmp_path / "cut.etlt")
    with open(cut, "wb") as fh:
        fh.write(blob[:-8])  # lose one float of payload
    with pytest.raises(CorruptionError) as err:
        io.read_container(cut)
    assert err.value.offset is not None
    assert "byte offset" in str(err.value)
    short = str(tmp_path / "short.etlt")
    with open(short, "wb") as fh:
        fh.write(blob[:6])  # inside the fixed header
    with pytest.raises(CorruptionError):
        io.read_container(short)


def test_hostile_dims_fail_cleanly(tmp_path):
    # a corrupted dim field must raise, not attempt a giant allocation
    path = str(tmp_path / "huge.etlt")
    blob = (
        io.MAGIC
        + struct.pack("<II", 1, 1)
        + struct.pack("<H", 1)
        + b"x"
        + struct.pack("<BB", 2, 2)
        + struct.pack("<QQ", 2**60, 2**60)
    )
    with open(path, "wb") as fh:
        fh.write(blob)
    with pytest.raises(CorruptionError):
        io.read_container(path)


def test_trailing_bytes_rejected(tmp_path):
    path = str(tmp_path / "ok.etlt")
    io.write_container(path, {"a": np.zeros(2)})
    with open(path, "ab") as fh:
        fh.write(b"JUNK")
    with pytest.raises(FormatError, match="trailing"):
        io.read_container(path)


def test_duplicate_sections_and_bad_dtype_code(tmp_path):
    dup = (
        io.MAGIC
        + struct.pack("<II", 1, 2)
        + (struct.pack("<H", 1) + b"a" + struct.pack("<BB", 2, 0))
        + struct.pack("<8x")[:0]
        + np.array(1.0).tobytes()
        + (struct.pack("<H", 1) + b"a" + struct.pack("<BB", 2, 0))
        + np.array(2.0).tobytes()
    )
    path = str(tmp_path / "dup.etlt")
    with open(path, "wb") as fh:
        fh.write(dup)
    with pytest.raises(FormatError, match="duplicate"):
        io.read_container(path)
    bad = (
        io.MAGIC
        + struct.pack("<II", 1, 1)
        + struct.pack("<H", 1)
        + b"a"
        + struct.pack("<BB", 77, 0)
        + np.array(1.0).tobytes()
    )
    with open(path, "wb") as fh:
        fh.write(bad)
    with pytest.raises(FormatError, match="dtype code"):
        io.read_container(path)


def test_tags_round_trip():
    tags = ["cifar", "svhn", "uniform01", "blob with spaces", "uniçode"]
    arr = io.encode_tags(tags)
    assert arr.dtype == np.dtype("u1")
    assert io.decode_tags(arr, 5) == tags
    assert io.decode_tags(io.encode_tags([]), 0) == []
    with pytest.raises(FormatError):
        io.encode_tags(["has\nnewline"])
    with pytest.raises(FormatError):
        io.decode_tags(arr, 3)


def _sample_records(n=8, with_logits=True, with_perturbed=False, seed=0):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, 3))
    logits = rng.normal(size=(n, 4)) if with_logits else None
    perturbed = logits + 0.1 if with_perturbed else None
    labels = rng.integers(0, 2, size=n)
    tags = [f"src{v}" for v in labels]
    return datasets.records_from_arrays(feats, logits, labels, tags, perturbed)


def test_records_container_round_trip(tmp_path):
    records = _sample_records(with_perturbed=True)
    path = str(tmp_path / "records.etlt")
    io.write_container(path, io.records_to_sections(records))
    back = io.sections_to_records(io.read_container(path))
    assert len(back) == len(records)
    for a, b in zip(records, back):
        assert np.array_equal(a.feature, b.feature)
        assert np.array_equal(a.logits, b.logits)
        assert np.array_equal(a.logits_perturbed, b.logits_perturbed)
        assert a.origin == b.origin and a.source_tag == b.source_tag


def test_records_sections_skip_partial_logits():
    records = _sample_records(with_logits=True)
    stripped = [datasets.FeatureRecord(records[0].feature, None, "in", "x"), *records[1:]]
    sections = io.records_to_sections(stripped)
    assert "logits" not in sections
    assert "logits_perturbed" not in sections


def test_records_float32_storage_round_trips(tmp_path):
    records = _sample_records()
    path = str(tmp_path / "compact.etlt")
    io.write_container(path, io.records_to_sections(records, feature_dtype="<f4"))
    back = io.sections_to_records(io.read_container(path))
    original = datasets.features_of(records)
    restored = datasets.features_of(back)
    assert np.array_equal(restored, original.astype("<f4").astype("<f8"))


def test_sections_to_records_defaults():
    recs = io.sections_to_records({"features": np.zeros((3, 2))})
    assert all(r.origin == "in" for r in recs)
    assert all(r.source_tag == "in" for r in recs)
    with pytest.raises(FormatError):
        io.sections_to_records({"labels": np.zeros(3)})


def test_regression_model_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(40, 5))
    s = rng.normal(size=40)
    for spec in (calibrate.PrepSpec(), calibrate.PrepSpec(unit_normalize=True, pca_dim=2)):
        model = calibrate.fit_dlr(x, s, spec)
        path = str(tmp_path / "model.etlt")
        io.save_regression_model(path, model)
        back = io.load_regression_model(path)
        fresh = rng.normal(size=(7, 5))
        assert np.array_equal(calibrate.predict(back, fresh), calibrate.predict(model, fresh))
        assert back.residual_norm == model.residual_norm
        assert back.gram_rank == model.gram_rank
        assert back.preprocessor.unit_normalize == spec.unit_normalize
    with pytest.raises(FormatError):
        io.write_container(str(tmp_path / "x.etlt"), {"beta": np.zeros(2)})
        io.load_regression_model(str(tmp_path / "x.etlt"))


def test_online_state_checkpoint_resume(tmp_path):
    rng = np.random.default_rng(2)
    z = rng.normal(size=(30, 4))
    s = rng.normal(size=30)
    state = calibrate.online_init(4)
    state, _ = calibrate.online_update(state, z[:10], s[:10])
    path = str(tmp_path / "state.etlt")
    io.save_online_state(path, state)
    resumed = io.load_online_state(path)
    assert resumed.samples_seen == 10
    resumed, _ = calibrate.online_update(resumed, z[10:], s[10:])
    straight = calibrate.online_init(4)
    straight, _ = calibrate.online_update(straight, z[:10], s[:10])
    straight, _ = calibrate.online_update(straight, z[10:], s[10:])
    assert np.array_equal(
        calibrate.online_coefficients(resumed), calibrate.online_coefficients(straight)
    )


def test_mlp_round_trip(tmp_path):
    model = mlp.init_mlp([4, 7, 3], seed=3)
    path = str(tmp_path / "net.etlt")
    io.save_mlp(path, model)
    back = io.load_mlp(path)
    x = np.random.default_rng(4).normal(size=(5, 4))
    assert np.array_equal(back.forward(x), model.forward(x))
    assert back.dims == model.dims
    io.write_container(path, {"dims": np.array([4.0, 3.0])})
    with pytest.raises(FormatError, match="w0"):
        io.load_mlp(path)


def _rows():
    def row(in_d, ood, scorer, method, v):
        return CellAggregate(in_d, ood, scorer, method, 3, v, 0.01, v + 0.1, 0.02, v + 0.2, 0.03)

    return [
        row("synthetic", "uniform01", "msp[T=1]", "rlr[lam=1e-05,p=80]", 0.30),
        row("synthetic", "midspace", "msp[T=1]", "none", 0.50),
        row("synthetic", "midspace", "energy[T=1]", "dlr", 0.40),
    ]


def test_results_table_sorted_and_fixed_precision():
    text = io.render_results_table(_rows())
    lines = text.splitlines()
    assert lines[0].split("\t")[:5] == ["in_dataset", "ood_dataset", "scorer", "method", "repeats"]
    assert len(lines) == 4
    assert text.endswith("\n")
    # lexicographic by (in, ood, scorer, method): energy sorts before msp
    assert lines[1].split("\t")[2] == "energy[T=1]"
    assert lines[2].split("\t")[3] == "none"
    assert lines[3].split("\t")[1] == "uniform01"
    assert lines[1].split("\t")[5:] == ["0.400000", "0.010000", "0.500000", "0.020000", "0.600000", "0.030000"]
    # byte-for-byte stable across calls
    assert io.render_results_table(reversed(_rows())) == text


def test_results_json_mirrors_table_order():
    payload = json.loads(io.render_results_json(_rows()))
    assert [p["scorer"] for p in payload] == ["energy[T=1]", "msp[T=1]", "msp[T=1]"]
    assert payload[0]["auroc_mean"] == 0.5
    assert payload[0]["repeats"] == 3


def test_parse_config():
    text = """
    # experiment settings
    dim = 16
    scorers = msp, energy   # grid
    empty_ok =
    url = http://x/y?a=b
    """
    cfg = io.parse_config(text)
    assert cfg == {
        "dim": "16",
        "scorers": "msp, energy",
        "empty_ok": "",
        "url": "http://x/y?a=b",
    }
    with pytest.raises(FormatError, match="line 1"):
        io.parse_config("just words")
    with pytest.raises(FormatError, match="empty key"):
        io.parse_config("= value")


def test_load_config(tmp_path):
    path = tmp_path / "plan.cfg"
    path.write_text("seed = 3\n# done\n", encoding="utf-8")
    assert io.load_config(str(path)) == {"seed": "3"}
