import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tumorseg.data import (
    DatasetManifest,
    ManifestEntry,
    NiftiError,
    PhantomSpec,
    extract_slices,
    generate_phantom,
    load_subject,
    read_nifti1,
    read_nifti_subject,
    read_volume,
    split_dataset,
    synthesize,
    write_nifti1,
    write_volume,
)
from tumorseg.data.phantom import DEFAULT_CONTRAST
from tumorseg.data.store import split_counts
from tumorseg.metrics import labels_to_regions
from tumorseg.tensor import ConfigurationError

GOLDEN = Path(__file__).parent / "fixtures" / "golden.nii"
SMALL = dict(shape=(6, 24, 24), wt_radius=(6.0, 9.0), depth_radius=(2.0, 3.0))


def small_spec(**kw):
    return PhantomSpec(**{**SMALL, **kw})


# ---- phantoms


def test_phantom_same_seed_bit_identical():
    a, b = generate_phantom(small_spec(seed=3)), generate_phantom(small_spec(seed=3))
    assert np.array_equal(a.labels, b.labels)
    for m in a.channels:
        assert a.channels[m].tobytes() == b.channels[m].tobytes()
    c = generate_phantom(small_spec(seed=4))
    assert not np.array_equal(a.channels["T1"], c.channels["T1"])


@pytest.mark.parametrize("seed", range(20))
def test_phantom_regions_nested(seed):
    vol = generate_phantom(small_spec(seed=seed, tumor_count=(1, 3)))
    wt, tc, et = labels_to_regions(vol.labels)
    assert np.all(et <= tc) and np.all(tc <= wt)
    assert wt.any()


def test_zero_noise_takes_profile_values_exactly():
    vol = generate_phantom(small_spec(noise=0.0, seed=1))
    tissue_of_label = {0: 0, 2: 1, 1: 2, 4: 3}
    for m, profile in DEFAULT_CONTRAST.items():
        img = vol.channels[m]
        for lab, k in tissue_of_label.items():
            region = vol.labels == lab
            assert region.any()
            assert np.all(img[region] == np.float32(profile[k]))


@pytest.mark.parametrize("seed", range(10))
def test_t1gd_threshold_separates_et_from_core_rest(seed):
    vol = generate_phantom(small_spec(noise=0.0, seed=seed))
    _, tc, et = labels_to_regions(vol.labels)
    core = tc.astype(bool)
    t1gd = vol.channels["T1Gd"][core]
    truth = et.astype(bool)[core]
    assert truth.any() and (~truth).any()
    predicted = t1gd > 0.5
    assert np.mean(predicted == truth) == 1.0
    # the other modalities carry no such contrast inside the core
    for m in ("T1", "T2", "FLAIR"):
        assert np.unique(vol.channels[m][core]).size == 1


def test_radius_exceeding_grid_rejected():
    with pytest.raises(ConfigurationError):
        generate_phantom(small_spec(wt_radius=(6.0, 13.0)))


# ---- NIfTI


def header_dump(raw: bytes) -> dict:
    """Independent field dump of a little-endian NIfTI-1 header."""
    return {
        "sizeof_hdr": int.from_bytes(raw[0:4], "little"),
        "dim": [int.from_bytes(raw[40 + 2 * i : 42 + 2 * i], "little", signed=True) for i in range(8)],
        "datatype": int.from_bytes(raw[70:72], "little"),
        "bitpix": int.from_bytes(raw[72:74], "little"),
        "vox_offset": struct.unpack("<f", raw[108:112])[0],
        "scl_slope": struct.unpack("<f", raw[112:116])[0],
        "magic": raw[344:348],
    }


def test_golden_header_dump():
    d = header_dump(GOLDEN.read_bytes())
    assert d == {
        "sizeof_hdr": 348,
        "dim": [3, 16, 16, 8, 1, 1, 1, 1],
        "datatype": 16,
        "bitpix": 32,
        "vox_offset": 352.0,
        "scl_slope": 0.0,
        "magic": b"n+1\x00",
    }


def test_golden_fixture_parses_to_d_h_w():
    arr, hdr = read_nifti1(GOLDEN)
    assert arr.shape == (8, 16, 16)
    assert hdr.dim[:4] == (3, 16, 16, 8) and hdr.datatype == 16 and hdr.endian == "<"
    z, y, x = 5, 11, 2
    assert arr[z, y, x] == z * 256 + y * 16 + x


def patched(offset: int, value: bytes) -> bytes:
    raw = bytearray(GOLDEN.read_bytes())
    raw[offset : offset + len(value)] = value
    return bytes(raw)


def test_bad_magic_names_offset(tmp_path):
    p = tmp_path / "bad.nii"
    p.write_bytes(patched(344, b"abcd"))
    with pytest.raises(NiftiError, match="offset 344"):
        read_nifti1(p)


def test_paired_magic_rejected(tmp_path):
    p = tmp_path / "pair.nii"
    p.write_bytes(patched(344, b"ni1\x00"))
    with pytest.raises(NiftiError, match="paired"):
        read_nifti1(p)


def test_unsupported_datatype(tmp_path):
    p = tmp_path / "dt.nii"
    p.write_bytes(patched(70, struct.pack("<h", 64)))
    with pytest.raises(NiftiError, match="offset 70"):
        read_nifti1(p)


def test_truncated_data(tmp_path):
    p = tmp_path / "short.nii"
    p.write_bytes(GOLDEN.read_bytes()[:-10])
    with pytest.raises(NiftiError, match="offset 352"):
        read_nifti1(p)


def test_short_header(tmp_path):
    p = tmp_path / "tiny.nii"
    p.write_bytes(b"\x00" * 100)
    with pytest.raises(NiftiError, match="offset 0"):
        read_nifti1(p)


def test_zero_slope_passes_values_through(tmp_path):
    a = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_nifti1(tmp_path / "a.nii", a, slope=0.0, inter=7.0)
    assert np.array_equal(read_nifti1(tmp_path / "a.nii")[0], a)


def test_slope_and_intercept_applied(tmp_path):
    a = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    write_nifti1(tmp_path / "a.nii", a, datatype=4, slope=2.0, inter=-1.0)
    assert np.array_equal(read_nifti1(tmp_path / "a.nii")[0], a * 2.0 - 1.0)


@pytest.mark.parametrize("datatype", [4, 16])
@pytest.mark.parametrize("endian", ["<", ">"])
def test_round_trip_dtype_and_endianness(tmp_path, datatype, endian):
    rng = np.random.default_rng(0)
    a = rng.integers(-500, 500, (3, 5, 7)).astype(np.float32)
    write_nifti1(tmp_path / "a.nii", a, datatype=datatype, endian=endian)
    arr, hdr = read_nifti1(tmp_path / "a.nii")
    assert hdr.endian == endian and hdr.datatype == datatype
    assert np.array_equal(arr, a)


def test_nifti_subject_normalized(tmp_path):
    vol = generate_phantom(small_spec(seed=2))
    for m, img in vol.channels.items():
        write_nifti1(tmp_path / f"{m}.nii", img * 900.0 + 50.0)
    write_nifti1(tmp_path / "seg.nii", vol.labels.astype(np.int16), datatype=4)
    got = read_nifti_subject(tmp_path)
    assert np.array_equal(got.labels, vol.labels)
    for m in vol.channels:
        assert got.channels[m].min() == 0.0 and got.channels[m].max() == 1.0
    assert load_subject(tmp_path).subject_id == tmp_path.name


# ---- native store and manifests


def test_native_round_trip_bit_identical(tmp_path):
    vol = generate_phantom(small_spec(seed=7))
    path = write_volume(vol, tmp_path)
    back = read_volume(path)
    assert back.subject_id == vol.subject_id
    assert back.labels.tobytes() == vol.labels.tobytes()
    for m in vol.channels:
        assert back.channels[m].dtype == vol.channels[m].dtype
        assert back.channels[m].tobytes() == vol.channels[m].tobytes()
    meta = json.loads((path / "meta.json").read_text())
    assert meta["endianness"] == "little" and meta["shape"] == list(vol.shape)


def test_manifest_json_round_trip():
    m = DatasetManifest([ManifestEntry("a", "a", "train"), ManifestEntry("b", "x/b", "test")], 5)
    back = DatasetManifest.from_json(m.to_json())
    assert back == m


def manifest_of(n):
    return DatasetManifest([ManifestEntry(f"s{i}", f"s{i}") for i in range(n)])


@pytest.mark.parametrize("n, expected", [(10, (8, 1, 1)), (335, (268, 33, 34)), (7, (5, 0, 2))])
def test_split_counts(n, expected):
    assert split_counts(n) == expected
    counts = split_dataset(manifest_of(n), seed=0).counts()
    assert (counts["train"], counts["val"], counts["test"]) == expected


def test_small_split_warns(caplog):
    split_dataset(manifest_of(5), seed=0)
    assert "degenerate" in caplog.text


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(10, 120))
def test_split_deterministic_and_disjoint(seed, n):
    a = split_dataset(manifest_of(n), seed)
    b = split_dataset(manifest_of(n), seed)
    assert a == b
    groups = [{e.subject for e in a.subjects(s)} for s in ("train", "val", "test")]
    assert sum(map(len, groups)) == n
    assert set.union(*groups) == {f"s{i}" for i in range(n)}
    assert [e.subject for e in a.entries] == [f"s{i}" for i in range(n)]


def test_synthesize_writes_subjects_and_manifest(tmp_path):
    m = synthesize(tmp_path / "d", small_spec(), 10, split_seed=0)
    assert m.counts() == {"train": 8, "val": 1, "test": 1}
    assert sorted(p.name for p in (tmp_path / "d").iterdir() if p.is_dir()) == [e.subject for e in m.entries]
    synthesize(tmp_path / "e", small_spec(), 10, split_seed=0)
    for f in sorted((tmp_path / "d").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "e" / f.relative_to(tmp_path / "d")).read_bytes()


def test_synthesize_zero_count(tmp_path, caplog):
    m = synthesize(tmp_path, small_spec(), 0, split_seed=0)
    assert m.entries == [] and "empty manifest" in caplog.text
    assert json.loads((tmp_path / "manifest.json").read_text())["entries"] == []


# ---- slices


def test_extract_slices_policies():
    vol = generate_phantom(PhantomSpec(shape=(8, 24, 24), wt_radius=(6.0, 9.0), depth_radius=(1.5, 2.0), seed=0))
    everything = extract_slices(vol, "all")
    assert len(everything) == 8
    tumor = extract_slices(vol, "tumor")
    assert 0 < len(tumor) < 8
    assert all(s.masks[0].any() for s in tumor)
    for s in everything:
        assert s.image.shape == (4, 24, 24) and s.masks.shape == (3, 24, 24)
        wt, tc, et = s.masks
        assert np.all(et <= tc) and np.all(tc <= wt)


def test_tumor_policy_on_empty_volume():
    vol = generate_phantom(small_spec(tumor_count=(0, 0)))
    assert not vol.labels.any()
    assert extract_slices(vol, "tumor") == []
    with pytest.raises(ValueError, match="policy"):
        extract_slices(vol, "random")
