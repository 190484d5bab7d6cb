import json
import logging
import os

import numpy as np
import pytest

from radiogenomic.data_io import (
    MODALITIES, CaseRecord, DataError, PhantomSpec, Volume, assert_nested, generate_phantom_dataset,
    load_dataset, normalize_intensity, read_volume, save_dataset, write_volume,
)
from radiogenomic.radiogenomics import SurvivalModel, case_folds
from radiogenomic.segmentation import region_sets


# ---------------------------------------------------------------- volume format


def test_float_volume_layout(tmp_path):
    path = str(tmp_path / "v.raw")
    write_volume(Volume(np.zeros((4, 4, 4), np.float32), (1, 2, 3), (0.5, 0, -1)), path)
    assert os.path.getsize(path) == 256
    meta = json.loads(open(path + ".json").read())
    assert meta == {"dims": [4, 4, 4], "spacing_mm": [1.0, 2.0, 3.0], "origin_mm": [0.5, 0.0, -1.0],
                    "dtype": "f32", "order": "C-little-endian"}


def test_payload_is_little_endian_c_order(tmp_path):
    path = str(tmp_path / "v.raw")
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    write_volume(Volume(data), path)
    raw = open(path, "rb").read()
    assert raw == b"".join(int(v).to_bytes(2, "little", signed=True) for v in range(24))
    assert json.loads(open(path + ".json").read())["dtype"] == "i16"


def test_truncated_payload_rejected(tmp_path):
    path = str(tmp_path / "v.raw")
    write_volume(Volume(np.ones((4, 4, 4), np.float32)), path)
    with open(path, "r+b") as fh:
        fh.truncate(250)
    with pytest.raises(DataError, match="bytes"):
        read_volume(path)


def test_bad_sidecars_rejected(tmp_path):
    path = str(tmp_path / "v.raw")
    write_volume(Volume(np.ones((2, 2, 2), np.float32)), path)
    meta = json.loads(open(path + ".json").read())
    for key, bad in (("dtype", "f64"), ("order", "big")):
        json.dump({**meta, key: bad}, open(path + ".json", "w"))
        with pytest.raises(DataError):
            read_volume(path)
    os.remove(path + ".json")
    with pytest.raises(DataError):
        read_volume(path)


def test_volume_invariants():
    with pytest.raises(ValueError):
        Volume(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        Volume(np.zeros((4, 0, 4)))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1, 0, 1))


def test_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(100):
        dims = tuple(rng.integers(1, 9, size=3))
        if i % 2:
            data = rng.integers(-32768, 32768, size=dims).astype(np.int16)
        else:
            data = (rng.standard_normal(dims) * 10 ** rng.uniform(-30, 30)).astype(np.float32)
        vol = Volume(data, tuple(rng.uniform(0.1, 5, 3)), tuple(rng.normal(size=3)))
        path = str(tmp_path / f"{i}.raw")
        write_volume(vol, path)
        back = read_volume(path)
        assert back.data.dtype == data.dtype
        assert back.data.tobytes() == data.tobytes()
        assert back.spacing == vol.spacing and back.origin == vol.origin


# ---------------------------------------------------------------- normalization


def test_constant_support_maps_to_half(caplog):
    data = np.zeros((6, 6, 6), np.float32)
    data[1:5, 1:5, 1:5] = 1.0
    with caplog.at_level(logging.WARNING):
        out = normalize_intensity(Volume(data)).data
    assert np.all(out[data != 0] == 0.5)
    assert np.all(out[data == 0] == 0.0)
    assert "constant" in caplog.text


def test_normalized_range_and_background():
    rng = np.random.default_rng(1)
    data = rng.standard_cauchy((10, 10, 10)).astype(np.float32)
    data[:3] = 0
    out = normalize_intensity(Volume(data)).data
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert np.all(out[:3] == 0)
    with pytest.raises(ValueError):
        normalize_intensity(Volume(np.zeros((3, 3, 3), np.float32)))


def test_gaussian_volume_centers_at_half():
    data = np.random.default_rng(2).normal(7.0, 3.0, (64, 64, 64)).astype(np.float32)
    out = normalize_intensity(Volume(data)).data
    assert abs(out.mean() - 0.5) <= 0.01


# ---------------------------------------------------------------- records


def test_case_check_rejects_mixed_geometry():
    a = Volume(np.ones((4, 4, 4), np.float32))
    b = Volume(np.ones((4, 4, 4), np.float32), (2, 1, 1))
    with pytest.raises(DataError):
        CaseRecord("x", {"T1c": a, "T2": b}).check()
    with pytest.raises(DataError):
        CaseRecord("x", {"T1c": a}, mask=Volume(np.zeros((4, 4, 5), np.int16))).check()


def test_stacked_layout_and_missing():
    a = Volume(np.arange(24, dtype=np.float32).reshape(2, 3, 4))
    b = a.like(a.data * 2)
    case = CaseRecord("x", {"T1c": a, "Flair": b})
    s = case.stacked(("Flair", "T1c"), normalize=False)
    assert s.shape == (4, 2, 2, 3)
    assert np.array_equal(s[:, 0], b.data.transpose(2, 0, 1))
    with pytest.raises(DataError, match="T2"):
        case.stacked(("T2",))


def test_assert_nested():
    labels = np.zeros((3, 3, 3), np.int16)
    labels[1, 1, 1] = 3
    with pytest.raises(DataError):
        assert_nested(labels)
    assert_nested(np.array([0, 1, 2, 4], np.int16).reshape(1, 2, 2))


# ---------------------------------------------------------------- phantoms


def test_phantom_shape_contract():
    cases = generate_phantom_dataset(PhantomSpec(grid=(64, 64, 64), seed=3), 8)
    assert len(cases) == 8
    assert len({c.case_id for c in cases}) == 8
    for c in cases:
        assert sorted(c.modalities) == sorted(MODALITIES)
        assert all(v.dims == (64, 64, 64) and v.data.dtype == np.float32 for v in c.modalities.values())
        assert c.mask.dims == (64, 64, 64) and c.mask.data.dtype == np.int16
        assert set(np.unique(c.mask.data)) == {0, 1, 2, 4}
        r = region_sets(c.mask.data)
        assert not (r["ET"] & ~r["TC"]).any() and not (r["TC"] & ~r["WT"]).any()
        assert c.genes.shape == (1740,)
        assert isinstance(c.survival_days, int) and c.survival_days > 0
        assert set(c.provenance.values()) == {"real"}


def test_phantom_is_pure_function_of_seed(tmp_path):
    spec = dict(grid=(16, 16, 16), wt_radius=(3.0, 5.0), n_genes=200, seed=11)
    save_dataset(generate_phantom_dataset(PhantomSpec(**spec), 4), tmp_path / "a")
    save_dataset(generate_phantom_dataset(PhantomSpec(**spec), 4), tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 4 * 4 * 2 + 3
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    a = generate_phantom_dataset(PhantomSpec(**spec), 1)[0]
    b = generate_phantom_dataset(PhantomSpec(**{**spec, "seed": 12}), 1)[0]
    assert not np.array_equal(a.modalities["T1c"].data, b.modalities["T1c"].data)


def test_missing_fraction_withholds_t2():
    cases = generate_phantom_dataset(PhantomSpec(grid=(16, 16, 16), wt_radius=(3.0, 5.0), n_genes=200,
                                                 missing_fraction=0.25, seed=0), 8)
    lacking = [c for c in cases if "T2" not in c.modalities]
    assert len(lacking) == 2
    assert all("T2" not in c.provenance for c in lacking)


def test_phantom_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(grid=(4, 16, 16))
    with pytest.raises(ValueError):
        PhantomSpec(tc_fraction=(0.5, 1.2))
    with pytest.raises(ValueError):
        PhantomSpec(n_genes=60)
    with pytest.raises(ValueError):
        generate_phantom_dataset(PhantomSpec(), 0)


def test_dataset_save_load_round_trip(tmp_path, small_cases):
    save_dataset(small_cases[:3], tmp_path)
    back = load_dataset(tmp_path / "manifest.json")
    for a, b in zip(small_cases[:3], back):
        assert a.case_id == b.case_id
        for name in a.modalities:
            assert np.array_equal(a.modalities[name].data, b.modalities[name].data)
        assert np.array_equal(a.mask.data, b.mask.data)
        assert np.array_equal(a.genes, b.genes)
        assert a.survival_days == b.survival_days and a.age == b.age
        assert a.factors == b.factors
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope.json")


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_planted_survival_recovered_from_oracle_features(seed):
    # 200 cases: at 100 the RBF fit on 75 training rows straddles the threshold
    spec = PhantomSpec(n_genes=200, seed=seed)
    cases = generate_phantom_dataset(spec, 200)
    X = np.array([[c.factors["wt_volume"], c.factors["ncr_fractal"], *c.genes[:spec.informative_genes]]
                  for c in cases])
    y = np.array([c.survival_days for c in cases], float)
    pred = np.empty_like(y)
    for tr, va in case_folds(len(y), 4, seed=0):
        pred[va] = SurvivalModel("SVR", C=10.0, epsilon=0.01).fit(X[tr], y[tr]).predict(X[va])
    r2 = 1 - ((y - pred) ** 2).sum() / ((y - y.mean()) ** 2).sum()
    assert r2 >= 0.9
