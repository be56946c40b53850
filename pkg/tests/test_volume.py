import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from thoraxrecon.volume import (
    CANONICAL_SPACING,
    DataSizeMismatchError,
    ImageGrid2D,
    MalformedHeaderError,
    Mask,
    MetaImageError,
    MissingFileError,
    UnsupportedElementTypeError,
    Volume,
    attenuation_to_hu,
    hu_to_attenuation,
    load_image,
    load_mask,
    load_volume,
    read_pgm,
    resample_trilinear,
    save_image,
    save_mask,
    save_pgm,
    save_volume,
)


def _header(path):
    return dict(line.split(" = ", 1) for line in path.read_text().splitlines())


def test_round_trip_random_8cube(tmp_path):
    rng = np.random.default_rng(0)
    v = Volume(rng.normal(size=(8, 8, 8)), (1.6, 1.7, 0.9), (-3.2, 4.0, 1.5))
    back = load_volume(save_volume(v, tmp_path / "v.mhd"))
    assert back.dims == v.dims
    assert back.spacing == v.spacing
    assert back.origin == v.origin
    assert np.array_equal(back.data, v.data)


@pytest.mark.parametrize("values,etype", [
    (np.arange(24.0).reshape(2, 3, 4) - 10, "MET_SHORT"),
    (np.full((2, 3, 4), 0.5), "MET_FLOAT"),
    (np.full((2, 3, 4), 0.1), "MET_DOUBLE"),
])
def test_element_type_is_narrowest_exact(tmp_path, values, etype):
    p = save_volume(Volume(values), tmp_path / "v.mhd")
    assert _header(p)["ElementType"] == etype
    assert np.array_equal(load_volume(p).data, values)


def test_zero_2cube_header_and_raw(tmp_path):
    p = save_volume(Volume(np.zeros((2, 2, 2))), tmp_path / "z.mhd")
    h = _header(p)
    assert h["ObjectType"] == "Image"
    assert h["NDims"] == "3"
    assert h["DimSize"] == "2 2 2"
    assert h["ElementByteOrderMSB"] == "False"
    raw = np.fromfile(tmp_path / h["ElementDataFile"], dtype="<i2")
    assert raw.size == 8 and not raw.any()


def test_header_axes_are_x_first(tmp_path):
    v = Volume(np.zeros((2, 3, 4)), (3.0, 2.0, 1.0), (30.0, 20.0, 10.0))
    h = _header(save_volume(v, tmp_path / "a.mhd"))
    assert h["DimSize"] == "4 3 2"
    assert h["ElementSpacing"] == "1.0 2.0 3.0"
    assert h["Offset"] == "10.0 20.0 30.0"
    # x is the fastest axis in the raw stream
    v2 = Volume(np.arange(24.0).reshape(2, 3, 4))
    save_volume(v2, tmp_path / "b.mhd")
    raw = np.fromfile(tmp_path / "b.raw", dtype="<i2")
    assert raw[:4].tolist() == [0, 1, 2, 3]


def test_spacing_1p6_header(tmp_path):
    (tmp_path / "c.raw").write_bytes(np.zeros(8, "<i2").tobytes())
    (tmp_path / "c.mhd").write_text(
        "ObjectType = Image\nNDims = 3\nDimSize = 2 2 2\nElementSpacing = 1.6 1.6 1.6\n"
        "Offset = 0 0 0\nElementType = MET_SHORT\nElementByteOrderMSB = False\nElementDataFile = c.raw\n"
    )
    assert load_volume(tmp_path / "c.mhd").spacing == CANONICAL_SPACING


def _write_pair(tmp_path, header, n_elements, dtype="<i2"):
    (tmp_path / "d.raw").write_bytes(np.zeros(n_elements, dtype).tobytes())
    (tmp_path / "d.mhd").write_text(header)
    return tmp_path / "d.mhd"


GOOD = (
    "ObjectType = Image\nNDims = 3\nDimSize = 4 4 4\nElementSpacing = 1 1 1\nOffset = 0 0 0\n"
    "ElementType = MET_SHORT\nElementByteOrderMSB = False\nElementDataFile = d.raw\n"
)


def test_data_size_mismatch(tmp_path):
    p = _write_pair(tmp_path, GOOD, 63)
    with pytest.raises(DataSizeMismatchError) as info:
        load_volume(p)
    assert info.value.field == "DimSize"


def test_missing_file(tmp_path):
    with pytest.raises(MissingFileError):
        load_volume(tmp_path / "nope.mhd")
    p = _write_pair(tmp_path, GOOD, 64)
    os.remove(tmp_path / "d.raw")
    with pytest.raises(MissingFileError) as info:
        load_volume(p)
    assert info.value.field == "ElementDataFile"


def test_unsupported_element_type(tmp_path):
    p = _write_pair(tmp_path, GOOD.replace("MET_SHORT", "MET_UCHAR"), 64)
    with pytest.raises(UnsupportedElementTypeError) as info:
        load_volume(p)
    assert info.value.field == "ElementType"


@pytest.mark.parametrize("bad,field", [
    (GOOD.replace("DimSize = 4 4 4", "DimSize = 4 4"), "DimSize"),
    (GOOD.replace("NDims = 3", "NDims = three"), "NDims"),
    (GOOD.replace("ElementSpacing = 1 1 1", "ElementSpacing = 1 x 1"), "ElementSpacing"),
    (GOOD.replace("ElementType = MET_SHORT\n", ""), "ElementType"),
    ("garbage line\n" + GOOD, "line 1"),
])
def test_malformed_header_names_field(tmp_path, bad, field):
    p = _write_pair(tmp_path, bad, 64)
    with pytest.raises(MalformedHeaderError) as info:
        load_volume(p)
    assert info.value.field == field
    assert isinstance(info.value, MetaImageError)


def test_errors_are_distinct_types():
    kinds = {MissingFileError, MalformedHeaderError, UnsupportedElementTypeError, DataSizeMismatchError}
    for k in kinds:
        assert issubclass(k, MetaImageError)
        assert not any(issubclass(k, other) for other in kinds - {k})


def test_big_endian_input_is_read(tmp_path):
    vals = np.arange(64, dtype=">i2")
    (tmp_path / "d.raw").write_bytes(vals.tobytes())
    (tmp_path / "d.mhd").write_text(GOOD.replace("MSB = False", "MSB = True"))
    assert np.array_equal(load_volume(tmp_path / "d.mhd").data.ravel(), np.arange(64))


def test_non_writable_path_raises_oserror(tmp_path):
    with pytest.raises(OSError):
        save_volume(Volume(np.zeros((2, 2, 2))), tmp_path / "missing_dir" / "v.mhd")


def test_large_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    v = Volume(rng.integers(-1024, 3071, size=(224, 224, 224)).astype(float), CANONICAL_SPACING)
    back = load_volume(save_volume(v, tmp_path / "big.mhd"))
    assert back == v


def test_mask_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    m = Mask(rng.random((5, 6, 7)) > 0.5, (1.0, 2.0, 3.0), (1.0, 1.0, 1.0))
    p = save_mask(m, tmp_path / "m.mhd")
    assert _header(p)["ElementType"] == "MET_SHORT"
    assert load_mask(p) == m


def test_mask_rejects_non_binary(tmp_path):
    p = save_volume(Volume(np.full((2, 2, 2), 2.0)), tmp_path / "m.mhd")
    with pytest.raises(MalformedHeaderError):
        load_mask(p)


def test_image_round_trip_and_pgm(tmp_path):
    data = np.linspace(0, 1, 12).reshape(3, 4)
    img = ImageGrid2D(data, (0.5, 0.25))
    p = save_image(img, tmp_path / "i.mhd")
    h = _header(p)
    assert h["NDims"] == "2" and h["ElementType"] == "MET_FLOAT"
    back = load_image(p)
    assert back.spacing == (0.5, 0.25)
    np.testing.assert_allclose(back.data, data, rtol=0, atol=1e-7)

    save_pgm(img, tmp_path / "i.pgm")
    blob = (tmp_path / "i.pgm").read_bytes()
    assert blob.startswith(b"P5\n4 3\n65535\n")
    pix = read_pgm(tmp_path / "i.pgm")
    assert pix.shape == (3, 4)
    assert pix[0, 0] == 0 and pix[-1, -1] == 65535
    # big-endian sample order
    assert blob[-2:] == b"\xff\xff"
    np.testing.assert_array_equal(pix, np.rint(data * 65535))


def test_volume_is_immutable_and_copies_input():
    arr = np.zeros((2, 2, 2))
    v = Volume(arr)
    arr[0, 0, 0] = 5.0
    assert v.data[0, 0, 0] == 0.0
    assert arr.flags.writeable
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0


@pytest.mark.parametrize("kwargs", [
    {"data": np.zeros((2, 2))},
    {"data": np.zeros((2, 2, 2)), "spacing": (1.0, 0.0, 1.0)},
    {"data": np.full((2, 2, 2), np.nan)},
    {"data": np.zeros((2, 2, 2)), "origin": (0.0, 0.0)},
])
def test_volume_invariants(kwargs):
    with pytest.raises(ValueError):
        Volume(**kwargs)


def test_resample_identity_and_constant():
    rng = np.random.default_rng(2)
    v = Volume(rng.random((4, 5, 6)), (1.0, 2.0, 3.0), (1.0, 2.0, 3.0))
    assert resample_trilinear(v, v.dims) == v
    c = Volume(np.full((3, 7, 5), 7.0))
    out = resample_trilinear(c, (6, 4, 9))
    assert out.dims == (6, 4, 9)
    assert np.all(out.data == 7.0)


def test_resample_ramp_midpoint():
    v = Volume(np.array([0.0, 10.0]).reshape(1, 1, 2), (1.0, 1.0, 1.0))
    out = resample_trilinear(v, (1, 1, 3))
    assert out.data[0, 0, 1] == pytest.approx(5.0, abs=1e-12)
    # outer edges of the grid are preserved
    np.testing.assert_allclose(np.asarray(out.origin) - 0.5 * np.asarray(out.spacing), np.asarray(v.origin) - 0.5)
    np.testing.assert_allclose(out.extent, v.extent)


@pytest.mark.parametrize("hu,mu", [(0.0, 0.02), (-1000.0, 0.0), (-1500.0, 0.0), (1000.0, 0.04)])
def test_hu_to_attenuation_examples(hu, mu):
    out = hu_to_attenuation(Volume(np.full((1, 1, 1), hu)), 0.02)
    assert out.data[0, 0, 0] == pytest.approx(mu, abs=1e-15)


def test_attenuation_hu_inverse():
    v = Volume(np.linspace(-900, 2000, 27).reshape(3, 3, 3))
    np.testing.assert_allclose(attenuation_to_hu(hu_to_attenuation(v)).data, v.data, atol=1e-9)


finite = st.floats(-3000, 3000, allow_nan=False, width=64)
small_dims = st.tuples(*(st.integers(1, 6),) * 3)


@settings(max_examples=40, deadline=None)
@given(
    data=small_dims.flatmap(lambda d: arrays(np.float64, d, elements=finite)),
    spacing=st.tuples(*(st.floats(0.1, 5.0),) * 3),
    origin=st.tuples(*(st.floats(-100, 100),) * 3),
)
def test_property_round_trip_identity(tmp_path_factory, data, spacing, origin):
    d = tmp_path_factory.mktemp("rt")
    v = Volume(data, spacing, origin)
    back = load_volume(save_volume(v, d / "v.mhd"))
    assert back == v


@settings(max_examples=40, deadline=None)
@given(
    data=small_dims.flatmap(lambda d: arrays(np.float64, d, elements=finite)),
    target=small_dims,
)
def test_property_resample_within_range(data, target):
    v = Volume(data)
    out = resample_trilinear(v, target)
    tol = 1e-9 * max(1.0, float(np.abs(data).max()))
    assert out.data.min() >= data.min() - tol
    assert out.data.max() <= data.max() + tol


@given(st.lists(st.floats(-5000, 5000), min_size=2, max_size=20))
def test_property_attenuation_monotone_and_zero_below_air(values):
    hu = np.sort(np.array(values))
    mu = hu_to_attenuation(Volume(hu.reshape(1, 1, -1))).data.ravel()
    assert np.all(np.diff(mu) >= 0)
    assert np.all(mu[hu <= -1000] == 0)
