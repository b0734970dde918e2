import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gwclass.data import (
    ElementLabelTable,
    SpatialDataset,
    UnitSchema,
    aggregate_majority,
    load_elements_csv,
    load_units_csv,
    standardize_features,
    write_units_csv,
)
from gwclass.errors import (
    DataError,
    DegenerateVariableError,
    IntegrityError,
    ParseError,
    SchemaError,
)


def make_dataset(n=4, labels=None):
    return SpatialDataset(
        ids=[f"U{i}" for i in range(n)],
        coords=np.column_stack([np.arange(n, dtype=float), np.zeros(n)]),
        features=np.arange(n, dtype=float).reshape(-1, 1),
        variable_names=["f1"],
        labels=labels,
        class_names=("a", "b", "c") if labels is not None else (),
    )


def test_load_three_rows(tmp_path):
    path = tmp_path / "units.csv"
    path.write_text("id,x,y,f1,label\nA,0,0,1.5,0\nB,1,0,2.5,1\nC,2,1,3.5,0\n")
    ds = load_units_csv(path)
    assert ds.n_units == 3
    assert ds.variable_names == ("f1",)
    assert ds.ids == ("A", "B", "C")
    np.testing.assert_array_equal(ds.labels, [0, 1, 0])
    np.testing.assert_array_equal(ds.features[:, 0], [1.5, 2.5, 3.5])


def test_label_column_optional(tmp_path):
    path = tmp_path / "units.csv"
    path.write_text("id,x,y,f1,f2\nA,0,0,1,2\nB,1,0,2,3\n")
    ds = load_units_csv(path)
    assert ds.labels is None
    assert ds.variable_names == ("f1", "f2")


def test_duplicate_id(tmp_path):
    path = tmp_path / "units.csv"
    path.write_text("id,x,y,f1\nA,0,0,1\nA,1,0,2\n")
    with pytest.raises(IntegrityError):
        load_units_csv(path)


def test_nan_cell_names_row_and_column(tmp_path):
    path = tmp_path / "units.csv"
    path.write_text("id,x,y,f1\nA,0,0,1\nB,1,0,NaN\n")
    with pytest.raises(ParseError, match=r"row 3.*'f1'"):
        load_units_csv(path)


def test_missing_column(tmp_path):
    path = tmp_path / "units.csv"
    path.write_text("id,x,f1\nA,0,1\n")
    with pytest.raises(SchemaError):
        load_units_csv(path)


def test_custom_schema_and_class_names(tmp_path):
    path = tmp_path / "units.csv"
    path.write_text("code,east,north,a,b,type\nA,0,0,1,5,dense\nB,1,0,2,6,sparse\n")
    schema = UnitSchema(id="code", x="east", y="north", label="type", features=("b",))
    ds = load_units_csv(path, schema, class_names=["sparse", "dense"])
    assert ds.variable_names == ("b",)
    np.testing.assert_array_equal(ds.labels, [1, 0])


def test_roundtrip_bit_for_bit(tmp_path):
    rng = np.random.default_rng(3)
    n = 50
    ds = SpatialDataset(ids=[f"u{i}" for i in range(n)], coords=rng.uniform(0, 1e4, (n, 2)),
                        features=rng.standard_normal((n, 3)) * 1e-3 + np.pi,
                        variable_names=["a", "b", "c"], labels=rng.integers(0, 3, n),
                        class_names=["0", "1", "2"])
    path = tmp_path / "rt.csv"
    write_units_csv(ds, path)
    back = load_units_csv(path)
    assert back.ids == ds.ids
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.coords, ds.coords)


def test_majority_vote():
    ds = make_dataset(2)
    el = ElementLabelTable(("e1", "e2", "e3", "e4", "e5"), ("U0", "U0", "U0", "U1", "U1"),
                           np.array([2, 2, 5, 1, 3]))
    out, dropped = aggregate_majority(el, ds, class_names=[str(c) for c in range(6)])
    np.testing.assert_array_equal(out.labels, [2, 1])  # tie {1,3} -> 1
    assert dropped == []


def test_unknown_unit_in_elements():
    el = ElementLabelTable(("e1",), ("Z",), np.array([0]))
    with pytest.raises(IntegrityError):
        aggregate_majority(el, make_dataset(2))


def test_units_without_elements_dropped():
    el = ElementLabelTable(("e1", "e2"), ("U0", "U2"), np.array([1, 0]))
    out, dropped = aggregate_majority(el, make_dataset(3), class_names=["a", "b"])
    assert out.ids == ("U0", "U2")
    assert dropped == ["U1"]


def test_load_elements(tmp_path):
    path = tmp_path / "el.csv"
    path.write_text("element_id,unit_id,label\nb1,U0,1\nb2,U0,1\nb3,U1,0\n")
    el = load_elements_csv(path)
    out, _ = aggregate_majority(el, make_dataset(2), class_names=["a", "b"])
    np.testing.assert_array_equal(out.labels, [1, 0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 4)), min_size=4, max_size=40),
       st.randoms())
def test_majority_permutation_invariant(rows, rnd):
    ds = make_dataset(4)
    uids = [f"U{u}" for u, _ in rows]
    labels = [lab for _, lab in rows]
    el = ElementLabelTable(tuple(f"e{i}" for i in range(len(rows))), tuple(uids),
                           np.array(labels))
    order = list(range(len(rows)))
    rnd.shuffle(order)
    shuffled = ElementLabelTable(tuple(el.element_ids[i] for i in order),
                                 tuple(el.unit_ids[i] for i in order), el.labels[order])
    names = [str(c) for c in range(5)]
    a, da = aggregate_majority(el, ds, names)
    b, db = aggregate_majority(shuffled, ds, names)
    assert a.ids == b.ids and da == db
    np.testing.assert_array_equal(a.labels, b.labels)


def test_standardize_closed_form():
    ds = SpatialDataset(ids=["a", "b", "c"], coords=np.zeros((3, 2)),
                        features=np.array([[1.0], [2.0], [3.0]]), variable_names=["v"])
    out = standardize_features(ds)
    np.testing.assert_allclose(out.features[:, 0], [-1, 0, 1], atol=1e-12)
    assert out.standardized
    assert out.scaling["v"] == (2.0, 1.0)


def test_standardize_constant_column():
    ds = SpatialDataset(ids=["a", "b", "c"], coords=np.zeros((3, 2)),
                        features=np.array([[5.0, 1], [5.0, 2], [5.0, 3]]),
                        variable_names=["const", "v"])
    with pytest.raises(DegenerateVariableError, match="const"):
        standardize_features(ds)


def test_standardize_twice_is_identity():
    rng = np.random.default_rng(0)
    ds = SpatialDataset(ids=[str(i) for i in range(30)], coords=np.zeros((30, 2)),
                        features=rng.gamma(2.0, 3.0, (30, 4)), variable_names=list("abcd"))
    once = standardize_features(ds)
    from dataclasses import replace
    twice = standardize_features(replace(once, standardized=False))
    np.testing.assert_allclose(twice.features, once.features, atol=1e-9)


def test_standardize_rejects_flagged():
    ds = standardize_features(make_dataset(4))
    with pytest.raises(DataError):
        standardize_features(ds)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 40), st.integers(1, 5), st.integers(0, 10_000))
def test_standardized_moments(n, p, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p)) * rng.uniform(0.1, 1e3, p) + rng.uniform(-1e3, 1e3, p)
    ds = SpatialDataset(ids=[str(i) for i in range(n)], coords=np.zeros((n, 2)), features=X,
                        variable_names=[f"v{j}" for j in range(p)])
    Z = standardize_features(ds).features
    np.testing.assert_allclose(Z.mean(axis=0), 0, atol=1e-9)
    np.testing.assert_allclose(Z.std(axis=0, ddof=1), 1, atol=1e-9)
