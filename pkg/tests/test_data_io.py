import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqmc import data_io as io
from seqmc.harness import RunTrace


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_dense_basic(tmp_path):
    M = io.load_dense_matrix(write(tmp_path, "m.csv", "1,2\n3,4\n"))
    np.testing.assert_array_equal(M, [[1, 2], [3, 4]])


def test_dense_roundtrip_bit_identical(tmp_path):
    M = np.random.default_rng(0).standard_normal((10, 7)) * 1e3
    io.save_dense_matrix(M, tmp_path / "m.csv")
    assert np.array_equal(io.load_dense_matrix(tmp_path / "m.csv"), M)


@pytest.mark.parametrize(
    "text,err",
    [
        ("1,2\n3\n", io.RaggedRowsError),
        ("1,x\n3,4\n", io.NonNumericError),
        ("", io.EmptyFileError),
        ("\n\n", io.EmptyFileError),
        ("1,nan\n", io.NonNumericError),
        ("1,inf\n", io.NonNumericError),
        ("1,\n", io.NonNumericError),
    ],
)
def test_dense_errors(tmp_path, text, err):
    with pytest.raises(err):
        io.load_dense_matrix(write(tmp_path, "m.csv", text))


def test_dense_errors_are_distinct():
    kinds = {io.RaggedRowsError, io.NonNumericError, io.EmptyFileError}
    assert len(kinds) == 3 and all(issubclass(k, io.DataFormatError) for k in kinds)


def test_masked_matrix(tmp_path):
    mm = io.load_masked_matrix(write(tmp_path, "m.csv", "1,,3\nNA,5,?\n"))
    np.testing.assert_array_equal(mm.mask, [[1, 0, 1], [0, 1, 0]])
    assert not mm.complete
    assert mm.triples() == [(0, 0, 1.0), (0, 2, 3.0), (1, 1, 5.0)]


def test_triples_basic(tmp_path):
    t = io.load_ratings_triples(write(tmp_path, "r.csv", "0,0,5.0\n1,2,3.5\n"))
    assert t == [(0, 0, 5.0), (1, 2, 3.5)]


def test_triples_header_and_delimiter(tmp_path):
    t = io.load_ratings_triples(write(tmp_path, "r.tsv", "user\titem\trating\n3\t4\t1.5\n"), delimiter="\t")
    assert t == [(3, 4, 1.5)]


def test_triples_duplicate_names_line(tmp_path):
    p = write(tmp_path, "r.csv", "0,0,5\n1,1,2\n0,0,4\n")
    with pytest.raises(io.DuplicatePairError, match=":3:"):
        io.load_ratings_triples(p)
    assert io.load_ratings_triples(p, allow_duplicates=True) == [(1, 1, 2.0), (0, 0, 4.0)]


@pytest.mark.parametrize("text", ["0,0,5\n1,a,2\n", "0,0\n1,1,1\n1,2\n", "0,-1,3\n", "0,0,abc\n"])
def test_triples_parse_errors(tmp_path, text):
    with pytest.raises(io.DataFormatError, match=r":\d+:"):
        io.load_ratings_triples(write(tmp_path, "r.csv", text))


def test_triples_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    pairs = rng.choice(100 * 50, size=1000, replace=False)
    triples = [(int(k // 50), int(k % 50), float(rng.normal())) for k in pairs]
    io.save_ratings_triples(triples, tmp_path / "r.csv", header=True)
    assert io.load_ratings_triples(tmp_path / "r.csv") == triples


def test_densify_examples():
    mm = io.densify([(7, 9, 2.0)], (2, 2))
    assert mm.mask.sum() == 1 and mm.values[0, 0] == 2.0
    full = [(u, i, float(u + i)) for u in range(3) for i in range(2)]
    assert io.densify(full, (2, 3)).mask.all()
    assert io.densify(full, (3, 2), orient="users-as-rows").mask.all()
    with pytest.raises(io.ShapeOverflowError):
        io.densify(full, (2, 2))
    with pytest.raises(ValueError):
        io.densify(full, (2, 3), orient="diagonal")


def test_densify_density_and_orientation():
    rng = np.random.default_rng(2)
    pairs = rng.choice(20 * 30, size=137, replace=False)
    triples = [(int(k // 20), int(k % 20), 1.0) for k in pairs]
    mm = io.densify(triples, (20, 30))
    assert mm.mask.sum() == 137
    # rows are items, columns users, both ranked by first appearance
    u0, i0, _ = triples[0]
    assert mm.mask[0, 0]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_densify_inverts_triples(seed):
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal((4, 5))
    mask = rng.random((4, 5)) < 0.5
    mask[:, 0] = True
    mask[0, :] = True  # every row and column appears, in index order
    mm = io.MaskedMatrix(vals, mask)
    # triples are (row, col, v); as (user, item) with users-as-rows this is the identity
    back = io.densify(sorted(mm.triples(), key=lambda t: (t[0] > 0, t[1] > 0, t)), (4, 5), orient="users-as-rows")
    assert back.mask.sum() == mask.sum()
    assert sorted(back.values[back.mask].tolist()) == sorted(vals[mask].tolist())


def test_trace_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    n = 200
    t = RunTrace(
        rng.integers(0, 9, n), rng.integers(0, 9, n), rng.standard_normal(n), rng.standard_normal(n), np.cumsum(rng.random(n))
    )
    io.save_trace(t, tmp_path / "t.csv")
    back = io.load_trace(tmp_path / "t.csv")
    for f in ("rows", "cols", "reward", "expected_reward", "cum_regret"):
        assert np.array_equal(getattr(back, f), getattr(t, f))


def test_trace_empty(tmp_path):
    io.save_trace(RunTrace.empty(), tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text() == ",".join(io.TRACE_HEADER) + "\n"
    assert len(io.load_trace(tmp_path / "t.csv")) == 0


@pytest.mark.parametrize(
    "text",
    [
        "step,row,col,reward\n1,0,0,1.0\n",
        "step,row,col,reward,expected_reward,cum_regret\n1,0,0,1.0,x,2\n",
        "step,row,col,reward,expected_reward,cum_regret\n2,0,0,1.0,1.0,2\n",
        "step,row,col,reward,expected_reward,cum_regret\n1,0,0,1.0,nan,2\n",
    ],
)
def test_trace_schema_errors(tmp_path, text):
    with pytest.raises(io.DataFormatError):
        io.load_trace(write(tmp_path, "t.csv", text))


def test_aggregate_roundtrip(tmp_path):
    io.write_aggregate(tmp_path / "a.csv", "ids", 5, [0.5, 1.25], [0.0, 0.1])
    assert io.read_aggregate(tmp_path / "a.csv") == [("ids", 5, 1, 0.5, 0.0), ("ids", 5, 2, 1.25, 0.1)]
    with pytest.raises(io.SchemaError):
        io.read_aggregate(write(tmp_path, "b.csv", "policy,step\nids,1\n"))


def test_config_roundtrip_and_strictness(tmp_path):
    schema = {"a": int, "b": float, "c": str, "flags": lambda s: [int(x) for x in s.split(",")]}
    io.write_config(tmp_path / "c.txt", {"a": 3, "b": 0.1, "c": "x", "flags": [1, 2]})
    assert io.read_config(tmp_path / "c.txt", schema) == {"a": 3, "b": 0.1, "c": "x", "flags": [1, 2]}
    assert io.read_config(write(tmp_path, "d.txt", "# comment\na = 4  # trailing\n\n"), schema) == {"a": 4}
    with pytest.raises(io.SchemaError, match="unknown key 'z'"):
        io.read_config(write(tmp_path, "e.txt", "z = 1\n"), schema)
    with pytest.raises(io.SchemaError, match="bad value"):
        io.read_config(write(tmp_path, "f.txt", "a = one\n"), schema)
    with pytest.raises(io.SchemaError):
        io.read_config(write(tmp_path, "g.txt", "a 1\n"), schema)


@settings(max_examples=60, deadline=None)
@given(st.binary(min_size=0, max_size=80))
def test_loaders_never_coerce_garbage(tmp_path_factory, blob):
    p = tmp_path_factory.mktemp("fz") / "m.csv"
    p.write_bytes(blob)
    try:
        M = io.load_dense_matrix(p)
    except (io.DataFormatError, UnicodeDecodeError):
        return
    assert np.all(np.isfinite(M))
