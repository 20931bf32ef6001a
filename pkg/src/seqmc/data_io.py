"""Loading matrices and rating triples, trace CSVs and flat key=value config files."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .harness import RunTrace

TRACE_HEADER = ["step", "row", "col", "reward", "expected_reward", "cum_regret"]
AGGREGATE_HEADER = ["policy", "rank", "step", "mean_regret", "stderr"]
MISSING_TOKENS = ("", "na", "nan", "?")


class DataFormatError(ValueError):
    pass


class EmptyFileError(DataFormatError):
    pass


class RaggedRowsError(DataFormatError):
    pass


class NonNumericError(DataFormatError):
    pass


class DuplicatePairError(DataFormatError):
    pass


class SchemaError(DataFormatError):
    pass


class ShapeOverflowError(DataFormatError):
    pass


def _parse_float(tok: str, where: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise NonNumericError(f"{where}: not a number: {tok!r}") from None
    if not math.isfinite(v):
        raise NonNumericError(f"{where}: non-finite value {tok!r}")
    return v


def _read_rows(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise EmptyFileError(f"{path}: empty file")
    width = len(rows[0])
    for n, r in enumerate(rows, 1):
        if len(r) != width:
            raise RaggedRowsError(f"{path}: line {n} has {len(r)} fields, expected {width}")
    return rows


def load_dense_matrix(path) -> np.ndarray:
    """Rectangular CSV of decimal numbers to a float matrix."""
    rows = _read_rows(path)
    return np.array(
        [[_parse_float(c.strip(), f"{path}:{n}") for c in r] for n, r in enumerate(rows, 1)], dtype=float
    )


def save_dense_matrix(M, path) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    with open(path, "w", newline="") as fh:
        for row in M:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


@dataclass
class MaskedMatrix:
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.mask.shape:
            raise ValueError("values and mask must have the same shape")
        self.values = np.where(self.mask, self.values, 0.0)

    @property
    def shape(self):
        return self.values.shape

    @property
    def complete(self) -> bool:
        return bool(self.mask.all())

    def triples(self) -> list:
        r, c = np.nonzero(self.mask)
        return [(int(i), int(j), float(self.values[i, j])) for i, j in zip(r, c)]


def load_masked_matrix(path) -> MaskedMatrix:
    """Like :func:`load_dense_matrix` but empty / ``NA`` / ``nan`` / ``?`` cells are unknown."""
    rows = _read_rows(path)
    vals = np.zeros((len(rows), len(rows[0])))
    mask = np.zeros(vals.shape, dtype=bool)
    for n, r in enumerate(rows):
        for j, c in enumerate(r):
            c = c.strip()
            if c.lower() in MISSING_TOKENS:
                continue
            vals[n, j] = _parse_float(c, f"{path}:{n + 1}")
            mask[n, j] = True
    return MaskedMatrix(vals, mask)


def load_ratings_triples(path, delimiter: str = ",", allow_duplicates: bool = False) -> list:
    """``user<delim>item<delim>rating`` lines to a list of ``(user, item, rating)``.

    A first line whose first two fields are not integers is taken as a header.
    Duplicate (user, item) pairs are an error unless ``allow_duplicates``, in
    which case the last occurrence wins.
    """
    out: dict = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(delimiter)]
        if len(parts) != 3:
            if n == 1 and not out:
                continue
            raise DataFormatError(f"{path}:{n}: expected 3 fields, got {len(parts)}")
        try:
            u, i = int(parts[0]), int(parts[1])
        except ValueError:
            if n == 1:
                continue
            raise DataFormatError(f"{path}:{n}: user and item ids must be integers") from None
        if u < 0 or i < 0:
            raise DataFormatError(f"{path}:{n}: ids must be nonnegative")
        rating = _parse_float(parts[2], f"{path}:{n}")
        if (u, i) in out and not allow_duplicates:
            raise DuplicatePairError(f"{path}:{n}: duplicate (user, item) pair ({u}, {i})")
        out.pop((u, i), None)
        out[(u, i)] = rating
    return [(u, i, r) for (u, i), r in out.items()]


def save_ratings_triples(triples, path, delimiter: str = ",", header: bool = False) -> None:
    with open(path, "w") as fh:
        if header:
            fh.write(delimiter.join(["user", "item", "rating"]) + "\n")
        for u, i, r in triples:
            fh.write(f"{int(u)}{delimiter}{int(i)}{delimiter}{float(r)!r}\n")


def densify(triples, shape, orient: str = "users-as-columns") -> MaskedMatrix:
    """Place triples in a ``shape`` matrix after re-indexing ids by first appearance.

    With the default orientation rows are items and columns users.
    """
    D, N = shape
    users: dict = {}
    items: dict = {}
    for u, i, _ in triples:
        users.setdefault(u, len(users))
        items.setdefault(i, len(items))
    if orient == "users-as-columns":
        n_rows, n_cols = len(items), len(users)
    elif orient == "users-as-rows":
        n_rows, n_cols = len(users), len(items)
    else:
        raise ValueError(f"unknown orientation {orient!r}")
    if n_rows > D or n_cols > N:
        raise ShapeOverflowError(f"{n_rows} x {n_cols} distinct ids do not fit in shape {shape}")
    vals = np.zeros((D, N))
    mask = np.zeros((D, N), dtype=bool)
    for u, i, r in triples:
        a, b = (items[i], users[u]) if orient == "users-as-columns" else (users[u], items[i])
        vals[a, b] = r
        mask[a, b] = True
    return MaskedMatrix(vals, mask)


def save_trace(trace: RunTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(TRACE_HEADER) + "\n")
        for t in range(len(trace)):
            fh.write(
                f"{t + 1},{int(trace.rows[t])},{int(trace.cols[t])},{float(trace.reward[t])!r},"
                f"{float(trace.expected_reward[t])!r},{float(trace.cum_regret[t])!r}\n"
            )


def load_trace(path) -> RunTrace:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_HEADER:
            raise SchemaError(f"{path}: expected header {','.join(TRACE_HEADER)}, got {header}")
        body = [r for r in reader if r]
    if not body:
        return RunTrace.empty()
    try:
        steps = np.array([int(r[0]) for r in body])
        rows = np.array([int(r[1]) for r in body], dtype=np.int64)
        cols = np.array([int(r[2]) for r in body], dtype=np.int64)
        num = np.array([[_parse_float(x, str(path)) for x in r[3:]] for r in body], dtype=float)
    except (ValueError, IndexError) as exc:
        raise SchemaError(f"{path}: malformed trace row ({exc})") from None
    if num.shape[1] != 3 or not np.array_equal(steps, np.arange(1, len(body) + 1)):
        raise SchemaError(f"{path}: malformed trace rows")
    return RunTrace(rows, cols, num[:, 0].copy(), num[:, 1].copy(), num[:, 2].copy())


def write_aggregate(path, policy: str, rank: int, mean, stderr) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(AGGREGATE_HEADER) + "\n")
        for t, (m, s) in enumerate(zip(mean, stderr), 1):
            fh.write(f"{policy},{rank},{t},{float(m)!r},{float(s)!r}\n")


def read_aggregate(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != AGGREGATE_HEADER:
            raise SchemaError(f"{path}: expected header {','.join(AGGREGATE_HEADER)}, got {header}")
        out = []
        for r in reader:
            if not r:
                continue
            if len(r) != 5:
                raise SchemaError(f"{path}: malformed row {r}")
            out.append((r[0], int(r[1]), int(r[2]), _parse_float(r[3], str(path)), _parse_float(r[4], str(path))))
    return out


# ---------------------------------------------------------------------------
# flat key=value configuration


def read_config(path, schema: dict) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment.  Unknown keys are rejected.

    ``schema`` maps each allowed key to a converter taking the raw string.
    """
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SchemaError(f"{path}:{n}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in schema:
            raise SchemaError(f"{path}:{n}: unknown key {key!r}")
        try:
            out[key] = schema[key](raw)
        except ValueError as exc:
            raise SchemaError(f"{path}:{n}: bad value for {key!r}: {exc}") from None
    return out


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_config(path, values: dict) -> None:
    with open(path, "w") as fh:
        for k in sorted(values):
            fh.write(f"{k} = {format_value(values[k])}\n")
