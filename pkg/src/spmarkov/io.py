"""File formats: dataset/state/posterior CSVs and a line-oriented model file.

All floating-point values are written with 17 significant digits, so every
file round-trips float64 exactly and repeated runs produce byte-identical
output.
"""

from __future__ import annotations

import csv

import numpy as np

from .basis import KernelSpec, SplineBasis, TensorSplineBasis
from .exceptions import ConfigurationError, DataValidationError
from .inference import PosteriorSummary
from .model import (
    AdditiveSplineTransition,
    KernelTransition,
    LinearTransition,
    ModelParameters,
    RegimeEmission,
    SplineTransition,
    TimeSeriesDataset,
    TransitionFunction,
    link,
)

MODEL_MAGIC = "spmarkov-model"
MODEL_VERSION = 1


def fmt_float(value: float) -> str:
    """Shortest decimal string that round-trips float64 exactly."""
    return format(float(value), ".17g")


def _fmt_vec(values) -> str:
    return " ".join(fmt_float(v) for v in np.asarray(values, dtype=np.float64))


# ---------------------------------------------------------------------------
# CSV formats
# ---------------------------------------------------------------------------


def write_dataset_csv(path, data: TimeSeriesDataset) -> None:
    """Columns y1..yd then x1..xp, one row per time point."""
    header = [f"y{i + 1}" for i in range(data.n_series)] + [
        f"x{i + 1}" for i in range(data.n_covariates)
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for t in range(data.n_obs):
            writer.writerow(
                [fmt_float(v) for v in data.y[t]] + [fmt_float(v) for v in data.x[t]]
            )


def read_dataset_csv(path) -> TimeSeriesDataset:
    """Parse a dataset CSV, reporting the offending row/column on bad values."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError(f"{path}: empty dataset file") from None
        header = [h.strip() for h in header]
        n_y = sum(1 for h in header if h.startswith("y"))
        n_x = sum(1 for h in header if h.startswith("x"))
        expected = [f"y{i + 1}" for i in range(n_y)] + [f"x{i + 1}" for i in range(n_x)]
        if n_y == 0 or n_x == 0 or header != expected:
            raise DataValidationError(
                f"{path}: header must be y1..yd,x1..xp in order, got {header}"
            )
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_y + n_x:
                raise DataValidationError(
                    f"{path}: line {line_no} has {len(row)} fields, expected {n_y + n_x}"
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                bad = next(
                    col for col, v in zip(header, row) if not _parses_as_float(v)
                )
                raise DataValidationError(
                    f"{path}: line {line_no}, column {bad}: not a number"
                ) from None
    if len(rows) < 2:
        raise DataValidationError(f"{path}: need at least 2 data rows, got {len(rows)}")
    arr = np.asarray(rows, dtype=np.float64)
    return TimeSeriesDataset(y=arr[:, :n_y], x=arr[:, n_y:])


def _parses_as_float(v: str) -> bool:
    try:
        float(v)
        return True
    except ValueError:
        return False


def write_states_csv(path, states) -> None:
    states = np.asarray(states)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["state"])
        for s in states:
            writer.writerow([str(int(s))])


def read_states_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["state"]:
            raise DataValidationError(f"{path}: expected single 'state' column")
        out = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                value = int(row[0])
            except ValueError:
                raise DataValidationError(
                    f"{path}: line {line_no}: state must be an integer"
                ) from None
            if value not in (0, 1):
                raise DataValidationError(
                    f"{path}: line {line_no}: state must be 0 or 1, got {value}"
                )
            out.append(value)
    if not out:
        raise DataValidationError(f"{path}: no states found")
    return np.asarray(out, dtype=np.int64)


def write_posterior_csv(path, post: PosteriorSummary) -> None:
    """Smoothed regime probabilities, columns z0,z1."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["z0", "z1"])
        for t in range(post.n_obs):
            writer.writerow([fmt_float(post.z[t, 0]), fmt_float(post.z[t, 1])])


def write_surface_csv(path, params: ModelParameters, x_range, n_grid: int) -> None:
    """Evaluate both transition surfaces on a grid spanned by x_range.

    One covariate gives a line, two give a full mesh; with more covariates
    the first two vary and the rest sit at their range midpoint. Columns are
    the varying covariates, then f0,p01,f1,p11.
    """
    x_min, x_max = (np.asarray(v, dtype=np.float64).reshape(-1) for v in x_range)
    p = x_min.size
    if x_max.size != p or np.any(x_max < x_min):
        raise ConfigurationError("invalid covariate range for the surface grid")
    if n_grid < 2:
        raise ConfigurationError(f"grid needs at least 2 points, got {n_grid}")
    if p == 1:
        grid = np.linspace(x_min[0], x_max[0], n_grid)[:, None]
        varying = ["x1"]
    else:
        g1 = np.linspace(x_min[0], x_max[0], n_grid)
        g2 = np.linspace(x_min[1], x_max[1], n_grid)
        m1, m2 = np.meshgrid(g1, g2, indexing="ij")
        grid = np.column_stack([m1.ravel(), m2.ravel()])
        if p > 2:
            mids = (x_min[2:] + x_max[2:]) / 2.0
            grid = np.hstack([grid, np.tile(mids, (grid.shape[0], 1))])
        varying = ["x1", "x2"]
    f0_vals = params.f0.evaluate(grid)
    f1_vals = params.f1.evaluate(grid)
    p01 = link(params.f0.link_kind, f0_vals)
    p11 = link(params.f1.link_kind, f1_vals)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(varying + ["f0", "p01", "f1", "p11"])
        for i in range(grid.shape[0]):
            row = [fmt_float(grid[i, k]) for k in range(len(varying))]
            row += [
                fmt_float(f0_vals[i]),
                fmt_float(p01[i]),
                fmt_float(f1_vals[i]),
                fmt_float(p11[i]),
            ]
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Model file
# ---------------------------------------------------------------------------


def _emission_lines(e: RegimeEmission) -> list[str]:
    lines = [f"mu {_fmt_vec(e.mu)}"]
    lines += [f"A {_fmt_vec(row)}" for row in e.A]
    lines += [f"Sigma {_fmt_vec(row)}" for row in e.Sigma]
    return lines


def _spline_basis_lines(b: SplineBasis) -> list[str]:
    return [f"degree {b.degree}", f"knots {_fmt_vec(b.knots)}"]


def _transition_lines(tag: str, f: TransitionFunction) -> list[str]:
    if isinstance(f, LinearTransition):
        return [
            f"transition {tag} linear {f.link_kind}",
            f"coef {_fmt_vec(f.coef)}",
        ]
    if isinstance(f, SplineTransition):
        lines = [f"transition {tag} spline {f.link_kind}"]
        if isinstance(f.basis, TensorSplineBasis):
            lines.append(f"parts {len(f.basis.parts)}")
            for part in f.basis.parts:
                lines += _spline_basis_lines(part)
        else:
            lines.append("parts 1")
            lines += _spline_basis_lines(f.basis)
        lines.append(f"lambda {fmt_float(f.penalty)}")
        lines.append(f"coef {_fmt_vec(f.coef)}")
        return lines
    if isinstance(f, AdditiveSplineTransition):
        lines = [
            f"transition {tag} additive {f.link_kind}",
            f"parts {len(f.bases)}",
            f"intercept {fmt_float(f.intercept)}",
        ]
        for b, c, lam in zip(f.bases, f.coefs, f.penalties):
            lines += _spline_basis_lines(b)
            lines.append(f"lambda {fmt_float(lam)}")
            lines.append(f"coef {_fmt_vec(c)}")
        return lines
    if isinstance(f, KernelTransition):
        anchors = f.spec.anchors
        lines = [
            f"transition {tag} rkhs {f.link_kind}",
            f"family {f.spec.family}",
            f"bandwidth {fmt_float(f.spec.bandwidth)}",
            f"lambda {fmt_float(f.penalty)}",
            f"anchors {anchors.shape[0]} {anchors.shape[1]}",
        ]
        lines += [f"row {_fmt_vec(row)}" for row in anchors]
        lines.append(f"coef {_fmt_vec(f.coef)}")
        return lines
    raise ConfigurationError(
        f"cannot serialize a {type(f).__name__}; only fitted transition forms "
        "have a file representation"
    )


def write_model(path, params: ModelParameters, variant: str, x_range) -> None:
    """Persist fitted parameters plus the covariate range seen in training."""
    x_min, x_max = (np.asarray(v, dtype=np.float64).reshape(-1) for v in x_range)
    lines = [
        f"{MODEL_MAGIC} {MODEL_VERSION}",
        f"variant {variant}",
        f"n_series {params.n_series}",
        f"n_covariates {x_min.size}",
        f"pi {_fmt_vec(params.pi)}",
        f"x_min {_fmt_vec(x_min)}",
        f"x_max {_fmt_vec(x_max)}",
    ]
    for j, e in enumerate(params.emissions):
        lines.append(f"emission {j}")
        lines += _emission_lines(e)
    lines += _transition_lines("f0", params.f0)
    lines += _transition_lines("f1", params.f1)
    lines.append("end")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


class _LineReader:
    def __init__(self, path):
        with open(path) as fh:
            self.lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
        self.path = path
        self.pos = 0

    def next(self, keyword: str) -> list[str]:
        if self.pos >= len(self.lines):
            raise DataValidationError(
                f"{self.path}: unexpected end of file, wanted '{keyword}'"
            )
        tokens = self.lines[self.pos].split()
        self.pos += 1
        if tokens[0] != keyword:
            raise DataValidationError(
                f"{self.path}: line {self.pos}: expected '{keyword}', got '{tokens[0]}'"
            )
        return tokens[1:]

    def floats(self, keyword: str, count: int | None = None) -> np.ndarray:
        tokens = self.next(keyword)
        try:
            vals = np.array([float(v) for v in tokens])
        except ValueError:
            raise DataValidationError(
                f"{self.path}: line {self.pos}: bad number in '{keyword}' record"
            ) from None
        if count is not None and vals.size != count:
            raise DataValidationError(
                f"{self.path}: line {self.pos}: expected {count} values, got {vals.size}"
            )
        return vals


def _read_emission(reader: _LineReader, index: int, d: int) -> RegimeEmission:
    tokens = reader.next("emission")
    if tokens != [str(index)]:
        raise DataValidationError(
            f"{reader.path}: line {reader.pos}: expected emission {index}"
        )
    mu = reader.floats("mu", d)
    A = np.vstack([reader.floats("A", d) for _ in range(d)])
    Sigma = np.vstack([reader.floats("Sigma", d) for _ in range(d)])
    return RegimeEmission(mu=mu, A=A, Sigma=Sigma)


def _read_basis(reader: _LineReader) -> SplineBasis:
    degree = int(reader.next("degree")[0])
    knots = reader.floats("knots")
    return SplineBasis(knots=knots, degree=degree)


def _read_transition(reader: _LineReader, tag: str, n_cov: int) -> TransitionFunction:
    tokens = reader.next("transition")
    if len(tokens) != 3 or tokens[0] != tag:
        raise DataValidationError(
            f"{reader.path}: line {reader.pos}: malformed transition header for {tag}"
        )
    kind, link_kind = tokens[1], tokens[2]
    if kind == "linear":
        coef = reader.floats("coef", n_cov + 1)
        return LinearTransition(coef=coef, link_kind=link_kind)
    if kind == "spline":
        n_parts = int(reader.next("parts")[0])
        parts = [_read_basis(reader) for _ in range(n_parts)]
        lam = float(reader.floats("lambda", 1)[0])
        basis = parts[0] if n_parts == 1 else TensorSplineBasis(tuple(parts))
        coef = reader.floats("coef", basis.n_basis)
        return SplineTransition(basis=basis, coef=coef, penalty=lam, link_kind=link_kind)
    if kind == "additive":
        n_parts = int(reader.next("parts")[0])
        intercept = float(reader.floats("intercept", 1)[0])
        bases, coefs, lams = [], [], []
        for _ in range(n_parts):
            b = _read_basis(reader)
            lams.append(float(reader.floats("lambda", 1)[0]))
            coefs.append(reader.floats("coef", b.n_basis))
            bases.append(b)
        return AdditiveSplineTransition(
            bases=tuple(bases),
            intercept=intercept,
            coefs=tuple(coefs),
            penalties=tuple(lams),
            link_kind=link_kind,
        )
    if kind == "rkhs":
        family = reader.next("family")[0]
        bandwidth = float(reader.floats("bandwidth", 1)[0])
        lam = float(reader.floats("lambda", 1)[0])
        n_anchors, p = (int(v) for v in reader.next("anchors"))
        anchors = np.vstack([reader.floats("row", p) for _ in range(n_anchors)])
        coef = reader.floats("coef", n_anchors)
        spec = KernelSpec(family=family, bandwidth=bandwidth, anchors=anchors)
        return KernelTransition(spec=spec, coef=coef, penalty=lam, link_kind=link_kind)
    raise DataValidationError(
        f"{reader.path}: line {reader.pos}: unknown transition kind {kind!r}"
    )


def read_model(path) -> tuple[ModelParameters, dict]:
    """Load a model file; returns (parameters, metadata with variant/x range)."""
    reader = _LineReader(path)
    head = reader.next(MODEL_MAGIC)
    if head != [str(MODEL_VERSION)]:
        raise DataValidationError(
            f"{path}: unsupported model file version {' '.join(head)!r}"
        )
    variant = reader.next("variant")[0]
    d = int(reader.next("n_series")[0])
    n_cov = int(reader.next("n_covariates")[0])
    pi = reader.floats("pi", 2)
    x_min = reader.floats("x_min", n_cov)
    x_max = reader.floats("x_max", n_cov)
    e0 = _read_emission(reader, 0, d)
    e1 = _read_emission(reader, 1, d)
    f0 = _read_transition(reader, "f0", n_cov)
    f1 = _read_transition(reader, "f1", n_cov)
    reader.next("end")
    params = ModelParameters(emissions=(e0, e1), pi=pi, f0=f0, f1=f1)
    meta = {"variant": variant, "x_min": x_min, "x_max": x_max}
    return params, meta
