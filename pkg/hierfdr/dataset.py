"""Survival data model, augmented interaction design and CSV ingestion."""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from hierfdr.exceptions import DataError

logger = logging.getLogger(__name__)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SurvivalDataset:
    """Observed log-times, censoring indicators and both covariate blocks.

    Attributes:
        y: observed log-times, length n.
        delta: censoring indicators (1 = event observed), length n.
        x: n x d high-dimensional covariates.
        z: n x q low-dimensional covariates.
        x_names: optional labels for the columns of ``x``.
        z_names: optional labels for the columns of ``z``.
    """

    y: np.ndarray
    delta: np.ndarray
    x: np.ndarray
    z: np.ndarray
    x_names: Tuple[str, ...] = ()
    z_names: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        y = _frozen(np.ravel(self.y))
        delta = _frozen(np.ravel(self.delta))
        x = _frozen(np.atleast_2d(self.x))
        z = _frozen(np.atleast_2d(self.z))
        n = y.shape[0]
        if n < 2:
            raise DataError(f"Need at least 2 observations, got {n}.")
        for name, block in (("delta", delta), ("X", x), ("Z", z)):
            if block.shape[0] != n:
                raise DataError(
                    f"Dimension mismatch: {name} has {block.shape[0]} rows, "
                    f"y has {n}."
                )
        if x.shape[1] < 1 or z.shape[1] < 1:
            raise DataError("Both X and Z need at least one column.")
        if not np.all((delta == 0) | (delta == 1)):
            raise DataError("Censoring indicators must be exactly 0 or 1.")
        for name, block in (("y", y), ("X", x), ("Z", z)):
            if not np.all(np.isfinite(block)):
                raise DataError(f"{name} contains non-finite values.")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        x_names = tuple(self.x_names) or tuple(f"X{j + 1}" for j in range(x.shape[1]))
        z_names = tuple(self.z_names) or tuple(f"Z{k + 1}" for k in range(z.shape[1]))
        if len(x_names) != x.shape[1] or len(z_names) != z.shape[1]:
            raise DataError("Column labels do not match the covariate blocks.")
        object.__setattr__(self, "x_names", x_names)
        object.__setattr__(self, "z_names", z_names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def q(self) -> int:
        return self.z.shape[1]

    def take(self, rows: np.ndarray) -> "SurvivalDataset":
        """Return the dataset restricted (and reordered) to ``rows``."""
        return replace(
            self,
            y=self.y[rows],
            delta=self.delta[rows],
            x=self.x[rows],
            z=self.z[rows],
        )

    def select_features(self, columns: Sequence[int]) -> "SurvivalDataset":
        """Return the dataset keeping only the listed high-dimensional columns."""
        columns = list(columns)
        if not columns:
            raise DataError("Feature selection removed every X column.")
        return replace(
            self,
            x=self.x[:, columns],
            x_names=tuple(self.x_names[c] for c in columns),
        )


class EffectKind(str, Enum):
    """Role of a column of the augmented design."""

    MAIN = "main"
    ENV = "env"
    INTERACTION = "interaction"


@dataclass(frozen=True)
class EffectRole:
    """Decoded meaning of one augmented column; ``j`` and ``k`` are 0-based."""

    kind: EffectKind
    j: Optional[int] = None
    k: Optional[int] = None

    @classmethod
    def main(cls, j: int) -> "EffectRole":
        return cls(EffectKind.MAIN, j=j)

    @classmethod
    def env(cls, k: int) -> "EffectRole":
        return cls(EffectKind.ENV, k=k)

    @classmethod
    def interaction(cls, j: int, k: int) -> "EffectRole":
        return cls(EffectKind.INTERACTION, j=j, k=k)


@dataclass(frozen=True)
class IndexMap:
    """Bijection between column index l and effect roles.

    Layout (0-based): main effect j sits at ``j``, environment effect k at
    ``d + k`` and the interaction (j, k) at ``d + (j + 1) * q + k``, which is
    the 1-based ``d + jq + k`` layout shifted down by one.
    """

    d: int
    q: int

    @property
    def p(self) -> int:
        return self.d + (self.d + 1) * self.q

    def main_index(self, j: int) -> int:
        return j

    def env_index(self, k: int) -> int:
        return self.d + k

    def interaction_index(self, j: int, k: int) -> int:
        return self.d + (j + 1) * self.q + k

    def interaction_block(self, j: int) -> range:
        """Column indices of every interaction that belongs to main effect j."""
        start = self.d + (j + 1) * self.q
        return range(start, start + self.q)

    def encode(self, role: EffectRole) -> int:
        """Return the column index of an effect role.

        Raises:
            DataError: if the role is out of range.

        """
        if role.kind is EffectKind.MAIN and role.j is not None and 0 <= role.j < self.d:
            return self.main_index(role.j)
        if role.kind is EffectKind.ENV and role.k is not None and 0 <= role.k < self.q:
            return self.env_index(role.k)
        if (
            role.kind is EffectKind.INTERACTION
            and role.j is not None
            and role.k is not None
            and 0 <= role.j < self.d
            and 0 <= role.k < self.q
        ):
            return self.interaction_index(role.j, role.k)
        raise DataError(f"Role {role} is outside a d={self.d}, q={self.q} design.")

    def decode(self, index: int) -> EffectRole:
        """Return the effect role of a column index.

        Raises:
            DataError: if the index is outside [0, p).

        """
        if not 0 <= index < self.p:
            raise DataError(f"Column index {index} outside [0, {self.p}).")
        if index < self.d:
            return EffectRole.main(index)
        if index < self.d + self.q:
            return EffectRole.env(index - self.d)
        offset = index - self.d - self.q
        return EffectRole.interaction(offset // self.q, offset % self.q)

    def roles(self) -> Iterator[EffectRole]:
        for index in range(self.p):
            yield self.decode(index)

    @property
    def interaction_slice(self) -> slice:
        return slice(self.d + self.q, self.p)


@dataclass(frozen=True)
class AugmentedDesign:
    """The n x p matrix (X, Z, X (x) Z) with its index map."""

    phi: np.ndarray
    index_map: IndexMap
    centered: bool = False
    labels: Tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        phi = _frozen(self.phi)
        if phi.ndim != 2 or phi.shape[1] != self.index_map.p:
            raise DataError(
                f"Design has shape {phi.shape}, expected p={self.index_map.p}."
            )
        object.__setattr__(self, "phi", phi)

    @property
    def n(self) -> int:
        return self.phi.shape[0]

    @property
    def p(self) -> int:
        return self.phi.shape[1]

    def take(self, rows: np.ndarray) -> "AugmentedDesign":
        return replace(self, phi=self.phi[rows])

    def label(self, index: int) -> str:
        """Human readable name of a column, e.g. ``GENE1:AGE``."""
        if self.labels:
            return self.labels[index]
        role = self.index_map.decode(index)
        if role.kind is EffectKind.MAIN:
            return f"X{role.j + 1}"
        if role.kind is EffectKind.ENV:
            return f"Z{role.k + 1}"
        return f"X{role.j + 1}:Z{role.k + 1}"


class CovariateBlocks(Protocol):
    """Anything carrying named X and Z blocks."""

    @property
    def x(self) -> np.ndarray: ...

    @property
    def z(self) -> np.ndarray: ...

    @property
    def x_names(self) -> Tuple[str, ...]: ...

    @property
    def z_names(self) -> Tuple[str, ...]: ...


def build_augmented_design(data: CovariateBlocks) -> AugmentedDesign:
    """Materialize the augmented design Phi = (X, Z, X (x) Z).

    Args:
        data: the dataset (or simulated covariates) to expand.

    Raises:
        DataError: if X and Z disagree on the number of rows.

    Returns:
        The dense design with p = d + (d + 1) q columns.

    """
    x, z = data.x, data.z
    if x.shape[0] != z.shape[0]:
        raise DataError(
            f"Dimension mismatch: X has {x.shape[0]} rows, Z has {z.shape[0]}."
        )
    n, d = x.shape
    q = z.shape[1]
    interactions = (x[:, :, None] * z[:, None, :]).reshape(n, d * q)
    labels = (
        list(data.x_names)
        + list(data.z_names)
        + [f"{xn}:{zn}" for xn in data.x_names for zn in data.z_names]
    )
    return AugmentedDesign(
        phi=np.hstack([x, z, interactions]),
        index_map=IndexMap(d=d, q=q),
        labels=tuple(labels),
    )


@dataclass(frozen=True)
class SortedDataset:
    """A dataset sorted by observed time with its aligned design.

    Attributes:
        dataset: the sorted data.
        permutation: ``permutation[i]`` is the original row of sorted row i.
        design: augmented design rows in sorted order.
    """

    dataset: SurvivalDataset
    permutation: np.ndarray
    design: AugmentedDesign


def sort_by_time(data: SurvivalDataset, design: AugmentedDesign) -> SortedDataset:
    """Sort rows by y; at tied y, events precede censored rows.

    Remaining ties keep their original order, so the permutation is
    deterministic.

    Args:
        data: unsorted dataset.
        design: augmented design aligned with ``data``.

    Returns:
        The sorted dataset, permutation and permuted design.

    """
    n = data.n
    order = np.lexsort((np.arange(n), 1.0 - data.delta, data.y))
    order.setflags(write=False)
    return SortedDataset(
        dataset=data.take(order), permutation=order, design=design.take(order)
    )


def center_columns(
    design: AugmentedDesign, weights: np.ndarray, y: np.ndarray
) -> Tuple[AugmentedDesign, np.ndarray]:
    """Subtract weighted column means from the design and the response.

    Args:
        design: design to center.
        weights: non-negative row weights (not all zero).
        y: response aligned with the design rows.

    Raises:
        DataError: on negative, misaligned or all-zero weights.

    Returns:
        The centered design and the centered response.

    """
    w = np.asarray(weights, dtype=float)
    if w.shape != (design.n,) or np.any(w < 0):
        raise DataError("Centering weights must be non-negative with length n.")
    total = w.sum()
    if total <= 0:
        raise DataError("Centering weights are all zero.")
    col_means = w @ design.phi / total
    y = np.asarray(y, dtype=float)
    y_centered = y - (w @ y) / total
    centered = replace(design, phi=design.phi - col_means, centered=True)
    return centered, y_centered


class TimeScale(str, Enum):
    RAW = "raw"
    LOG = "log"


@dataclass(frozen=True)
class ColumnSchema:
    """Roles of the columns of an input CSV.

    Attributes:
        time: name of the time column.
        status: name of the event indicator column (1 event, 0 censored).
        z: names of the low-dimensional covariates.
        x: names of the high-dimensional covariates, or ``"*"`` for every
            column not claimed by another role.
        time_scale: ``raw`` times are log-transformed, ``log`` taken as is.
    """

    time: str
    status: str
    z: Tuple[str, ...]
    x: Union[Tuple[str, ...], str]
    time_scale: TimeScale = TimeScale.RAW

    @classmethod
    def from_dict(cls, obj: dict) -> "ColumnSchema":
        x = obj["x"]
        return cls(
            time=obj["time"],
            status=obj["status"],
            z=tuple(obj["z"]),
            x=x if isinstance(x, str) else tuple(x),
            time_scale=TimeScale(obj.get("time_scale", "raw")),
        )

    def resolve_x(self, header: Sequence[str]) -> List[str]:
        if isinstance(self.x, str):
            if self.x != "*":
                return [self.x]
            claimed = {self.time, self.status, *self.z}
            return [c for c in header if c not in claimed]
        return list(self.x)


def _numeric_block(frame: pd.DataFrame, columns: List[str]) -> np.ndarray:
    block = frame[columns]
    if block.isna().any().any():
        col = block.columns[block.isna().any()].tolist()[0]
        row = int(np.flatnonzero(block[col].isna().to_numpy())[0])
        raise DataError(f"Missing value in column {col!r}, row {row + 1}.")
    converted = block.apply(pd.to_numeric, errors="coerce")
    bad = converted.isna()
    if bad.any().any():
        col = converted.columns[bad.any()].tolist()[0]
        row = int(np.flatnonzero(bad[col].to_numpy())[0])
        raise DataError(
            f"Non-numeric value {block[col].iloc[row]!r} in column {col!r}, "
            f"row {row + 1}."
        )
    return converted.to_numpy(dtype=float)


def load_csv(
    path: Union[str, Path], schema: ColumnSchema, delimiter: str = ","
) -> SurvivalDataset:
    """Read a survival dataset from a delimited text file with a header row.

    Args:
        path: the CSV file.
        schema: column roles.
        delimiter: field separator.

    Raises:
        DataError: for missing columns, empty or non-numeric cells,
            non-positive raw times and status values other than 0/1.

    Returns:
        The dataset, with y = log(time) for raw-scale times.

    """
    frame = pd.read_csv(path, sep=delimiter, dtype=str, keep_default_na=True)
    header = list(frame.columns)
    x_cols = schema.resolve_x(header)
    wanted = [schema.time, schema.status, *schema.z, *x_cols]
    missing = [c for c in wanted if c not in header]
    if missing:
        logger.error(f"Columns missing from {path}: {missing}")
        raise DataError(f"Columns missing from {path}: {', '.join(missing)}")
    if not schema.z or not x_cols:
        raise DataError("The schema needs at least one Z and one X column.")

    time = _numeric_block(frame, [schema.time])[:, 0]
    status = _numeric_block(frame, [schema.status])[:, 0]
    bad_status = np.flatnonzero((status != 0) & (status != 1))
    if bad_status.size:
        row = int(bad_status[0])
        raise DataError(
            f"Status value {status[row]:g} in row {row + 1} is not 0 or 1."
        )
    if schema.time_scale is TimeScale.RAW:
        bad_time = np.flatnonzero(time <= 0)
        if bad_time.size:
            row = int(bad_time[0])
            raise DataError(
                f"Raw time {time[row]:g} in row {row + 1} is not positive; "
                "cannot take its logarithm."
            )
        y = np.log(time)
    else:
        y = time

    data = SurvivalDataset(
        y=y,
        delta=status,
        x=_numeric_block(frame, x_cols),
        z=_numeric_block(frame, list(schema.z)),
        x_names=tuple(x_cols),
        z_names=tuple(schema.z),
    )
    logger.info(
        f"Loaded {data.n} rows, d={data.d}, q={data.q}, "
        f"{int(data.delta.sum())} events from {path}"
    )
    return data
