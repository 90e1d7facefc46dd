"""
Data model and ingestion for multi-chain posterior output.

A chain is stored as its pointwise log-likelihood matrix (draws x observations)
plus, optionally, its parameter draws. Files are plain CSV, one per chain:

    <chain_id>.loglik.csv   rows = post-warmup draws, columns = observations
    <chain_id>.params.csv   same row count; optional leading `iter` column

All containers are immutable after construction (arrays are copied and marked
read-only), so they can be handed to worker threads freely.
"""

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils.config import parallel_map
from utils.errors import DimensionMismatch, DomainError, InputMissing, ParseError, TooFewDraws

logger = logging.getLogger(__name__)

MODULE = "draws-core"
LOGLIK_SUFFIX = ".loglik.csv"
PARAMS_SUFFIX = ".params.csv"
INDEX_HEADERS = ("iter",)


def _frozen(array, ndim: int, name: str) -> np.ndarray:
    out = np.array(array, dtype=np.float64, copy=True)
    if out.ndim == 1 and ndim == 2:
        out = out.reshape(-1, 1)
    if out.ndim != ndim:
        raise DimensionMismatch(f"{name} must be {ndim}-dimensional, got shape {out.shape}", module=MODULE)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ChainDraws:
    """
    Draws of one chain.

    Attributes:
        log_lik: [S x n] matrix of log p(y_i | theta_s)
        chain_id: identifier of the chain
        params: optional [S x P] matrix of parameter draws
        param_names: column names of params (length P)
    """

    log_lik: np.ndarray
    chain_id: str = "chain"
    params: Optional[np.ndarray] = None
    param_names: Tuple[str, ...] = ()

    def __post_init__(self):
        log_lik = _frozen(self.log_lik, 2, "log_lik")
        object.__setattr__(self, "log_lik", log_lik)
        if log_lik.shape[0] < 2:
            raise TooFewDraws(
                f"chain {self.chain_id!r} has {log_lik.shape[0]} draws; at least 2 are required",
                module=MODULE, chain_id=self.chain_id, n_draws=int(log_lik.shape[0]),
            )
        if not np.all(np.isfinite(log_lik)):
            s, i = np.argwhere(~np.isfinite(log_lik))[0]
            raise ParseError(
                f"chain {self.chain_id!r} has a non-finite log-likelihood at draw {s}, observation {i}",
                module=MODULE, chain_id=self.chain_id, row=int(s), column=int(i),
            )
        if self.params is not None:
            params = _frozen(self.params, 2, "params")
            if params.shape[0] != log_lik.shape[0]:
                raise DimensionMismatch(
                    f"chain {self.chain_id!r}: params has {params.shape[0]} rows, log_lik has {log_lik.shape[0]}",
                    module=MODULE, chain_id=self.chain_id,
                )
            names = tuple(self.param_names) or tuple(f"theta_{j + 1}" for j in range(params.shape[1]))
            if len(names) != params.shape[1]:
                raise DimensionMismatch(
                    f"chain {self.chain_id!r}: {len(names)} parameter names for {params.shape[1]} columns",
                    module=MODULE, chain_id=self.chain_id,
                )
            object.__setattr__(self, "params", params)
            object.__setattr__(self, "param_names", names)
        else:
            object.__setattr__(self, "param_names", ())

    @property
    def n_draws(self) -> int:
        return int(self.log_lik.shape[0])

    @property
    def n_obs(self) -> int:
        return int(self.log_lik.shape[1])

    def param(self, name: str) -> np.ndarray:
        """Return the draws of one named parameter column."""
        if self.params is None or name not in self.param_names:
            raise DimensionMismatch(
                f"chain {self.chain_id!r} has no parameter column {name!r}",
                module=MODULE, chain_id=self.chain_id, parameter=name,
            )
        return self.params[:, self.param_names.index(name)]

    def take(self, rows, chain_id: Optional[str] = None) -> "ChainDraws":
        """Return a new chain holding only the given draw rows."""
        rows = np.asarray(rows, dtype=np.intp)
        return ChainDraws(
            log_lik=self.log_lik[rows],
            chain_id=chain_id or self.chain_id,
            params=None if self.params is None else self.params[rows],
            param_names=self.param_names,
        )


@dataclass(frozen=True)
class DrawSet:
    """
    An ordered collection of chains that share the same observations.

    Attributes:
        chains: the chains, in input order
        sources: file each chain was read from (empty string when built in memory)
        provenance: free-form strings describing where the draws came from
    """

    chains: Tuple[ChainDraws, ...]
    sources: Tuple[str, ...] = ()
    provenance: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        chains = tuple(self.chains)
        if not chains:
            raise DimensionMismatch("a draw set needs at least one chain", module=MODULE)
        n_obs = chains[0].n_obs
        for k, chain in enumerate(chains):
            if chain.n_obs != n_obs:
                raise DimensionMismatch(
                    f"chain {k} ({chain.chain_id!r}) has {chain.n_obs} observations, expected {n_obs}",
                    module=MODULE, chain_index=k, expected=n_obs, found=chain.n_obs,
                )
        sources = tuple(self.sources) or ("",) * len(chains)
        if len(sources) != len(chains):
            raise DimensionMismatch("one source per chain is required", module=MODULE)
        object.__setattr__(self, "chains", chains)
        object.__setattr__(self, "sources", sources)
        object.__setattr__(self, "provenance", dict(self.provenance))

    @property
    def n_obs(self) -> int:
        return self.chains[0].n_obs

    @property
    def n_chains(self) -> int:
        return len(self.chains)

    @property
    def chain_ids(self) -> List[str]:
        return [chain.chain_id for chain in self.chains]

    @property
    def draw_counts(self) -> np.ndarray:
        return np.array([chain.n_draws for chain in self.chains], dtype=np.int64)

    def manifest(self) -> Dict:
        """
        Describe the draw set for the run manifest.

        Returns:
            Dictionary with n_obs, per-chain files and draw counts, provenance
        """
        return {
            "n_obs": self.n_obs,
            "chains": [
                {"chain_id": chain.chain_id, "file": source, "n_draws": chain.n_draws}
                for chain, source in zip(self.chains, self.sources)
            ],
            "provenance": dict(self.provenance),
        }


@dataclass(frozen=True)
class EstimandSeries:
    """Evaluations h(theta_ks) of a scalar function, one vector per chain."""

    values: Tuple[np.ndarray, ...]

    def __post_init__(self):
        values = tuple(_frozen(v, 1, "estimand") for v in self.values)
        for k, v in enumerate(values):
            if not np.all(np.isfinite(v)):
                raise ParseError(f"estimand for chain {k} has non-finite entries", module=MODULE, chain_index=k)
        object.__setattr__(self, "values", values)

    def check_against(self, ds: DrawSet) -> None:
        """Raise DimensionMismatch unless there is one series per chain of matching length."""
        if len(self.values) != ds.n_chains:
            raise DimensionMismatch(
                f"{len(self.values)} estimand series for {ds.n_chains} chains", module=MODULE,
            )
        for k, (v, chain) in enumerate(zip(self.values, ds.chains)):
            if v.shape[0] != chain.n_draws:
                raise DimensionMismatch(
                    f"estimand for chain {k} has {v.shape[0]} values, chain has {chain.n_draws} draws",
                    module=MODULE, chain_index=k,
                )


def estimand_from_params(ds: DrawSet, name: str, fn=None) -> EstimandSeries:
    """
    Build an estimand series from one parameter column.

    Args:
        ds: draw set whose chains carry params
        name: parameter column to read
        fn: optional vectorized transform (e.g. lambda mu: mu > 0)

    Returns:
        EstimandSeries with fn(param) per chain
    """
    values = []
    for chain in ds.chains:
        column = chain.param(name)
        values.append(np.asarray(fn(column) if fn is not None else column, dtype=np.float64))
    return EstimandSeries(tuple(values))


# --------------------------------------------------------------------------
# CSV parsing
# --------------------------------------------------------------------------

def _is_number(text) -> bool:
    try:
        float(text)
    except (TypeError, ValueError):
        return False
    return True


def _read_table(path, skip_rows: int = 0) -> Tuple[Optional[List[str]], np.ndarray, int]:
    """
    Read a rectangular numeric CSV table.

    Returns:
        (header or None, float matrix, file line number of the first data row)
    """
    path = Path(path)
    if not path.is_file():
        raise InputMissing(f"file not found: {path}", module=MODULE, path=str(path))
    try:
        frame = pd.read_csv(
            path, header=None, dtype=str, keep_default_na=False,
            skiprows=skip_rows, skipinitialspace=True,
        )
    except pd.errors.EmptyDataError:
        raise TooFewDraws(f"{path} holds no rows", module=MODULE, path=str(path))
    except pd.errors.ParserError as exc:
        match = re.search(r"line (\d+)", str(exc))
        row = int(match.group(1)) + skip_rows if match else None
        raise ParseError(f"ragged row in {path}: {exc}", module=MODULE, path=str(path), row=row)

    first_line = skip_rows + 1
    header = None
    # a header needs a non-empty, non-numeric cell; an empty cell is a data error
    if len(frame) and any(isinstance(cell, str) and cell.strip() and not _is_number(cell) for cell in frame.iloc[0]):
        header = [str(cell).strip() for cell in frame.iloc[0]]
        frame = frame.iloc[1:]
        first_line += 1
        logger.debug("Detected header row in %s: %s", path, header[:5])

    missing = frame.isna().to_numpy()
    if missing.any():
        r, c = np.argwhere(missing)[0]
        raise ParseError(
            f"ragged row in {path} at line {first_line + r}: expected {frame.shape[1]} cells",
            module=MODULE, path=str(path), row=int(first_line + r), column=int(c + 1),
        )

    cells = frame.apply(lambda column: column.str.strip())
    try:
        values = cells.to_numpy(dtype=str).astype(np.float64)
    except ValueError:
        coerced = cells.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
        r, c = np.argwhere(np.isnan(coerced))[0]
        raise ParseError(
            f"non-numeric cell {cells.iat[r, c]!r} in {path} at line {first_line + r}, column {c + 1}",
            module=MODULE, path=str(path), row=int(first_line + r), column=int(c + 1), cell=cells.iat[r, c],
        )
    bad = ~np.isfinite(values)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ParseError(
            f"non-finite cell {cells.iat[r, c]!r} in {path} at line {first_line + r}, column {c + 1}",
            module=MODULE, path=str(path), row=int(first_line + r), column=int(c + 1), cell=cells.iat[r, c],
        )
    return header, values, first_line


def load_chain_csv(path, layout: str = "draws", skip_rows: int = 0, chain_id: Optional[str] = None) -> ChainDraws:
    """
    Load one chain's pointwise log-likelihood matrix from CSV.

    Args:
        path: CSV file; one row per draw (layout="draws") or per observation
              (layout="observations", transposed on load)
        layout: "draws" or "observations"
        skip_rows: leading lines to drop (manual warmup trimming)
        chain_id: identifier; defaults to the file name without suffix

    Returns:
        ChainDraws with log_lik in row-major draw order and no params
    """
    if layout not in ("draws", "observations"):
        raise ParseError(f"unknown layout {layout!r}", module=MODULE, layout=layout)
    _, values, _ = _read_table(path, skip_rows)
    if layout == "observations":
        values = values.T
    if values.shape[0] < 2:
        raise TooFewDraws(
            f"{path} holds {values.shape[0]} draws; at least 2 are required",
            module=MODULE, path=str(path), n_draws=int(values.shape[0]),
        )
    return ChainDraws(log_lik=values, chain_id=chain_id or _chain_id_from_path(path))


def load_param_csv(path, skip_rows: int = 0) -> Tuple[Tuple[str, ...], np.ndarray]:
    """
    Load a parameter-draw CSV.

    A leading column headed `iter` is a draw index and is dropped.

    Returns:
        (parameter names, [S x P] matrix)
    """
    header, values, _ = _read_table(path, skip_rows)
    if header is None:
        header = [f"theta_{j + 1}" for j in range(values.shape[1])]
    if header and header[0].lower() in INDEX_HEADERS:
        header, values = header[1:], values[:, 1:]
    return tuple(header), values


def load_matrix_csv(path, skip_rows: int = 0) -> np.ndarray:
    """Load a numeric CSV (header optional) as a float matrix."""
    _, values, _ = _read_table(path, skip_rows)
    return values


def _chain_id_from_path(path) -> str:
    name = Path(path).name
    for suffix in (LOGLIK_SUFFIX, ".csv"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def _load_one(job) -> Tuple[ChainDraws, str]:
    loglik_path, params_path, layout, skip_rows = job
    chain = load_chain_csv(loglik_path, layout=layout, skip_rows=skip_rows)
    if params_path is not None and params_path.is_file():
        names, params = load_param_csv(params_path, skip_rows=skip_rows)
        chain = ChainDraws(chain.log_lik, chain.chain_id, params, names)
    return chain, str(loglik_path)


def load_chain_dir(directory, layout: str = "draws", skip_rows: int = 0, threads: int = 1) -> DrawSet:
    """
    Load every chain in a directory.

    Chains are the `*.loglik.csv` files (or, when there are none, every `*.csv`
    that is not a params file), in sorted file-name order. A sibling
    `<chain_id>.params.csv` is attached when present.

    Returns:
        Assembled DrawSet
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise InputMissing(f"input directory not found: {directory}", module=MODULE, path=str(directory))
    files = sorted(directory.glob(f"*{LOGLIK_SUFFIX}"))
    if not files:
        files = sorted(p for p in directory.glob("*.csv") if not p.name.endswith(PARAMS_SUFFIX))
    if not files:
        raise InputMissing(f"no chain CSV files in {directory}", module=MODULE, path=str(directory))
    jobs = [
        (p, directory / f"{_chain_id_from_path(p)}{PARAMS_SUFFIX}", layout, skip_rows)
        for p in files
    ]
    loaded = parallel_map(_load_one, jobs, threads)
    provenance = {}
    scenario = directory / "scenario.json"
    if scenario.is_file():
        provenance["scenario"] = scenario.read_text(encoding="utf-8").strip()
    return assemble([c for c, _ in loaded], sources=[s for _, s in loaded], provenance=provenance)


def write_chain_csv(chain: ChainDraws, directory) -> Tuple[Path, Optional[Path]]:
    """
    Write a chain as `<chain_id>.loglik.csv` (+ `<chain_id>.params.csv`).

    Floats are written with 17 significant digits so a reload is bit-identical.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    loglik_path = directory / f"{chain.chain_id}{LOGLIK_SUFFIX}"
    columns = [f"y{i + 1}" for i in range(chain.n_obs)]
    pd.DataFrame(chain.log_lik, columns=columns).to_csv(loglik_path, index=False, float_format="%.17g")
    params_path = None
    if chain.params is not None:
        params_path = directory / f"{chain.chain_id}{PARAMS_SUFFIX}"
        frame = pd.DataFrame(chain.params, columns=list(chain.param_names))
        frame.insert(0, "iter", np.arange(1, chain.n_draws + 1))
        frame.to_csv(params_path, index=False, float_format="%.17g")
    return loglik_path, params_path


# --------------------------------------------------------------------------
# Assembly and splitting
# --------------------------------------------------------------------------

def assemble(chains: Sequence[ChainDraws], sources: Optional[Sequence[str]] = None,
             provenance: Optional[Dict[str, str]] = None) -> DrawSet:
    """
    Validate a list of chains into a DrawSet, preserving order.

    Raises:
        DimensionMismatch: empty list or chains disagreeing on n_obs
    """
    return DrawSet(tuple(chains), tuple(sources or ()), dict(provenance or {}))


def write_manifest(ds: DrawSet, path) -> Path:
    """Write the draw set's manifest as JSON next to the chain files."""
    path = Path(path)
    path.write_text(json.dumps(ds.manifest(), indent=2) + "\n", encoding="utf-8")
    return path


def select_half(chain: ChainDraws, which: str) -> ChainDraws:
    """
    Return the first floor(S/2) draws or the remaining ones.

    Raises:
        TooFewDraws: when a half would hold fewer than 2 draws (S < 4)
    """
    if which not in ("first", "second"):
        raise DomainError(f"which must be 'first' or 'second', got {which!r}", module=MODULE, which=which)
    half = chain.n_draws // 2
    if half < 2:
        raise TooFewDraws(
            f"chain {chain.chain_id!r} has {chain.n_draws} draws; splitting needs at least 4",
            module=MODULE, chain_id=chain.chain_id, n_draws=chain.n_draws,
        )
    rows = np.arange(half) if which == "first" else np.arange(half, chain.n_draws)
    return chain.take(rows)


def concat_chains(chains: Sequence[ChainDraws], chain_id: str) -> ChainDraws:
    """
    Row-concatenate chains into one.

    Params are kept only when every chain carries the same parameter columns.
    """
    log_lik = np.vstack([c.log_lik for c in chains])
    names = chains[0].param_names
    keep_params = all(c.params is not None and c.param_names == names for c in chains)
    params = np.vstack([c.params for c in chains]) if keep_params else None
    return ChainDraws(log_lik, chain_id, params, names if keep_params else ())
