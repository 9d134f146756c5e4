"""
Utility functions for reading and writing matrices, vectors, trees and
result records.

Tables are comma-separated UTF-8 with a mandatory header row and a row-id
column. Lines starting with '#' carry provenance and are ignored on load.
Reals are written with 17 significant digits so that save/load is exact.
"""
import json
import logging

import numpy as np
import pandas as pd

from models.results import SimulationRecord
from models.tables import AbundanceTable, Kernel, KernelProvenance, ResponseVector, SquareMatrix
from utils.config_utils import PSD_TOL
from utils.errors import IoError, NotPSDError, ParseError, SchemaError

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

TABLE_KINDS = ("abundance", "distance", "kernel", "response")
FLOAT_FORMAT = "%.17g"


def _read_comments(path):
    """Return '#' lines as a dict of 'key: value' pairs"""
    meta = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.startswith("#"):
                continue
            body = line[1:].strip()
            if ":" in body:
                key, value = body.split(":", 1)
                meta[key.strip()] = value.strip()
    return meta


def _read_grid(path):
    """Header, row ids and a float matrix from a CSV file"""
    try:
        frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False,
                            comment="#", skip_blank_lines=True, encoding="utf-8")
    except FileNotFoundError as e:
        raise IoError(f"File not found: {path}") from e
    except pd.errors.ParserError as e:
        logger.error(f"Error parsing {path}: {e}")
        raise ParseError(f"Ragged rows in {path}: {e}") from e
    except pd.errors.EmptyDataError as e:
        raise ParseError(f"No data in {path}") from e

    if frame.shape[0] < 2 or frame.shape[1] < 2:
        raise ParseError(f"{path} needs a header row, an id column and at least one data cell")

    header = [str(v).strip() for v in frame.iloc[0, 1:].tolist()]
    body = frame.iloc[1:, :]
    row_ids = [str(v).strip() for v in body.iloc[:, 0].tolist()]

    cells = body.iloc[:, 1:]
    missing = cells.isna()
    if missing.to_numpy().any():
        row, col = np.argwhere(missing.to_numpy())[0]
        raise ParseError(f"Ragged row in {path}: too few fields", row=int(row) + 1, col=int(col) + 1)

    # float() is correctly rounded, which keeps 17-digit round trips exact
    raw = cells.to_numpy(dtype=str)
    values = np.empty(raw.shape, dtype=float)
    for (row, col), cell in np.ndenumerate(raw):
        try:
            values[row, col] = float(cell.strip())
        except ValueError:
            values[row, col] = np.nan
        if not np.isfinite(values[row, col]):
            raise ParseError(f"Non-numeric or non-finite cell '{cell}' in {path}", row=row + 1, col=col + 1)
    return header, row_ids, values


def load_table(path, kind):
    """
    Load a CSV artifact.

    Args:
        path (str): File path
        kind (str): One of abundance, distance, kernel, response

    Returns:
        AbundanceTable, SquareMatrix, Kernel or ResponseVector
    """
    if kind not in TABLE_KINDS:
        raise SchemaError(f"Unknown table kind '{kind}' (choose from {', '.join(TABLE_KINDS)})")
    header, row_ids, values = _read_grid(path)

    if kind == "abundance":
        return AbundanceTable(row_ids, header, values)

    if kind == "response":
        if values.shape[1] != 1:
            raise SchemaError(f"Response file {path} must have exactly one value column, found {values.shape[1]}")
        return ResponseVector(row_ids, values[:, 0])

    if header != row_ids:
        raise SchemaError(f"Row ids and column ids of square matrix {path} differ")
    if kind == "distance":
        return SquareMatrix(row_ids, values)

    provenance = _read_comments(path).get("provenance", KernelProvenance.CUSTOM.value)
    try:
        provenance = KernelProvenance(provenance)
    except ValueError:
        logger.warning(f"Unknown kernel provenance '{provenance}' in {path}; using custom")
        provenance = KernelProvenance.CUSTOM
    kernel = Kernel(row_ids, values, provenance)
    if not kernel.is_psd(PSD_TOL):
        logger.error(f"Kernel {path} has eigenvalue {kernel.eigenvalues()[0]:.3e}")
        raise NotPSDError(f"Kernel {path} is not positive semi-definite (smallest eigenvalue {kernel.eigenvalues()[0]:.6g})")
    return kernel


def write_frame(path, row_ids, col_ids, values, index_label="id", comments=None):
    """Write a labeled matrix with '#'-prefixed comment lines"""
    frame = pd.DataFrame(np.asarray(values, dtype=float), index=list(row_ids), columns=list(col_ids))
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            for key, value in (comments or {}).items():
                f.write(f"# {key}: {value}\n")
            frame.to_csv(f, float_format=FLOAT_FORMAT, index_label=index_label, lineterminator="\n")
    except OSError as e:
        logger.error(f"Error writing {path}: {e}")
        raise IoError(f"Failed to write {path}: {e}") from e


def save_table(obj, path, comments=None):
    """
    Save an AbundanceTable, SquareMatrix/Kernel, ResponseVector or EdgeMatrix.

    Kernels record their provenance as a comment line so that it survives
    a reload.
    """
    comments = dict(comments or {})
    if isinstance(obj, Kernel):
        comments.setdefault("provenance", obj.provenance.value)
    if isinstance(obj, SquareMatrix):
        write_frame(path, obj.ids, obj.ids, obj.values, "id", comments)
    elif isinstance(obj, AbundanceTable):
        write_frame(path, obj.sample_ids, obj.taxon_ids, obj.values, "sample_id", comments)
    elif isinstance(obj, ResponseVector):
        write_frame(path, obj.sample_ids, ["y"], obj.values[:, None], "sample_id", comments)
    elif hasattr(obj, "edge_ids"):
        write_frame(path, obj.sample_ids, obj.edge_ids, obj.values, "sample_id", comments)
    else:
        raise SchemaError(f"Cannot save object of type {type(obj).__name__} as a table")


def center_columns(X):
    """Subtract each column's mean; ids are unchanged"""
    values = X.values - X.values.mean(axis=0, keepdims=True)
    return X.with_values(values)


def align(table, response):
    """Reorder a ResponseVector to the table's sample order"""
    position = {s: i for i, s in enumerate(response.sample_ids)}
    missing = [s for s in table.sample_ids if s not in position]
    if missing or len(response.sample_ids) != table.n:
        raise SchemaError(f"Response ids do not match table samples (missing: {', '.join(missing[:5])})")
    return ResponseVector(table.sample_ids, [response.values[position[s]] for s in table.sample_ids])


def _write_lines(path, payloads):
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for payload in payloads:
                f.write(json.dumps(payload, sort_keys=True, allow_nan=False))
                f.write("\n")
    except (OSError, ValueError) as e:
        logger.error(f"Error writing records to {path}: {e}")
        raise IoError(f"Failed to write records to {path}: {e}") from e


def save_records(records, path, config=None):
    """
    One JSON object per line per SimulationRecord.

    When config is given it is written first as a {"config": ...} line,
    which load_records skips.
    """
    header = [] if config is None else [{'config': config}]
    _write_lines(path, header + [record.to_dict() for record in records])


def load_records(path):
    """Inverse of save_records"""
    records = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    data = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ParseError(f"Invalid record in {path}: {e}", row=number) from e
                if set(data) == {'config'}:
                    continue
                records.append(SimulationRecord.from_dict(data))
    except OSError as e:
        raise IoError(f"Failed to read records from {path}: {e}") from e
    return records


def save_summary(frame, path, comments=None):
    """Write a summary DataFrame with '#'-prefixed comment lines"""
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            for key, value in (comments or {}).items():
                f.write(f"# {key}: {value}\n")
            frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    except OSError as e:
        logger.error(f"Error writing {path}: {e}")
        raise IoError(f"Failed to write {path}: {e}") from e


def save_fit(fit, path, taxon_ids=None, sample_ids=None, config=None):
    """Write a FitResult as a single JSON line, with the resolved configuration"""
    payload = fit.to_dict(taxon_ids=taxon_ids, sample_ids=sample_ids)
    payload['config'] = config or {}
    _write_lines(path, [payload])


def save_cv(cv, path, sample_ids=None, config=None, fit=None, taxon_ids=None):
    """Write a CvResult (and optionally the refit at the selected lambda) as one JSON line"""
    payload = cv.to_dict(sample_ids=sample_ids)
    payload['config'] = config or {}
    if fit is not None:
        payload['fit'] = fit.to_dict(taxon_ids=taxon_ids, sample_ids=None)
    _write_lines(path, [payload])


def load_newick(path):
    """Read a Newick file into a PhyloTree"""
    from services.phylo_service import parse_newick

    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise IoError(f"Failed to read tree {path}: {e}") from e
    return parse_newick(text)
