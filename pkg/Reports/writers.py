import json
import logging
import os
import sys

import numpy as np
import pandas as pd
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from PGEE.errors import DataError, SpecificationError  # noqa: E402

FORMATS = ("table", "csv", "json")
DEFAULT_PLOT_TOP_K = 10


def _to_builtin(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def _prepare_dir(filename):
    directory = os.path.dirname(os.path.abspath(filename))
    if not os.path.isdir(directory):
        raise DataError(f"output directory does not exist: {directory}")


def save_to_file(content, filename):
    """Saves ``content`` as indented JSON.

    Args:
        content (dict | list): JSON-serializable document; numpy scalars and
            arrays are converted.
        filename (str): Destination path.
    """
    _prepare_dir(filename)
    with open(filename, "w", encoding="utf-8") as output_file:
        json.dump(content, output_file, indent=4, default=_to_builtin)
    logging.info("saved %s", filename)


def rows_to_frame(rows):
    return pd.DataFrame(list(rows))


def to_json_text(content):
    return json.dumps(content, indent=4, default=_to_builtin)


def to_csv_text(rows):
    return rows_to_frame(rows).to_csv(index=False, lineterminator="\n")


def to_table_text(rows):
    frame = rows_to_frame(rows)
    if frame.empty:
        return "(no rows)"
    return frame.to_string(index=False, float_format=lambda v: f"{v:.6g}", na_rep="-")


def emit(rows, fmt="table", output=None, document=None):
    """Writes ``rows`` as a table, CSV or JSON to ``output`` (stdout when None).

    ``document`` replaces the rows for JSON output when the JSON form carries
    more than the tabular one.
    """
    if fmt not in FORMATS:
        raise SpecificationError(f"unknown format '{fmt}', expected one of {', '.join(FORMATS)}")
    if fmt == "json":
        content = rows if document is None else document
        if output is not None:
            save_to_file(content, output)
            return
        text = to_json_text(content)
    elif fmt == "csv":
        text = to_csv_text(rows)
    else:
        text = to_table_text(rows)
    if not text.endswith("\n"):
        text += "\n"
    if output is None:
        sys.stdout.write(text)
        return
    _prepare_dir(output)
    with open(output, "w", encoding="utf-8", newline="") as file:
        file.write(text)
    logging.info("saved %s", output)


def plot_path(path_result, filename, k=DEFAULT_PLOT_TOP_K):
    """Draws the ``k`` largest standardized coefficient paths against log(lambda) as SVG."""
    _prepare_dir(filename)
    names = path_result.covariate_names or tuple(f"x{j + 1}" for j in range(path_result.coefficients.shape[0]))
    fig, ax = plt.subplots(figsize=(8, 5))
    try:
        for j in path_result.top_k(k):
            ax.plot(np.log(path_result.lambdas), path_result.coefficients[j], label=names[j])
        ax.axhline(0.0, color="grey", linewidth=0.5)
        ax.set_xlabel("log(lambda)")
        ax.set_ylabel("standardized coefficient")
        ax.set_title(f"{path_result.family} path, alpha = {path_result.alpha:g}")
        ax.invert_xaxis()
        ax.legend(loc="best", fontsize="small")
        fig.savefig(filename, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    logging.info("path plot saved to %s", filename)
