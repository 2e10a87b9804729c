"""File formats: dataset CSV, trace CSV, key-value reports, config files.

All floats are serialised with `repr`, the shortest decimal that round-
trips exactly; files use UTF-8 and LF line endings.
"""

import numpy as np

from .exceptions import ConfigurationError
from .models import Dataset, Subject

__all__ = [
    "load_dataset",
    "write_dataset_csv",
    "write_trace_csv",
    "read_trace_csv",
    "write_report",
    "parse_config_file",
]

_DATASET_HEADER = "subject,time,y"


def _fmt(x):
    return repr(float(x))


def write_dataset_csv(path, dataset):
    """Write `subject,time,y` rows (times exactly as stored in the dataset)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_DATASET_HEADER + "\n")
        for subj in dataset.subjects:
            for t, y in zip(subj.times, subj.y):
                fh.write(f"{subj.subject_id},{_fmt(t)},{_fmt(y)}\n")


def load_dataset(path, scale=True):
    """Parse a dataset CSV; times are divided by the global maximum time.

    Rows may arrive in any order; they are sorted by (subject, time).
    Duplicate (subject, time) pairs and malformed rows are errors (the
    latter reported with their line number).
    """
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != _DATASET_HEADER:
            raise ConfigurationError(
                f"{path}: expected header {_DATASET_HEADER!r}, got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ConfigurationError(f"{path}:{lineno}: expected 3 fields")
            subject, t_str, y_str = parts
            if not subject:
                raise ConfigurationError(f"{path}:{lineno}: empty subject id")
            try:
                t, y = float(t_str), float(y_str)
            except ValueError:
                raise ConfigurationError(f"{path}:{lineno}: non-numeric field")
            if not (np.isfinite(t) and np.isfinite(y)):
                raise ConfigurationError(f"{path}:{lineno}: non-finite value")
            rows.append((subject, t, y))
    if not rows:
        raise ConfigurationError(f"{path}: no data rows")
    rows.sort(key=lambda r: (r[0], r[1]))
    seen = set()
    for subject, t, _ in rows:
        if (subject, t) in seen:
            raise ConfigurationError(
                f"{path}: duplicate (subject, time) pair ({subject!r}, {t!r})")
        seen.add((subject, t))
    subjects = []
    current, times, ys = None, [], []
    for subject, t, y in rows:
        if subject != current:
            if current is not None:
                subjects.append(Subject(current, np.array(times), np.array(ys)))
            current, times, ys = subject, [], []
        times.append(t)
        ys.append(y)
    subjects.append(Subject(current, np.array(times), np.array(ys)))
    ds = Dataset(subjects=subjects, scaled=False)
    if not scale:
        return ds
    from .models import scale_times

    return scale_times(ds)


# ---------------------------------------------------------------------------
# Trace files
# ---------------------------------------------------------------------------


def write_trace_csv(path, trace):
    """One row per iteration: iteration, parameters (natural scale),
    log-density columns, acceptance indicators per update block."""
    accept_names = sorted(trace.accepts)
    cols = (["iteration"] + list(trace.param_names) + ["log_lik", "log_prior"]
            + [f"accept_{k}" for k in accept_names])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(trace.iterations):
            vals = [str(i)]
            vals += [_fmt(v) for v in trace.theta[i]]
            vals += [_fmt(trace.log_lik[i]), _fmt(trace.log_prior[i])]
            vals += [_fmt(trace.accepts[k][i]) for k in accept_names]
            fh.write(",".join(vals) + "\n")


def read_trace_csv(path):
    """Read a trace CSV into (param_names, theta, log columns, accepts)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if header[0] != "iteration":
        raise ConfigurationError(f"{path}: not a trace file")
    try:
        i_ll = header.index("log_lik")
    except ValueError:
        raise ConfigurationError(f"{path}: missing log_lik column")
    param_names = header[1:i_ll]
    theta = data[:, 1:i_ll]
    accepts = {}
    for j, name in enumerate(header):
        if name.startswith("accept_"):
            accepts[name[len("accept_"):]] = data[:, j]
    return param_names, theta, data[:, i_ll], accepts


# ---------------------------------------------------------------------------
# Reports and config files
# ---------------------------------------------------------------------------


def write_report(path, mapping):
    """Flat `key = value` report; nested mappings use dotted keys."""
    lines = []

    def emit(prefix, obj):
        if isinstance(obj, dict):
            for k, v in obj.items():
                emit(f"{prefix}.{k}" if prefix else str(k), v)
        else:
            if isinstance(obj, float):
                obj = _fmt(obj)
            lines.append(f"{prefix} = {obj}")

    emit("", mapping)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_config_file(path):
    """Flat `key = value` configuration with `#` comments."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out
