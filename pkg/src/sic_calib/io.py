"""CSV formats and the key-value calibration report.

Data files use the shortest decimal that round-trips the float (``repr``), so
writing what was read reproduces the file byte for byte. Reports show numbers
with 6 significant digits.
"""
from __future__ import annotations

import csv
import hashlib
import io
import re
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import CameraIntrinsics, CorrespondenceSet, PoseParams, RadialDistortion
from .pipeline import CalibrationResult, PipelineRun, RadialCurve, STAGES

CORRESPONDENCE_COLUMNS = ["x_d", "y_d", "X", "Y"]
IDEAL_COLUMNS = ["x", "y"]
CURVE_COLUMNS = ["r_d", "r_u"]
DISPARITY_COLUMNS = ["x_d", "y_d", "d_tot"]
UNDISTORTED_COLUMNS = ["x_d", "y_d", "x_u", "y_u", "extrapolated"]
REPORT_HEADER = "# sic-calib report v1"


class FileFormatError(ValueError):
    """Malformed input file."""


def format_float(x) -> str:
    return repr(float(x))


def _write_rows(path, header: list[str], columns: list[np.ndarray]) -> None:
    cols = [np.asarray(c).ravel() for c in columns]
    lines = [",".join(header)]
    for row in zip(*cols):
        lines.append(",".join(v if isinstance(v, str) else format_float(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _read_table(path, required: list[str], optional: list[str] = ()) -> dict[str, np.ndarray]:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise FileFormatError(f"{path}: empty file")
    reader = csv.reader(lines)
    header = [h.strip() for h in next(reader)]
    missing = [c for c in required if c not in header]
    if missing:
        raise FileFormatError(f"{path}: missing column(s) {', '.join(missing)}")
    rows = list(reader)
    wanted = list(required) + [c for c in optional if c in header]
    idx = [header.index(c) for c in wanted]
    data = np.empty((len(rows), len(wanted)))
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise FileFormatError(f"{path}: row {i + 2} has {len(row)} fields, expected {len(header)}")
        try:
            data[i] = [float(row[j]) for j in idx]
        except ValueError as exc:
            raise FileFormatError(f"{path}: row {i + 2}: {exc}") from None
    if not np.all(np.isfinite(data)):
        raise FileFormatError(f"{path}: non-finite values")
    return {c: data[:, k] for k, c in enumerate(wanted)}


def write_correspondences(path, cs: CorrespondenceSet, include_ideal: bool = True) -> None:
    header = list(CORRESPONDENCE_COLUMNS)
    cols = [cs.pd[:, 0], cs.pd[:, 1], cs.pw[:, 0], cs.pw[:, 1]]
    if include_ideal and cs.ideal is not None:
        header += IDEAL_COLUMNS
        cols += [cs.ideal[:, 0], cs.ideal[:, 1]]
    _write_rows(path, header, cols)


def read_correspondences(path) -> CorrespondenceSet:
    t = _read_table(path, CORRESPONDENCE_COLUMNS, IDEAL_COLUMNS)
    if len(t["x_d"]) < 4:
        raise FileFormatError(f"{path}: {len(t['x_d'])} rows, need at least 4")
    pd = np.column_stack([t["x_d"], t["y_d"]])
    pw = np.column_stack([t["X"], t["Y"]])
    ideal = np.column_stack([t["x"], t["y"]]) if "x" in t and "y" in t else None
    return CorrespondenceSet(pw, pd, ideal)


def read_points(path) -> np.ndarray:
    """Image points from any CSV with ``x_d`` and ``y_d`` columns."""
    t = _read_table(path, ["x_d", "y_d"])
    return np.column_stack([t["x_d"], t["y_d"]])


def write_curve(path, curve: RadialCurve) -> None:
    """Curve samples; the centre is stored in a leading comment line."""
    buf = [f"# cod={format_float(curve.cod[0])},{format_float(curve.cod[1])}", ",".join(CURVE_COLUMNS)]
    buf += [f"{format_float(a)},{format_float(b)}" for a, b in zip(curve.r_d, curve.r_u)]
    Path(path).write_text("\n".join(buf) + "\n", encoding="utf-8", newline="\n")


def read_curve(path, cod=None) -> RadialCurve:
    """Read a curve file. ``cod`` overrides the centre stored in the file."""
    text = Path(path).read_text(encoding="utf-8")
    stored = None
    m = re.match(r"#\s*cod\s*=\s*([^,\s]+)\s*,\s*([^,\s]+)", text)
    if m:
        stored = (float(m.group(1)), float(m.group(2)))
    t = _read_table(path, CURVE_COLUMNS)
    centre = cod if cod is not None else stored if stored is not None else (0.0, 0.0)
    r_d, r_u = t["r_d"], t["r_u"]
    if np.any(np.diff(r_d) <= 0):
        return RadialCurve.from_samples(r_d, r_u, centre)
    return RadialCurve(r_d, r_u, centre)


def write_disparity(path, pd, d_tot) -> None:
    pd = np.asarray(pd, dtype=float)
    _write_rows(path, DISPARITY_COLUMNS, [pd[:, 0], pd[:, 1], d_tot])


def write_undistorted(path, pd, pu, flags) -> None:
    pd, pu = np.asarray(pd, dtype=float), np.asarray(pu, dtype=float)
    _write_rows(path, UNDISTORTED_COLUMNS,
                [pd[:, 0], pd[:, 1], pu[:, 0], pu[:, 1], np.where(flags, "1", "0")])


def write_table(path, rows: list[dict], columns: list[str]) -> None:
    """Delimited table of dicts; floats in shortest round-trip form."""
    out = io.StringIO()
    out.write(",".join(columns) + "\n")
    for r in rows:
        vals = []
        for c in columns:
            v = r.get(c, "")
            vals.append(format_float(v) if isinstance(v, (float, np.floating)) else str(v))
        out.write(",".join(vals) + "\n")
    Path(path).write_text(out.getvalue(), encoding="utf-8", newline="\n")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- report

Report = dict[str, dict[str, object]]

_INT = re.compile(r"^-?\d+$")


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    s = str(v)
    if "\n" in s:
        raise ValueError("report values must be single-line")
    return s


def _parse_value(s: str):
    if s in ("true", "false"):
        return s == "true"
    if _INT.match(s):
        return int(s)
    try:
        return float(s)
    except ValueError:
        return s


def serialize_report(report: Report) -> str:
    lines = [REPORT_HEADER]
    for section, items in report.items():
        lines.append(f"[{section}]")
        for k, v in items.items():
            lines.append(f"{k} = {format_value(v)}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> Report:
    report: Report = {}
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            report[current] = {}
            continue
        if current is None or " = " not in line:
            raise FileFormatError(f"report line {n}: {line!r}")
        key, value = line.split(" = ", 1)
        report[current][key] = _parse_value(value)
    return report


def result_section(res: CalibrationResult) -> dict[str, object]:
    A, pose = res.intrinsics, res.pose
    out: dict[str, object] = {
        "u0": A.u0, "v0": A.v0, "fx": A.fx, "fy": A.fy,
        "theta_x_deg": pose.angles_deg[0], "theta_y_deg": pose.angles_deg[1],
        "theta_z_deg": pose.angles_deg[2],
        "tx_mm": pose.t[0], "ty_mm": pose.t[1], "tz_mm": pose.t[2],
    }
    if isinstance(res.distortion, RadialDistortion):
        out.update(distortion="polynomial", k1=res.distortion.k1, k2=res.distortion.k2, k3=res.distortion.k3)
    elif isinstance(res.distortion, RadialCurve):
        out.update(distortion="curve", curve_samples=len(res.distortion),
                   curve_monotone=res.distortion.is_monotone)
    out.update(rpe_mean=res.rpe_mean, rpe_std=res.rpe_std,
               warnings="; ".join(res.warnings) if res.warnings else "none")
    for key in ("scale", "fr", "monotonicity_initial", "monotonicity", "decreasing_fraction",
                "subset_size", "iterations", "termination"):
        if key in res.extras:
            out[key] = res.extras[key]
    return out


def build_report(run: PipelineRun | None, meta: dict, config: dict, error: Exception | None = None,
                 curve_path: str | None = None) -> Report:
    report: Report = {"meta": {"tool_version": __version__, **meta}, "config": dict(config)}
    status = {"status": "ok" if error is None else "failed"}
    if error is not None:
        status["failed_stage"] = getattr(error, "stage", None) or "unknown"
        status["error"] = f"{type(error).__name__}: {str(error).splitlines()[0] if str(error) else ''}"
    report["status"] = status
    if run is not None and run.step1 is not None:
        s = run.step1
        report["Step1.cod"] = {"Sx": s.Sx, "Sy": s.Sy, "AR": s.AR, "u0": s.u0, "v0": s.v0,
                               "uc": s.uc, "vc": s.vc, "cc": s.cc, "low_density": s.low_density,
                               "converged": s.converged}
    if run is not None:
        for stage in STAGES:
            if stage in run.stages:
                sec = result_section(run.stages[stage])
                if curve_path and stage == run.final.stage and sec.get("distortion") == "curve":
                    sec["curve_path"] = curve_path
                report[stage] = sec
    return report


def truth_report(intrinsics: CameraIntrinsics, pose: PoseParams | list[PoseParams],
                 distortion: RadialDistortion, meta: dict) -> Report:
    """Ground-truth sidecar for generated data."""
    report: Report = {"meta": {"tool_version": __version__, **meta},
                      "truth": {"u0": intrinsics.u0, "v0": intrinsics.v0, "fx": intrinsics.fx,
                                "fy": intrinsics.fy, "k1": distortion.k1, "k2": distortion.k2,
                                "k3": distortion.k3}}
    poses = pose if isinstance(pose, list) else [pose]
    for i, p in enumerate(poses, 1):
        name = "pose" if len(poses) == 1 else f"pose{i:02d}"
        report[name] = {"theta_x_deg": p.angles_deg[0], "theta_y_deg": p.angles_deg[1],
                        "theta_z_deg": p.angles_deg[2], "tx_mm": p.t[0], "ty_mm": p.t[1],
                        "tz_mm": p.t[2]}
    return report


def write_report(path, report: Report) -> None:
    Path(path).write_text(serialize_report(report), encoding="utf-8", newline="\n")


def read_report(path) -> Report:
    return parse_report(Path(path).read_text(encoding="utf-8"))
