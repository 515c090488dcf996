"""Analysis tables and plain SVG renderings of them.

Tables are the artifacts; plots are drawn from the table files only, so
every mark on a plot can be traced to a row.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import ValidationError

BEESWARM_COLUMNS = ("record_id", "feature", "feature_value", "shap_value")
INTERACTION_COLUMNS = ("algorithm", "feature_i", "feature_j", "mean_abs_interaction",
                       "mean_signed_interaction")
DEPENDENCE_COLUMNS = ("series", "record_id", "raw_value", "normalized_value", "shap_value")


def fmt(v):
    return format(float(v), ".17g")


def to_jsonable(obj):
    """Replace NaN/inf with None and numpy scalars/arrays with Python values."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path, doc):
    Path(path).write_text(json.dumps(to_jsonable(doc), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def _write_csv(path, columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# -- beeswarm / attribution tables -------------------------------------------------

def beeswarm_rows(phi, X, ids, feature_names):
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if len(ids) != phi.shape[0] or X.shape[0] != phi.shape[0]:
        raise ValidationError(f"{len(ids)} record ids for {phi.shape[0]} attribution rows")
    if phi.size and phi.shape[1] != len(feature_names):
        raise ValidationError("feature_names length must match attribution columns")
    rows = []
    for i, rid in enumerate(ids):
        for j, name in enumerate(feature_names):
            rows.append((rid, name, X[i, j], phi[i, j]))
    rows.sort(key=lambda r: (r[1], r[3], r[0]))
    return rows


def emit_beeswarm_data(path, phi, X, ids, feature_names, known_ids=None):
    """One row per (record, feature), sorted by feature then attribution.

    ``X`` holds normalized feature values. With ``known_ids`` every id must
    appear there.
    """
    if known_ids is not None:
        unknown = sorted(set(ids) - set(known_ids))
        if unknown:
            raise ValidationError(f"attribution ids not in results: {unknown[:3]}")
    rows = beeswarm_rows(phi, X, ids, feature_names)
    _write_csv(path, BEESWARM_COLUMNS, [(r[0], r[1], fmt(r[2]), fmt(r[3])) for r in rows])
    return len(rows)


# -- interactions --------------------------------------------------------------------

def interaction_summary(matrices):
    """Mean absolute and mean signed matrices over instance matrices."""
    stack = np.array([np.asarray(m.Phi if hasattr(m, "Phi") else m) for m in matrices])
    if stack.size == 0:
        raise ValidationError("no interaction matrices")
    return np.abs(stack).mean(axis=0), stack.mean(axis=0)


def emit_interaction_matrix(path, per_algorithm, feature_names):
    """Upper triangle (diagonal included) of the mean interaction matrices.

    ``per_algorithm`` maps an algorithm label to its list of instance
    matrices; ``feature_names`` maps the same label to its feature names.
    """
    rows = []
    for algo in sorted(per_algorithm, key=str):
        mean_abs, mean_signed = interaction_summary(per_algorithm[algo])
        names = feature_names[algo]
        for i in range(len(names)):
            for j in range(i, len(names)):
                rows.append((algo, names[i], names[j], fmt(mean_abs[i, j]), fmt(mean_signed[i, j])))
    _write_csv(path, INTERACTION_COLUMNS, rows)
    return len(rows)


# -- dependence --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DependenceSeries:
    feature: str
    raw: np.ndarray
    normalized: np.ndarray
    shap: np.ndarray
    coefficients: np.ndarray  # c0 + c1 z + c2 z^2 ...
    residual: float  # sum of squared residuals
    rank_deficient: bool = False
    label: str = ""
    ids: tuple = ()

    def evaluate(self, z):
        z = np.asarray(z, dtype=np.float64)
        return sum(c * z ** k for k, c in enumerate(self.coefficients))

    def as_dict(self):
        return {"feature": self.feature, "label": self.label,
                "coefficients": list(map(float, self.coefficients)),
                "residual": self.residual, "rank_deficient": self.rank_deficient,
                "n_points": int(len(self.shap))}


def fit_dependence(raw, normalized, shap_values, feature, degree=2, label="", ids=()):
    """Least-squares polynomial in the normalized feature via the normal equations.

    When the x values cannot determine every coefficient the fit drops to
    the highest degree the data supports (constant when all x are equal) and is
    flagged rank-deficient; missing coefficients are reported as 0.
    """
    z = np.asarray(normalized, dtype=np.float64)
    y = np.asarray(shap_values, dtype=np.float64)
    if len(z) < 3 or len(z) != len(y):
        raise ValidationError("dependence fit needs at least 3 matching points")
    used = min(degree, len(np.unique(z)) - 1)
    V = np.vander(z, used + 1, increasing=True)
    while used > 0 and np.linalg.matrix_rank(V.T @ V) < used + 1:
        used -= 1
        V = V[:, :used + 1]
    coef = np.linalg.solve(V.T @ V, V.T @ y)
    full = np.zeros(degree + 1)
    full[:used + 1] = coef
    resid = float(math.fsum((y - V @ coef) ** 2))
    return DependenceSeries(feature, np.asarray(raw, dtype=np.float64), z, y, full, resid,
                            used < degree, label or feature, tuple(ids))


def emit_dependence(path, series):
    rows = []
    for s in series:
        ids = s.ids or [""] * len(s.shap)
        for rid, r, z, v in zip(ids, s.raw, s.normalized, s.shap):
            rows.append((s.label, rid, fmt(r), fmt(z), fmt(v)))
    _write_csv(path, DEPENDENCE_COLUMNS, rows)
    return len(rows)


# -- SVG rendering -----------------------------------------------------------------

_W, _H, _PAD = 640, 360, 48
_PALETTE = ("#3b6fb6", "#d2691e", "#2e8b57", "#8b3a8b", "#b22222", "#556b2f")


def _num(v):
    return f"{v:.2f}"


def _svg(body, title, width=_W, height=_H):
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n'
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>\n'
            f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">'
            f'{escape(title)}</text>\n')
    return head + "".join(body) + "</svg>\n"


def _range(values, pad=0.05):
    if len(values) == 0:
        return 0.0, 1.0
    lo, hi = float(np.min(values)), float(np.max(values))
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return lo - pad * span, hi + pad * span


def _axes(xlo, xhi, label):
    y0 = _H - _PAD
    return [f'<line x1="{_PAD}" y1="{y0}" x2="{_W - _PAD}" y2="{y0}" stroke="black"/>\n',
            f'<text x="{_PAD}" y="{y0 + 16}" font-size="10">{_num(xlo)}</text>\n',
            f'<text x="{_W - _PAD}" y="{y0 + 16}" font-size="10" text-anchor="end">'
            f'{_num(xhi)}</text>\n',
            f'<text x="{_W / 2:.1f}" y="{y0 + 32}" font-size="11" text-anchor="middle">'
            f'{escape(label)}</text>\n']


def render_beeswarm(table_path, svg_path, title="", x_range=None):
    """Attribution per feature row; colour encodes the normalized feature value."""
    rows = read_csv(table_path)
    feats = sorted({r["feature"] for r in rows})
    shap = np.array([float(r["shap_value"]) for r in rows])
    xlo, xhi = x_range or _range(shap)
    body = _axes(xlo, xhi, "attribution (lower = better transfer)")
    band = (_H - 2 * _PAD - 20) / max(len(feats), 1)
    counts = {}
    for k, f in enumerate(feats):
        y = 30 + band * (k + 0.5)
        body.append(f'<text x="4" y="{y:.2f}" font-size="10">{escape(f)}</text>\n')
    for r in rows:
        k = feats.index(r["feature"])
        slot = counts.get(k, 0)
        counts[k] = slot + 1
        jitter = ((slot * 7919) % 97) / 97.0 - 0.5
        y = 30 + band * (k + 0.5) + jitter * band * 0.6
        v = float(r["shap_value"])
        x = _PAD + (v - xlo) / (xhi - xlo) * (_W - 2 * _PAD)
        c = min(max(float(r["feature_value"]), 0.0), 1.0)
        color = f"rgb({int(255 * c)},40,{int(255 * (1 - c))})"
        body.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.5" fill="{color}"/>\n')
    Path(svg_path).write_text(_svg(body, title), encoding="utf-8")
    return len(rows)


def render_interactions(table_path, svg_path, title=""):
    rows = read_csv(table_path)
    body = []
    algos = sorted({r["algorithm"] for r in rows})
    vmax = max([abs(float(r["mean_signed_interaction"])) for r in rows] + [1e-300])
    x0 = _PAD
    for algo in algos:
        sub = [r for r in rows if r["algorithm"] == algo]
        names = []
        for r in sub:
            for n in (r["feature_i"], r["feature_j"]):
                if n not in names:
                    names.append(n)
        cell = 110 / max(len(names), 1)
        body.append(f'<text x="{x0}" y="44" font-size="10">{escape(algo)}</text>\n')
        for r in sub:
            i, j = names.index(r["feature_i"]), names.index(r["feature_j"])
            v = float(r["mean_signed_interaction"]) / vmax
            color = (f"rgb({int(255 * (1 - max(-v, 0)))},{int(255 * (1 - abs(v)))},"
                     f"{int(255 * (1 - max(v, 0)))})")
            for a, b in {(i, j), (j, i)}:
                body.append(f'<rect x="{x0 + b * cell:.2f}" y="{50 + a * cell:.2f}" '
                            f'width="{cell:.2f}" height="{cell:.2f}" fill="{color}"/>\n')
        x0 += 140
    Path(svg_path).write_text(_svg(body, title), encoding="utf-8")
    return len(rows)


def render_dependence(table_path, svg_path, fits=None, title=""):
    """Scatter of attribution against normalized value, one colour per series."""
    rows = read_csv(table_path)
    labels = sorted({r["series"] for r in rows})
    ys = np.array([float(r["shap_value"]) for r in rows])
    ylo, yhi = _range(ys)
    body = _axes(0.0, 1.0, "normalized feature value")
    plot_h = _H - 2 * _PAD - 10

    def px(z, v):
        return _PAD + z * (_W - 2 * _PAD), 30 + (yhi - v) / (yhi - ylo) * plot_h

    for r in rows:
        color = _PALETTE[labels.index(r["series"]) % len(_PALETTE)]
        x, y = px(float(r["normalized_value"]), float(r["shap_value"]))
        body.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2" fill="{color}"/>\n')
    for k, label in enumerate(labels):
        fit = (fits or {}).get(label)
        if fit is None:
            continue
        pts = []
        for t in range(41):
            z = t / 40
            v = sum(c * z ** p for p, c in enumerate(fit))
            x, y = px(z, v)
            pts.append(f"{x:.2f},{y:.2f}")
        color = _PALETTE[k % len(_PALETTE)]
        body.append(f'<polyline points="{" ".join(pts)}" fill="none" stroke="{color}"/>\n')
    Path(svg_path).write_text(_svg(body, title), encoding="utf-8")
    return len(rows)


def render_selection(selection_doc, validation_doc, svg_path):
    """Bars of predicted and mean actual gap for the best and worst picks."""
    vals = [("best predicted", selection_doc["best"]["predicted_gap"]),
            ("best actual", validation_doc["mean_actual_best"] if validation_doc else 0.0),
            ("worst predicted", selection_doc["worst"]["predicted_gap"]),
            ("worst actual", validation_doc["mean_actual_worst"] if validation_doc else 0.0)]
    vmax = max(abs(v) for _, v in vals) or 1.0
    mid = _H / 2
    body = [f'<line x1="{_PAD}" y1="{mid}" x2="{_W - _PAD}" y2="{mid}" stroke="black"/>\n']
    width = (_W - 2 * _PAD) / len(vals)
    for k, (name, v) in enumerate(vals):
        h = abs(v) / vmax * (mid - _PAD)
        y = mid - h if v >= 0 else mid
        x = _PAD + k * width + 10
        body.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{width - 20:.2f}" height="{h:.2f}" '
                    f'fill="{_PALETTE[k // 2]}"/>\n')
        body.append(f'<text x="{x + (width - 20) / 2:.2f}" y="{_H - 12}" font-size="10" '
                    f'text-anchor="middle">{escape(name)}: {_num(v)}</text>\n')
    Path(svg_path).write_text(_svg(body, "selected configurations: predicted vs actual gap"),
                              encoding="utf-8")


def render_plots(bundle_dir, x_range=None):
    """Render every table found in ``bundle_dir`` into ``bundle_dir/plots``."""
    bundle_dir = Path(bundle_dir)
    plots = bundle_dir / "plots"
    plots.mkdir(exist_ok=True)
    written = []
    for table in sorted(bundle_dir.glob("beeswarm_*.csv")):
        out = plots / (table.stem + ".svg")
        render_beeswarm(table, out, table.stem.replace("_", " "), x_range)
        written.append(out)
    if (bundle_dir / "interactions.csv").exists():
        out = plots / "interactions.svg"
        render_interactions(bundle_dir / "interactions.csv", out, "mean signed interactions")
        written.append(out)
    if (bundle_dir / "dependence.csv").exists():
        fits = {}
        if (bundle_dir / "dependence.json").exists():
            doc = json.loads((bundle_dir / "dependence.json").read_text())
            fits = {s["label"]: s["coefficients"] for s in doc["series"]}
        rows = read_csv(bundle_dir / "dependence.csv")
        for feature in sorted({r["series"].rsplit("/", 1)[-1] for r in rows}):
            sub = [r for r in rows if r["series"].endswith("/" + feature)]
            tmp = plots / f"_dep_{feature}.csv"
            _write_csv(tmp, DEPENDENCE_COLUMNS, [[r[c] for c in DEPENDENCE_COLUMNS] for r in sub])
            out = plots / f"dependence_{feature}.svg"
            render_dependence(tmp, out, fits, f"dependence: {feature}")
            tmp.unlink()
            written.append(out)
    if (bundle_dir / "selection.json").exists():
        sel = json.loads((bundle_dir / "selection.json").read_text())
        val = None
        if (bundle_dir / "validation.json").exists():
            val = json.loads((bundle_dir / "validation.json").read_text())
        out = plots / "selection.svg"
        render_selection(sel, val, out)
        written.append(out)
    return written


# -- bundle manifest ---------------------------------------------------------------

EXCLUDED_FROM_HASH = (".timing.jsonl", "bundle_manifest.json")


def file_hashes(bundle_dir):
    bundle_dir = Path(bundle_dir)
    out = {}
    for p in sorted(bundle_dir.rglob("*")):
        if p.is_file() and not p.name.endswith(EXCLUDED_FROM_HASH):
            out[p.relative_to(bundle_dir).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def bundle_hash(bundle_dir):
    h = hashlib.sha256()
    for name, digest in file_hashes(bundle_dir).items():
        h.update(f"{name}\0{digest}\n".encode())
    return h.hexdigest()


def write_bundle_manifest(bundle_dir, settings):
    hashes = file_hashes(bundle_dir)
    doc = {"settings": settings, "files": hashes, "bundle_hash": bundle_hash(bundle_dir)}
    write_json(Path(bundle_dir) / "bundle_manifest.json", doc)
    return doc
