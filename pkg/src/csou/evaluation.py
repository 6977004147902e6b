"""Detection-style scoring of reconstructed intensity grids.

A reconstruction is reduced to point detections (thresholded local maxima,
confidence = peak intensity), detections are greedily matched to ground-truth
targets within a radius, and non-interpolated average precision is pooled
over the whole dataset.  The headline number averages AP over a sweep of
match radii; it is non-decreasing in the radius by construction.
"""

import json
from dataclasses import dataclass

import numpy as np

from .scene import cell_to_position

INTENSITY_THRESHOLD = 50.0
DELTAS_DEFAULT = (0.05, 0.10, 0.15, 0.20, 0.25)
DELTAS_EXTENDED = tuple(round(0.05 * i, 2) for i in range(1, 11))


@dataclass
class Detection:
    x: float
    y: float
    confidence: float  # peak intensity of the grid cell


def extract_targets(grid, c, threshold=INTENSITY_THRESHOLD):
    """Detections from one reconstructed grid.

    A cell fires when its value exceeds ``threshold`` and is a local maximum
    over the 8-neighborhood.  Plateau ties resolve to the earliest cell in
    raster order (strict comparison against already-visited neighbors).
    Positions are the continuous centers of the winning cells.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("grid must be 2-D")
    n1, n2 = g.shape
    padded = np.full((n1 + 2, n2 + 2), -np.inf)
    padded[1:-1, 1:-1] = g
    out = []
    rows, cols = np.nonzero(g > threshold)
    for row, col in zip(rows.tolist(), cols.tolist()):
        v = padded[row + 1, col + 1]
        ok = True
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di == 0 and dj == 0:
                    continue
                nb = padded[row + 1 + di, col + 1 + dj]
                earlier = di < 0 or (di == 0 and dj < 0)
                if nb > v or (earlier and nb == v):
                    ok = False
                    break
            if not ok:
                break
        if ok:
            xv, yv = cell_to_position(row, col, c)
            out.append(Detection(x=xv, y=yv, confidence=float(v)))
    return out


def match_detections(detections, truth_x, truth_y, delta):
    """Greedy matching: detections in confidence order each claim the nearest
    still-unmatched truth target within ``delta``.

    Returns (confidences, tp_flags) aligned arrays plus the truth count.
    """
    tx = np.asarray(truth_x, dtype=np.float64)
    ty = np.asarray(truth_y, dtype=np.float64)
    order = sorted(range(len(detections)), key=lambda i: -detections[i].confidence)
    taken = np.zeros(tx.size, dtype=bool)
    conf = np.empty(len(detections))
    tp = np.zeros(len(detections), dtype=bool)
    for pos, i in enumerate(order):
        d = detections[i]
        conf[pos] = d.confidence
        if tx.size == 0:
            continue
        dist = np.hypot(tx - d.x, ty - d.y)
        dist[taken] = np.inf
        j = int(np.argmin(dist))
        if dist[j] <= delta:
            taken[j] = True
            tp[pos] = True
    return conf, tp, int(tx.size)


def average_precision(conf, tp, n_truth):
    """Non-interpolated AP; detections with equal confidence enter together.

    With no truth targets the score is 1.0 for an empty detection list and
    0.0 otherwise.
    """
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.asarray(tp, dtype=bool)
    if n_truth == 0:
        return 1.0 if conf.size == 0 else 0.0
    if conf.size == 0:
        return 0.0
    order = np.argsort(-conf, kind="stable")
    conf = conf[order]
    tp = tp[order]
    ap = 0.0
    seen_tp = 0
    seen = 0
    prev_recall = 0.0
    i = 0
    while i < conf.size:
        j = i
        while j < conf.size and conf[j] == conf[i]:
            j += 1
        seen_tp += int(tp[i:j].sum())
        seen += j - i
        recall = seen_tp / n_truth
        precision = seen_tp / seen
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return ap


@dataclass
class EvalReport:
    method: str
    deltas: tuple
    ap: list  # per delta
    tp: list
    fp: list
    fn: list
    cso_map: float
    curves: list  # per delta: (recall array, precision array)


def _pr_curve(conf, tp, n_truth):
    if conf.size == 0 or n_truth == 0:
        return np.zeros(0), np.zeros(0)
    order = np.argsort(-conf, kind="stable")
    cum_tp = np.cumsum(tp[order])
    ranks = np.arange(1, conf.size + 1)
    return cum_tp / n_truth, cum_tp / ranks


def evaluate_detections(per_sample, deltas=DELTAS_DEFAULT, method="method"):
    """Score a dataset. ``per_sample`` is a list of
    (detections, truth_x, truth_y) triples; matching is per sample, AP is
    pooled over all samples at each radius.
    """
    deltas = tuple(deltas)
    if any(b <= a for a, b in zip(deltas, deltas[1:])):
        raise ValueError("deltas must be strictly increasing")
    aps, tps, fps, fns, curves = [], [], [], [], []
    for delta in deltas:
        confs, flags = [], []
        n_truth = 0
        for detections, tx, ty in per_sample:
            c0, t0, k = match_detections(detections, tx, ty, delta)
            confs.append(c0)
            flags.append(t0)
            n_truth += k
        conf = np.concatenate(confs) if confs else np.zeros(0)
        tp = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
        aps.append(average_precision(conf, tp, n_truth))
        n_tp = int(tp.sum())
        tps.append(n_tp)
        fps.append(int(tp.size - n_tp))
        fns.append(n_truth - n_tp)
        curves.append(_pr_curve(conf, tp, n_truth))
    for a, b in zip(aps, aps[1:]):
        assert b >= a - 1e-12, "AP must not decrease as the match radius grows"
    return EvalReport(
        method=method,
        deltas=deltas,
        ap=aps,
        tp=tps,
        fp=fps,
        fn=fns,
        cso_map=float(np.mean(aps)),
        curves=curves,
    )


def evaluate_grids(grids, scenes, c, deltas=DELTAS_DEFAULT, method="method"):
    """Convenience wrapper: extract detections from grids, then score them."""
    per_sample = [
        (extract_targets(g, c), s.x, s.y) for g, s in zip(grids, scenes)
    ]
    return evaluate_detections(per_sample, deltas=deltas, method=method)


def write_report_csv(reports, path):
    with open(path, "w") as fh:
        fh.write("method,delta,ap,tp,fp,fn,cso_map\n")
        for r in reports:
            for i, d in enumerate(r.deltas):
                fh.write(
                    "%s,%.2f,%.6f,%d,%d,%d,%.6f\n"
                    % (r.method, d, r.ap[i], r.tp[i], r.fp[i], r.fn[i], r.cso_map)
                )


def write_report_json(reports, path):
    payload = [
        {
            "method": r.method,
            "deltas": list(r.deltas),
            "ap": [float(a) for a in r.ap],
            "tp": r.tp,
            "fp": r.fp,
            "fn": r.fn,
            "cso_map": r.cso_map,
        }
        for r in reports
    ]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
               "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def write_pr_svg(report: EvalReport, path, width=640, height=480):
    """Precision-recall polylines, one per match radius, on fixed [0,1] axes."""
    pad = 50

    def sx(r):
        return pad + r * (width - 2 * pad)

    def sy(p):
        return height - pad - p * (height - 2 * pad)

    parts = [
        '<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d">' % (width, height),
        '<rect width="100%" height="100%" fill="white"/>',
        '<line x1="%g" y1="%g" x2="%g" y2="%g" stroke="black"/>' % (sx(0), sy(0), sx(1), sy(0)),
        '<line x1="%g" y1="%g" x2="%g" y2="%g" stroke="black"/>' % (sx(0), sy(0), sx(0), sy(1)),
        '<text x="%g" y="%g" font-size="12">recall</text>' % (sx(0.5) - 18, height - pad / 3),
        '<text x="%g" y="%g" font-size="12" transform="rotate(-90 %g %g)">precision</text>'
        % (pad / 3, sy(0.5), pad / 3, sy(0.5)),
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append('<text x="%g" y="%g" font-size="10">%.2f</text>' % (sx(tick) - 8, sy(0) + 14, tick))
        parts.append('<text x="%g" y="%g" font-size="10">%.2f</text>' % (sx(0) - 30, sy(tick) + 4, tick))
    for i, (d, (rec, prec)) in enumerate(zip(report.deltas, report.curves)):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        if rec.size:
            pts = " ".join("%g,%g" % (sx(r), sy(p)) for r, p in zip(rec, prec))
            parts.append('<polyline points="%s" fill="none" stroke="%s" stroke-width="1.5"/>' % (pts, color))
        parts.append(
            '<text x="%g" y="%g" font-size="11" fill="%s">delta=%.2f (AP %.3f)</text>'
            % (width - pad - 130, pad + 14 * (i + 1), color, d, report.ap[i])
        )
    parts.append(
        '<text x="%g" y="%g" font-size="12">%s: mAP %.4f</text>'
        % (pad, pad / 2 + 4, report.method, report.cso_map)
    )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
