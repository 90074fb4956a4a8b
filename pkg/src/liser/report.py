"""Comparison tables and labeled-fraction curves from completed run directories."""
from __future__ import annotations

import json
import logging
from pathlib import Path

from .checkpoint import write_atomic
from .train import ABLATION_CONFIGURATIONS, CONFIGURATIONS

log = logging.getLogger(__name__)

ROW_ORDER = CONFIGURATIONS + ABLATION_CONFIGURATIONS


def collect_runs(dirs) -> tuple[list[dict], list[Path]]:
    """Load ``report.json`` from each run dir (ablation dirs are expanded)."""
    runs, skipped = [], []
    for d in map(Path, dirs):
        if (d / "ablation.json").is_file():
            subs = sorted(p for p in d.iterdir() if p.is_dir())
            r, s = collect_runs(subs)
            runs += r
            skipped += s
            continue
        rep = d / "report.json"
        if not rep.is_file():
            log.warning("skipping incomplete run dir %s (no report.json)", d)
            skipped.append(d)
            continue
        data = json.loads(rep.read_text(encoding="utf-8"))
        data["run_dir"] = str(d)
        runs.append(data)
    return runs, skipped


def _key(run):
    cfg = run["configuration"]
    order = ROW_ORDER.index(cfg) if cfg in ROW_ORDER else len(ROW_ORDER)
    return order, -run.get("labeled_fraction", 1.0), run["run_dir"]


def comparison_rows(runs) -> list[dict]:
    rows = []
    for r in sorted(runs, key=_key):
        name = r["configuration"]
        frac = r.get("labeled_fraction", 1.0)
        if frac != 1.0:
            name = f"{name} @{frac:g}"
        rows.append({"configuration": name, "uar": r["mean_uar"], "war": r["mean_war"],
                     "labeled_fraction": frac, "run_dir": r["run_dir"]})
    return rows


def render_table(rows) -> str:
    width = max([len("Configuration")] + [len(r["configuration"]) for r in rows])
    lines = [f"{'Configuration':<{width}}  {'UAR':>6}  {'WAR':>6}", "-" * (width + 16)]
    for r in rows:
        lines.append(f"{r['configuration']:<{width}}  {r['uar']:6.3f}  {r['war']:6.3f}")
    return "\n".join(lines) + "\n"


def fraction_curve(runs):
    """Points (fraction, uar, war) of distillation runs at several labeled fractions,
    plus the full-data no-dstl baseline when present."""
    pts = {}
    for r in runs:
        frac = r.get("labeled_fraction", 1.0)
        pts.setdefault(r["configuration"], []).append((frac, r["mean_uar"], r["mean_war"]))
    baseline = None
    if len(pts.get("no-dstl", [])) == 1 and pts["no-dstl"][0][0] == 1.0:
        baseline = pts["no-dstl"][0][1:]
    pts = {k: sorted(v) for k, v in pts.items() if len({p[0] for p in v}) > 1}
    return pts, baseline


def write_fraction_svg(path, runs) -> bool:
    pts, baseline = fraction_curve(runs)
    if not pts:
        return False
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for name, p in pts.items():
        xs = [q[0] for q in p]
        ax.plot(xs, [q[1] for q in p], "o-", label=f"{name} UAR")
        ax.plot(xs, [q[2] for q in p], "s--", label=f"{name} WAR")
    if baseline is not None:
        ax.axhline(baseline[0], color="gray", linestyle=":", label="no-dstl UAR (all labels)")
    ax.set_xlabel("fraction of labeled data")
    ax.set_ylabel("recall")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.svg")
    fig.savefig(tmp, format="svg")
    plt.close(fig)
    tmp.replace(path)
    return True


def build_report(dirs, out_dir=None) -> dict:
    runs, skipped = collect_runs(dirs)
    if not runs:
        raise ValueError("no completed runs found")
    rows = comparison_rows(runs)
    table = render_table(rows)
    result = {"rows": rows, "skipped": [str(s) for s in skipped], "table": table, "svg": None}
    if out_dir is not None:
        out = Path(out_dir)
        write_atomic(out / "report.txt", table)
        write_atomic(out / "report.json", json.dumps({"rows": rows, "skipped": result["skipped"]}, indent=2))
        if write_fraction_svg(out / "labeled_fraction.svg", runs):
            result["svg"] = str(out / "labeled_fraction.svg")
    return result
