"""Figure rendering from record files.

Each plot kind consumes the record schema its analyze counterpart emits.
Inputs are sorted before drawing so figures do not depend on file order,
and everything renders off-screen.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .errors import MalformedRecords
from .records import read_records


def _require_rows(rows, path):
    if not rows:
        raise MalformedRecords(f"{path} holds no data rows")
    return rows


def plot_saturation(record_paths, out_path) -> Path:
    """Budget-use curves over iterations, one line per labeled run."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for path in sorted(str(p) for p in record_paths):
        header, rows = read_records(path, "saturation")
        _require_rows(rows, path)
        by_iter = defaultdict(list)
        for row in rows:
            by_iter[row["iteration"]].append(row["saturation"])
        xs = sorted(by_iter)
        ys = [sum(by_iter[i]) / len(by_iter[i]) for i in xs]
        ax.plot(xs, ys, label=header.get("label", Path(path).stem))
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean budget saturation")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


def plot_attention_shift(record_paths, out_path) -> Path:
    """Attention displacement (JS divergence) against judged similarity."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for path in sorted(str(p) for p in record_paths):
        header, rows = read_records(path, "shift")
        _require_rows(rows, path)
        pts = [(r["js_nats"], r["avg_sim"]) for r in rows if r.get("avg_sim") is not None]
        label = header.get("label", Path(path).stem)
        if pts:
            xs, ys = zip(*sorted(pts))
            ax.scatter(xs, ys, label=label, alpha=0.8)
        else:
            xs = sorted(r["js_nats"] for r in rows)
            ax.scatter(xs, [0.0] * len(xs), label=f"{label} (no similarity joined)", alpha=0.4)
    ax.set_xlabel("JS divergence between pre/post maps (nats)")
    ax.set_ylabel("average judged similarity")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


def plot_correlation(record_paths, out_path) -> Path:
    """Per-layer correlation curves; hollow markers where not significant."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for path in sorted(str(p) for p in record_paths):
        header, rows = read_records(path, "correlation")
        rows = sorted(_require_rows(rows, path), key=lambda r: r["layer"])
        layers = [r["layer"] for r in rows]
        label = header.get("extractor", Path(path).stem)
        for coeff, key, sig_key in (
            ("pearson", "pearson_r", "pearson_significant"),
            ("spearman", "spearman_rho", "spearman_significant"),
        ):
            vals = [r[key] for r in rows]
            line, = ax.plot(layers, vals, label=f"{label} {coeff}")
            insig = [(l, v) for l, v, r in zip(layers, vals, rows) if not r[sig_key]]
            if insig:
                xs, ys = zip(*insig)
                ax.scatter(xs, ys, marker="x", color=line.get_color(), zorder=3)
    ax.axhline(0.0, color="gray", linewidth=0.6)
    ax.set_xlabel("decoder layer")
    ax.set_ylabel("correlation with loss response")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


REGION_ORDER = ("high", "mid", "low")


def plot_redistribution(record_paths, out_path) -> Path:
    """Grouped bars: attention change per region for each placement arm."""
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8
    paths = sorted(str(p) for p in record_paths)
    settings = []
    data = {}
    for path in paths:
        _, rows = read_records(path, "redistribution")
        for row in _require_rows(rows, path):
            data[(row["setting"], row["region"])] = row["delta"]
            if row["setting"] not in settings:
                settings.append(row["setting"])
    settings.sort()
    per = width / max(len(settings), 1)
    for si, setting in enumerate(settings):
        xs = [i - width / 2 + per * (si + 0.5) for i in range(len(REGION_ORDER))]
        ys = [data.get((setting, region), 0.0) for region in REGION_ORDER]
        ax.bar(xs, ys, width=per * 0.9, label=setting)
    ax.axhline(0.0, color="gray", linewidth=0.6)
    ax.set_xticks(range(len(REGION_ORDER)))
    ax.set_xticklabels([f"{r} attention" for r in REGION_ORDER])
    ax.set_ylabel("mean attention change")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


PLOT_KINDS = {
    "saturation": plot_saturation,
    "shift": plot_attention_shift,
    "correlation": plot_correlation,
    "redistribution": plot_redistribution,
}
