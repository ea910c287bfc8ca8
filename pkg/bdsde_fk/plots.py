"""
SVG line plots of run reports.

Each report written by a run may carry a "plots" list of series
descriptions; emit_plots draws one SVG per entry.
"""

import json
import logging
import os

logger = logging.getLogger("bdsde_fk")


def line_plot(name, x, series, xlabel="", ylabel="", log=False, title=None):
    """Description of one line plot, stored in a report and drawn by emit_plots."""
    return {
        "name": name,
        "x": [float(v) for v in x],
        "series": {label: [float(v) for v in values] for label, values in series.items()},
        "xlabel": xlabel,
        "ylabel": ylabel,
        "log": bool(log),
        "title": title or name,
    }


def _draw(plot, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "bdsde_fk"
    fig = plt.figure(figsize=(8, 5))
    for label, values in sorted(plot["series"].items()):
        values = [abs(v) for v in values] if plot["log"] else values
        plt.plot(plot["x"][:len(values)], values, marker="o", markersize=3, label=label)
    if plot["log"]:
        plt.yscale("log")
    plt.xlabel(plot["xlabel"])
    plt.ylabel(plot["ylabel"])
    plt.title(plot["title"])
    if len(plot["series"]) > 1:
        plt.legend()
    plt.grid(True, alpha=0.3)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_plots(manifest, out_dir=None):
    """
    Draw the plots described by the reports listed in a manifest.

    manifest may be a RunManifest or the dict read back from manifest.json.
    Returns the written SVG paths. A listed output that does not exist raises
    FileNotFoundError.
    """
    if not isinstance(manifest, dict):
        manifest = manifest.to_dict()
    out_dir = out_dir or manifest["out_dir"]
    written = []
    for name in manifest["outputs"]:
        path = os.path.join(manifest["out_dir"], name)
        if not os.path.isfile(path):
            raise FileNotFoundError(f"Run output {path} is missing")
        if not name.endswith(".json") or name == "manifest.json":
            continue
        with open(path, encoding="utf-8") as f:
            report = json.load(f)
        for plot in report.get("plots", []) if isinstance(report, dict) else []:
            svg = os.path.join(out_dir, f"{plot['name']}.svg")
            _draw(plot, svg)
            written.append(svg)
            logger.debug(f"Wrote {svg}")
    return written
