"""Plot data and figures for simulation runs.

Each panel is written as a CSV with a header row in SI units, and rendered
to PNG with the Agg backend next to it.
"""
from __future__ import annotations

import csv
import io
import math

import numpy as np

PANELS = ("com", "velocity", "grf", "step_lengths")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def panel_tables(result) -> dict:
    """Columns for the four panels: CoM height, forward speed, GRF with its tube, step lengths."""
    log = result.log
    col = log.column
    t = col("t")
    v_des = float(result.config.v_des)
    tables = {
        "com": (("t", "step", "phase", "z", "z_ref"),
                zip(t, col("step"), col("phase"), col("z"), col("z_ref"))),
        "velocity": (("t", "step", "xd", "v_des"),
                     zip(t, col("step"), col("xd"), np.full(t.size, v_des))),
        "grf": (("t", "step", "grf_0", "grf_1", "grf_total", "grf_ref_0", "grf_ref_1",
                 "tube_lo_0", "tube_up_0", "tube_lo_1", "tube_up_1"),
                zip(t, col("step"), col("grf_0"), col("grf_1"), col("grf_0") + col("grf_1"),
                    col("grf_ref_0"), col("grf_ref_1"), col("tube_lo_0"), col("tube_up_0"),
                    col("tube_lo_1"), col("tube_up_1"))),
        "step_lengths": (("step", "kind", "commanded", "realized"),
                         ((s["step"], s["kind"], s["commanded_step"], s["realized_step"]) for s in log.steps)),
    }
    return {name: _csv(h, ([_plain(v) for v in r] for r in rows)) for name, (h, rows) in tables.items()}


def _plain(v):
    if isinstance(v, np.generic):
        return v.item()
    return v


def _read(text: str) -> dict:
    rows = list(csv.reader(io.StringIO(text)))
    head, body = rows[0], rows[1:]
    out = {}
    for j, name in enumerate(head):
        vals = [r[j] for r in body]
        try:
            out[name] = np.array([float(v) if v != "" else math.nan for v in vals])
        except ValueError:
            out[name] = np.array(vals)
    return out


def render_figures(tables: dict, out_dir, title: str = "") -> list:
    """Render the panel CSVs to PNG files; returns the written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    specs = {
        "com": ("CoM height (m)", [("z", "CoM"), ("z_ref", "reference")]),
        "velocity": ("forward speed (m/s)", [("xd", "xd"), ("v_des", "desired")]),
        "grf": ("vertical GRF (N)", [("grf_0", "leg 0"), ("grf_1", "leg 1")]),
    }
    for name, (ylabel, lines) in specs.items():
        d = _read(tables[name])
        fig, ax = plt.subplots(figsize=(7, 3.2))
        for key, label in lines:
            ax.plot(d["t"], d[key], lw=1.0, label=label)
        if name == "grf":
            for j in (0, 1):
                ax.fill_between(d["t"], d[f"tube_lo_{j}"], d[f"tube_up_{j}"], alpha=0.15, lw=0)
        ax.set_xlabel("time (s)")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        p = out_dir / f"{name}.png"
        fig.savefig(p, dpi=110, metadata={"Software": None})
        plt.close(fig)
        paths.append(p)
    d = _read(tables["step_lengths"])
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.plot(d["step"], d["commanded"], "o-", label="commanded")
    ax.plot(d["step"], d["realized"], "s--", label="realized")
    ax.set_xlabel("step")
    ax.set_ylabel("step length (m)")
    ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    p = out_dir / "step_lengths.png"
    fig.savefig(p, dpi=110, metadata={"Software": None})
    plt.close(fig)
    paths.append(p)
    return paths


def toy_table(run) -> str:
    rows = zip(run.t, run.z_com, run.z_des, run.pitch, run.grf[:, 0], run.grf[:, 1],
               run.tube[:, 0, 0], run.tube[:, 0, 1], run.tube[:, 1, 0], run.tube[:, 1, 1],
               run.fallback.astype(int), run.cost)
    head = ("t", "z_com", "z_des", "pitch", "grf_0", "grf_1", "tube_lo_0", "tube_up_0", "tube_lo_1", "tube_up_1",
            "fallback", "cost")
    return _csv(head, ([_plain(v) for v in r] for r in rows))


def render_toy(table: str, out_dir) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    d = _read(table)
    fig, (a, b) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    a.plot(d["t"], d["z_com"], label="CoM")
    a.plot(d["t"], d["z_des"], "--", label="desired")
    a.set_ylabel("height (m)")
    a.legend(fontsize=8)
    for j in (0, 1):
        b.plot(d["t"], d[f"grf_{j}"], label=f"foot {j}")
        b.fill_between(d["t"], d[f"tube_lo_{j}"], d[f"tube_up_{j}"], alpha=0.15, lw=0)
    b.set_xlabel("time (s)")
    b.set_ylabel("vertical force (N)")
    b.legend(fontsize=8)
    fig.tight_layout()
    p = out_dir / "toy.png"
    fig.savefig(p, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return [p]
