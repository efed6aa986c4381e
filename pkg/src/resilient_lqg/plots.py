"""Figure rendering for the case-study report path.

All figures are written to files (SVG by default); no interactive
backend is touched.
"""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

STYLE = {"proposed": dict(color="tab:blue", lw=1.4),
         "full": dict(color="tab:orange", lw=1.2, ls="--"),
         "excl_0": dict(color="tab:green", lw=1.2, ls="-."),
         "excl_1": dict(color="tab:red", lw=1.2, ls=":")}

LABELS = {"proposed": "proposed",
          "full": "LQG, all sensors",
          "excl_0": "LQG w/o pattern-1 sensors",
          "excl_1": "LQG w/o pattern-2 sensors"}


def _style(name):
    return STYLE.get(name, dict(lw=1.2))


def render_tracking_error(comparison, times, out_path, window=None):
    """Per-step mean tracking error for each controller."""
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    upto = window or len(times)
    for name in comparison.names:
        curve = comparison.tracking_error_curves[name][:upto]
        ax.plot(times[:upto], curve, label=LABELS.get(name, name), **_style(name))
    ax.set_xlabel("time")
    ax.set_ylabel(r"$\|x(t) - r(t)\|_2$")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def render_trajectories(comparison, scenario, out_path):
    """State trajectories of the first run with the regions overlaid."""
    fig, ax = plt.subplots(figsize=(5.2, 4.6))
    sc = scenario
    for name in comparison.names:
        traj = comparison.sample_trajectories[name]
        ax.plot(traj[:, 0], traj[:, 1], label=LABELS.get(name, name),
                **_style(name))
    ax.plot(sc.r_table[:, 0], sc.r_table[:, 1], color="k", lw=0.8, ls="--",
            label="reference")
    for region, color in ((sc.cfg.unsafe, "red"), (sc.cfg.goal, "green")):
        ball = region.ball_parameters()
        if ball is not None:
            center, radius = ball
            circ = plt.Circle(center, radius, color=color, alpha=0.18)
            ax.add_patch(circ)
    ax.set_xlabel("$x_1$")
    ax.set_ylabel("$x_2$")
    ax.set_aspect("equal")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def render_log_cost(comparison, times, out_path):
    """Mean natural-log running cost per step."""
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for name in comparison.names:
        curve = comparison.log_cost_curves[name]
        ax.plot(times[1:], curve[1:], label=LABELS.get(name, name),
                **_style(name))
    ax.set_xlabel("time")
    ax.set_ylabel("ln(running cost)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def render_case_study(free_cmp, attacked_cmp, scenario, out_dir,
                      fmt: str = "svg"):
    os.makedirs(out_dir, exist_ok=True)
    times = scenario.times
    render_tracking_error(free_cmp, times,
                          os.path.join(out_dir, f"fig2_tracking_error.{fmt}"),
                          window=None)
    render_trajectories(attacked_cmp, scenario,
                        os.path.join(out_dir, f"fig3_trajectories.{fmt}"))
    render_log_cost(attacked_cmp, times,
                    os.path.join(out_dir, f"fig4_log_cost.{fmt}"))
