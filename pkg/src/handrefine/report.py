"""Delimited output and matplotlib figures for training, evaluation and ablation runs."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 120,
}
FIGSIZE = (4.8, 3.2)


def write_csv(path: str | Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_json(path: str | Path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _save(fig, path: str | Path) -> None:
    fig.tight_layout()
    # Fixed metadata keeps repeated renders byte-stable.
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def write_loss_history(path: str | Path, term_history: list[dict]) -> None:
    keys = ("l_mano", "l_r", "l_e", "l_n", "total")
    write_csv(path, ("step",) + keys, [[i] + [f"{t[k]:.10g}" for k in keys] for i, t in enumerate(term_history)])


def plot_loss_curve(path: str | Path, term_history: list[dict]) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        steps = range(len(term_history))
        for key, label in (("total", "total"), ("l_mano", "stage 1"), ("l_r", "refined"),
                           ("l_e", "edge"), ("l_n", "normal")):
            values = [max(t[key], 1e-12) for t in term_history]
            ax.plot(steps, values, lw=1.6 if key == "total" else 0.9, label=label)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False, ncol=2)
        _save(fig, path)


def write_pck(path: str | Path, curves: dict) -> None:
    rows = [(f"{t:g}", f"{j:.6f}", f"{v:.6f}")
            for t, j, v in zip(curves["thresholds_mm"], curves["joints"], curves["vertices"])]
    write_csv(path, ("threshold_mm", "pck_joints", "pck_vertices"), rows)


def plot_pck(path: str | Path, curves: dict) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        t = curves["thresholds_mm"]
        ax.plot(t, curves["joints"], label=f"joints (AUC {curves['auc_joints']:.3f})")
        ax.plot(t, curves["vertices"], ls="--", label=f"vertices (AUC {curves['auc_vertices']:.3f})")
        ax.set_xlim(t[0], t[-1])
        ax.set_ylim(0.0, 1.02)
        ax.set_xlabel("threshold (mm)")
        ax.set_ylabel("PCK after Procrustes alignment")
        ax.legend(frameon=False, loc="lower right")
        _save(fig, path)


def write_gradcheck(path: str | Path, results) -> None:
    rows = []
    for r in results:
        for part, rep in r.parts.items():
            rows.append((r.name, part, f"{rep.max_rel_error:.3e}", rep.n_checked, f"{r.tolerance:g}",
                         "pass" if rep.max_rel_error < r.tolerance else "FAIL"))
    write_csv(path, ("check", "part", "max_rel_error", "n_checked", "tolerance", "status"), rows)


ABLATION_COLUMNS = ("name", "encoder_kind", "use_gcn_layer", "use_mutual_attention", "parameters",
                    "initial_loss", "final_loss", "j_pe_mm", "v_pe_mm", "seconds")


def write_ablation(path: str | Path, rows: list[dict]) -> None:
    write_csv(path, ABLATION_COLUMNS, [[r[c] for c in ABLATION_COLUMNS] for r in rows])


def plot_ablation(path: str | Path, rows: list[dict]) -> None:
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(FIGSIZE[0] * 1.6, FIGSIZE[1]))
        names = [r["name"] for r in rows]
        x = range(len(rows))
        ax1.bar(x, [r["parameters"] / 1e3 for r in rows], color="0.55")
        ax1.set_ylabel("parameters (thousands)")
        ax2.bar(x, [r["j_pe_mm"] for r in rows], color="tab:blue")
        ax2.set_ylabel("training-set J-PE (mm)")
        for ax in (ax1, ax2):
            ax.set_xticks(list(x))
            ax.set_xticklabels(names, rotation=30, ha="right")
        _save(fig, path)
