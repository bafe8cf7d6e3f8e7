"""Structured run outputs: delimited data, JSON reports and figures.

Every output file carries the configuration hash.  CSV files use '.'
decimals, comma separators and a header row; a gnuplot-compatible
whitespace-separated .dat twin is written for sweep data.  Figures are
rendered with the Agg backend so runs stay headless, and report JSON is
serialized with sorted keys so identical runs produce identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def config_hash(config):
    """Hash of the numerically relevant configuration (output paths are
    excluded so reruns into different directories stay comparable)."""
    payload = {k: v for k, v in config.items() if k != "output"}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_csv(path, fieldnames, rows, cfg_hash):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash: {cfg_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in fieldnames])


def save_gnuplot(path, fieldnames, rows, cfg_hash):
    with open(path, "w") as fh:
        fh.write(f"# config_hash: {cfg_hash}\n")
        fh.write("# " + " ".join(fieldnames) + "\n")
        for row in rows:
            fh.write(" ".join(_fmt(row[k]) for k in fieldnames) + "\n")


def save_json(path, payload, cfg_hash):
    payload = dict(payload)
    payload["config_hash"] = cfg_hash
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _finish(fig, path, cfg_hash):
    fig.tight_layout()
    fig.savefig(path, dpi=130, metadata={"Description": f"config_hash={cfg_hash}"})
    plt.close(fig)


def fig_series(path, x, series, labels, xlabel, ylabel, cfg_hash, logx=False,
               logy=False, title=None):
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for ys, lab in zip(series, labels):
        ax.plot(x, ys, marker="o", ms=3.5, lw=1.2, label=lab)
    if logx:
        ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title, fontsize=10)
    if len(series) > 1 or labels[0]:
        ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    _finish(fig, path, cfg_hash)


def fig_field(path, mesh, values, cfg_hash, title=None):
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    if mesh.dim == 1:
        ax.plot(mesh.bulk_x[:, 0], values, "o-", ms=3, lw=1.2)
        ax.set_xlabel("x")
    else:
        sc = ax.scatter(mesh.bulk_x[:, 0], mesh.bulk_x[:, 1], c=values,
                        s=18, cmap="viridis")
        fig.colorbar(sc, ax=ax, shrink=0.85)
        ax.set_aspect("equal")
        ax.set_xlabel("x")
        ax.set_ylabel("y")
    if title:
        ax.set_title(title, fontsize=10)
    _finish(fig, path, cfg_hash)


def fig_bars(path, labels, values, ylabel, cfg_hash, logy=False, title=None):
    fig, ax = plt.subplots(figsize=(5.6, 3.6))
    ax.bar(range(len(values)), values, color="#4878a8")
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    if logy:
        ax.set_yscale("log")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title, fontsize=10)
    ax.grid(alpha=0.3, axis="y")
    _finish(fig, path, cfg_hash)


def fig_fit(path, x, y, fit_fn, fit_label, xlabel, ylabel, cfg_hash,
            title=None):
    import numpy as np

    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.plot(x, y, "o", ms=5, label="measured")
    xs = np.linspace(min(x), max(x), 100)
    ax.plot(xs, [fit_fn(v) for v in xs], "-", lw=1.2, label=fit_label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title, fontsize=10)
    _finish(fig, path, cfg_hash)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
