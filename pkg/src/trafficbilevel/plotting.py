"""Static figures rendered from the CSV files written by the command line runner."""

from __future__ import annotations

import csv
import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FORMATS = ("png", "svg")


def read_csv(path) -> dict[str, list[float]]:
    """Columns of a numeric CSV; empty cells become NaN."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: [float(r[k]) if r[k] != "" else float("nan") for r in rows] for k in rows[0]}


def _save(fig, path: Path, fmt: str) -> Path:
    out = path.with_suffix("." + fmt)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def _by_D(out_dir: Path, prefix: str) -> list[tuple[int, Path]]:
    found = []
    for p in out_dir.glob(f"{prefix}_D*.csv"):
        m = re.fullmatch(rf"{prefix}_D(\d+)\.csv", p.name)
        if m:
            found.append((int(m.group(1)), p))
    return sorted(found)


def plot_objective(out_dir: Path, fmt: str = "png") -> Path | None:
    traces = _by_D(out_dir, "trace")
    if not traces:
        return None
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for D, p in traces:
        cols = read_csv(p)
        ax1.plot(cols["k"], cols["objective"], label=f"D={D}")
        ax2.semilogy(cols["k"], cols["stationarity_sq"], label=f"D={D}")
    ax1.set_xlabel("outer iteration k")
    ax1.set_ylabel("upper-level objective")
    ax2.set_xlabel("outer iteration k")
    ax2.set_ylabel("squared stationarity")
    ax1.legend()
    return _save(fig, out_dir / "fig_objective", fmt)


def plot_inner(out_dir: Path, fmt: str = "png") -> list[Path]:
    written = []
    for D, p in _by_D(out_dir, "inner"):
        cols = read_csv(p)
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
        ax1.semilogy(cols["t"], cols["eps_h"])
        ax1.set_ylabel("KL error of h")
        ax2.semilogy(cols["t"], cols["eps_r"])
        ax2.set_ylabel("squared Jacobian error")
        for ax in (ax1, ax2):
            ax.set_xlabel("inner iteration t")
        written.append(_save(fig, out_dir / f"fig_inner_D{D}", fmt))
    return written


def plot_spectra(out_dir: Path, fmt: str = "png") -> Path | None:
    path = out_dir / "spectra.csv"
    if not path.exists():
        return None
    cols = read_csv(path)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(cols["t"], cols["rho"], label="spectral radius")
    ax.plot(cols["t"], cols["norm"], label="spectral norm")
    ax.axhline(1.0, color="grey", lw=0.8, ls="--")
    ax.set_xlabel("inner iteration t")
    ax.legend()
    return _save(fig, out_dir / "fig_spectra", fmt)


def render_report(out_dir, fmt: str = "png") -> list[Path]:
    """Render every figure whose source CSV exists in ``out_dir``."""
    if fmt not in FORMATS:
        raise ValueError(f"figure format must be one of {FORMATS}")
    out_dir = Path(out_dir)
    written = plot_inner(out_dir, fmt)
    for p in (plot_objective(out_dir, fmt), plot_spectra(out_dir, fmt)):
        if p is not None:
            written.append(p)
    return written
