"""SVG figures for predictions, threshold sweeps and RMS tables.

Rendering goes through matplotlib's SVG backend with text kept as text,
a fixed hash salt and no date stamp, so the same input yields the same
bytes. Key artists carry ``gid`` attributes (``markers``, ``reference``,
``rms-curve``, ``rejection-curve``) for downstream inspection.
"""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import Normalize  # noqa: E402

from .evalsdm import Predictions, SdmCurve  # noqa: E402
from .persist import atomic_write_bytes  # noqa: E402

RAMP = "viridis"  # perceptually ordered
_STYLE = {
    "svg.fonttype": "none",
    "svg.hashsalt": "aliased-percept",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def ramp_colour(value: float) -> str:
    """Hex colour for a position in ``[0, 1]`` along the uncertainty ramp."""
    return matplotlib.colors.to_hex(plt.get_cmap(RAMP)(float(np.clip(value, 0.0, 1.0))))


def _render(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def scatter_uncertainty(preds: Predictions, title: str = "", units: str = "") -> bytes:
    """Prediction against ground truth, coloured by uncertainty when present."""
    if len(preds) == 0:
        raise ValueError("no predictions to plot")
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        t, p = preds.target, preds.prediction
        lo = float(min(t.min(), p.min()))
        hi = float(max(t.max(), p.max()))
        if hi == lo:
            lo, hi = lo - 1.0, hi + 1.0
        ax.plot([lo, hi], [lo, hi], color="0.4", lw=0.8, ls="--", gid="reference")
        if preds.uncertainty is not None:
            u = preds.uncertainty
            norm = Normalize(float(u.min()), float(u.max()) if u.max() > u.min() else float(u.min()) + 1.0)
            sc = ax.scatter(t, p, c=u, cmap=RAMP, norm=norm, s=6, linewidths=0, gid="markers")
            fig.colorbar(sc, ax=ax, label="uncertainty")
        else:
            ax.scatter(t, p, color=ramp_colour(0.0), s=6, linewidths=0, gid="markers")
        suffix = f" ({units})" if units else ""
        ax.set_xlabel("ground truth" + suffix)
        ax.set_ylabel("prediction" + suffix)
        ax.set_xlim(lo, hi)
        ax.set_ylim(lo, hi)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _render(fig)


def sdm_curve(curve: SdmCurve, title: str = "", units: str = "") -> bytes:
    """Accepted RMS (left axis) and rejection rate (right axis) against the threshold."""
    rms = np.array([np.nan if r is None else r for r in curve.rms], dtype=float)
    with plt.rc_context({**_STYLE, "axes.spines.right": True}):
        fig, ax = plt.subplots(figsize=(4.6, 3.2))
        ax.plot(curve.thresholds, rms, color=ramp_colour(0.15), lw=1.4, gid="rms-curve")
        ax.set_xlabel("uncertainty threshold")
        ax.set_ylabel("accepted RMS" + (f" ({units})" if units else ""), color=ramp_colour(0.15))
        ax2 = ax.twinx()
        ax2.plot(curve.thresholds, 100 * curve.rejection, color=ramp_colour(0.75), lw=1.4,
                 gid="rejection-curve")
        ax2.set_ylabel("rejection rate (%)", color=ramp_colour(0.75))
        ax2.set_ylim(0, 100)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _render(fig)


def rms_table(reports, target: str) -> bytes:
    """Grouped bars of mean RMS (with run std) per model and train/test regime."""
    rows = [r for r in reports if r.target == target]
    if not rows:
        raise ValueError(f"no reports for target {target!r}")
    models = sorted({r.model for r in rows})
    regimes = sorted({(r.train_tag, r.test_tag) for r in rows})
    width = 0.8 / len(regimes)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        x = np.arange(len(models))
        for j, (tr, te) in enumerate(regimes):
            lookup = {r.model: r for r in rows if (r.train_tag, r.test_tag) == (tr, te)}
            means = [lookup[m].mean if m in lookup else np.nan for m in models]
            stds = [lookup[m].std if m in lookup else 0.0 for m in models]
            ax.bar(x + (j - (len(regimes) - 1) / 2) * width, means, width, yerr=stds,
                   color=ramp_colour(j / max(len(regimes) - 1, 1)), label=f"{tr} / {te}",
                   gid=f"bars-{tr}-{te}")
        ax.set_xticks(x, models)
        ax.set_ylabel(f"{target} RMS")
        ax.legend(title="train / test", fontsize=7, frameon=False)
        fig.tight_layout()
        return _render(fig)


def write_svg(path, svg: bytes) -> None:
    atomic_write_bytes(path, svg)
