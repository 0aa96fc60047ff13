"""Localization metrics over result records: median errors, recall, tables and plots."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyInput
from .geometry import recall

# translation thresholds in meters with 5 degrees, per Cambridge Landmarks scene
CAMBRIDGE_THRESHOLDS = {
    "KingsCollege": 0.38,
    "OldHospital": 0.22,
    "ShopFacade": 0.15,
    "StMarysChurch": 0.35,
    "GreatCourt": 0.45,
}
SEVEN_SCENES_THRESHOLD = (0.05, 5.0)


@dataclass
class SceneMetrics:
    scene: str
    n: int
    median_t: float
    median_r: float
    recall: float
    t_thresh: float
    r_thresh: float


def read_records(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def record_errors(rec: dict) -> tuple[float, float]:
    """Errors of one record; unlocalized or missing errors count as infinite."""
    t, r = rec.get("t_err"), rec.get("r_err")
    if not rec.get("localized", True) or t is None or r is None:
        return math.inf, math.inf
    return float(t), float(r)


def scene_metrics(scene: str, errors: list[tuple[float, float]], t_thresh: float, r_thresh: float) -> SceneMetrics:
    e = np.asarray(errors, dtype=np.float64).reshape(-1, 2)
    if len(e) == 0:
        raise EmptyInput(f"no results for scene {scene!r}")
    return SceneMetrics(scene, len(e), float(np.median(e[:, 0])), float(np.median(e[:, 1])),
                        recall(e, t_thresh, r_thresh), t_thresh, r_thresh)


def evaluate_records(records: list[dict], t_thresh: float = 0.05, r_thresh: float = 5.0,
                     per_scene: dict[str, float] | None = None) -> list[SceneMetrics]:
    """Per-scene metrics in first-seen scene order; ``per_scene`` maps scene names to translation thresholds."""
    if not records:
        raise EmptyInput("no result records")
    by_scene: dict[str, list] = {}
    for rec in records:
        by_scene.setdefault(rec.get("scene", "scene"), []).append(record_errors(rec))
    out = []
    for scene, errs in by_scene.items():
        t = per_scene[scene] if per_scene and scene in per_scene else t_thresh
        out.append(scene_metrics(scene, errs, t, r_thresh))
    return out


def average_row(rows: list[SceneMetrics]) -> tuple[float, float, float]:
    """Scene-averaged median translation, median rotation and recall."""
    return (float(np.mean([r.median_t for r in rows])), float(np.mean([r.median_r for r in rows])),
            float(np.mean([r.recall for r in rows])))


def format_table(rows: list[SceneMetrics]) -> str:
    lines = ["scene n median_t median_r recall t_thresh r_thresh"]
    for r in rows:
        lines.append(f"{r.scene} {r.n} {r.median_t:.6f} {r.median_r:.6f} {r.recall:.6f} {r.t_thresh:.6f} {r.r_thresh:.6f}")
    if len(rows) > 1:
        t, rot, rec = average_row(rows)
        lines.append(f"average {sum(r.n for r in rows)} {t:.6f} {rot:.6f} {rec:.6f} - -")
    return "\n".join(lines) + "\n"


def refinement_curve(records: list[dict]) -> np.ndarray:
    """Median (translation, rotation) error per refinement round over records with traces."""
    traces = [r["trace"]["errors"] for r in records if r.get("trace") and r["trace"].get("errors")]
    if not traces:
        return np.zeros((0, 2))
    rounds = min(len(t) for t in traces)
    return np.array([np.median([t[k] for t in traces], axis=0) for k in range(rounds)])


def write_plots(records: list[dict], out_dir: str | Path) -> list[Path]:
    """Error-vs-round curves and a translation-error CDF as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    curve = refinement_curve(records)
    if len(curve):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3))
        for ax, k, label in ((axes[0], 0, "median translation error"), (axes[1], 1, "median rotation error (deg)")):
            ax.plot(np.arange(len(curve)), curve[:, k], marker="o")
            ax.set_xlabel("refinement round")
            ax.set_ylabel(label)
        fig.tight_layout()
        p = out / "refinement.png"
        fig.savefig(p, dpi=80)
        plt.close(fig)
        written.append(p)
    t = np.sort([record_errors(r)[0] for r in records])
    t = t[np.isfinite(t)]
    if len(t):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.step(t, np.arange(1, len(t) + 1) / len(records), where="post")
        ax.set_xlabel("translation error")
        ax.set_ylabel("fraction of queries")
        fig.tight_layout()
        p = out / "translation_cdf.png"
        fig.savefig(p, dpi=80)
        plt.close(fig)
        written.append(p)
    return written
