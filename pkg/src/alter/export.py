"""CSV exports, mask/routing heatmaps and run summaries."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .hypernet import MaskSet
from .objectives import sparsity
from .trainer import METRIC_FIELDS


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def write_masks_csv(path, mask_set: MaskSet):
    rows = [(e, l, int(b)) for e, row in enumerate(mask_set.expert_masks) for l, b in enumerate(row)]
    _write_rows(path, ("expert", "layer", "bit"), rows)


def write_routing_csv(path, mask_set: MaskSet):
    _write_rows(path, ("timestep", "expert"), enumerate(mask_set.routing_table.tolist()))


def read_mask_set(masks_path, routing_path) -> MaskSet:
    """Rebuild a (logit-free) MaskSet from ``masks.csv`` and ``routing.csv``."""
    with open(masks_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) != {"expert", "layer", "bit"}:
        raise ValueError(f"{masks_path}: expected columns expert,layer,bit")
    n_e = 1 + max(int(r["expert"]) for r in rows)
    n_l = 1 + max(int(r["layer"]) for r in rows)
    M = np.full((n_e, n_l), -1.0)
    for r in rows:
        M[int(r["expert"]), int(r["layer"])] = int(r["bit"])
    if np.any((M != 0) & (M != 1)):
        raise ValueError(f"{masks_path}: incomplete or non-binary mask table")
    with open(routing_path, newline="") as fh:
        rrows = list(csv.DictReader(fh))
    if not rrows or set(rrows[0]) != {"timestep", "expert"}:
        raise ValueError(f"{routing_path}: expected columns timestep,expert")
    table = np.zeros(len(rrows), dtype=np.int64)
    for r in rrows:
        table[int(r["timestep"])] = int(r["expert"])
    if table.max() >= n_e:
        raise ValueError(f"{routing_path}: routes to an expert missing from {masks_path}")
    return MaskSet.fixed(M, table)


def write_metrics_csv(path, metrics):
    _write_rows(path, METRIC_FIELDS, ([_fmt(r[k]) for k in METRIC_FIELDS] for r in metrics))


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return [{k: (v if k == "phase" else int(v) if k == "step" else float(v))
                 for k, v in r.items()} for r in csv.DictReader(fh)]


def write_bench_csv(path, reports):
    from .sampling import BenchReport

    _write_rows(path, BenchReport.CSV_FIELDS,
                ([_fmt(r.row()[k]) for k in BenchReport.CSV_FIELDS] for r in reports))


def write_samples_csv(path, samples, seed):
    _write_rows(path, ("x", "y", "seed"), ((repr(float(x)), repr(float(y)), seed)
                                           for x, y in np.asarray(samples)))


def routing_entropy(routing_table, n_experts) -> float:
    """Shannon entropy (nats) of the expert-usage distribution."""
    share = np.bincount(routing_table, minlength=n_experts) / len(routing_table)
    nz = share[share > 0]
    return float(-(nz * np.log(nz)).sum())


def summarize(mask_set: MaskSet, costs, target=None) -> dict:
    costs = np.asarray(costs, dtype=np.float64)
    n_e = mask_set.n_experts
    share = np.bincount(mask_set.routing_table, minlength=n_e) / len(mask_set.routing_table)
    ent = routing_entropy(mask_set.routing_table, n_e)
    s_bar = float(sparsity(mask_set.schedule_masks(), costs).mean())
    out = {
        "n_experts": n_e,
        "n_layers": mask_set.n_layers,
        "expert_retained_cost": [float(sparsity(m, costs)) for m in mask_set.expert_masks],
        "expert_timestep_share": share.tolist(),
        "mean_sparsity": s_bar,
        "routing_entropy": ent,
        "routing_entropy_normalized": ent / math.log(n_e) if n_e > 1 else 0.0,
    }
    if target is not None:
        out["target_sparsity"] = float(target)
        out["sparsity_gap"] = s_bar - float(target)
    return out


def format_summary(summary: dict) -> str:
    lines = ["expert  retained_cost  timestep_share"]
    for i, (c, s) in enumerate(zip(summary["expert_retained_cost"],
                                   summary["expert_timestep_share"])):
        lines.append(f"{i:>6}  {c:>13.4f}  {s:>14.4f}")
    line = f"mean sparsity {summary['mean_sparsity']:.4f}"
    if "target_sparsity" in summary:
        line += f" (target {summary['target_sparsity']:.4f}, gap {summary['sparsity_gap']:+.4f})"
    lines.append(line)
    lines.append(f"routing entropy {summary['routing_entropy']:.4f} nats "
                 f"({summary['routing_entropy_normalized']:.3f} of maximum)")
    return "\n".join(lines)


def write_heatmaps(run_dir, mask_set: MaskSet):
    """Expert-by-layer mask and timestep-to-expert routing heatmaps as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "alter"
    run_dir = Path(run_dir)
    paths = []
    fig, ax = plt.subplots(figsize=(1 + 0.4 * mask_set.n_layers, 1 + 0.4 * mask_set.n_experts))
    ax.imshow(mask_set.expert_masks, cmap="Greys", vmin=0, vmax=1, aspect="equal")
    ax.set_xlabel("layer")
    ax.set_ylabel("expert")
    ax.set_xticks(range(mask_set.n_layers))
    ax.set_yticks(range(mask_set.n_experts))
    ax.set_title("active layers per expert")
    paths.append(run_dir / "masks.svg")
    fig.savefig(paths[-1], metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)

    onehot = np.eye(mask_set.n_experts)[mask_set.routing_table].T
    fig, ax = plt.subplots(figsize=(8, 1 + 0.4 * mask_set.n_experts))
    ax.imshow(onehot, cmap="Blues", vmin=0, vmax=1, aspect="auto", interpolation="nearest")
    ax.set_xlabel("timestep")
    ax.set_ylabel("expert")
    ax.set_yticks(range(mask_set.n_experts))
    ax.set_title("timestep routing")
    paths.append(run_dir / "routing.svg")
    fig.savefig(paths[-1], metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return paths
