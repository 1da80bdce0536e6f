"""Synthetic:real ratio sweep on phantom data and the report renderer."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .localizer import PatchPair, localize_slice
from .metrics import HEADERS, RECON_KEYS, SEG_KEYS, METRIC_KEYS, MetricReport
from .phantom import default_phantom_spec, generate_phantom, normalize_intensity, slice_axial, target_slices
from .training import RunConfig, evaluate, train

DEFAULT_RATIOS = (0.0, 0.25, 0.5, 0.75, 1.0)
TABLE1_COLUMNS = ("Ratio", "MSE", "MAE", "RMSE", "PSNR (dB)", "SSIM")
TABLE2_COLUMNS = ("Ratio", "Dice", "IoU", "Precision", "Recall", "Hausdorff (px)")
# fixed decimal places for the text tables
_TEXT_FORMAT = {"mse": ".6f", "mae": ".5f", "rmse": ".5f", "psnr": ".2f", "ssim": ".4f",
                "dice": ".4f", "iou": ".4f", "precision": ".4f", "recall": ".4f", "hausdorff": ".2f"}
# |recon - input| is divided by this before the colormap
HEATMAP_SCALE = 0.5
EVAL_SEED_OFFSET = 10_000


def phantom_patch_dataset(n_volumes: int, seed: int = 0, prompt: str = "adrenal gland", k: int = 2,
                          slices_per_volume: int = 5, ps: int = 64, dims=(24, 96, 96),
                          window=(-200.0, 300.0), spec_factory: Callable = default_phantom_spec) -> list[PatchPair]:
    """Patches from ``n_volumes`` phantoms with seeds ``seed, seed+1, ...``.

    Slices containing target voxels are sampled evenly; each contributes
    ``k`` prompt-localized patches.
    """
    out = []
    for v in range(n_volumes):
        s = seed + v
        vol, mask = generate_phantom(spec_factory(seed=s, dims=dims))
        norm = normalize_intensity(vol, *window)
        zs = target_slices(mask)
        if len(zs) > slices_per_volume:
            idx = np.linspace(0, len(zs) - 1, slices_per_volume).round().astype(int)
            zs = [zs[i] for i in idx]
        for z in zs:
            out.extend(localize_slice(slice_axial(norm, z), slice_axial(mask, z), prompt, k=k, ps=ps,
                                      volume_id=f"phantom-{s:05d}", z=z))
    return out


@dataclass
class SweepResult:
    reports: dict
    metadata: dict = field(default_factory=dict)
    logs: dict = field(default_factory=dict)

    @property
    def ratios(self) -> list:
        return list(self.reports)


def ratio_sweep(base: RunConfig, ratios: Sequence[float], train_patches: Sequence[PatchPair],
                eval_patches: Sequence[PatchPair], out_dir=None, keep: int = 4) -> SweepResult:
    """Train one model per ratio from the same initialization and seeds and
    score each on the same held-out patches. Reports come back in ascending
    ratio order."""
    ratios = sorted(float(r) for r in ratios)
    if not ratios:
        raise ValueError("ratio list is empty")
    if len(set(ratios)) != len(ratios):
        raise ValueError("duplicate ratios")
    if any(not 0.0 <= r <= 1.0 for r in ratios):
        raise ValueError("ratios must lie in [0, 1]")
    out = Path(out_dir) if out_dir is not None else None
    reports, logs = {}, {}
    t0 = time.perf_counter()
    for r in ratios:
        cfg = dataclasses.replace(base, ratio=r)
        run_dir = out / ratio_dirname(r) if out is not None else None
        state, history = train(cfg, train_patches, out_dir=run_dir)
        report = evaluate(state, eval_patches, ratio=r, keep=keep)
        reports[r] = report
        logs[r] = history
        if run_dir is not None:
            (run_dir / "metrics.csv").write_text(report.to_csv())
            _save_samples(report.samples, run_dir / "samples.npz")
    result = SweepResult(reports, {
        "config": base.to_dict(),
        "config_hash": base.hash(),
        "ratios": ratios,
        "seeds": {"model": base.model.seed, "data": base.seeds.data, "noise": base.seeds.noise},
        "n_train": len(train_patches),
        "n_eval": len(eval_patches),
        "wall_time_s": time.perf_counter() - t0,
    }, logs)
    if out is not None:
        (out / "sweep.json").write_text(json.dumps(result.metadata, indent=2, sort_keys=True) + "\n")
        write_tables(result, out)
    return result


def ratio_dirname(r: float) -> str:
    return f"ratio-{r:g}"


def _save_samples(samples, path) -> None:
    if not samples:
        np.savez(path, image=np.zeros((0, 0, 0), np.float32))
        return
    np.savez(path, **{key: np.stack([s[key] for s in samples]) for key in ("image", "recon", "pred", "mask")})


def _load_samples(path) -> list:
    if not Path(path).exists():
        return []
    with np.load(path) as z:
        if "recon" not in z:
            return []
        return [{k: z[k][i] for k in ("image", "recon", "pred", "mask")} for i in range(len(z["image"]))]


def load_sweep(sweep_dir) -> SweepResult:
    d = Path(sweep_dir)
    meta = json.loads((d / "sweep.json").read_text())
    reports = {}
    for r in meta["ratios"]:
        run = d / ratio_dirname(r)
        rows = []
        with open(run / "metrics.csv", newline="") as f:
            for rec in csv.DictReader(f):
                if rec["patch"] == "mean":
                    continue
                rows.append({k: float(rec[HEADERS[k]]) for k in METRIC_KEYS})
        rep = MetricReport(rows, ratio=r)
        rep.samples = _load_samples(run / "samples.npz")
        reports[r] = rep
    return SweepResult(reports, meta)


def _table_rows(result: SweepResult, keys):
    return [[f"{r:g}"] + [result.reports[r].aggregate[k] for k in keys] for r in result.ratios]


def _csv_table(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    return buf.getvalue()


def _text_table(title, columns, keys, rows) -> str:
    cells = [list(columns)] + [[row[0]] + [format(v, _TEXT_FORMAT[k]) for k, v in zip(keys, row[1:])]
                               for row in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(columns))]
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    lines = [title, rule, "  ".join(c.center(w) for c, w in zip(cells[0], widths)), rule]
    lines += ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells[1:]]
    lines.append(rule)
    return "\n".join(lines) + "\n"


def write_tables(result: SweepResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t1 = _table_rows(result, RECON_KEYS)
    t2 = _table_rows(result, SEG_KEYS)
    files = {
        "table1_reconstruction.csv": _csv_table(TABLE1_COLUMNS, t1),
        "table2_segmentation.csv": _csv_table(TABLE2_COLUMNS, t2),
        "table1_reconstruction.txt": _text_table("Reconstruction metrics by synthetic:real patch ratio",
                                                 TABLE1_COLUMNS, RECON_KEYS, t1),
        "table2_segmentation.txt": _text_table("Segmentation metrics by synthetic:real patch ratio",
                                               TABLE2_COLUMNS, SEG_KEYS, t2),
    }
    paths = []
    for name, text in files.items():
        (out / name).write_text(text)
        paths.append(out / name)
    return paths


def hot_colormap(t: np.ndarray) -> np.ndarray:
    """Black -> red -> yellow -> white for t in [0, 1]; returns uint8 RGB."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([np.clip(3 * t, 0, 1), np.clip(3 * t - 1, 0, 1), np.clip(3 * t - 2, 0, 1)], axis=-1)
    return np.round(rgb * 255).astype(np.uint8)


def error_heatmap(recon, image) -> np.ndarray:
    err = np.abs(np.asarray(recon, np.float64) - np.asarray(image, np.float64))
    return hot_colormap(err / HEATMAP_SCALE)


def _gray(img, lo=-1.0, hi=1.0) -> np.ndarray:
    g = np.round((np.clip(np.asarray(img, np.float64), lo, hi) - lo) / (hi - lo) * 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=-1)


PANEL_GAP = 2
PANEL_TILES = ("input", "reconstruction", "error", "predicted mask", "ground-truth mask")


def compose_panel(sample: dict) -> np.ndarray:
    """Tiles left to right: input, reconstruction, error heatmap, predicted
    mask, ground-truth mask, separated by white columns."""
    tiles = [
        _gray(sample["image"]),
        _gray(sample["recon"]),
        error_heatmap(sample["recon"], sample["image"]),
        _gray(sample["pred"], 0, 1),
        _gray(sample["mask"], 0, 1),
    ]
    h = tiles[0].shape[0]
    gap = np.full((h, PANEL_GAP, 3), 255, np.uint8)
    parts = []
    for i, t in enumerate(tiles):
        if i:
            parts.append(gap)
        parts.append(t)
    return np.concatenate(parts, axis=1)


def panel_tile(panel: np.ndarray, index: int, ps: int) -> np.ndarray:
    start = index * (ps + PANEL_GAP)
    return panel[:, start : start + ps]


def render_report(result: SweepResult, out_dir) -> list[Path]:
    """Write both metric tables and one qualitative panel per kept sample."""
    if not result.reports:
        raise ValueError("empty sweep result")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out}: {e}") from e
    paths = write_tables(result, out)
    panel_dir = out / "panels"
    for r in result.ratios:
        for i, sample in enumerate(result.reports[r].samples):
            panel_dir.mkdir(exist_ok=True)
            p = panel_dir / f"{ratio_dirname(r)}-sample{i:02d}.png"
            Image.fromarray(compose_panel(sample)).save(p)
            paths.append(p)
    return paths
