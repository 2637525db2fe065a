"""Confusion matrices, OA/AA/kappa, report files and PPM classification maps."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

# Class 1 is the first entry; 0 (unlabeled / not predicted) is always black.
DEFAULT_PALETTE = (
    (228, 26, 28), (55, 126, 184), (77, 175, 74), (152, 78, 163),
    (255, 127, 0), (255, 255, 51), (166, 86, 40), (247, 129, 191),
    (153, 153, 153), (27, 158, 119), (217, 95, 2), (117, 112, 179),
    (231, 41, 138), (102, 166, 30), (230, 171, 2), (166, 118, 29),
)


def confusion(preds, truths, n_classes):
    """``C x C`` counts, rows = true class, columns = predicted class."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    truths = np.asarray(truths, dtype=np.int64).ravel()
    if preds.shape != truths.shape:
        raise ValueError(f"{preds.size} predictions but {truths.size} ground-truth labels")
    for name, v in (("prediction", preds), ("truth", truths)):
        if v.size and (v.min() < 1 or v.max() > n_classes):
            raise ValueError(f"{name} class outside 1..{n_classes}")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (truths - 1, preds - 1), 1)
    return conf


@dataclass
class MetricReport:
    per_class: list
    oa: float
    aa: float
    kappa: float
    run_id: str = ""

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["class", "accuracy"])
            for i, acc in enumerate(self.per_class, start=1):
                writer.writerow([i, f"{acc:.2f}"])
            writer.writerow(["OA", f"{self.oa:.2f}"])
            writer.writerow(["AA", f"{self.aa:.2f}"])
            writer.writerow(["kappa", f"{self.kappa:.2f}"])

    def to_text(self):
        lines = [f"{'class':>6}  {'accuracy':>8}"]
        lines += [f"{i:>6}  {acc:8.2f}" for i, acc in enumerate(self.per_class, start=1)]
        lines += [f"{'OA':>6}  {self.oa:8.2f}", f"{'AA':>6}  {self.aa:8.2f}", f"{'kappa':>6}  {self.kappa:8.2f}"]
        return "\n".join(lines) + "\n"


def metrics(conf, run_id=""):
    """OA, AA and Cohen's kappa (all in percent) from a confusion matrix."""
    conf = np.asarray(conf, dtype=np.int64)
    total = int(conf.sum())
    if total <= 0:
        raise ValueError("cannot compute metrics from an empty confusion matrix")
    rows = conf.sum(axis=1)
    if np.any(rows == 0):
        missing = (np.flatnonzero(rows == 0) + 1).tolist()
        raise ValueError(f"classes {missing} have no ground-truth samples; average accuracy undefined")
    diag = np.diag(conf)
    per_class = diag / rows
    p_o = diag.sum() / total
    p_e = float(rows @ conf.sum(axis=0)) / total**2
    if p_e == 1.0:
        if p_o != 1.0:
            raise ValueError("kappa undefined: chance agreement is 1")
        kappa = 1.0
    else:
        kappa = (p_o - p_e) / (1.0 - p_e)
    return MetricReport([100.0 * a for a in per_class], 100.0 * p_o, 100.0 * float(per_class.mean()),
                        100.0 * kappa, run_id)


def _colorize(raster, palette):
    raster = np.asarray(raster, dtype=np.int64)
    lut = np.zeros((len(palette) + 1, 3), dtype=np.uint8)
    lut[1:] = np.asarray(palette, dtype=np.uint8)
    if raster.size and (raster.min() < 0 or raster.max() > len(palette)):
        raise ValueError(f"class index outside the {len(palette)}-entry palette")
    return lut[raster]


def render_map(prediction, path, labels=None, palette=DEFAULT_PALETTE):
    """Write a binary PPM (P6) classification map.

    Class 0 renders black. With ``labels``, the ground truth is placed to
    the right of the prediction, doubling the width.
    """
    image = _colorize(prediction, palette)
    if labels is not None:
        if np.shape(labels) != np.shape(prediction):
            raise ValueError("ground-truth panel must match the prediction raster")
        image = np.concatenate([image, _colorize(labels, palette)], axis=1)
    height, width = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())
