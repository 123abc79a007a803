"""Dual-teacher knowledge distillation for heatmap-based keypoint estimation.

Everything runs on plain float64 numpy arrays on a single CPU core: a small
differentiable-network engine (:mod:`posekd.nn`), a synthetic stick-figure
data generator with segmentation masks (:mod:`posekd.synthdata`), heatmap
codec utilities (:mod:`posekd.heatmaps`), the distillation losses
(:mod:`posekd.losses`), the staged training schedules (:mod:`posekd.distill`),
and OKS-based evaluation (:mod:`posekd.evaluate`).
"""

__version__ = "0.1.0"
