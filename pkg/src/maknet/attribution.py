"""Attribution and perturbation toolkit.

Integrated gradients uses a right-endpoint Riemann sum along the straight
path from a black (all-zero) baseline to the input; the completeness
residual |sum(attr) - (F(x) - F(baseline))| is always computed and stored.
Perturbations: nearest-neighbor region replacement, black patches, and
deletion of the most influential pixels under an attribution map.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .data import DataError, write_pgm
from .tensor import Tensor, no_grad

__all__ = [
    "AttributionMap",
    "PerturbationReport",
    "integrated_gradients",
    "integrated_gradients_for_model",
    "perturb_replace_neighbors",
    "perturb_black_patch",
    "perturb_delete_ig_mask",
    "prediction_delta_report",
    "save_attribution",
    "load_attribution",
]


@dataclass
class AttributionMap:
    attributions: np.ndarray  # same shape as the input
    baseline: np.ndarray
    steps: int
    target: int
    output_value: float  # F(x)
    baseline_value: float  # F(baseline)
    completeness_residual: float


def integrated_gradients(
    score_fn: Callable[[Tensor], Tensor],
    image: np.ndarray,
    baseline: np.ndarray | None = None,
    steps: int = 50,
    target: int = -1,
    chunk: int = 16,
) -> AttributionMap:
    """IG_i = (x_i - b_i) * (1/m) * sum_{j=1..m} dF/dx_i at b + (j/m)(x - b).

    `score_fn` maps a batched Tensor (M, ...) to a length-M Tensor of target
    scores; interpolation points are evaluated in batches of `chunk`.
    """
    if steps < 1:
        raise ValueError(f"integrated gradients needs steps >= 1, got {steps}")
    x = np.asarray(image, dtype=np.float64)
    b = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if b.shape != x.shape:
        raise DataError(f"baseline shape {b.shape} != input shape {x.shape}")

    diff = x - b
    total_grad = np.zeros_like(x)
    alphas = np.arange(1, steps + 1, dtype=np.float64) / steps
    for start in range(0, steps, chunk):
        block = alphas[start : start + chunk]
        xs = b[None] + block.reshape((-1,) + (1,) * x.ndim) * diff[None]
        t = Tensor(xs, requires_grad=True)
        score = score_fn(t)
        score.sum().backward()
        total_grad += t.grad.sum(axis=0)
    attributions = diff * (total_grad / steps)

    with no_grad():
        ends = score_fn(Tensor(np.stack([x, b]))).data
    fx, fb = float(ends[0]), float(ends[1])
    residual = abs(float(attributions.sum()) - (fx - fb))
    return AttributionMap(
        attributions=attributions,
        baseline=b,
        steps=steps,
        target=target,
        output_value=fx,
        baseline_value=fb,
        completeness_residual=residual,
    )


def integrated_gradients_for_model(
    model,
    image: np.ndarray,
    target: int,
    baseline: np.ndarray | None = None,
    steps: int = 50,
    chunk: int = 16,
) -> AttributionMap:
    """IG of the model's sigmoid confidence for `target` w.r.t. the image
    (shape (3, H, W), values in [0, 1]). Inference mode: dropout off,
    batchnorm on running statistics; parameter gradients are suppressed."""
    model.eval()
    params = model.parameters()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        from .tensor import cast

        dtype = model.config.np_dtype()

        def score_fn(t: Tensor) -> Tensor:
            return model.scores(cast(t, dtype))[:, target]

        result = integrated_gradients(
            score_fn, image, baseline=baseline, steps=steps, target=target,
            chunk=chunk,
        )
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f
    return result


# ----------------------------------------------------------------------
# perturbations


def perturb_replace_neighbors(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace each masked pixel by the value of its nearest unmasked pixel
    (Euclidean distance; ties broken by smallest row, then column)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    mask = np.asarray(mask, dtype=bool)
    c, h, w = image.shape
    if mask.shape != (h, w):
        raise DataError(f"mask shape {mask.shape} != spatial dims {(h, w)}")
    if mask.all():
        raise DataError("mask covers the whole image; nothing to copy from")
    out = image.copy()
    if not mask.any():
        return out
    # candidate coordinates enumerated row-major so argmin's first-hit rule
    # implements the (row, col) tie-break
    free_r, free_c = np.nonzero(~mask)
    masked_r, masked_c = np.nonzero(mask)
    for start in range(0, len(masked_r), 256):
        mr = masked_r[start : start + 256]
        mc = masked_c[start : start + 256]
        d2 = (mr[:, None] - free_r[None, :]) ** 2 + (
            mc[:, None] - free_c[None, :]
        ) ** 2
        nearest = d2.argmin(axis=1)
        out[:, mr, mc] = image[:, free_r[nearest], free_c[nearest]]
    return out


def perturb_black_patch(
    image: np.ndarray, rects: list[tuple[int, int, int, int]]
) -> np.ndarray:
    """Zero every (r0, c0, h, w) rectangle across all channels."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    _, height, width = image.shape
    out = image.copy()
    for r0, c0, h, w in rects:
        if r0 < 0 or c0 < 0 or h < 0 or w < 0 or r0 + h > height or c0 + w > width:
            raise DataError(
                f"rect {(r0, c0, h, w)} out of bounds for {(height, width)}"
            )
        out[:, r0 : r0 + h, c0 : c0 + w] = 0.0
    return out


def ig_deletion_mask(attributions: np.ndarray, fraction: float) -> np.ndarray:
    """Boolean (H, W) mask of the top `fraction` of pixels by channel-summed
    |attribution|; ties broken by row-major pixel index."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    attributions = np.asarray(attributions)
    if attributions.ndim == 2:
        magnitude = np.abs(attributions)
    else:
        magnitude = np.abs(attributions).sum(axis=0)
    h, w = magnitude.shape
    count = int(np.floor(fraction * h * w))
    mask = np.zeros((h, w), dtype=bool)
    if count == 0:
        return mask
    flat = magnitude.reshape(-1)
    order = np.lexsort((np.arange(flat.size), -flat))
    mask.reshape(-1)[order[:count]] = True
    return mask


def perturb_delete_ig_mask(
    image: np.ndarray, attributions: np.ndarray, fraction: float
) -> np.ndarray:
    """Zero the top `fraction` of pixels ranked by |attribution|."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    mask = ig_deletion_mask(attributions, fraction)
    if mask.shape != image.shape[1:]:
        raise DataError(
            f"attribution dims {mask.shape} != image dims {image.shape[1:]}"
        )
    out = image.copy()
    out[:, mask] = 0.0
    return out


# ----------------------------------------------------------------------
# prediction deltas


@dataclass
class PerturbationReport:
    strategy: str
    top_before: list[tuple[int, float]]  # (label, confidence), k entries
    after_conf: dict[int, float]  # confidence after, for the same labels
    displaced: list[int]  # labels that fell out of the top-k

    def to_text(self) -> str:
        lines = [f"strategy = {self.strategy}"]
        for label, conf in self.top_before:
            flag = "displaced" if label in self.displaced else "-"
            lines.append(f"{label}\t{conf:.6f}\t{self.after_conf[label]:.6f}\t{flag}")
        return "\n".join(lines) + "\n"


def prediction_delta_report(
    model, original: np.ndarray, perturbed: np.ndarray, k: int = 5,
    strategy: str = "",
) -> PerturbationReport:
    """Top-k predictions before vs after a perturbation, flagging labels
    that drop out of the top-k. Both passes run the same checkpoint in
    inference mode."""
    model.eval()
    dtype = model.config.np_dtype()
    with no_grad():
        batch = np.stack([original, perturbed]).astype(dtype)
        scores = model.scores(Tensor(batch)).data.astype(np.float64)
    before, after = scores[0], scores[1]
    k = min(k, len(before))
    order_before = np.lexsort((np.arange(len(before)), -before))[:k]
    order_after = np.lexsort((np.arange(len(after)), -after))[:k]
    top_after = set(int(i) for i in order_after)
    top_before = [(int(i), float(before[i])) for i in order_before]
    displaced = [label for label, _ in top_before if label not in top_after]
    return PerturbationReport(
        strategy=strategy,
        top_before=top_before,
        after_conf={int(i): float(after[i]) for i in order_before},
        displaced=displaced,
    )


# ----------------------------------------------------------------------
# persistence


def save_attribution(stem, amap: AttributionMap) -> tuple[Path, Path]:
    """Write the exact f64 tensor (`<stem>.f64`) and a scaled 8-bit PGM
    visualization (`<stem>.pgm`). Scaling touches only the image file."""
    stem = Path(stem)
    raw_path = stem.with_suffix(".f64")
    arr = np.ascontiguousarray(amap.attributions, dtype="<f8")
    with open(raw_path, "wb") as f:
        f.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<I", d))
        f.write(arr.tobytes())
    mag = np.abs(arr).sum(axis=0) if arr.ndim == 3 else np.abs(arr)
    peak = mag.max()
    vis = (mag * (255.0 / peak)) if peak > 0 else mag
    pgm_path = stem.with_suffix(".pgm")
    write_pgm(pgm_path, vis)
    return raw_path, pgm_path


def load_attribution(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    rank = struct.unpack_from("<I", blob, 0)[0]
    dims = struct.unpack_from(f"<{rank}I", blob, 4)
    count = int(np.prod(dims))
    return np.frombuffer(blob, dtype="<f8", count=count, offset=4 + 4 * rank).reshape(dims).copy()
