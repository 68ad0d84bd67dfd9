"""Stochastic augmentation recipe used to expand the training split.

Every op is applied independently with its own probability, in spec order.
Photometric factors follow PIL's ``ImageEnhance`` blend definitions but are
evaluated in float64 and rounded once, so results can be checked per pixel.
"""

from __future__ import annotations

import csv
import hashlib
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .data import DataError, Manifest

OP_KINDS = (
    "flip_lr_or_ud",
    "small_rotation",
    "right_angle_rotation",
    "brightness",
    "contrast",
    "saturation",
    "perspective_skew",
)
_FACTOR_KINDS = {"brightness", "contrast", "saturation"}
LINEAGE_HEADER = ("out_path", "source_id", "replica", "ops_applied")


@dataclass(frozen=True)
class AugOp:
    kind: str
    probability: float
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"{self.kind}: probability {self.probability} outside [0, 1]")
        if self.kind in _FACTOR_KINDS:
            lo, hi = self.params["min_f"], self.params["max_f"]
            if not 0 < lo <= hi:
                raise ValueError(f"{self.kind}: need 0 < min_f <= max_f, got ({lo}, {hi})")


@dataclass(frozen=True)
class AugmentationSpec:
    ops: tuple[AugOp, ...]
    expansion_factor: int = 20

    def __post_init__(self) -> None:
        if self.expansion_factor < 1:
            raise ValueError("expansion_factor must be >= 1")

    def op(self, kind: str) -> AugOp:
        for o in self.ops:
            if o.kind == kind:
                return o
        raise KeyError(kind)

    def with_probability(self, p: float, kinds: Sequence[str] | None = None) -> "AugmentationSpec":
        """Copy with the probability of ``kinds`` (default all) forced to ``p``."""
        ops = tuple(
            replace(o, probability=p) if kinds is None or o.kind in kinds else o for o in self.ops
        )
        return replace(self, ops=ops)

    def only(self, *kinds: str) -> "AugmentationSpec":
        return replace(self, ops=tuple(o for o in self.ops if o.kind in kinds))


def build_paper_spec() -> AugmentationSpec:
    factor = {"min_f": 0.7, "max_f": 1.3}
    return AugmentationSpec(
        ops=(
            AugOp("flip_lr_or_ud", 0.5),
            AugOp("small_rotation", 0.5, {"max_deg": 5.0}),
            AugOp("right_angle_rotation", 0.5, {"angles": (90, 180, 270)}),
            AugOp("brightness", 0.5, dict(factor)),
            AugOp("contrast", 0.5, dict(factor)),
            AugOp("saturation", 0.5, dict(factor)),
            AugOp("perspective_skew", 0.5, {"magnitude": 0.10}),
        ),
        expansion_factor=20,
    )


# --------------------------------------------------------------------------
# single ops on uint8 HxWx3 arrays


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _luma(img: np.ndarray) -> np.ndarray:
    # ITU-R 601-2, as PIL's "L" conversion
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def adjust_brightness(img: np.ndarray, f: float) -> np.ndarray:
    return _to_uint8(img.astype(np.float64) * f)


def adjust_contrast(img: np.ndarray, f: float) -> np.ndarray:
    x = img.astype(np.float64)
    mean = _luma(x).mean()
    return _to_uint8(mean + f * (x - mean))


def adjust_saturation(img: np.ndarray, f: float) -> np.ndarray:
    x = img.astype(np.float64)
    gray = _luma(x)[..., None]
    return _to_uint8(gray + f * (x - gray))


def rotate_small(img: np.ndarray, degrees: float) -> np.ndarray:
    out = ndimage.rotate(
        img.astype(np.float64), degrees, axes=(1, 0), reshape=False, order=1, mode="reflect"
    )
    return _to_uint8(out)


def _perspective_coeffs(dst: np.ndarray, src: np.ndarray) -> list[float]:
    # solve the 8-parameter homography taking output corners (dst) to input points (src)
    a = []
    b = []
    for (x, y), (u, v) in zip(dst, src):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    return np.linalg.solve(np.asarray(a, float), np.asarray(b, float)).tolist()


def perspective_skew(img: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Warp so the output canvas samples the input quad whose corners are pulled
    inward by ``offsets`` (4x2, pixels). Inward-only keeps every sample in-bounds."""
    h, w = img.shape[:2]
    corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=float)
    inward = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=float)
    src = corners + inward * offsets
    coeffs = _perspective_coeffs(corners, src)
    out = Image.fromarray(img).transform((w, h), Image.Transform.PERSPECTIVE, coeffs, Image.Resampling.BICUBIC)
    return np.asarray(out, dtype=np.uint8)


def _check_image(img: Any) -> np.ndarray:
    if isinstance(img, Image.Image):
        img = np.asarray(img.convert("RGB"))
    if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[2] != 3:
        raise TypeError("expected an HxWx3 image")
    if img.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {img.dtype}")
    return img


def apply_once(
    img: np.ndarray | Image.Image,
    spec: AugmentationSpec,
    rng: np.random.Generator,
    log: list[str] | None = None,
) -> np.ndarray:
    """One stochastic pass of ``spec`` over ``img``; drawn parameters go to ``log``."""
    out = _check_image(img).copy()
    for op in spec.ops:
        if op.probability <= 0.0 or rng.random() >= op.probability:
            continue
        k = op.kind
        if k == "flip_lr_or_ud":
            axis = "lr" if rng.random() < 0.5 else "ud"
            out = out[:, ::-1] if axis == "lr" else out[::-1, :]
            entry = f"{k}={axis}"
        elif k == "small_rotation":
            deg = float(rng.uniform(-op.params["max_deg"], op.params["max_deg"]))
            out = rotate_small(out, deg)
            entry = f"{k}={deg:.4f}"
        elif k == "right_angle_rotation":
            angle = int(rng.choice(op.params["angles"]))
            out = np.rot90(out, k=-(angle // 90))
            entry = f"{k}={angle}"
        elif k in _FACTOR_KINDS:
            f = float(rng.uniform(op.params["min_f"], op.params["max_f"]))
            fn = {"brightness": adjust_brightness, "contrast": adjust_contrast, "saturation": adjust_saturation}[k]
            out = fn(out, f)
            entry = f"{k}={f:.6f}"
        else:
            h, w = out.shape[:2]
            max_px = op.params["magnitude"] * min(h, w)
            offsets = rng.uniform(0.0, max_px, size=(4, 2))
            out = perspective_skew(np.ascontiguousarray(out), offsets)
            entry = f"{k}=" + ",".join(f"{v:.2f}" for v in offsets.ravel())
        if log is not None:
            log.append(entry)
    return np.ascontiguousarray(out)


# --------------------------------------------------------------------------
# training-set expansion


@dataclass
class AugmentedImage:
    source_id: str
    replica: int
    ops_applied: tuple[str, ...]
    path: str | None = None
    image: np.ndarray | None = field(default=None, repr=False)


@dataclass
class AugmentedSet:
    items: list[AugmentedImage]
    expansion_factor: int

    def __len__(self) -> int:
        return len(self.items)

    def source_ids(self) -> set[str]:
        return {it.source_id for it in self.items}

    def write_lineage(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LINEAGE_HEADER)
            for it in self.items:
                w.writerow([it.path or "", it.source_id, it.replica, ";".join(it.ops_applied)])

    @classmethod
    def read_lineage(cls, path: str | os.PathLike, expansion_factor: int = 20) -> "AugmentedSet":
        with open(path, newline="") as fh:
            items = [
                AugmentedImage(
                    row["source_id"],
                    int(row["replica"]),
                    tuple(filter(None, row["ops_applied"].split(";"))),
                    row["out_path"] or None,
                )
                for row in csv.DictReader(fh)
            ]
        return cls(items, expansion_factor)


def source_rng(seed: int, source_id: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{source_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


def _safe_name(source_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", source_id)


def expand(
    train_ids: Sequence[str],
    manifest: Manifest,
    spec: AugmentationSpec,
    seed: int,
    out_dir: str | os.PathLike | None = None,
) -> AugmentedSet:
    """Generate ``spec.expansion_factor`` replicas per training image.

    Replicas replace the original in the training stream. With ``out_dir``
    set, each replica is written to ``out_dir/<source_id>_<replica>.png``
    and not kept in memory.
    """
    records = manifest.by_id()
    missing = [i for i in train_ids if i not in records]
    if missing:
        raise DataError(f"training ids not in manifest: {missing[:5]}")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    items: list[AugmentedImage] = []
    for sid in train_ids:
        rec = records[sid]
        try:
            with Image.open(rec.path) as im:
                src = np.asarray(im.convert("RGB"))
        except (FileNotFoundError, OSError) as exc:
            raise DataError(f"cannot read source image for id {sid!r}: {rec.path}") from exc
        rng = source_rng(seed, sid)
        for r in range(spec.expansion_factor):
            log: list[str] = []
            img = apply_once(src, spec, rng, log)
            item = AugmentedImage(sid, r, tuple(log))
            if out_dir is None:
                item.image = img
            else:
                target = out_dir / f"{_safe_name(sid)}_{r:02d}.png"
                Image.fromarray(img).save(target, format="PNG")
                item.path = str(target)
            items.append(item)
    return AugmentedSet(items, spec.expansion_factor)
