"""Recovery, metric tables and robustness sweeps on trained checkpoints."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import config_from_dict
from .decode import decode_bits, decode_image
from .embed import Payload, null_image
from .io.checkpoint import Checkpoint, CheckpointError
from .metrics import bit_accuracy, psnr, ssim
from .perturb import PerturbSpec, apply
from .rasterizer import tile_render
from .scene import GaussianScene
from .train import decoder_config

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("param", "ssim_render", "ssim_hidden", "psnr_hidden", "bit_acc")


@dataclass
class Recovery:
    kind: str  # "image" | "bits"
    image: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None
    bits: Optional[np.ndarray] = None
    metrics: dict = field(default_factory=dict)
    negative: dict = field(default_factory=dict)


class _Session:
    """Decoder-side view of a checkpoint."""

    def __init__(self, ck: Checkpoint):
        if ck.rig is None or not ck.rig.cameras:
            raise CheckpointError("checkpoint has no checking camera")
        self.ck = ck
        self.cfg = config_from_dict(ck.config)
        self.dec_cfg = decoder_config(self.cfg)
        self.payload = Payload(ck.payload_kind, ck.payload)
        self.tile = self.cfg.train.tile_size
        self.dtype = ck.store["dec.e1.w"].dtype

    def render(self, scene: GaussianScene, cam=None) -> np.ndarray:
        cam = self.ck.rig.checking if cam is None else cam
        return tile_render(scene, cam, self.tile).pixels.astype(self.dtype)

    def decode(self, render: np.ndarray) -> Recovery:
        if self.payload.kind == "bits":
            probs, bits = decode_bits(render, self.ck.store, self.dec_cfg, self.payload.data.size)
            return Recovery("bits", probs=probs, bits=bits,
                            metrics={"bit_acc": bit_accuracy(bits, self.payload.data)})
        img = decode_image(render, self.ck.store, self.dec_cfg)
        h = self.payload.data
        return Recovery("image", image=img, metrics={"psnr_hidden": psnr(img, h), "ssim_hidden": ssim(img, h)})

    def null_scores(self, rec: Recovery) -> dict:
        if rec.kind == "bits":
            return dict(rec.metrics)
        null = null_image(self.cfg.model.hidden_resolution, self.cfg.payload.null_value)
        return {**rec.metrics, "l1_null": float(np.mean(np.abs(rec.image.astype(np.float64) - null)))}


def recover(ck: Checkpoint, scene: GaussianScene, negative_control: bool = True) -> Recovery:
    """Render ``scene`` at the checking camera and decode it.

    When ``negative_control`` is set, the stored base scene is decoded as
    well and its scores land in ``Recovery.negative``.
    """
    s = _Session(ck)
    rec = s.decode(s.render(scene))
    if negative_control and ck.base_scene is not None:
        rec.negative = s.null_scores(s.decode(s.render(ck.base_scene)))
    return rec


def evaluate(ck: Checkpoint, scene: GaussianScene) -> dict:
    """Render fidelity vs the base scene plus hidden recovery.

    Returns ``{"views": [per-view rows], "summary": {...}}``; view rows cover
    every held-out camera and the checking camera.
    """
    s = _Session(ck)
    rows = []
    cams = [(f"heldout_{i}", c) for i, c in enumerate(ck.rig.heldout)] + [("checking", ck.rig.checking)]
    for name, cam in cams:
        a, b = s.render(scene, cam), s.render(ck.base_scene, cam)
        rows.append({"view": name, "psnr_render": psnr(a, b), "ssim_render": ssim(a, b)})
    held = [r for r in rows if r["view"] != "checking"]
    summary = {
        "heldout_psnr_mean": float(np.mean([r["psnr_render"] for r in held])) if held else float("nan"),
        "heldout_psnr_min": float(np.min([r["psnr_render"] for r in held])) if held else float("nan"),
        "heldout_ssim_mean": float(np.mean([r["ssim_render"] for r in held])) if held else float("nan"),
        "checking_psnr": rows[-1]["psnr_render"],
    }
    rec = recover(ck, scene)
    summary.update(rec.metrics)
    summary.update({f"null_{k}": v for k, v in rec.negative.items()})
    return {"views": rows, "summary": summary}


def robustness_sweep(ck: Checkpoint, scene: GaussianScene, spec: PerturbSpec) -> list:
    """One row per sweep value: perturb the checking render, decode, score.

    ``ssim_render`` compares the perturbed render with the clean one.
    """
    if ck.step == 0:
        warnings.warn("robustness sweep on an untrained checkpoint", RuntimeWarning, stacklevel=2)
    s = _Session(ck)
    clean = s.render(scene)
    rows = []
    for value in spec.sweep:
        pert = apply(spec.kind, clean, value, spec.seed).astype(s.dtype)
        rec = s.decode(pert)
        rows.append({
            "param": float(value),
            "ssim_render": ssim(pert, clean),
            "ssim_hidden": rec.metrics.get("ssim_hidden", float("nan")),
            "psnr_hidden": rec.metrics.get("psnr_hidden", float("nan")),
            "bit_acc": rec.metrics.get("bit_acc", float("nan")),
        })
    return rows


def non_increasing(values: Sequence[float], slack: float = 0.02) -> bool:
    """True when no value exceeds any earlier one by more than ``slack``."""
    best = np.inf
    for v in values:
        if v > best + slack:
            return False
        best = min(best, v)
    return True


def stego_from_checkpoint(ck: Checkpoint) -> GaussianScene:
    """Regenerate the steganographic scene from the stored parameters."""
    from .embed import generate
    from .train import generator_config

    cfg = config_from_dict(ck.config)
    return generate(ck.base_scene, ck.hidden_tokens, ck.store, generator_config(cfg)).to_scene()
