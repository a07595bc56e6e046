"""Training loop: losses, gradient harmonization, role-scoped updates."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .camera import CameraRig, orbit_rig
from .config import Config
from .decode import DecoderConfig, decoder_forward, init_decoder
from .embed import (GeneratorConfig, HiddenEncoder, Payload, extract_hidden_features, feature_dim, generate,
                    init_generator, null_image, primitive_features, resize_image)
from .metrics import psnr, ssim
from .optim import ParamStore, adamw_step
from .perturb import augment
from .rasterizer import render_tensor, tile_render
from .scene import GaussianScene

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "loss_total", "loss_rgb", "loss_dec_pos", "loss_dec_neg", "psnr_render",
               "psnr_hidden", "ssim_hidden", "bit_acc", "mask_keep_frac")


class TrainingAborted(RuntimeError):
    """Training stopped on a non-finite loss or divergence; the trainer holds the last good state."""


@dataclass(frozen=True)
class LossWeights:
    dec_pos: float = 0.3
    dec_neg: float = 1.0
    rgb: float = 0.1

    def __post_init__(self):
        w = (self.dec_pos, self.dec_neg, self.rgb)
        if min(w) < 0 or max(w) <= 0:
            raise ValueError("loss weights must be non-negative with at least one positive")


def total_loss(dec_pos, dec_neg, rgb, weights: LossWeights = LossWeights()):
    """Weighted sum of the three terms; works on floats and tensors alike."""
    parts = [(weights.dec_pos, dec_pos), (weights.dec_neg, dec_neg), (weights.rgb, rgb)]
    if any(isinstance(t, Tensor) for _, t in parts):
        out = None
        for w, t in parts:
            if w == 0:
                continue
            term = ad.scale(t, w) if isinstance(t, Tensor) else w * t
            out = term if out is None else ad.add(out, term)
        return out
    return sum(w * t for w, t in parts)


def l1(a, b) -> Tensor:
    return ad.mean(ad.abs(ad.sub(a, b)))


def l2(a, b) -> Tensor:
    d = ad.sub(a, b)
    return ad.mean(ad.mul(d, d))


NORMS = {"l1": l1, "l2": l2}


def loss_rgb(renders, references) -> Tensor:
    """Mean absolute pixel error, averaged over views."""
    if len(renders) != len(references) or not renders:
        raise ValueError("loss_rgb needs matching non-empty render lists")
    terms = [l1(r, ref) for r, ref in zip(renders, references)]
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return ad.scale(out, 1.0 / len(terms))


def loss_dec_pos(decoded, payload: Payload, logits: Optional[Tensor] = None, norm: str = "l2") -> Tensor:
    """Reconstruction error to the hidden image, or BCE on the bit head for bit payloads."""
    if payload.kind == "bits":
        if logits is None:
            raise ValueError("bit payloads need bit-head logits")
        n = payload.data.size
        if logits.shape[-1] < n:
            raise ValueError(f"bit head has {logits.shape[-1]} outputs, payload needs {n}")
        return ad.bce_with_logits(logits[..., :n], payload.data.astype(logits.dtype).reshape(logits.shape[:-1] + (n,)))
    target = np.asarray(payload.data, dtype=decoded.dtype)
    if target.shape != decoded.shape[-3:]:
        raise ValueError(f"hidden image {target.shape} does not match decoder output {decoded.shape}")
    return NORMS[norm](decoded, target)


def loss_dec_neg(decoded, null, norm: str = "l2") -> Tensor:
    return NORMS[norm](decoded, np.asarray(null, dtype=decoded.dtype))


def loss_bits_null(logits: Tensor, n: int) -> Tensor:
    """Squared distance of clean-render bit probabilities from the all-zero null string."""
    p = ad.sigmoid(logits[..., :n])
    return ad.mean(ad.mul(p, p))


# ---------------------------------------------------------------- harmonization


def harmonize(g_rgb: dict, g_dec: dict, granularity: str = "group") -> dict:
    """Binary keep-mask per parameter group.

    ``group``: 1 where cos(g_rgb, g_dec) > 0 over the whole group (zero-norm
    groups get 0). ``element``: per-scalar sign agreement.
    """
    if set(g_rgb) != set(g_dec):
        raise ValueError("gradient sets cover different parameter groups")
    masks = {}
    for name, a in g_rgb.items():
        b = g_dec[name]
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ValueError(f"gradient shapes differ for {name!r}: {a.shape} vs {b.shape}")
        if granularity == "group":
            na, nb = np.linalg.norm(a), np.linalg.norm(b)
            keep = na > 0 and nb > 0 and float(np.vdot(a, b)) / (na * nb) > 0
            masks[name] = np.full(a.shape, 1.0 if keep else 0.0)
        elif granularity == "element":
            masks[name] = (a * b > 0).astype(np.float64)
        else:
            raise ValueError(f"unknown granularity {granularity!r}")
    return masks


# ---------------------------------------------------------------- setup


def build_payload(cfg: Config) -> Payload:
    from .synth import emoji_image, pattern_image, random_bits

    p = cfg.payload
    if p.kind == "bits":
        return Payload.bits(random_bits(p.bits, p.seed))
    if p.source == "pattern":
        img = pattern_image(cfg.model.hidden_resolution, p.seed)
    elif p.source == "emoji":
        img = emoji_image(cfg.model.hidden_resolution, p.seed)
    elif p.source == "png":
        from .io.png import load_png
        img = load_png(p.path)
    else:
        raise ValueError(f"unknown payload source {p.source!r}")
    return Payload.image(resize_image(np.asarray(img, dtype=np.float32), cfg.model.hidden_resolution))


def build_base_scene(cfg: Config) -> GaussianScene:
    from .synth import synth_scene

    s = cfg.scene
    if s.path:
        from .io.ply import load_ply
        return load_ply(s.path)
    return synth_scene(s.shape, s.prim_count, s.texture_seed)


def build_rig(cfg: Config) -> CameraRig:
    r = cfg.rig
    return orbit_rig(r.cameras, r.heldout, r.radius, r.fov_deg, cfg.train.resolution, r.checking_index)


def generator_config(cfg: Config) -> GeneratorConfig:
    m = cfg.model
    return GeneratorConfig(m.d, m.hidden, m.pe_freqs, m.heads, tuple(m.deltas), m.injection)


def decoder_config(cfg: Config) -> DecoderConfig:
    m = cfg.model
    return DecoderConfig(tuple(m.decoder_widths), cfg.train.resolution, m.hidden_resolution,
                         m.decoder_pos_freqs, m.max_bits)


def hidden_encoder(cfg: Config) -> HiddenEncoder:
    m = cfg.model
    imported = None
    if m.encoder == "file_import":
        from .io.features import load_feature_file
        imported = load_feature_file(m.feature_file)
    return HiddenEncoder(m.d, m.patch_size, m.hidden_resolution, m.init_seed, m.encoder, m.max_bits, imported)


def init_params(cfg: Config, reference: Optional[np.ndarray] = None) -> ParamStore:
    store = ParamStore()
    init_generator(store, generator_config(cfg), feature_dim(cfg.model.pe_freqs), cfg.model.init_seed)
    init_decoder(store, decoder_config(cfg), cfg.model.init_seed + 1, reference)
    return store


# ---------------------------------------------------------------- trainer


@dataclass
class StepResult:
    metrics: dict
    masks: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)


class Trainer:
    """Owns the training state: parameters, base scene, rig, payload and RNG."""

    def __init__(self, cfg: Config, base: Optional[GaussianScene] = None, rig: Optional[CameraRig] = None,
                 payload: Optional[Payload] = None, store: Optional[ParamStore] = None):
        self.cfg = cfg.validate()
        self.base = base if base is not None else build_base_scene(cfg)
        if len(self.base) == 0:
            raise ValueError("base scene is empty")
        self.rig = rig if rig is not None else build_rig(cfg)
        self.payload = payload if payload is not None else build_payload(cfg)
        self.gen_cfg = generator_config(cfg)
        self.dec_cfg = decoder_config(cfg)
        self.encoder = hidden_encoder(cfg)
        self.f_h = extract_hidden_features(self.payload, self.encoder)
        self.features = primitive_features(self.base, self.gen_cfg.pe_freqs)
        t = cfg.train
        if store is None:
            ref = tile_render(self.base, self.rig.checking, t.tile_size).pixels
            store = init_params(cfg, ref)
        self.store = store
        self.weights = LossWeights(t.lambda_dec_pos, t.lambda_dec_neg, t.lambda_rgb)
        self.null = null_image(cfg.model.hidden_resolution, cfg.payload.null_value)
        self.rng = np.random.default_rng(t.seed)
        self.step = 0
        self.history: list = []
        self._over = 0
        self._good = None
        self._ref_cache: dict = {}
        for c in self.rig.cameras:
            if c.width != t.resolution or c.height != t.resolution:
                raise ValueError("rig camera resolution differs from train.resolution")

    # -- reference renders of the base scene (constant, cached)

    def reference(self, index: int) -> np.ndarray:
        if index not in self._ref_cache:
            img = tile_render(self.base, self.rig.cameras[index], self.cfg.train.tile_size).pixels
            self._ref_cache[index] = img.astype(self.store["enc.w1"].dtype)
        return self._ref_cache[index]

    @property
    def harmonized_names(self) -> list:
        roles = ("theta",) if self.cfg.train.harmonize.scope == "theta" else ("theta", "phi")
        return self.store.names(roles)

    def _render(self, gen, index: int) -> Tensor:
        return render_tensor(*gen.tensors(), gen.background, self.rig.cameras[index], self.cfg.train.tile_size)

    def train_step(self, keep_grads: bool = False) -> StepResult:
        t = self.cfg.train
        store = self.store
        views = self.rng.choice(self.rig.training_indices(), size=t.views_per_step, replace=False)
        check = self.rig.checking_index
        with Tape() as tape:
            gen = generate(self.base, self.f_h, store, self.gen_cfg, self.features)
            renders = [self._render(gen, int(i)) for i in views]
            refs = [self.reference(int(i)) for i in views]
            l_rgb = loss_rgb(renders, refs)
            r_check = self._render(gen, check)
            r0_check = ad.tensor(self.reference(check), dtype=r_check.dtype)
            batch = ad.concat([ad.reshape(r_check, (1,) + r_check.shape),
                               ad.reshape(r0_check, (1,) + r0_check.shape)], axis=0)
            batch = augment(batch, t.augmentation, self.rng)
            imgs, logits = decoder_forward(batch, store, self.dec_cfg)
            if self.payload.kind == "bits":
                l_pos = loss_dec_pos(None, self.payload, logits[0])
            else:
                l_pos = loss_dec_pos(imgs[0], self.payload, norm=t.dec_loss)
            l_neg = loss_dec_neg(imgs[1], self.null, norm=t.dec_loss)
            if self.payload.kind == "bits":
                l_neg = ad.add(l_neg, loss_bits_null(logits[1], self.payload.data.size))
            w = self.weights
            dec = ad.add(ad.scale(l_pos, w.dec_pos), ad.scale(l_neg, w.dec_neg))
            total = ad.add(dec, ad.scale(l_rgb, w.rgb))

        names = store.names()
        tensors = [store[n] for n in names]
        g_dec = dict(zip(names, tape.gradient(dec, tensors)))
        gen_names = store.names(("theta", "phi"))
        g_rgb = dict(zip(gen_names, tape.gradient(l_rgb, [store[n] for n in gen_names])))

        scope = self.harmonized_names
        masks = {}
        if t.harmonize.enabled:
            sub_rgb = {n: g_rgb[n] for n in scope}
            if all(not np.any(g) for g in sub_rgb.values()):
                # Omega == Omega_0: the L1 subgradient vanishes and there is nothing to conflict with
                masks = {n: np.ones_like(g_rgb[n], dtype=np.float64) for n in scope}
            else:
                masks = harmonize(sub_rgb, {n: g_dec[n] for n in scope}, t.harmonize.granularity)
        grads = []
        for n in names:
            g = g_dec[n]
            if n in g_rgb:
                g = g + g.dtype.type(w.rgb) * g_rgb[n]
            if n in masks:
                g = (g * masks[n]).astype(g.dtype)
            grads.append(g)
        store.set_grads(names, grads)
        adamw_step(store, lr=t.lr, beta1=t.beta1, beta2=t.beta2, eps=t.eps, weight_decay=t.weight_decay,
                   masks=masks)
        self.step += 1

        if masks:
            kept = sum(float(m.sum()) for m in masks.values())
            frac = kept / sum(m.size for m in masks.values())
        else:
            frac = 1.0
        metrics = {
            "step": self.step,
            "loss_total": float(total.data),
            "loss_rgb": float(l_rgb.data),
            "loss_dec_pos": float(l_pos.data),
            "loss_dec_neg": float(l_neg.data),
            "psnr_render": float(np.mean([psnr(r.data, ref) for r, ref in zip(renders, refs)])),
            "psnr_hidden": math.nan,
            "ssim_hidden": math.nan,
            "bit_acc": math.nan,
            "mask_keep_frac": frac,
        }
        if self.payload.kind == "image":
            metrics["psnr_hidden"] = psnr(imgs.data[0], self.payload.data)
            metrics["ssim_hidden"] = ssim(imgs.data[0], self.payload.data)
        else:
            n = self.payload.data.size
            pred = (logits.data[0, :n] > 0).astype(np.uint8)
            metrics["bit_acc"] = float(np.mean(pred == self.payload.data))
        return StepResult(metrics, masks if keep_grads else {}, {"g_rgb": g_rgb, "g_dec": g_dec} if keep_grads else {})

    # -- loop with divergence guard

    def snapshot(self) -> dict:
        return {"store": self.store.copy(), "rng": copy.deepcopy(self.rng.bit_generator.state),
                "step": self.step, "history": list(self.history)}

    def restore(self, snap: dict) -> None:
        self.store = snap["store"].copy()
        self.rng.bit_generator.state = copy.deepcopy(snap["rng"])
        self.step = snap["step"]
        self.history = list(snap["history"])

    def run(self, steps: Optional[int] = None, on_step: Optional[Callable[[dict], None]] = None,
            on_checkpoint: Optional[Callable[["Trainer"], None]] = None) -> list:
        t = self.cfg.train
        steps = t.steps if steps is None else steps
        rows = []
        self._good = self.snapshot()
        for _ in range(steps):
            try:
                res = self.train_step()
            except NonFiniteError as exc:
                self.restore(self._good)
                raise TrainingAborted(f"non-finite value at step {self.step + 1}: {exc}") from exc
            m = res.metrics
            if not math.isfinite(m["loss_total"]):
                self.restore(self._good)
                raise TrainingAborted(f"non-finite loss at step {m['step']}")
            median = float(np.median(self.history)) if self.history else math.inf
            self.history.append(m["loss_total"])
            if m["loss_total"] > t.divergence_factor * median:
                self._over += 1
                if self._over >= t.divergence_patience:
                    self.restore(self._good)
                    raise TrainingAborted(f"loss above {t.divergence_factor}x its running median for "
                                          f"{t.divergence_patience} steps")
            else:
                self._over = 0
                self._good = self.snapshot()
            rows.append(m)
            if on_step:
                on_step(m)
            if on_checkpoint and t.checkpoint_every and self.step % t.checkpoint_every == 0:
                on_checkpoint(self)
        return rows

    # -- outputs

    def stego_scene(self) -> GaussianScene:
        gen = generate(self.base, self.f_h, self.store, self.gen_cfg, self.features)
        return gen.to_scene()

    @classmethod
    def from_checkpoint(cls, ck) -> "Trainer":
        """Resume: parameters, optimizer moments, RNG state and step counter."""
        from .config import config_from_dict

        tr = cls(config_from_dict(ck.config), base=ck.base_scene, rig=ck.rig,
                 payload=Payload(ck.payload_kind, ck.payload), store=ck.store.copy())
        tr.step = ck.step
        if ck.rng_state is not None:
            tr.rng.bit_generator.state = copy.deepcopy(ck.rng_state)
        return tr

    def checkpoint(self):
        """Snapshot as a :class:`~splatstego.io.checkpoint.Checkpoint`."""
        from .io.checkpoint import Checkpoint

        return Checkpoint(self.store.copy(), self.rig, self.cfg.to_dict(), self.base, self.payload.kind,
                          self.payload.data.copy(), self.f_h.copy(), self.cfg.train.seed, self.step,
                          copy.deepcopy(self.rng.bit_generator.state))
