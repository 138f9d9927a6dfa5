"""Bias-controlled synthetic dataset for enhancement quality assessment.

Scenes are procedural low-light images; enhancement operators are
parametric pipelines whose tint and saturation parameters are pure
"style" (they never move the score) while gamma, tone curve, sharpening
and noise are genuine quality factors. The score is a documented closed
form of luminance-plane quality factors only, so the algorithm style is
a nuisance by construction.

Score closed form (all factors computed on the luminance plane, i.e. the
per-pixel mean over channels, of the float enhanced image):

    brightness  B = max(0, 1 - dist(mean_lum, [0.40, 0.60]) / 0.35)
    clipping    C = max(0, 1 - clip_frac / 0.10)        clip_frac = share of
                                                        lum <= 0.002 or >= 0.998
    noise       N = max(0, 1 - max(0, sigma_est - 0.004) / 0.05)
    contrast    K = min(1, std(blur(lum, 2)) / 0.08)

    mos = 100 * max(0, 1 - 0.40*(1-B) - 0.25*(1-C) - 0.15*(1-N) - 0.20*(1-K))

sigma_est is a median-based high-frequency noise estimate (3x3 separable
second-difference mask). Tint offsets are zero-mean across channels and
saturation rescales chroma around the per-pixel luminance, so neither
can change any factor above; the final range clip compresses chroma
instead of shifting luminance for the same reason.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.interpolate import PchipInterpolator
from scipy.ndimage import convolve, gaussian_filter

MANIFEST_HEADER_RE = re.compile(r"^#eiqa-manifest v1 seed=(\d+) k=(\d+) size=(\d+)$")

# score constants (see module docstring)
MOS_MAX = 100.0
BRIGHT_LO, BRIGHT_HI, BRIGHT_SPAN = 0.40, 0.60, 0.35
CLIP_EPS, CLIP_TOL = 0.002, 0.10
NOISE_FREE, NOISE_TOL = 0.004, 0.05
CONTRAST_TARGET = 0.08
W_BRIGHT, W_CLIP, W_NOISE, W_CONTRAST = 0.40, 0.25, 0.15, 0.20

TONE_X = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
IDENTITY_TONE_KNOTS = (0.25, 0.5, 0.75, 1.0)

# operator parameter ranges: gamma / tone / sharpen / noise move real quality
# factors, tint / saturation are style-only by construction
OPERATOR_RANGES = {
    "gamma": (0.40, 0.95),
    "tone_s": (-0.35, 0.35),
    "tone_top": (0.82, 1.0),
    "tint_mag": (0.015, 0.07),
    "saturation": (0.60, 1.45),
    "sharpen": (0.0, 1.1),
    "noise_sigma": (0.003, 0.028),
    "tint_field_amp": (0.02, 0.10),
}

# per-record style wobble around the operator's base style: real enhancers do
# not produce one pixel-exact style, so each enhanced image gets a small
# zero-mean tint and saturation perturbation (still score-neutral)
RECORD_TINT_JITTER = 0.035
RECORD_SAT_JITTER = 0.12

# scene chroma: color-cast strength of the content itself; the additive cast
# has the same (luminance-neutral, additive) signature as an operator tint,
# so scene palettes genuinely compete with algorithm styles
SCENE_CHROMA_AMP = (0.05, 0.22)
SCENE_CAST = 0.05
SCENE_ADD_CAST = 0.05

# minimum per-parameter differences; two operators must clear at least
# two of these margins to count as distinct styles
STYLE_MARGINS = {
    "gamma": 0.03,
    "tone_y1": 0.02,
    "tone_y3": 0.02,
    "tint_r": 0.01,
    "tint_g": 0.01,
    "tint_b": 0.01,
    "saturation": 0.05,
    "sharpen": 0.06,
    "noise_sigma": 0.0015,
    "tint_field_amp": 0.01,
}
MIN_DISTINCT_PARAMS = 2

_SCENE_MAX = 0.62
_LUM_MEAN_LO, _LUM_MEAN_HI = 0.02, 0.25

# half-normal median of the unit-variance second-difference response
_HALF_NORMAL_MEDIAN = 0.6744897501960817
_NOISE_MASK = np.array([[1.0, -2.0, 1.0], [-2.0, 4.0, -2.0], [1.0, -2.0, 1.0]])


class ManifestParseError(ValueError):
    """Malformed manifest file; carries the offending line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ManifestValidationError(ValueError):
    """Structurally valid file whose contents violate manifest invariants."""


@dataclass(frozen=True)
class RawScene:
    scene_id: int
    env_id: int
    pixels: np.ndarray  # (H, W, 3) float64 in [0, 1]


@dataclass(frozen=True)
class EnhancementOperator:
    """One parametric enhancer. tint/saturation/tint_field_amp are pure style;
    gamma, tone, sharpening and noise are quality factors."""

    algo_id: int
    gamma: float
    tone_knots: tuple[float, float, float, float]  # y at x=(0.25, 0.5, 0.75) plus top at x=1
    tint: tuple[float, float, float]  # zero-mean per-channel offsets
    saturation: float
    sharpen: float
    noise_sigma: float
    tint_field_amp: float = 0.0  # amplitude of the smooth color-rendition field

    def style_param_dict(self) -> dict[str, float]:
        return {
            "gamma": self.gamma,
            "tone_y1": self.tone_knots[0],
            "tone_y3": self.tone_knots[2],
            "tint_r": self.tint[0],
            "tint_g": self.tint[1],
            "tint_b": self.tint[2],
            "saturation": self.saturation,
            "sharpen": self.sharpen,
            "noise_sigma": self.noise_sigma,
            "tint_field_amp": self.tint_field_amp,
        }


def identity_operator(algo_id: int = 0) -> EnhancementOperator:
    return EnhancementOperator(
        algo_id=algo_id,
        gamma=1.0,
        tone_knots=IDENTITY_TONE_KNOTS,
        tint=(0.0, 0.0, 0.0),
        saturation=1.0,
        sharpen=0.0,
        noise_sigma=0.0,
    )


@dataclass(frozen=True)
class SampleRecord:
    scene_id: int
    env_id: int
    algo_id: int
    enhanced_path: str
    mos: float


@dataclass(frozen=True)
class Manifest:
    records: tuple[SampleRecord, ...]
    k_algorithms: int
    generation_seed: int
    image_size: int


@dataclass(frozen=True)
class DatasetConfig:
    n_scenes: int = 290
    k_algorithms: int = 10
    size: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.n_scenes < 10:
            raise ValueError(f"n_scenes must be >= 10, got {self.n_scenes}")
        if self.k_algorithms < 4:
            raise ValueError(f"k_algorithms must be >= 4, got {self.k_algorithms}")
        if self.size < 16:
            raise ValueError(f"size must be >= 16, got {self.size}")


def scene_seed(master_seed: int, scene_id: int) -> int:
    """Per-scene seed mixing: parallel-schedule independent by construction."""
    return int(np.random.SeedSequence([master_seed, scene_id]).generate_state(1)[0])


def generate_scene(seed: int, size: int, env_id: int) -> RawScene:
    """Procedural low-light scene: gradient field + geometric shapes + smooth texture.

    Deterministic in (seed, size); mean luminance lands in [0.02, 0.25].
    """
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    ax = np.linspace(0.0, 1.0, size)
    xx, yy = np.meshgrid(ax, ax, indexing="xy")

    coef = rng.uniform(-1.0, 1.0, size=6)
    lum = coef[0] + coef[1] * xx + coef[2] * yy + coef[3] * xx * yy + coef[4] * xx**2 + coef[5] * yy**2

    for _ in range(int(rng.integers(4, 10))):
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        half = rng.uniform(0.05, 0.3)
        mult = rng.uniform(0.35, 1.9)
        if rng.random() < 0.5:
            mask = (np.abs(xx - cx) < half) & (np.abs(yy - cy) < half)
        else:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < half**2
        lum = np.where(mask, lum * mult + rng.uniform(-0.2, 0.3), lum)

    texture = gaussian_filter(rng.standard_normal((size, size)), sigma=rng.uniform(1.0, 2.0))
    lum = lum + rng.uniform(0.04, 0.12) * texture / max(texture.std(), 1e-9)

    lo, hi = lum.min(), lum.max()
    lum = (lum - lo) / max(hi - lo, 1e-9)
    target_mean = rng.uniform(0.035, 0.22)
    scale = min(target_mean / max(lum.mean(), 1e-9), _SCENE_MAX)
    lum = lum * scale
    mean = lum.mean()
    if mean < _LUM_MEAN_LO or mean > _LUM_MEAN_HI:
        lum = lum * (np.clip(mean, _LUM_MEAN_LO + 1e-3, _LUM_MEAN_HI - 1e-3) / mean)

    # zero-sum chroma offsets: content color cast that never moves luminance
    amp = rng.uniform(*SCENE_CHROMA_AMP)
    a = gaussian_filter(rng.standard_normal((size, size)), sigma=3.0)
    b = gaussian_filter(rng.standard_normal((size, size)), sigma=3.0)
    a = amp * a / max(np.abs(a).max(), 1e-9) + rng.uniform(-SCENE_CAST, SCENE_CAST)
    b = amp * b / max(np.abs(b).max(), 1e-9) + rng.uniform(-SCENE_CAST, SCENE_CAST)
    offsets = np.stack([a, b, -a - b], axis=2)
    peak = np.abs(offsets).max()
    if peak > 0.4:
        offsets = offsets * (0.4 / peak)
    pixels = lum[:, :, None] * (1.0 + offsets)

    # additive zero-sum cast, ramped down in the deepest shadows so pixels
    # stay nonnegative; per-pixel channel mean is untouched
    u = rng.uniform(-1.0, 1.0, size=3)
    cast = (u - u.mean()) * rng.uniform(0.3, 1.0) * SCENE_ADD_CAST
    ramp = np.clip(lum / 0.2, 0.0, 1.0)[:, :, None]
    pixels = pixels + ramp * cast[None, None, :]

    return RawScene(scene_id=0, env_id=env_id, pixels=np.clip(pixels, 0.0, 1.0))


def make_operators(k: int, seed: int) -> list[EnhancementOperator]:
    """Draw k enhancement operators with pairwise-distinct style parameters.

    Each parameter is sampled with stratified draws (one per operator, strata
    independently permuted), so every bank spans the quality and style ranges
    instead of clumping by luck.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE1]))
    for _ in range(200):
        bank = _draw_operator_bank(rng, k)
        if all(
            _distinct_styles(bank[i], bank[j]) for i in range(k) for j in range(i + 1, k)
        ):
            return bank
    raise RuntimeError("could not place distinct operators; widen parameter ranges")


def _stratified(rng: np.random.Generator, k: int, lo: float, hi: float) -> np.ndarray:
    width = (hi - lo) / k
    return lo + (rng.permutation(k) + rng.uniform(0.0, 1.0, size=k)) * width


def _draw_operator_bank(rng: np.random.Generator, k: int) -> list[EnhancementOperator]:
    r = OPERATOR_RANGES
    gamma = _stratified(rng, k, *r["gamma"])
    tone_s = _stratified(rng, k, *r["tone_s"])
    top = _stratified(rng, k, *r["tone_top"])
    tint_mag = _stratified(rng, k, *r["tint_mag"])
    saturation = _stratified(rng, k, *r["saturation"])
    sharpen = _stratified(rng, k, *r["sharpen"])
    sigma = _stratified(rng, k, *r["noise_sigma"])
    field_amp = _stratified(rng, k, *r["tint_field_amp"])
    ops = []
    for i in range(k):
        y1 = top[i] * (0.25 - tone_s[i] * math.sin(2 * math.pi * 0.25) / (2 * math.pi))
        y2 = top[i] * 0.5
        y3 = top[i] * (0.75 - tone_s[i] * math.sin(2 * math.pi * 0.75) / (2 * math.pi))
        u = rng.uniform(-1.0, 1.0, size=3)
        u = u - u.mean()
        tint = u * (tint_mag[i] / max(np.abs(u).max(), 1e-9))
        ops.append(
            EnhancementOperator(
                algo_id=i,
                gamma=float(gamma[i]),
                tone_knots=(float(y1), float(y2), float(y3), float(top[i])),
                tint=(float(tint[0]), float(tint[1]), float(tint[2])),
                saturation=float(saturation[i]),
                sharpen=float(sharpen[i]),
                noise_sigma=float(sigma[i]),
                tint_field_amp=float(field_amp[i]),
            )
        )
    return ops


def _distinct_styles(a: EnhancementOperator, b: EnhancementOperator) -> bool:
    pa, pb = a.style_param_dict(), b.style_param_dict()
    cleared = sum(1 for name, margin in STYLE_MARGINS.items() if abs(pa[name] - pb[name]) >= margin)
    return cleared >= MIN_DISTINCT_PARAMS


def jitter_operator(op: EnhancementOperator, seed: int, scene_id: int) -> EnhancementOperator:
    """Per-record variant of an operator: zero-mean tint wobble, saturation wobble.

    Deterministic in (seed, scene_id, op.algo_id); quality parameters are
    untouched, so the wobble is as score-neutral as the base style.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, scene_id, op.algo_id, 0x7]))
    delta = rng.uniform(-RECORD_TINT_JITTER, RECORD_TINT_JITTER, size=3)
    delta = delta - delta.mean()
    sat = op.saturation * float(rng.uniform(1.0 - RECORD_SAT_JITTER, 1.0 + RECORD_SAT_JITTER))
    return replace(
        op,
        tint=tuple(float(t + d) for t, d in zip(op.tint, delta)),
        saturation=max(sat, 0.05),
    )


def apply_enhancement(raw: RawScene, op: EnhancementOperator) -> np.ndarray:
    """Run the enhancement pipeline: gamma, tone, tint, saturation, sharpen, noise, clip.

    The noise realization depends only on the raw scene content (not on the
    operator), so operators that agree on all quality parameters produce
    luminance-identical outputs no matter their tint/saturation.
    """
    x = np.asarray(raw.pixels, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) pixels, got {x.shape}")

    if op.gamma != 1.0:
        x = x**op.gamma
    x = _apply_tone(x, op.tone_knots)
    if any(t != 0.0 for t in op.tint):
        x = x + np.array(op.tint)[None, None, :]
    if op.tint_field_amp != 0.0:
        x = x + op.tint_field_amp * _tint_field(raw, op.algo_id)
    if op.saturation != 1.0:
        lum = x.mean(axis=2, keepdims=True)
        x = lum + op.saturation * (x - lum)
    if op.sharpen != 0.0:
        x = x + op.sharpen * (x - gaussian_filter(x, sigma=(1.0, 1.0, 0.0), mode="nearest"))
    if op.noise_sigma != 0.0:
        x = x + op.noise_sigma * _scene_noise_field(raw)
    return _clip_chroma_preserving(x)


def _apply_tone(x: np.ndarray, knots: tuple[float, float, float, float]) -> np.ndarray:
    if tuple(knots) == IDENTITY_TONE_KNOTS:
        return x
    y = np.array([0.0, knots[0], knots[1], knots[2], knots[3]])
    if not np.all(np.diff(y) > 0):
        raise ValueError(f"tone knots must be strictly increasing, got {knots}")
    return PchipInterpolator(TONE_X, y)(x)


def _scene_noise_field(raw: RawScene) -> np.ndarray:
    rng = np.random.default_rng(_content_seed(raw.pixels, 0))
    return rng.standard_normal(raw.pixels.shape)


def _tint_field(raw: RawScene, algo_id: int) -> np.ndarray:
    """Smooth per-record color-rendition field, exactly luminance-neutral.

    A coarse random grid per channel is upsampled, spatial means are removed
    per channel (no net tint) and the cross-channel mean is removed per pixel
    (no luminance effect), so the field is pure spatially-varying chroma.
    """
    h, w, _ = raw.pixels.shape
    rng = np.random.default_rng(_content_seed(raw.pixels, algo_id + 1))
    coarse = rng.standard_normal((3, 3, 3))
    field = np.stack(
        [_bilinear_upsample(coarse[:, :, c], h, w) for c in range(3)],
        axis=2,
    )
    field -= field.mean(axis=(0, 1), keepdims=True)
    field -= field.mean(axis=2, keepdims=True)
    peak = np.abs(field).max()
    return field / max(peak, 1e-9)


def _bilinear_upsample(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    gy = np.linspace(0.0, grid.shape[0] - 1.0, h)
    gx = np.linspace(0.0, grid.shape[1] - 1.0, w)
    y0 = np.clip(np.floor(gy).astype(int), 0, grid.shape[0] - 2)
    x0 = np.clip(np.floor(gx).astype(int), 0, grid.shape[1] - 2)
    fy = (gy - y0)[:, None]
    fx = (gx - x0)[None, :]
    tl = grid[np.ix_(y0, x0)]
    tr = grid[np.ix_(y0, x0 + 1)]
    bl = grid[np.ix_(y0 + 1, x0)]
    br = grid[np.ix_(y0 + 1, x0 + 1)]
    return tl * (1 - fy) * (1 - fx) + tr * (1 - fy) * fx + bl * fy * (1 - fx) + br * fy * fx


def _content_seed(pixels: np.ndarray, tag: int) -> int:
    digest = hashlib.blake2b(
        np.ascontiguousarray(pixels).tobytes() + tag.to_bytes(8, "little"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def _clip_chroma_preserving(x: np.ndarray) -> np.ndarray:
    """Bring pixels into [0, 1] by clipping luminance and compressing chroma.

    Pixels already in range are returned bit-identical; out-of-range pixels
    keep their (clipped) luminance while the per-channel deviation is scaled
    down just enough to fit.
    """
    lum = x.mean(axis=2, keepdims=True)
    lum_c = np.clip(lum, 0.0, 1.0)
    x = x + (lum_c - lum)
    dev = x - lum_c
    with np.errstate(divide="ignore", invalid="ignore"):
        room_up = np.where(dev > 0, (1.0 - lum_c) / dev, np.inf)
        room_dn = np.where(dev < 0, (0.0 - lum_c) / dev, np.inf)
    alpha = np.minimum(room_up.min(axis=2, keepdims=True), room_dn.min(axis=2, keepdims=True))
    alpha = np.clip(alpha, 0.0, 1.0)
    need = ((x < 0.0) | (x > 1.0)).any(axis=2, keepdims=True)
    out = np.where(need, lum_c + alpha * dev, x)
    return np.clip(out, 0.0, 1.0)


def synth_mos(raw: RawScene, enhanced: np.ndarray) -> float:
    """Score in [0, 100] from luminance-plane quality factors only (see module docstring)."""
    enhanced = np.asarray(enhanced, dtype=np.float64)
    if enhanced.shape != raw.pixels.shape:
        raise ValueError(f"shape mismatch: raw {raw.pixels.shape} vs enhanced {enhanced.shape}")
    lum = enhanced.mean(axis=2)

    mean_lum = lum.mean()
    dist = max(BRIGHT_LO - mean_lum, mean_lum - BRIGHT_HI, 0.0)
    brightness = max(0.0, 1.0 - dist / BRIGHT_SPAN)

    clip_frac = float(np.mean((lum <= CLIP_EPS) | (lum >= 1.0 - CLIP_EPS)))
    clipping = max(0.0, 1.0 - clip_frac / CLIP_TOL)

    noise = max(0.0, 1.0 - max(0.0, estimate_noise_sigma(lum) - NOISE_FREE) / NOISE_TOL)

    contrast = min(1.0, float(gaussian_filter(lum, sigma=2.0).std()) / CONTRAST_TARGET)

    deficiency = (
        W_BRIGHT * (1.0 - brightness)
        + W_CLIP * (1.0 - clipping)
        + W_NOISE * (1.0 - noise)
        + W_CONTRAST * (1.0 - contrast)
    )
    return float(MOS_MAX * max(0.0, 1.0 - deficiency))


def estimate_noise_sigma(lum: np.ndarray) -> float:
    """Median-based noise estimate from the 3x3 second-difference response."""
    response = convolve(lum, _NOISE_MASK, mode="nearest")[1:-1, 1:-1]
    return float(np.median(np.abs(response)) / (6.0 * _HALF_NORMAL_MEDIAN))


def generate_dataset(config: DatasetConfig) -> tuple[Manifest, np.ndarray]:
    """Build the full dataset in memory.

    Returns the manifest plus a uint8 image stack aligned with the record
    order; scores come from the float image before quantization.
    """
    config.validate()
    operators = make_operators(config.k_algorithms, config.seed)
    records: list[SampleRecord] = []
    images = np.empty((config.n_scenes * config.k_algorithms, config.size, config.size, 3), dtype=np.uint8)
    i = 0
    for sid in range(config.n_scenes):
        env_id = sid // 10
        scene = replace(
            generate_scene(scene_seed(config.seed, sid), config.size, env_id),
            scene_id=sid,
        )
        for op in operators:
            enhanced = apply_enhancement(scene, jitter_operator(op, config.seed, sid))
            mos = round(synth_mos(scene, enhanced), 4)
            images[i] = np.round(enhanced * 255.0).astype(np.uint8)
            records.append(
                SampleRecord(
                    scene_id=sid,
                    env_id=env_id,
                    algo_id=op.algo_id,
                    enhanced_path=f"images/scene{sid:04d}_algo{op.algo_id:02d}.png",
                    mos=mos,
                )
            )
            i += 1
    manifest = Manifest(
        records=tuple(records),
        k_algorithms=config.k_algorithms,
        generation_seed=config.seed,
        image_size=config.size,
    )
    return manifest, images


def build_dataset(config: DatasetConfig, out_dir: str | Path) -> Manifest:
    """Generate and write the dataset: images/ plus manifest.tsv under out_dir."""
    out = Path(out_dir)
    manifest, images = generate_dataset(config)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for record, image in zip(manifest.records, images):
        Image.fromarray(image).save(out / record.enhanced_path, format="PNG")
    save_manifest(manifest, out / "manifest.tsv")
    return manifest


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    lines = [
        f"#eiqa-manifest v1 seed={manifest.generation_seed} "
        f"k={manifest.k_algorithms} size={manifest.image_size}"
    ]
    for r in manifest.records:
        lines.append(f"{r.scene_id}\t{r.env_id}\t{r.algo_id}\t{r.enhanced_path}\t{r.mos:.4f}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path, check_files: bool = True) -> Manifest:
    """Parse and validate a manifest file.

    Raises ManifestParseError with a line number on malformed input and
    ManifestValidationError on invariant violations (bad mos, duplicate
    records, missing image files, ...).
    """
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if not lines:
        raise ManifestParseError(1, "empty file")
    header = MANIFEST_HEADER_RE.match(lines[0])
    if header is None:
        raise ManifestParseError(1, f"bad header: {lines[0]!r}")
    seed, k, size = (int(g) for g in header.groups())

    records: list[SampleRecord] = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise ManifestParseError(line_no, f"expected 5 tab-separated fields, got {len(fields)}")
        try:
            scene_id, env_id, algo_id = int(fields[0]), int(fields[1]), int(fields[2])
            mos = float(fields[4])
        except ValueError as exc:
            raise ManifestParseError(line_no, str(exc)) from exc
        if not 0.0 <= mos <= 100.0:
            raise ManifestValidationError(f"line {line_no}: mos {mos} outside [0, 100]")
        records.append(
            SampleRecord(scene_id=scene_id, env_id=env_id, algo_id=algo_id, enhanced_path=fields[3], mos=mos)
        )

    if not records:
        raise ManifestValidationError("manifest contains no records")
    seen = set()
    for r in records:
        key = (r.scene_id, r.algo_id)
        if key in seen:
            raise ManifestValidationError(f"duplicate (scene_id, algo_id) pair {key}")
        seen.add(key)
    distinct_algos = len({r.algo_id for r in records})
    if distinct_algos != k:
        raise ManifestValidationError(f"header k={k} but {distinct_algos} distinct algo_ids present")
    per_scene: dict[int, int] = {}
    for r in records:
        per_scene[r.scene_id] = per_scene.get(r.scene_id, 0) + 1
    too_many = [s for s, c in per_scene.items() if c > k]
    if too_many:
        raise ManifestValidationError(f"scenes with more than k={k} records: {sorted(too_many)}")

    if check_files:
        missing = [r.enhanced_path for r in records if not (path.parent / r.enhanced_path).is_file()]
        if missing:
            raise ManifestValidationError(f"missing image files: {missing}")

    return Manifest(records=tuple(records), k_algorithms=k, generation_seed=seed, image_size=size)


def load_images(manifest: Manifest, root: str | Path) -> np.ndarray:
    """Load all enhanced images referenced by the manifest as float32 in [0, 1]."""
    root = Path(root)
    n = len(manifest.records)
    out = np.empty((n, manifest.image_size, manifest.image_size, 3), dtype=np.float32)
    for i, record in enumerate(manifest.records):
        with Image.open(root / record.enhanced_path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32)
        if arr.shape != (manifest.image_size, manifest.image_size, 3):
            raise ValueError(f"{record.enhanced_path}: expected size {manifest.image_size}, got {arr.shape}")
        out[i] = arr / 255.0
    return out


def images_from_uint8(images: np.ndarray) -> np.ndarray:
    """Quantized stack to the float32 form the training pipeline consumes."""
    return images.astype(np.float32) / 255.0


def subset_manifest(manifest: Manifest, indices) -> Manifest:
    """Manifest restricted to the given record indices (order preserved)."""
    records = tuple(manifest.records[i] for i in indices)
    if not records:
        raise ValueError("subset would be empty")
    return Manifest(
        records=records,
        k_algorithms=len({r.algo_id for r in records}),
        generation_seed=manifest.generation_seed,
        image_size=manifest.image_size,
    )
