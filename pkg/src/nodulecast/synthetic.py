"""Procedural generator for longitudinal nodule image pairs.

Every record holds a baseline image, a follow-up image produced by a
label-dependent progression operator, the tabular metadata that
parameterized the rendering, and a malignancy label. Generation is a pure
function of (seed, parameters): each record draws from its own seeded
stream, so records are independent and the whole dataset is reproducible
bit-for-bit.

Rendering conventions, all declared here rather than inferred:

* millimeters map to pixels at ``1 mm = 1.5 px`` for a 64-wide crop and
  scale linearly with crop size;
* the nodule is an ellipse whose boundary radius is modulated by a
  sinusoidal spiculation term; the edge is a logistic profile in signed
  pixel distance, so the 0.5-intensity contour coincides with the nominal
  boundary for every margin type;
* margins control edge softness and spiculation amplitude, attenuation
  controls interior intensity and texture;
* malignant progression multiplies both diameters by a log-normal growth
  factor with median 1.3 and raises spiculation amplitude; benign
  progression uses a log-normal with median 1.0 and small spread;
* baseline and follow-up share the same background field (plus a small
  independent perturbation) and the same nodule placement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .ehr import ATTENUATIONS, LOCATIONS, MARGINS, EhrRecord

MM_PER_PX_CROP = 64  # reference crop width for the mm->px scale
MM_TO_PX = 1.5  # at the reference crop width

# Growth-factor distributions (log-normal, parameterized by median).
MALIGNANT_GROWTH_MEDIAN = 1.3
MALIGNANT_GROWTH_SIGMA = 0.10
BENIGN_GROWTH_MEDIAN = 1.0
BENIGN_GROWTH_SIGMA = 0.03

# Malignant follow-ups sharpen and extend their spiculation.
MALIGNANT_SPIKE_GAIN = 1.6
MALIGNANT_SPIKE_FLOOR = 0.04

# margin type -> (edge softness in px at the reference crop, spike amplitude)
MARGIN_RENDER = {
    "Spiculated": (0.7, 0.14),
    "Smooth": (1.2, 0.0),
    "PoorlyDefined": (2.4, 0.05),
}

# attenuation -> (interior level, texture amplitude, solid-core level or None)
ATTENUATION_RENDER = {
    "Soft": (0.88, 0.03, None),
    "GroundGlass": (0.66, 0.06, None),
    "PartSolid": (0.66, 0.05, 0.88),
}

BACKGROUND_LEVEL = 0.22
BACKGROUND_AMP = 0.10
BACKGROUND_MAX = 0.45  # keeps background strictly below the 0.5 contour

# Label-conditional attribute priors: (benign, malignant).
ATT_PRIOR = {0: (0.45, 0.40, 0.15), 1: (0.30, 0.25, 0.45)}
LOC_PRIOR = (0.25, 0.10, 0.22, 0.23, 0.15, 0.05)
MARGIN_PRIOR = {0: (0.15, 0.55, 0.30), 1: (0.40, 0.25, 0.35)}
LONG_DIA_LOG_MEDIAN = {0: math.log(8.5), 1: math.log(10.5)}
LONG_DIA_LOG_SIGMA = 0.32
DIA_RANGE_MM = (4.0, 30.0)
AGE_MEAN = {0: 62.0, 1: 66.0}
AGE_STD = 8.0
AGE_RANGE = (45, 88)
DIAGEMPH_P = {0: 0.18, 1: 0.35}
FAMILY_P = {
    "famfather": (0.15, 0.40),
    "fammother": (0.12, 0.30),
    "fambrother": (0.08, 0.18),
    "famsister": (0.08, 0.18),
    "famchild": (0.03, 0.07),
}


@dataclass(frozen=True)
class NoduleRecord:
    """One longitudinal sample: baseline and follow-up image plus metadata."""

    baseline_image: np.ndarray
    followup_image: np.ndarray
    ehr: EhrRecord
    label: int
    patient_id: str
    sample_id: str

    def __post_init__(self):
        for name in ("baseline_image", "followup_image"):
            img = getattr(self, name)
            if img.ndim != 2:
                raise ValueError(f"{name} must be 2-D, got shape {img.shape}")
            if img.shape != self.baseline_image.shape:
                raise ValueError("baseline and follow-up images must share a shape")
            if img.shape[0] % 8 or img.shape[1] % 8:
                raise ValueError(f"image sides must be divisible by 8, got {img.shape}")
            if img.min() < 0.0 or img.max() > 1.0:
                raise ValueError(f"{name} values must lie in [0, 1]")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")

    @property
    def image_size(self) -> int:
        return self.baseline_image.shape[0]


def mm_to_px(mm: float, image_size: int) -> float:
    """Convert millimeters to pixels at the declared crop scale."""
    return mm * MM_TO_PX * (image_size / MM_PER_PX_CROP)


def _categorical(rng: np.random.Generator, values, probs) -> str:
    return values[int(rng.choice(len(values), p=np.asarray(probs, dtype=float)))]


def sample_ehr(rng: np.random.Generator, label: int) -> EhrRecord:
    """Draw one metadata row conditioned on the malignancy label."""
    att = _categorical(rng, ATTENUATIONS, ATT_PRIOR[label])
    loc = _categorical(rng, LOCATIONS, LOC_PRIOR)
    long_dia = float(
        np.clip(
            math.exp(rng.normal(LONG_DIA_LOG_MEDIAN[label], LONG_DIA_LOG_SIGMA)),
            *DIA_RANGE_MM,
        )
    )
    long_dia = round(long_dia, 1)
    perp_dia = round(float(long_dia * rng.uniform(0.6, 1.0)), 1)
    perp_dia = min(max(perp_dia, 2.0), long_dia)
    margins = _categorical(rng, MARGINS, MARGIN_PRIOR[label])
    age = int(np.clip(round(rng.normal(AGE_MEAN[label], AGE_STD)), *AGE_RANGE))
    gender = "Male" if rng.uniform() < 0.5 else "Female"
    flags = {k: bool(rng.uniform() < p[label]) for k, p in FAMILY_P.items()}
    return EhrRecord(
        att=att,
        loc=loc,
        long_dia=long_dia,
        perp_dia=perp_dia,
        margins=margins,
        age=age,
        diagemph=bool(rng.uniform() < DIAGEMPH_P[label]),
        gender=gender,
        **flags,
    )


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    field = rng.standard_normal((size, size))
    field = gaussian_filter(field, sigma=size / 13.0)
    field /= max(float(np.abs(field).max()), 1e-8)
    return np.clip(BACKGROUND_LEVEL + BACKGROUND_AMP * field, 0.02, BACKGROUND_MAX)


def _interior(rng: np.random.Generator, size: int, att: str, r_norm: np.ndarray) -> np.ndarray:
    level, amp, core = ATTENUATION_RENDER[att]
    texture = gaussian_filter(rng.standard_normal((size, size)), sigma=1.5)
    texture /= max(float(np.abs(texture).max()), 1e-8)
    field = level + amp * texture
    if core is not None:
        field = np.where(r_norm < 0.45, core + 0.03 * texture, field)
    # Interior always stays strictly above the 0.5 edge contour.
    return np.clip(field, 0.55, 0.97)


def render_image(
    size: int,
    long_px: float,
    perp_px: float,
    theta: float,
    center: tuple[float, float],
    edge_sigma_px: float,
    spike_amp: float,
    spike_freq: int,
    spike_phase: float,
    att: str,
    background: np.ndarray,
    texture_rng: np.random.Generator,
) -> np.ndarray:
    """Render one nodule over a background field; output in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - center[0], yy - center[1]
    u = math.cos(theta) * dx + math.sin(theta) * dy
    v = -math.sin(theta) * dx + math.cos(theta) * dy
    a, b = max(long_px / 2.0, 1e-6), max(perp_px / 2.0, 1e-6)
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    phi = np.arctan2(v / b, u / a)
    # Normalizing by sqrt(1 + amp^2/2) keeps the enclosed area equal to the
    # plain ellipse area for any spiculation amplitude, so amplitude changes
    # between time points do not distort the drawn growth factor.
    boundary = (1.0 + spike_amp * np.sin(spike_freq * phi + spike_phase)) / math.sqrt(
        1.0 + spike_amp**2 / 2.0
    )
    # Signed distance in approximate pixels. The logistic edge is recentered
    # so the rendered intensity crosses 0.5 exactly on the nominal boundary
    # (at nominal interior/background levels), independent of edge softness;
    # the thresholded pixel area then tracks the drawn diameters.
    d_px = (r - boundary) * math.sqrt(a * b)
    sigma = max(edge_sigma_px, 1e-3)
    level = ATTENUATION_RENDER[att][0]
    m_star = (0.5 - BACKGROUND_LEVEL) / (level - BACKGROUND_LEVEL)
    d_star = sigma * math.log((1.0 - m_star) / m_star)
    mask = 1.0 / (1.0 + np.exp(np.clip((d_px + d_star) / sigma, -40, 40)))
    interior = _interior(texture_rng, size, att, r / np.maximum(boundary, 1e-6))
    img = background * (1.0 - mask) + interior * mask
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _record_from_rng(
    rng: np.random.Generator, label: int, image_size: int, patient_id: str, sample_id: str
) -> NoduleRecord:
    ehr = sample_ehr(rng, label)
    scale = image_size / MM_PER_PX_CROP
    long_px = mm_to_px(ehr.long_dia, image_size)
    perp_px = mm_to_px(ehr.perp_dia, image_size)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    jitter = 2.0 * scale
    center = (
        image_size / 2.0 + rng.uniform(-jitter, jitter),
        image_size / 2.0 + rng.uniform(-jitter, jitter),
    )
    edge_sigma, spike_amp = MARGIN_RENDER[ehr.margins]
    edge_sigma *= scale
    spike_freq = int(rng.integers(8, 13))
    spike_phase = rng.uniform(0.0, 2.0 * math.pi)

    background = _background(rng, image_size)

    if label == 1:
        growth = float(
            np.exp(rng.normal(math.log(MALIGNANT_GROWTH_MEDIAN), MALIGNANT_GROWTH_SIGMA))
        )
        spike_amp_fu = spike_amp * MALIGNANT_SPIKE_GAIN + MALIGNANT_SPIKE_FLOOR
    else:
        growth = float(
            np.exp(rng.normal(math.log(BENIGN_GROWTH_MEDIAN), BENIGN_GROWTH_SIGMA))
        )
        spike_amp_fu = spike_amp

    baseline = render_image(
        image_size, long_px, perp_px, theta, center, edge_sigma,
        spike_amp, spike_freq, spike_phase, ehr.att, background, rng,
    )
    followup_bg = np.clip(
        background + 0.02 * rng.standard_normal(background.shape), 0.02, BACKGROUND_MAX
    )
    followup = render_image(
        image_size, long_px * growth, perp_px * growth, theta, center, edge_sigma,
        spike_amp_fu, spike_freq, spike_phase, ehr.att, followup_bg, rng,
    )
    return NoduleRecord(
        baseline_image=baseline,
        followup_image=followup,
        ehr=ehr,
        label=label,
        patient_id=patient_id,
        sample_id=sample_id,
    )


def generate_dataset(
    seed: int,
    n_patients: int,
    malignant_fraction: float,
    image_size: int = 64,
) -> list[NoduleRecord]:
    """Generate one longitudinal record per patient, deterministically.

    The malignant count is ``round(n_patients * malignant_fraction)``,
    assigned to a seeded random subset of patients.
    """
    if n_patients < 2:
        raise ValueError(f"n_patients must be >= 2, got {n_patients}")
    if not (0.0 < malignant_fraction < 1.0):
        raise ValueError(f"malignant_fraction must lie in (0, 1), got {malignant_fraction}")
    if image_size % 8:
        raise ValueError(f"image_size must be divisible by 8, got {image_size}")

    n_malignant = int(round(n_patients * malignant_fraction))
    order = np.random.default_rng(np.random.SeedSequence(seed)).permutation(n_patients)
    labels = np.zeros(n_patients, dtype=int)
    labels[order[:n_malignant]] = 1

    records = []
    for i in range(n_patients):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        patient_id = f"pt{i:05d}"
        records.append(
            _record_from_rng(rng, int(labels[i]), image_size, patient_id, f"{patient_id}-n0")
        )
    return records


def split_dataset(
    records: list[NoduleRecord], ratios: tuple[float, float, float], seed: int
) -> tuple[list[NoduleRecord], list[NoduleRecord], list[NoduleRecord]]:
    """Partition records into train/val/test with patient-level disjointness."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    patient_ids = []
    for r in records:
        if r.patient_id not in patient_ids:
            patient_ids.append(r.patient_id)
    n = len(patient_ids)
    perm = np.random.default_rng(seed).permutation(n)
    c1 = int(round(n * ratios[0]))
    c2 = int(round(n * (ratios[0] + ratios[1])))
    groups = (perm[:c1], perm[c1:c2], perm[c2:])
    for name, ratio, grp in zip(("train", "val", "test"), ratios, groups):
        if ratio > 0 and len(grp) == 0:
            raise ValueError(f"not enough patients to populate the {name} split")
    id_sets = [{patient_ids[int(i)] for i in grp} for grp in groups]
    return tuple([r for r in records if r.patient_id in ids] for ids in id_sets)
