"""Synthetic optical-tactile sensor tapping ridged stimuli.

The forward model maps a stimulus (curvature) and a pose (perpendicular
position ``d`` of the ridge crest, orientation ``theta``) to planar
displacements of 127 markers laid out on a hexagonal grid:

* the crest is the line ``n . p = d`` with ``n = (cos theta, sin theta)``;
* every marker is indented by ``depth * mask(|m|) * bump(rho)``, where
  ``rho`` is its signed distance to the crest, ``mask`` is a dome that only
  lets markers within ``contact_reach`` of the centre touch, and ``bump`` is
  a compact C1 profile whose half-width grows as ``w0 + c * sqrt(r * depth)``
  (one flank narrower than the other, so a ridge turned by 180 degrees is
  distinguishable);
* the flat stimulus indents uniformly, ``depth * mask(|m|)``, whatever the pose;
* displacement is ``-gain`` times the gradient of the indentation field.

Aliasing falls out of the geometry: flat taps all look alike, sharp ridges
far off-centre never reach the dome (zero response), radii below
``r_min`` saturate, and wide contacts make orientation hard to see.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

N_MARKERS = 127
N_FEATURES = 2 * N_MARKERS
RADII = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, math.inf)
FLAT_ID = 9
POS_RANGE = 15.0
ORIENT_RANGE = 90.0
PROVENANCES = ("aliasing", "no-aliasing-PO", "no-aliasing-C")
FILTER_MODES = {"position_orientation": "no-aliasing-PO", "curvature": "no-aliasing-C"}


@dataclass(frozen=True)
class StimulusSpec:
    id: int
    radius: float

    @property
    def flat(self) -> bool:
        return math.isinf(self.radius)

    @property
    def lroc(self) -> float:
        # flat sits one step past the sharpest-to-bluntest progression
        return 8.0 if self.flat else math.log2(self.radius / RADII[0])


STIMULI = tuple(StimulusSpec(i + 1, r) for i, r in enumerate(RADII))


def stimulus(sid: int) -> StimulusSpec:
    if not 1 <= sid <= len(STIMULI):
        raise ValueError(f"stimulus id must be in 1..{len(STIMULI)}, got {sid}")
    return STIMULI[sid - 1]


@dataclass(frozen=True)
class Pose:
    position: float
    orientation: float

    def __post_init__(self):
        if abs(self.position) > POS_RANGE or abs(self.orientation) > ORIENT_RANGE:
            raise ValueError(f"pose out of range: {self}")


@dataclass(frozen=True)
class NoiseSpec:
    sensor: float = 0.05
    position: float = 0.0
    orientation: float = 0.0
    frames: int = 5

    def __post_init__(self):
        if min(self.sensor, self.position, self.orientation) < 0 or self.frames < 1:
            raise ValueError("noise levels must be non-negative and frames >= 1")


@dataclass(frozen=True)
class SensorModel:
    depth: float = 5.0
    w0: float = 0.5
    width_gain: float = 0.8
    asymmetry: float = 0.3
    gain: float = 0.6
    contact_reach: float = 11.5
    r_min: float = 1.0
    r_max: float = 1e3
    spacing: float = 3.0
    rings: int = 6

    def half_width(self, radius: float) -> float:
        r_eff = min(max(radius, self.r_min), self.r_max)
        return self.w0 + self.width_gain * math.sqrt(r_eff * self.depth)


DEFAULT_MODEL = SensorModel()


def marker_layout(model: SensorModel = DEFAULT_MODEL) -> np.ndarray:
    """Hexagonal rings of markers, ``(127, 2)`` in mm, centre first."""
    pts = [(0.0, 0.0)]
    for k in range(1, model.rings + 1):
        corners = [
            (k * model.spacing * math.cos(math.radians(60 * j)),
             k * model.spacing * math.sin(math.radians(60 * j)))
            for j in range(6)
        ]
        for j in range(6):
            (x0, y0), (x1, y1) = corners[j], corners[(j + 1) % 6]
            for s in range(k):
                t = s / k
                pts.append((x0 + t * (x1 - x0), y0 + t * (y1 - y0)))
    return np.array(pts)


_LAYOUT = marker_layout()


def _layout(model):
    if model.spacing == DEFAULT_MODEL.spacing and model.rings == DEFAULT_MODEL.rings:
        return _LAYOUT
    return marker_layout(model)


def _response(radius, position, orientation, model):
    """Vectorised noiseless response for arrays of poses -> ``(N, 254)``."""
    m = _layout(model)
    pos = np.atleast_1d(np.asarray(position, dtype=float))
    th = np.radians(np.atleast_1d(np.asarray(orientation, dtype=float)))
    rc2 = model.contact_reach ** 2
    r2 = np.sum(m * m, axis=1)
    inside = r2 < rc2
    mask = np.where(inside, 1.0 - r2 / rc2, 0.0)
    grad_mask = np.where(inside[:, None], -2.0 * m / rc2, 0.0)  # (M, 2)

    if math.isinf(radius):
        g = np.broadcast_to(grad_mask, (pos.size,) + grad_mask.shape) * model.depth
    else:
        w = model.half_width(radius)
        nx, ny = np.cos(th)[:, None], np.sin(th)[:, None]
        rho = m[None, :, 0] * nx + m[None, :, 1] * ny - pos[:, None]  # (N, M)
        side = np.where(rho < 0, w * (1.0 - model.asymmetry), w * (1.0 + model.asymmetry))
        u = rho / side
        q = np.maximum(1.0 - u * u, 0.0)
        bump = q * q
        dbump = -4.0 * q * u / side
        g = model.depth * (
            bump[..., None] * grad_mask[None]
            + (mask * dbump)[..., None] * np.stack([nx, ny], axis=-1)
        )
    disp = -model.gain * g  # (N, M, 2)
    return disp.reshape(pos.size, N_FEATURES)


def sensor_response(stim: StimulusSpec, pose: Pose, model: SensorModel = DEFAULT_MODEL) -> np.ndarray:
    """Noiseless marker displacements ``[m0_dx, m0_dy, m1_dx, ...]`` in mm."""
    return _response(stim.radius, pose.position, pose.orientation, model)[0]


def observe(stim: StimulusSpec, pose: Pose, noise: NoiseSpec, seed,
            model: SensorModel = DEFAULT_MODEL) -> np.ndarray:
    """One tap: pose jitter, then the average of ``noise.frames`` noisy frames."""
    rng = np.random.default_rng(seed)
    return _observe(stim, np.array([pose.position]), np.array([pose.orientation]),
                    noise, [rng], model)[0]


def _observe(stim, pos, orient, noise, rngs, model):
    n = pos.size
    jitter = np.zeros((n, 2))
    frames = np.zeros((n, N_FEATURES))
    for i, rng in enumerate(rngs):
        jitter[i] = rng.standard_normal(2) * (noise.position, noise.orientation)
        frames[i] = rng.standard_normal((noise.frames, N_FEATURES)).mean(axis=0)
    x = _response(stim.radius, pos + jitter[:, 0], orient + jitter[:, 1], model)
    return x + noise.sensor * frames


@dataclass
class TactileDataset:
    stimulus_id: np.ndarray
    radius: np.ndarray
    position: np.ndarray
    orientation: np.ndarray
    lroc: np.ndarray
    alias_flat: np.ndarray
    alias_nocontact: np.ndarray
    alias_sat: np.ndarray
    X: np.ndarray
    seed: int | None = None
    provenance: str = "aliasing"
    columns: tuple = field(default=(), repr=False)

    def __post_init__(self):
        n = self.stimulus_id.shape[0]
        if self.X.shape != (n, N_FEATURES):
            raise ValueError(f"observations must be ({n}, {N_FEATURES}), got {self.X.shape}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __len__(self):
        return self.stimulus_id.shape[0]

    def target(self, name: str) -> np.ndarray:
        """Labels for ``position`` (mm), ``orientation`` (deg) or ``curvature`` (LROC)."""
        try:
            return {"position": self.position, "orientation": self.orientation,
                    "curvature": self.lroc}[name]
        except KeyError:
            raise ValueError(f"unknown target {name!r}") from None

    def aliased(self, target: str) -> np.ndarray:
        """Ground-truth aliasing flags relevant to ``target``."""
        if target == "curvature":
            return self.alias_sat | self.alias_nocontact
        self.target(target)
        return self.alias_flat | self.alias_nocontact

    def subset(self, keep: np.ndarray, provenance: str | None = None) -> "TactileDataset":
        arrays = {k: getattr(self, k)[keep] for k in _ROW_FIELDS}
        return TactileDataset(**arrays, seed=self.seed,
                              provenance=provenance or self.provenance)


_ROW_FIELDS = ("stimulus_id", "radius", "position", "orientation", "lroc",
               "alias_flat", "alias_nocontact", "alias_sat", "X")


def generate_dataset(noise: NoiseSpec = NoiseSpec(), seed: int = 0,
                     samples_per_stimulus: int = 1000,
                     model: SensorModel = DEFAULT_MODEL) -> TactileDataset:
    """Uniform random poses for each of the nine stimuli.

    Every row draws its noise from its own generator keyed on
    ``(seed, stimulus, row)``, so the output depends only on the arguments.
    """
    cols = {k: [] for k in _ROW_FIELDS}
    for stim in STIMULI:
        pose_rng = np.random.default_rng([seed, stim.id])
        n = samples_per_stimulus
        pos = pose_rng.uniform(-POS_RANGE, POS_RANGE, n)
        orient = pose_rng.uniform(-ORIENT_RANGE, ORIENT_RANGE, n)
        rngs = [np.random.default_rng([seed, stim.id, i]) for i in range(n)]
        X = _observe(stim, pos, orient, noise, rngs, model)
        clean = _response(stim.radius, pos, orient, model)
        cols["stimulus_id"].append(np.full(n, stim.id))
        cols["radius"].append(np.full(n, stim.radius))
        cols["position"].append(pos)
        cols["orientation"].append(orient)
        cols["lroc"].append(np.full(n, stim.lroc))
        cols["alias_flat"].append(np.full(n, stim.flat))
        cols["alias_nocontact"].append(~np.any(clean != 0.0, axis=1))
        cols["alias_sat"].append(np.full(n, (not stim.flat) and stim.radius <= model.r_min))
        cols["X"].append(X)
    arrays = {k: np.concatenate(v) for k, v in cols.items()}
    return TactileDataset(**arrays, seed=seed, provenance="aliasing")


def filter_no_aliasing(data: TactileDataset, mode: str) -> TactileDataset:
    """Drop the rows carrying the aliasing sources for one family of targets.

    ``position_orientation`` keeps stimuli 1-8 within +-10 mm;
    ``curvature`` keeps stimuli 4-9 within +-5 mm. Re-filtering with the same
    mode is a no-op; filtering a set already filtered the other way is refused.
    """
    if mode not in FILTER_MODES:
        raise ValueError(f"unknown filter mode {mode!r}")
    tag = FILTER_MODES[mode]
    if data.provenance not in ("aliasing", tag):
        raise ValueError(f"cannot apply {mode!r} filter to a {data.provenance!r} dataset")
    sid, d = data.stimulus_id, np.abs(data.position)
    if mode == "position_orientation":
        keep = (sid <= 8) & (d <= 10.0)
    else:
        keep = (sid >= 4) & (d <= 5.0)
    return data.subset(keep, provenance=tag)


# -- CSV --------------------------------------------------------------------

CSV_HEADER = ",".join(
    ["stimulus_id", "radius_mm", "pos_mm", "orient_deg", "lroc",
     "alias_flat", "alias_nocontact", "alias_sat"]
    + [f"m{i:03d}_{ax}" for i in range(N_MARKERS) for ax in ("dx", "dy")]
)


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    s = f"{v:.9g}"
    return "0" if s == "-0" else s


def dataset_to_csv(data: TactileDataset) -> str:
    lines = [CSV_HEADER]
    for i in range(len(data)):
        head = [
            str(int(data.stimulus_id[i])), _fmt(data.radius[i]), _fmt(data.position[i]),
            _fmt(data.orientation[i]), _fmt(data.lroc[i]),
            str(int(data.alias_flat[i])), str(int(data.alias_nocontact[i])),
            str(int(data.alias_sat[i])),
        ]
        lines.append(",".join(head + [_fmt(v) for v in data.X[i]]))
    return "\n".join(lines) + "\n"


def write_csv(data: TactileDataset, path) -> None:
    from .persist import atomic_write_text

    atomic_write_text(path, dataset_to_csv(data))


def read_csv(path, provenance: str = "aliasing") -> TactileDataset:
    with open(path, newline="") as fh:
        header = fh.readline().rstrip("\r\n")
        if header != CSV_HEADER:
            raise ValueError(f"{path}: not a tactile dataset (unexpected header)")
        rows = [line for line in fh.read().splitlines() if line]
    if not rows:
        raise ValueError(f"{path}: dataset has no rows")
    try:
        table = np.array([[float(v) for v in line.split(",")] for line in rows])
    except ValueError as exc:
        raise ValueError(f"{path}: malformed row ({exc})") from None
    if table.shape[1] != 8 + N_FEATURES:
        raise ValueError(f"{path}: expected {8 + N_FEATURES} columns, got {table.shape[1]}")
    return TactileDataset(
        stimulus_id=table[:, 0].astype(int), radius=table[:, 1], position=table[:, 2],
        orientation=table[:, 3], lroc=table[:, 4], alias_flat=table[:, 5] != 0,
        alias_nocontact=table[:, 6] != 0, alias_sat=table[:, 7] != 0,
        X=table[:, 8:], provenance=provenance,
    )
