"""Randomised image-source RIR simulation, acoustic checks and RIR stores."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .audio import SAMPLE_RATE, Waveform, load_wav, save_wav

log = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
# Radius of the uniform ball each reflected image is jittered within.
IMAGE_JITTER_M = 0.05
MAX_ORDER_CAP = 40
DRR_CAP_DB = 80.0
D4_DISTANCE_RANGE = (0.266, 10.521)


class GeometryError(ValueError):
    pass


class DecayRangeError(ValueError):
    pass


@dataclass
class RoomSpec:
    dims: tuple
    rt60_target: float = 0.2
    # overrides the Sabine-derived wall reflection coefficient when set
    reflection_coef: float | None = None

    def __post_init__(self):
        self.dims = tuple(float(v) for v in self.dims)
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise GeometryError(f"room dims must be three positive lengths, got {self.dims}")
        if self.rt60_target <= 0:
            raise GeometryError("rt60_target must be positive")

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dims
        return lx * ly * lz

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dims
        return 2 * (lx * ly + lx * lz + ly * lz)

    @property
    def absorption(self) -> float:
        """Uniform energy absorption coefficient from Sabine's formula."""
        alpha = 0.161 * self.volume / (self.surface * self.rt60_target)
        return min(alpha, 1.0)

    @property
    def reflection(self) -> float:
        if self.reflection_coef is not None:
            return self.reflection_coef
        return math.sqrt(1.0 - self.absorption)

    def calibrated(self, iterations: int = 3, seed: int = 0) -> "RoomSpec":
        """Copy of this room whose reflection coefficient is tuned so that a
        probe RIR (source and mic at 1/3 and 2/3 of the room diagonal) measures
        ``rt60_target``. Shoebox image models of flat or elongated rooms
        decay more slowly than Sabine predicts; this corrects for it.
        """
        dims = np.asarray(self.dims)
        src, mic = dims * 0.33, dims * 0.67
        mic[2] = min(mic[2], dims[2] - 0.5)
        log_beta = math.log(max(self.reflection, 1e-6))
        room = self
        for _ in range(iterations):
            room = RoomSpec(self.dims, self.rt60_target, math.exp(log_beta))
            probe = simulate_rir(room, src, mic, rng=np.random.default_rng(seed))
            try:
                measured = estimate_rt60(probe)
            except DecayRangeError:
                break
            log_beta *= measured / self.rt60_target
        return RoomSpec(self.dims, self.rt60_target, math.exp(log_beta))

    def default_max_order(self) -> int:
        order = math.ceil(SPEED_OF_SOUND * self.rt60_target / min(self.dims)) + 1
        return min(order, MAX_ORDER_CAP)

    def default_length(self, fs: int = SAMPLE_RATE) -> int:
        # round first: 1.5 * 0.2 * 16000 is 4800.000000000001 in floating point
        return int(math.ceil(round(1.5 * self.rt60_target * fs, 6)))

    def contains(self, p, margin: float = 0.0) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p > margin) and np.all(p < np.asarray(self.dims) - margin))


@dataclass
class Rir:
    ir: np.ndarray
    mic_pos: np.ndarray
    src_pos: np.ndarray
    distance: float
    room: RoomSpec | str
    id: str
    sample_rate: int = SAMPLE_RATE
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ir = np.asarray(self.ir, dtype=np.float64)
        self.mic_pos = np.asarray(self.mic_pos, dtype=np.float64)
        self.src_pos = np.asarray(self.src_pos, dtype=np.float64)
        if self.ir.ndim != 1 or self.ir.size == 0:
            raise ValueError("impulse response must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.ir)):
            raise ValueError("impulse response contains non-finite values")

    @property
    def direct_index(self) -> int:
        return int(round(self.distance / SPEED_OF_SOUND * self.sample_rate))

    @property
    def rt60_target(self):
        return self.room.rt60_target if isinstance(self.room, RoomSpec) else None


def _image_lattice(max_order: int) -> np.ndarray:
    r = np.arange(-max_order, max_order + 1)
    grid = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    return grid[np.abs(grid).sum(axis=1) <= max_order]


def _ball_jitter(rng, n: int, radius: float) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / 3.0)


def simulate_rir(room: RoomSpec, src, mic, max_order=None, rng=None, *,
                 fs: int = SAMPLE_RATE, length=None, jitter: float = IMAGE_JITTER_M,
                 rir_id: str = "sim") -> Rir:
    """Image-source RIR of a shoebox room with randomly jittered images.

    Image ``n = (nx, ny, nz)`` along each axis sits at ``(-1)^n * src + 2*ceil(n/2)*L``
    and carries ``reflection ** (|nx|+|ny|+|nz|)``. Every image except the
    direct path is displaced uniformly within a ball of radius ``jitter``.
    Each image is rendered as a single tap at its nearest sample with
    amplitude ``beta^order / (4 pi r)``.
    """
    src = np.asarray(src, dtype=float)
    mic = np.asarray(mic, dtype=float)
    if src.shape != (3,) or mic.shape != (3,):
        raise GeometryError("positions must be 3-vectors")
    if not room.contains(src) or not room.contains(mic):
        raise GeometryError(f"source {src} or mic {mic} outside room {room.dims}")
    distance = float(np.linalg.norm(src - mic))
    if distance < 1e-3:
        raise GeometryError("source and microphone coincide")
    rng = rng if rng is not None else np.random.default_rng()
    if max_order is None:
        max_order = room.default_max_order()
    n_taps = int(length) if length is not None else room.default_length(fs)

    dims = np.asarray(room.dims)
    lattice = _image_lattice(int(max_order))
    sign = np.where(lattice % 2 == 0, 1.0, -1.0)
    shift = 2.0 * np.ceil(lattice / 2.0) * dims
    images = sign * src + shift
    order = np.abs(lattice).sum(axis=1)
    reflected = order > 0
    images[reflected] += _ball_jitter(rng, int(reflected.sum()), jitter)

    dist = np.linalg.norm(images - mic, axis=1)
    delay = np.rint(dist / SPEED_OF_SOUND * fs).astype(int)
    gain = room.reflection ** order / (4.0 * np.pi * np.maximum(dist, 1e-3))
    keep = delay < n_taps
    ir = np.zeros(n_taps)
    np.add.at(ir, delay[keep], gain[keep])
    return Rir(ir, mic, src, distance, room, rir_id, fs,
               meta={"max_order": int(max_order), "jitter_m": jitter})


def schroeder_curve(ir: np.ndarray) -> np.ndarray:
    """Energy decay curve in dB, normalised to 0 dB at t=0."""
    energy = np.cumsum(np.square(ir)[::-1])[::-1]
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(energy / energy[0])


def estimate_rt60(r: Rir | np.ndarray, fs: int | None = None,
                  start_db: float = -5.0, stop_db: float = -35.0) -> float:
    """T30 reverberation time from the Schroeder backward integral."""
    ir = r.ir if isinstance(r, Rir) else np.asarray(r, dtype=float)
    fs = fs or (r.sample_rate if isinstance(r, Rir) else SAMPLE_RATE)
    if not np.any(ir):
        raise DecayRangeError("impulse response is all zeros")
    onset = int(np.argmax(np.abs(ir)))
    edc = schroeder_curve(ir[onset:])
    finite = edc[np.isfinite(edc)]
    floor = float(finite.min()) if finite.size else 0.0
    # a lone impulse has no decay to measure
    if floor > stop_db:
        raise DecayRangeError(
            f"below measurable: decay reaches only {floor:.1f} dB, need {stop_db} dB")
    i0 = int(np.argmax(edc <= start_db))
    i1 = int(np.argmax(edc <= stop_db))
    if i1 - i0 < 2:
        raise DecayRangeError(
            f"below measurable: {start_db}..{stop_db} dB decay spans {i1 - i0} samples")
    t = np.arange(i0, i1 + 1) / fs
    slope, _ = np.polyfit(t, edc[i0:i1 + 1], 1)
    return float(-60.0 / slope)


def compute_drr(r: Rir, direct_window_ms: float = 2.5) -> float:
    half = int(round(direct_window_ms * 1e-3 * r.sample_rate))
    d = r.direct_index
    if d + half >= len(r.ir) or direct_window_ms < 0:
        raise ValueError(
            f"direct window ±{direct_window_ms} ms around sample {d} exceeds ir length {len(r.ir)}")
    energy = np.square(r.ir)
    lo = max(d - half, 0)
    direct = energy[lo:d + half + 1].sum()
    rest = energy.sum() - direct
    if rest <= direct * 10 ** (-DRR_CAP_DB / 10):
        return DRR_CAP_DB
    return float(min(10.0 * np.log10(direct / rest), DRR_CAP_DB))


def ingest_real_rir(wav_path, mic_pos=None, src_pos=None, *, rir_id=None, fs=SAMPLE_RATE,
                    meta=None) -> Rir:
    """Load a measured RIR and attach geometry; resample polyphase to ``fs``."""
    missing = [n for n, v in (("wav_path", wav_path), ("mic_pos", mic_pos), ("src_pos", src_pos))
               if v is None]
    if missing:
        raise ValueError(f"real RIR is missing required fields: {', '.join(missing)}")
    w = load_wav(wav_path)
    ir = w.samples
    if w.sample_rate != fs:
        g = math.gcd(w.sample_rate, fs)
        ir = resample_poly(ir, fs // g, w.sample_rate // g)
    mic = np.asarray(mic_pos, dtype=float)
    src = np.asarray(src_pos, dtype=float)
    distance = float(np.linalg.norm(mic - src))
    return Rir(ir, mic, src, distance, "real", rir_id or Path(wav_path).stem, fs, meta=dict(meta or {}))


# --- RIR store: one WAV per RIR + manifest.jsonl ---------------------------

MANIFEST_NAME = "manifest.jsonl"


def rir_record(r: Rir, wav: str, split: str) -> dict:
    room = r.room
    rec = {
        "id": r.id,
        "wav": wav,
        "mic_pos": [round(float(v), 6) for v in r.mic_pos],
        "src_pos": [round(float(v), 6) for v in r.src_pos],
        "distance_m": round(float(r.distance), 6),
        "rt60_s": room.rt60_target if isinstance(room, RoomSpec) else None,
        "room_dims": list(room.dims) if isinstance(room, RoomSpec) else None,
        "split": split,
    }
    for key in ("room_id", "mic_id"):
        if key in r.meta:
            rec[key] = r.meta[key]
    return rec


class RirStore:
    """Directory of RIR WAVs indexed by a JSON-lines manifest."""

    def __init__(self, root):
        self.root = Path(root)
        self.records = []
        path = self.root / MANIFEST_NAME
        if path.exists():
            with open(path) as f:
                self.records = [json.loads(line) for line in f if line.strip()]
        self._by_id = {rec["id"]: rec for rec in self.records}
        self._cache = {}

    def __len__(self):
        return len(self.records)

    def ids(self, split=None):
        return [r["id"] for r in self.records if split is None or r.get("split") == split]

    def record(self, rir_id):
        return self._by_id[rir_id]

    def load(self, rir_id) -> Rir:
        if rir_id not in self._cache:
            rec = self._by_id[rir_id]
            w = load_wav(self.root / rec["wav"])
            room = (RoomSpec(rec["room_dims"], rec["rt60_s"])
                    if rec.get("room_dims") and rec.get("rt60_s") else "real")
            meta = {k: rec[k] for k in ("room_id", "mic_id") if k in rec}
            self._cache[rir_id] = Rir(w.samples, rec["mic_pos"], rec["src_pos"], rec["distance_m"],
                                      room, rir_id, w.sample_rate, meta=meta)
        return self._cache[rir_id]

    @staticmethod
    def write(root, rirs_and_splits) -> "RirStore":
        """Write ``(Rir, split)`` pairs; the manifest is replaced atomically."""
        root = Path(root)
        (root / "rirs").mkdir(parents=True, exist_ok=True)
        lines = []
        for r, split in rirs_and_splits:
            rel = f"rirs/{r.id}.wav"
            save_wav(root / rel, Waveform(r.ir, r.sample_rate))
            lines.append(json.dumps(rir_record(r, rel, split), sort_keys=True))
        tmp = root / (MANIFEST_NAME + ".tmp")
        tmp.write_text("\n".join(lines) + ("\n" if lines else ""))
        os.replace(tmp, root / MANIFEST_NAME)
        return RirStore(root)


def load_real_manifest(path, *, fs=SAMPLE_RATE, check_range=D4_DISTANCE_RANGE):
    """Read a real-RIR manifest (JSON lines) into ``(Rir, split)`` pairs.

    Every line needs ``wav``, ``mic_pos`` and ``src_pos``; ``split`` defaults to
    ``train``. Relative WAV paths resolve against the manifest directory.
    """
    path = Path(path)
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            missing = [k for k in ("wav", "mic_pos", "src_pos") if k not in rec]
            if missing:
                raise ValueError(f"{path}:{lineno}: missing required fields {missing}")
            wav = Path(rec["wav"])
            if not wav.is_absolute():
                wav = path.parent / wav
            meta = {k: rec[k] for k in ("room_id", "mic_id") if k in rec}
            r = ingest_real_rir(wav, rec["mic_pos"], rec["src_pos"],
                                rir_id=rec.get("id", wav.stem), fs=fs, meta=meta)
            lo, hi = check_range
            if not lo <= r.distance <= hi:
                log.warning("RIR %s distance %.3f m outside documented range [%.3f, %.3f]",
                            r.id, r.distance, lo, hi)
            out.append((r, rec.get("split", "train")))
    return out
