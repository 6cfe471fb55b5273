"""Scene sampling, mixture rendering and distance-conditioned targets.

Every example is a pure function of ``(spec, split, index)``: its RNG is
seeded from ``SeedSequence([spec.seed, split_code, index])`` so examples can
be generated in any order, in parallel, and regenerated byte for byte.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import yaml
from scipy.signal import fftconvolve

from .audio import AudioError, Waveform, rms_scale, save_wav
from .corpus import SPLITS, fit_length
from .rir import GeometryError, Rir, RirStore, RoomSpec, simulate_rir

RECIPES = ("D1", "D2", "D3", "D4")
SPLIT_CODES = {"train": 0, "valid": 1, "test": 2}
D1_ROOM = (7.0, 8.0, 3.0)
D1_MIC = (3.5, 4.0, 1.1)
WALL_CLEARANCE = 0.5
SPEAKER_HEIGHT = (1.2, 2.0)
# Microphone height for recipes with random mic placement (not given for D2/D3).
MIC_HEIGHT = (0.8, 1.6)
MAX_RETRIES = 200


class SpecError(ValueError):
    pass


class NoGapError(RuntimeError):
    """No query distance satisfies the requested presence flag."""


@dataclass
class DatasetSpec:
    recipe: str = "D1"
    r_spk: float | None = None
    clip_len: float = 4.0
    splits: tuple = (0.9, 0.02, 0.08)
    n_speakers: int = 2
    seed: int = 0
    d_max: float | None = None
    level_db: tuple = (-25.0, -20.0)
    rt60: tuple = (0.2, 0.2)
    room_min: tuple = D1_ROOM
    room_max: tuple = D1_ROOM
    mic_pos: tuple | None = D1_MIC
    n_rirs: int = 10000
    n_mics: int = 100
    rirs_per_mic: int = 2000
    n_rooms: int = 50000
    speakers_per_room: int = 10
    speakers_per_split: tuple = (128, 48, 64)
    rir_store: str | None = None
    sample_rate: int = 16000

    def __post_init__(self):
        if self.recipe not in RECIPES:
            raise SpecError(f"recipe must be one of {RECIPES}, got {self.recipe!r}")
        if self.r_spk is None:
            self.r_spk = 0.1 if self.recipe == "D4" else 0.5
        if self.d_max is None:
            self.d_max = 10.0 if self.recipe == "D4" else 5.0
        for name in ("splits", "level_db", "rt60", "room_min", "room_max", "speakers_per_split"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.mic_pos is not None:
            self.mic_pos = tuple(float(v) for v in self.mic_pos)
        if len(self.splits) != 3 or abs(sum(self.splits) - 1.0) > 1e-9 or min(self.splits) < 0:
            raise SpecError(f"split ratios must be three non-negative numbers summing to 1, got {self.splits}")
        if self.r_spk <= 0 or self.d_max <= 0 or self.clip_len <= 0:
            raise SpecError("r_spk, d_max and clip_len must be positive")
        if self.level_db[0] > self.level_db[1] or self.rt60[0] > self.rt60[1] or self.rt60[0] <= 0:
            raise SpecError("level_db and rt60 must be ordered ranges (rt60 > 0)")
        if len(self.room_min) != 3 or len(self.room_max) != 3:
            raise SpecError("room_min/room_max must be 3-vectors")
        lo, hi = np.asarray(self.room_min, float), np.asarray(self.room_max, float)
        if np.any(lo > hi) or np.any(lo <= 2 * WALL_CLEARANCE) or lo[2] <= SPEAKER_HEIGHT[0]:
            raise SpecError(
                f"invalid room dims {self.room_min}..{self.room_max}: each side must exceed "
                f"{2 * WALL_CLEARANCE} m, height must exceed {SPEAKER_HEIGHT[0]} m, min <= max")
        if self.n_speakers < 1:
            raise SpecError("n_speakers must be >= 1")
        if self.recipe == "D4" and not self.rir_store:
            raise SpecError("recipe D4 needs rir_store pointing at ingested real RIRs")

    @classmethod
    def recipe_defaults(cls, recipe: str, **overrides) -> "DatasetSpec":
        base = {
            "D1": dict(splits=(0.9, 0.02, 0.08), mic_pos=D1_MIC, n_rirs=10000),
            "D2": dict(splits=(0.9, 0.01, 0.09), mic_pos=None, n_mics=100, rirs_per_mic=2000),
            "D3": dict(splits=(0.9, 0.02, 0.08), mic_pos=None, n_rooms=50000, speakers_per_room=10,
                       room_min=(4.0, 5.0, 2.5), room_max=(8.0, 10.0, 3.0), rt60=(0.2, 0.5)),
            "D4": dict(splits=(0.77, 0.0, 0.23), mic_pos=None),
        }
        if recipe not in base:
            raise SpecError(f"unknown recipe {recipe!r}")
        kw = dict(base[recipe])
        kw.update(overrides)
        return cls(recipe=recipe, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        recipe = d.pop("recipe", "D1")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown dataset spec fields: {sorted(unknown)}")
        return cls.recipe_defaults(recipe, **d)

    @classmethod
    def load(cls, path) -> "DatasetSpec":
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        return cls.from_dict(data.get("dataset", data))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @property
    def clip_samples(self) -> int:
        return int(round(self.clip_len * self.sample_rate))


@dataclass
class Scene:
    scene_id: str
    room: RoomSpec | str
    mic_pos: np.ndarray
    rirs: list

    @property
    def distances(self):
        return [r.distance for r in self.rirs]

    @property
    def speakers(self):
        return [(r.id, r.distance) for r in self.rirs]

    @property
    def K(self):
        return len(self.rirs)


@dataclass
class TrainingExample:
    mixture: Waveform
    d_q: float
    target: Waveform
    presence: bool
    scene_ref: str
    sources: list = field(default_factory=list)  # scaled reverberant x_k
    distances: list = field(default_factory=list)
    r_spk: float = 0.5


# --- scene geometry ---------------------------------------------------------

def _rng_for(spec: DatasetSpec, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, *key]))


def split_of(index: int, n: int, ratios) -> str:
    """Deterministic split assignment of pool item ``index`` out of ``n``."""
    bounds = np.cumsum(ratios) * n
    pos = int(np.searchsorted(bounds, index, side="right"))
    return SPLITS[min(pos, 2)]


def pool_indices(n: int, ratios, split: str):
    return [i for i in range(n) if split_of(i, n, ratios) == split]


def _random_mic(rng, dims):
    return np.array([rng.uniform(WALL_CLEARANCE, dims[0] - WALL_CLEARANCE),
                     rng.uniform(WALL_CLEARANCE, dims[1] - WALL_CLEARANCE),
                     rng.uniform(*MIC_HEIGHT)])


def random_speaker_pos(rng, dims):
    return np.array([rng.uniform(WALL_CLEARANCE, dims[0] - WALL_CLEARANCE),
                     rng.uniform(WALL_CLEARANCE, dims[1] - WALL_CLEARANCE),
                     rng.uniform(*SPEAKER_HEIGHT)])


@lru_cache(maxsize=4096)
def _calibrated_room(dims, rt60):
    return RoomSpec(dims, rt60).calibrated()


def pool_room(spec: DatasetSpec, room_index: int) -> tuple:
    """Room and microphone of pool entry ``room_index`` (D2: mic pool, D3: room pool)."""
    rng = _rng_for(spec, 101, room_index)
    if spec.recipe == "D3":
        dims = tuple(round(float(v), 4) for v in rng.uniform(spec.room_min, spec.room_max))
        rt60 = round(float(rng.uniform(*spec.rt60)), 4)
        room = _calibrated_room(dims, rt60)
    else:
        room = RoomSpec(spec.room_min, spec.rt60[0])
    mic = np.asarray(spec.mic_pos, float) if spec.mic_pos is not None else _random_mic(rng, room.dims)
    return room, mic


def place_speaker(rng, room: RoomSpec, mic, d_max: float):
    """Speaker position with wall clearance and height limits, within ``d_max`` of the mic."""
    for _ in range(MAX_RETRIES):
        p = random_speaker_pos(rng, room.dims)
        d = np.linalg.norm(p - mic)
        if 0.05 < d <= d_max:
            return p
    raise GeometryError(f"no speaker position within {d_max} m of mic in room {room.dims}")


def sample_scene(spec: DatasetSpec, rng, split: str = "train", store: RirStore | None = None,
                 scene_id: str = "scene") -> Scene:
    if store is not None or spec.rir_store:
        return _sample_store_scene(spec, rng, split, store or _open_store(spec.rir_store), scene_id)
    if spec.recipe == "D1":
        room_idx = 0
    else:
        n_pool = spec.n_mics if spec.recipe == "D2" else spec.n_rooms
        candidates = pool_indices(n_pool, spec.splits, split) if spec.recipe == "D3" else range(n_pool)
        if not candidates:
            raise SpecError(f"split {split!r} has no rooms for {spec.recipe}")
        room_idx = int(candidates[int(rng.integers(len(candidates)))])
    room, mic = pool_room(spec, room_idx)
    rirs = []
    for k in range(spec.n_speakers):
        src = place_speaker(rng, room, mic, spec.d_max)
        r = simulate_rir(room, src, mic, rng=rng, fs=spec.sample_rate, rir_id=f"{scene_id}-s{k}")
        r.meta["room_id"] = f"{spec.recipe}-room{room_idx}"
        rirs.append(r)
    return Scene(scene_id, room, mic, rirs)


@lru_cache(maxsize=8)
def _open_store(path):
    return RirStore(path)


def _store_groups(store: RirStore, split: str):
    groups = {}
    for rec in store.records:
        if rec.get("split") != split:
            continue
        key = (rec.get("room_id"), rec.get("mic_id"), tuple(rec["mic_pos"]))
        groups.setdefault(key, []).append(rec["id"])
    return [g for _, g in sorted(groups.items(), key=lambda kv: str(kv[0]))]


def _sample_store_scene(spec, rng, split, store, scene_id) -> Scene:
    groups = [g for g in _store_groups(store, split) if len(g) >= spec.n_speakers]
    if not groups:
        raise SpecError(f"RIR store has no {split!r} room/mic group with {spec.n_speakers} RIRs")
    group = groups[int(rng.integers(len(groups)))]
    ids = rng.choice(len(group), size=spec.n_speakers, replace=False)
    rirs = [store.load(group[int(i)]) for i in ids]
    return Scene(scene_id, rirs[0].room, rirs[0].mic_pos, rirs)


# --- signal model -----------------------------------------------------------

def render_reverberant(s: Waveform, h: Rir | Waveform) -> Waveform:
    h_rate = h.sample_rate
    if h_rate != s.sample_rate:
        raise AudioError(f"sample rate mismatch: speech {s.sample_rate} Hz, RIR {h_rate} Hz")
    ir = h.ir if isinstance(h, Rir) else h.samples
    return Waveform(fftconvolve(s.samples, ir)[: len(s)], s.sample_rate)


def mix(xs) -> Waveform:
    xs = list(xs)
    if not xs:
        raise AudioError("cannot mix an empty list of signals")
    n, sr = len(xs[0]), xs[0].sample_rate
    if any(len(x) != n or x.sample_rate != sr for x in xs):
        raise AudioError("all signals must share length and sample rate")
    return Waveform(np.sum([x.samples for x in xs], axis=0), sr)


def select_targets(distances, d_q: float, r_spk: float) -> list:
    if isinstance(distances, Scene):
        distances = distances.distances
    return [k for k, d in enumerate(distances) if abs(d - d_q) <= r_spk]


def _merge(intervals):
    out = []
    for lo, hi in sorted(intervals):
        if out and lo <= out[-1][1]:
            out[-1][1] = max(out[-1][1], hi)
        else:
            out.append([lo, hi])
    return out


def query_intervals(distances, r_spk: float, d_max: float, presence: bool):
    covered = _merge([(max(d - r_spk, 0.0), min(d + r_spk, d_max)) for d in distances
                      if d - r_spk < d_max])
    if presence:
        return [(lo, hi) for lo, hi in covered if hi > lo]
    gaps, cur = [], 0.0
    for lo, hi in covered:
        if lo > cur:
            gaps.append((cur, lo))
        cur = max(cur, hi)
    if cur < d_max:
        gaps.append((cur, d_max))
    return gaps


def sample_query(scene, presence: bool, r_spk: float, rng, d_max: float = 5.0) -> float:
    """Query distance uniform over the speaker intervals (presence) or the gaps."""
    distances = scene.distances if isinstance(scene, Scene) else list(scene)
    if not distances:
        raise ValueError("scene has no speakers")
    intervals = query_intervals(distances, r_spk, d_max, presence)
    widths = np.array([hi - lo for lo, hi in intervals])
    if widths.sum() <= 1e-9:
        raise NoGapError(f"no {'presence' if presence else 'absence'} query range "
                         f"for distances {np.round(distances, 3).tolist()}")
    for _ in range(MAX_RETRIES):
        i = int(rng.choice(len(intervals), p=widths / widths.sum()))
        d_q = float(rng.uniform(*intervals[i]))
        if d_q > 0 and bool(select_targets(distances, d_q, r_spk)) == presence:
            return d_q
    raise NoGapError("could not draw a query distance inside the feasible set")


def draw_presence(rng, ratio: float) -> bool:
    return bool(rng.random() < ratio)


def make_example(scene: Scene, utterances, presence: bool, spec: DatasetSpec, rng,
                 d_q: float | None = None) -> TrainingExample:
    if len(utterances) != scene.K:
        raise ValueError(f"need {scene.K} utterances, got {len(utterances)}")
    n = spec.clip_samples
    sources = []
    for s, h in zip(utterances, scene.rirs):
        s = Waveform(fit_length(s.samples, n), s.sample_rate)
        sources.append(rms_scale(render_reverberant(s, h), spec.level_db, rng))
    if d_q is None:
        d_q = sample_query(scene, presence, spec.r_spk, rng, spec.d_max)
    chosen = select_targets(scene.distances, d_q, spec.r_spk)
    if bool(chosen) != presence:
        raise ValueError(f"d_q={d_q} contradicts presence={presence}")
    target = mix([sources[k] for k in chosen]) if chosen else Waveform.zeros(n, spec.sample_rate)
    return TrainingExample(mix(sources), float(d_q), target, presence, scene.scene_id,
                           sources, scene.distances, spec.r_spk)


class ExampleGenerator:
    """On-the-fly examples for one dataset spec and speech corpus."""

    def __init__(self, spec: DatasetSpec, corpus, store: RirStore | None = None):
        self.spec = spec
        self.corpus = corpus
        self.store = store

    def example(self, split: str, index: int, presence: bool | None = None,
                presence_ratio: float = 0.9, rep: int = 0) -> TrainingExample:
        rng = _rng_for(self.spec, 7, SPLIT_CODES[split], rep, index)
        drawn = draw_presence(rng, presence_ratio)
        if presence is None:
            presence = drawn
        for attempt in range(MAX_RETRIES):
            scene = sample_scene(self.spec, rng, split, self.store,
                                 scene_id=f"{split}-r{rep}-{index}-{attempt}")
            try:
                d_q = sample_query(scene, presence, self.spec.r_spk, rng, self.spec.d_max)
            except NoGapError:
                continue
            return make_example(scene, self._utterances(split, rng), presence, self.spec, rng, d_q)
        raise NoGapError(f"no feasible scene for {split}/{index} after {MAX_RETRIES} tries")

    def presence(self, split: str, index: int, presence_ratio: float = 0.9, rep: int = 0) -> bool:
        """The presence flag :meth:`example` draws for this index."""
        return draw_presence(_rng_for(self.spec, 7, SPLIT_CODES[split], rep, index), presence_ratio)

    def _utterances(self, split, rng):
        speakers = self.corpus.speakers(split)
        if len(speakers) < self.spec.n_speakers:
            raise SpecError(f"split {split!r} has {len(speakers)} speakers, need {self.spec.n_speakers}")
        picks = rng.choice(len(speakers), size=self.spec.n_speakers, replace=False)
        out = []
        for p in picks:
            spk = speakers[int(p)]
            w = self.corpus.utterance(spk, int(rng.integers(self.corpus.n_utterances(spk))))
            out.append(Waveform(fit_length(w.samples, self.spec.clip_samples, rng), w.sample_rate))
        return out


# --- materialised datasets --------------------------------------------------

EXAMPLE_MANIFEST = "examples.jsonl"


def write_examples(gen: ExampleGenerator, out_dir, split: str, n: int, *, presence_ratio=0.9,
                   reps: int = 1, workers: int = 1) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    jobs = [(rep, i) for rep in range(reps) for i in range(n)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            lines = list(ex.map(_write_one, [(gen, out_dir, split, presence_ratio, j) for j in jobs]))
    else:
        lines = [_write_one((gen, out_dir, split, presence_ratio, j)) for j in jobs]
    path = out_dir / f"{split}_{EXAMPLE_MANIFEST}"
    tmp = path.with_suffix(".tmp")
    tmp.write_text("".join(line + "\n" for line in lines))
    os.replace(tmp, path)
    return path


def _write_one(args):
    gen, out_dir, split, ratio, (rep, i) = args
    ex = gen.example(split, i, presence_ratio=ratio, rep=rep)
    stem = f"{split}_r{rep}_{i:06d}"
    rel = {"mixture_wav": f"wav/{stem}_mix.wav", "target_wav": f"wav/{stem}_tgt.wav"}
    save_wav(out_dir / rel["mixture_wav"], ex.mixture)
    save_wav(out_dir / rel["target_wav"], ex.target)
    src = []
    for k, s in enumerate(ex.sources):
        src.append(f"wav/{stem}_src{k}.wav")
        save_wav(out_dir / src[-1], s)
    rec = dict(rel, d_q=round(ex.d_q, 6), presence=ex.presence, scene_id=ex.scene_ref, split=split,
               rep=rep, index=i, distances=[round(d, 6) for d in ex.distances], r_spk=ex.r_spk,
               source_wavs=src)
    return json.dumps(rec, sort_keys=True)


def read_examples(manifest) -> list:
    """Load a materialised manifest into ``(record, TrainingExample)`` pairs."""
    from .audio import load_wav
    manifest = Path(manifest)
    out = []
    with open(manifest) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            base = manifest.parent
            srcs = [load_wav(base / p) for p in rec.get("source_wavs", [])]
            ex = TrainingExample(load_wav(base / rec["mixture_wav"]), rec["d_q"],
                                 load_wav(base / rec["target_wav"]), rec["presence"], rec["scene_id"],
                                 srcs, rec.get("distances", []), rec.get("r_spk", 0.5))
            out.append((rec, ex))
    return out
