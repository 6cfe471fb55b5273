"""Model adapters, stub extractors, test-set evaluation and reports."""
from __future__ import annotations

import csv
import json
import shlex
import subprocess
import tempfile
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
import torch

from .audio import Waveform, save_wav
from .dataset import read_examples, select_targets
from .losses import DEFAULT, LossConfig, loss_inactive, sdr, sdri

METRICS = ("SDR", "SDRi", "PESQ", "iSDR")


class TorchExtractor:
    """Wrap a network as ``extract(mixture, d_q) -> estimate`` on numpy arrays."""

    def __init__(self, model, batch_size=16):
        self.model = model.eval()
        self.batch_size = batch_size
        self.dtype = next(model.parameters()).dtype

    @torch.no_grad()
    def __call__(self, mixture, d_q):
        return self.extract_many(mixture, [d_q])[0]

    @torch.no_grad()
    def extract_many(self, mixture, d_qs):
        y = torch.as_tensor(np.asarray(mixture), dtype=self.dtype)
        out = []
        for i in range(0, len(d_qs), self.batch_size):
            chunk = torch.as_tensor(d_qs[i:i + self.batch_size], dtype=self.dtype)
            out.append(self.model(y.expand(len(chunk), -1), chunk).numpy().astype(np.float64))
        return np.concatenate(out)


class NullModel:
    def __call__(self, mixture, d_q):
        return np.zeros_like(np.asarray(mixture, dtype=np.float64))


class PassthroughModel:
    def __call__(self, mixture, d_q):
        return np.array(mixture, dtype=np.float64)


class OracleExtractor:
    """Returns the sum of the reverberant sources within ``r_spk`` of the query."""

    def __init__(self, sources, distances, r_spk=0.5):
        self.sources = [np.asarray(s.samples if isinstance(s, Waveform) else s, dtype=np.float64)
                        for s in sources]
        self.distances = list(distances)
        self.r_spk = r_spk

    def __call__(self, mixture, d_q):
        chosen = select_targets(self.distances, d_q, self.r_spk)
        if not chosen:
            return np.zeros_like(self.sources[0])
        return np.sum([self.sources[k] for k in chosen], axis=0)


class OracleModel:
    """Ground-truth model for evaluation; needs examples that carry their sources."""

    def for_example(self, ex):
        if not ex.sources:
            raise ValueError("oracle evaluation needs examples with per-source signals")
        return OracleExtractor(ex.sources, ex.distances, ex.r_spk)


class PesqError(RuntimeError):
    pass


class ExternalPesq:
    """PESQ via an external command.

    ``command`` is a template with ``{ref}``, ``{deg}`` and ``{fs}`` fields.
    The tool must exit 0 and print the score as the last whitespace-separated
    token on stdout; anything else raises :class:`PesqError`.
    """

    name = "PESQ"

    def __init__(self, command: str, timeout: float = 60.0):
        self.command = command
        self.timeout = timeout

    def __call__(self, ref, deg, fs=16000) -> float:
        with tempfile.TemporaryDirectory() as tmp:
            r, d = Path(tmp) / "ref.wav", Path(tmp) / "deg.wav"
            save_wav(r, Waveform(ref, fs))
            save_wav(d, Waveform(np.clip(deg, -1, 1), fs))
            cmd = shlex.split(self.command.format(ref=r, deg=d, fs=fs))
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=self.timeout)
        if proc.returncode != 0:
            raise PesqError(f"{cmd[0]} exited {proc.returncode}: {proc.stderr.strip()[:200]}")
        try:
            return float(proc.stdout.split()[-1])
        except (IndexError, ValueError) as err:
            raise PesqError(f"could not parse PESQ score from {proc.stdout!r}") from err


# --- evaluation ----------------------------------------------------------

@dataclass
class Report:
    rows: list = field(default_factory=list)
    aggregate: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {"schema_version": 1, "meta": self.meta, "aggregate": self.aggregate, "rows": self.rows}

    def metric(self, name):
        for a in self.aggregate:
            if a["metric"] == name:
                return a
        raise KeyError(name)

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def save_csv(self, path):
        """One row of ``mean ± std`` cells in SDR, SDRi, PESQ, iSDR order."""
        by = {a["metric"]: a for a in self.aggregate}
        cells = []
        for m in METRICS:
            a = by.get(m)
            cells.append("" if a is None or a["mean"] is None else f"{a['mean']:.2f} ± {a['std']:.2f}")
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["SDR (dB)", "SDRi (dB)", "PESQ", "iSDR (dB)"])
            w.writerow(cells)


_NUM_OR_NULL = {"type": ["number", "null"]}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "aggregate", "rows", "meta"],
    "properties": {
        "schema_version": {"const": 1},
        "meta": {"type": "object"},
        "aggregate": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["metric", "mean", "std", "n", "n_reps"],
                "properties": {
                    "metric": {"enum": list(METRICS)},
                    "mean": _NUM_OR_NULL, "std": _NUM_OR_NULL,
                    "n": {"type": "integer", "minimum": 0},
                    "n_reps": {"type": "integer", "minimum": 0},
                },
            },
        },
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["rep", "index", "presence", "d_q", "SDR", "SDRi", "iSDR"],
                "properties": {
                    "rep": {"type": "integer"}, "index": {"type": "integer"},
                    "presence": {"type": "boolean"}, "d_q": {"type": "number"},
                    "SDR": _NUM_OR_NULL, "SDRi": _NUM_OR_NULL, "iSDR": _NUM_OR_NULL,
                    "PESQ": _NUM_OR_NULL,
                },
            },
        },
    },
}


def validate_report(report) -> None:
    data = report.to_dict() if isinstance(report, Report) else report
    jsonschema.validate(data, REPORT_SCHEMA)


def _resolve(model, ex):
    return model.for_example(ex) if hasattr(model, "for_example") else model


def score_example(model, ex, cfg: LossConfig = DEFAULT, pesq=None) -> dict:
    y = ex.mixture.samples
    est = np.asarray(_resolve(model, ex)(y, ex.d_q), dtype=np.float64)
    row = {"presence": bool(ex.presence), "d_q": float(ex.d_q),
           "SDR": None, "SDRi": None, "iSDR": None, "PESQ": None}
    if ex.presence:
        x = ex.target.samples
        row["SDR"] = sdr(x, est)
        row["SDRi"] = sdri(x, est, y)
        if pesq is not None:
            row["PESQ"] = pesq(x, est, ex.mixture.sample_rate)
    else:
        row["iSDR"] = float(loss_inactive(y, est, cfg))
    return row


def evaluate(model, examples_by_rep: dict, cfg: LossConfig = DEFAULT, pesq=None, meta=None) -> Report:
    """Score every example; aggregate = mean and std over per-repetition means."""
    if not examples_by_rep or not any(examples_by_rep.values()):
        raise ValueError("evaluation split is empty")
    rows = []
    for rep in sorted(examples_by_rep):
        for i, ex in enumerate(examples_by_rep[rep]):
            rows.append({"rep": int(rep), "index": i, **score_example(model, ex, cfg, pesq)})
    aggregate = []
    for m in METRICS:
        per_rep = defaultdict(list)
        for r in rows:
            if r[m] is not None:
                per_rep[r["rep"]].append(r[m])
        means = [float(np.mean(v)) for _, v in sorted(per_rep.items())]
        n = sum(len(v) for v in per_rep.values())
        aggregate.append({
            "metric": m,
            "mean": float(np.mean(means)) if means else None,
            "std": float(np.std(means)) if means else None,
            "n": n,
            "n_reps": len(means),
        })
    return Report(rows, aggregate, dict(meta or {}))


def reps_from_generator(gen, split="test", n=100, reps=5, presence_ratio=0.5):
    return {rep: [gen.example(split, i, presence_ratio=presence_ratio, rep=rep) for i in range(n)]
            for rep in range(reps)}


def reps_from_manifest(path):
    out = defaultdict(list)
    for rec, ex in read_examples(path):
        out[int(rec.get("rep", 0))].append(ex)
    return dict(out)
