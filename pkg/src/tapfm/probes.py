"""Time and memory scaling of one training step against bag size."""

from __future__ import annotations

import csv
import json
import time
import tracemalloc
from dataclasses import asdict, dataclass, field

import numpy as np

from .metrics import FitRecord, linear_fit
from .trainer import ModelState, TrainConfig, tapfm_step
from .vit import ViTConfig


@dataclass
class ScalingRow:
    K: int
    seconds: float
    peak_bytes: int | None
    forward_work: int


@dataclass
class ScalingReport:
    rows: list[ScalingRow]
    time_fit: FitRecord
    memory_fit: FitRecord | None
    memory_available: bool = True
    notes: list[str] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["K", "seconds", "peak_bytes", "forward_work"])
            for r in self.rows:
                w.writerow([r.K, f"{r.seconds:.6f}", "" if r.peak_bytes is None else r.peak_bytes, r.forward_work])

    def write_json(self, path) -> None:
        doc = {"time_fit": asdict(self.time_fit),
               "memory_fit": asdict(self.memory_fit) if self.memory_fit else None,
               "memory_available": self.memory_available, "notes": self.notes}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)


def _random_bag(K: int, vit: ViTConfig, rng: np.random.Generator) -> np.ndarray:
    shape = (K, vit.tile_size, vit.tile_size, vit.channels)
    return rng.random(shape, dtype=np.float32)


def scaling_probe(ks, vit: ViTConfig | None = None, cfg: TrainConfig | None = None, seed: int = 0,
                  repeats: int = 3, measure_memory: bool = True) -> ScalingReport:
    """Run one decoupled step per bag size and fit time and peak memory linearly in K.

    Time is the minimum over ``repeats`` runs (less scheduler noise than the
    mean). Peak memory is the tracemalloc high-water mark of a separate run,
    so tracing overhead never enters the timings.
    """
    ks = [int(k) for k in ks]
    if len(ks) < 3 or any(b <= a for a, b in zip(ks, ks[1:])):
        raise ValueError("bag sizes must be strictly increasing with at least 3 points")
    vit = vit or ViTConfig()
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(seed)
    notes = []
    if measure_memory and tracemalloc.is_tracing():
        notes.append("tracemalloc already active elsewhere; memory not measured")
        measure_memory = False

    # warm-up so first-call allocation and import costs stay out of the table
    tapfm_step(_random_bag(ks[0], vit, rng), np.array([1]), ModelState.create(vit, seed=seed), cfg)

    rows = []
    for K in ks:
        tiles = _random_bag(K, vit, rng)
        label = np.array([K % 2])
        best, work = np.inf, 0
        for _ in range(repeats):
            state = ModelState.create(vit, seed=seed)
            t0 = time.perf_counter()
            diag = tapfm_step(tiles, label, state, cfg)
            best = min(best, time.perf_counter() - t0)
            work = diag.forward_work
        peak = None
        if measure_memory:
            state = ModelState.create(vit, seed=seed)
            tracemalloc.start()
            try:
                tracemalloc.reset_peak()
                base = tracemalloc.get_traced_memory()[0]
                tapfm_step(tiles, label, state, cfg)
                peak = tracemalloc.get_traced_memory()[1] - base
            finally:
                tracemalloc.stop()
        rows.append(ScalingRow(K, float(best), peak, int(work)))

    x = np.array(ks, dtype=np.float64)
    time_fit = linear_fit(x, np.array([r.seconds for r in rows]))
    mem_fit = linear_fit(x, np.array([r.peak_bytes for r in rows], dtype=np.float64)) if measure_memory else None
    return ScalingReport(rows, time_fit, mem_fit, memory_available=measure_memory, notes=notes)
