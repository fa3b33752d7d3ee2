"""Sounding frame structure and antenna switching schedule.

A frame carries margin slots, M core (averaged) slots and a sync slot, plus a
guard for switch settling.  A codebook orders all transmit/receive element
combinations; pseudo-random ordering breaks the periodic element revisit that
causes Doppler aliasing with sequential switching.  All schedule arithmetic is
done in integer nanoseconds so 32768 accumulated frame durations stay exact.
"""

from __future__ import annotations

from dataclasses import dataclass
import json

import numpy as np

NS_PER_S = 1_000_000_000

# tags keep independent Philox streams for the different consumers of a seed
_CODEBOOK_STREAM = 0xC0DEB00C

SCHEDULE_SCHEMA = "switch-schedule/1"


def _to_ns(seconds: float) -> int:
    return int(round(seconds * NS_PER_S))


@dataclass(frozen=True)
class FrameSpec:
    """Timing of one transmit/receive combination (one frame)."""

    seq_duration_s: float = 2.6e-6
    n_core: int = 4
    n_margin_head: int = 2
    n_sync_tail: int = 1
    guard_s: float = 1.0e-7

    def __post_init__(self):
        if self.seq_duration_s <= 0 or self.guard_s < 0:
            raise ValueError("durations must be positive (guard may be zero)")
        if self.n_core < 1:
            raise ValueError("at least one core sequence is required")
        if self.n_margin_head < 0 or self.n_sync_tail < 0:
            raise ValueError("margin/sync counts must be nonnegative")

    @property
    def n_slots(self) -> int:
        return self.n_margin_head + self.n_core + self.n_sync_tail

    @property
    def frame_duration_ns(self) -> int:
        return self.n_slots * _to_ns(self.seq_duration_s) + _to_ns(self.guard_s)

    @property
    def frame_duration_s(self) -> float:
        return self.frame_duration_ns / NS_PER_S


def build_frame(spec: FrameSpec) -> float:
    """Frame duration in seconds: (margins + core + sync) slots plus guard."""
    return spec.frame_duration_s


@dataclass(frozen=True)
class SwitchCodebook:
    """Ordered (tx, rx, polarization) switch states for one MIMO snapshot.

    With dual polarization the receive index is a feed index whose parity is
    the polarization (even = H, odd = V); the two feeds of a spatial element
    are kept adjacent in the ordering so opposite-polarized acquisitions fall
    in consecutive frames.
    """

    tx: np.ndarray          # int32, transmit element per entry
    rx: np.ndarray          # int32, receive element (feed) per entry
    pol: np.ndarray         # uint8, 0 = H, 1 = V
    seed: int
    n_tx: int
    n_rx: int
    dual_pol: bool
    mode: str
    prng: str = "numpy-philox4x64/permutation"

    def __len__(self):
        return len(self.tx)

    @property
    def entries(self):
        """Entries as a list of (tx, rx, 'H'|'V') tuples."""
        return [(int(t), int(r), "HV"[p]) for t, r, p in zip(self.tx, self.rx, self.pol)]


def gen_codebook(seed: int, n_tx: int, n_rx: int, dual_pol: bool = False,
                 mode: str = "pseudo_random") -> SwitchCodebook:
    """Build the switching codebook over every (tx, rx) combination.

    mode "sequential" iterates rx fastest; "pseudo_random" applies a seeded
    Philox permutation.  dual_pol pairs the H/V receive feeds of each spatial
    element into adjacent entries (n_rx must then be even); it constrains the
    ordering without changing the n_tx * n_rx entry count.
    """
    if n_tx < 1 or n_rx < 1:
        raise ValueError("array sizes must be >= 1")
    if mode not in ("sequential", "pseudo_random"):
        raise ValueError(f"unknown codebook mode {mode!r}")
    if dual_pol and n_rx % 2 != 0:
        raise ValueError("dual_pol requires an even receive feed count")

    if dual_pol:
        n_pairs = n_tx * (n_rx // 2)
        order = np.arange(n_pairs)
        if mode == "pseudo_random":
            rng = np.random.Generator(np.random.Philox(key=[seed, _CODEBOOK_STREAM]))
            order = rng.permutation(n_pairs)
        tx_pair, rx_pair = np.divmod(order, n_rx // 2)
        tx = np.repeat(tx_pair, 2).astype(np.int32)
        rx = (np.repeat(rx_pair, 2) * 2 + np.tile([0, 1], n_pairs)).astype(np.int32)
        pol = np.tile([0, 1], n_pairs).astype(np.uint8)
    else:
        n_entries = n_tx * n_rx
        order = np.arange(n_entries)
        if mode == "pseudo_random":
            rng = np.random.Generator(np.random.Philox(key=[seed, _CODEBOOK_STREAM]))
            order = rng.permutation(n_entries)
        tx, rx = np.divmod(order, n_rx)
        tx = tx.astype(np.int32)
        rx = rx.astype(np.int32)
        pol = np.zeros(len(order), np.uint8)

    for a in (tx, rx, pol):
        a.setflags(write=False)
    return SwitchCodebook(tx=tx, rx=rx, pol=pol, seed=seed, n_tx=n_tx, n_rx=n_rx,
                          dual_pol=dual_pol, mode=mode)


@dataclass(frozen=True)
class SwitchSchedule:
    """Codebook plus the acquisition start time of every entry."""

    codebook: SwitchCodebook
    frame: FrameSpec
    timestamps_ns: np.ndarray   # int64, strictly increasing, constant step

    @property
    def timestamps_s(self) -> np.ndarray:
        return self.timestamps_ns / NS_PER_S

    @property
    def snapshot_duration_ns(self) -> int:
        return len(self.codebook) * self.frame.frame_duration_ns

    @property
    def snapshot_duration_s(self) -> float:
        return self.snapshot_duration_ns / NS_PER_S

    def __len__(self):
        return len(self.codebook)


def snapshot_timing(codebook: SwitchCodebook, frame: FrameSpec) -> SwitchSchedule:
    """Assign per-entry acquisition timestamps at a constant frame step."""
    step = frame.frame_duration_ns
    t = (np.arange(len(codebook), dtype=np.int64) * step)
    t.setflags(write=False)
    return SwitchSchedule(codebook=codebook, frame=frame, timestamps_ns=t)


def max_unambiguous_doppler(schedule: SwitchSchedule) -> float:
    """Classical across-snapshot Doppler limit: half the snapshot repetition rate.

    Random switching extends the usable range beyond this; that extension is
    quantified by estimation.doppler_ambiguity.
    """
    return 1.0 / (2.0 * schedule.snapshot_duration_s)


def save_schedule(schedule: SwitchSchedule, path) -> str:
    """Export as a JSON array of {idx, tx, rx, pol, t_ns} with metadata."""
    cb = schedule.codebook
    doc = {
        "schema": SCHEDULE_SCHEMA,
        "seed": cb.seed,
        "n_tx": cb.n_tx,
        "n_rx": cb.n_rx,
        "dual_pol": cb.dual_pol,
        "mode": cb.mode,
        "prng": cb.prng,
        "frame": {
            "seq_duration_s": schedule.frame.seq_duration_s,
            "n_core": schedule.frame.n_core,
            "n_margin_head": schedule.frame.n_margin_head,
            "n_sync_tail": schedule.frame.n_sync_tail,
            "guard_s": schedule.frame.guard_s,
        },
        "entries": [
            {"idx": i, "tx": int(t), "rx": int(r), "pol": "HV"[p], "t_ns": int(ns)}
            for i, (t, r, p, ns) in enumerate(
                zip(cb.tx, cb.rx, cb.pol, schedule.timestamps_ns))
        ],
    }
    with open(str(path), "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
    return str(path)


def load_schedule(path) -> SwitchSchedule:
    with open(str(path)) as f:
        doc = json.load(f)
    if doc.get("schema") != SCHEDULE_SCHEMA:
        raise ValueError(f"unsupported schedule schema {doc.get('schema')!r}")
    frame = FrameSpec(**doc["frame"])
    ent = doc["entries"]
    tx = np.array([e["tx"] for e in ent], np.int32)
    rx = np.array([e["rx"] for e in ent], np.int32)
    pol = np.array([0 if e["pol"] == "H" else 1 for e in ent], np.uint8)
    t = np.array([e["t_ns"] for e in ent], np.int64)
    cb = SwitchCodebook(tx=tx, rx=rx, pol=pol, seed=doc["seed"], n_tx=doc["n_tx"],
                        n_rx=doc["n_rx"], dual_pol=doc["dual_pol"], mode=doc["mode"],
                        prng=doc.get("prng", "unknown"))
    return SwitchSchedule(codebook=cb, frame=frame, timestamps_ns=t)


def schedule_checksum(schedule: SwitchSchedule) -> str:
    """Stable hex digest identifying codebook ordering and frame timing."""
    import hashlib
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(schedule.codebook.tx).tobytes())
    h.update(np.ascontiguousarray(schedule.codebook.rx).tobytes())
    h.update(np.ascontiguousarray(schedule.codebook.pol).tobytes())
    h.update(str(schedule.frame.frame_duration_ns).encode())
    return h.hexdigest()[:16]
