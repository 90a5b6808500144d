"""PGSE acquisitions and the two-diffusion-time protocol.

Units: b in ms/um^2 internally (1000 s/mm^2 == 1 ms/um^2), times in ms,
gradient amplitudes in mT/um.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import GAMMA

B_UNIT = 1000.0  # s/mm^2 per ms/um^2
STANDARD_BVALUES = (0.0, 1000.0, 2000.0, 3000.0, 4000.0, 5000.0)  # s/mm^2
SHORT_DELTA = 20.0
LONG_DELTA = 60.0
PULSE_WIDTH = 10.0
AXES = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


def amplitude_from_b(b, delta, big_delta, gamma=GAMMA):
    """Gradient amplitude for a PGSE pair, ``b = gamma^2 g^2 delta^2 (Delta - delta/3)``."""
    if b < 0:
        raise ValueError("b must be non-negative")
    if delta > big_delta:
        raise ValueError("pulse width must not exceed the pulse separation")
    lever = big_delta - delta / 3.0
    if lever <= 0:
        raise ValueError("Delta - delta/3 must be positive")
    return np.sqrt(b / (gamma ** 2 * delta ** 2 * lever))


def b_from_amplitude(g, delta, big_delta, gamma=GAMMA):
    return gamma ** 2 * g ** 2 * delta ** 2 * (big_delta - delta / 3.0)


@dataclass(frozen=True)
class Acquisition:
    direction: tuple
    b: float  # ms/um^2
    delta: float
    big_delta: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if d.shape != (3,) or abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("direction must be a unit 3-vector")
        if self.b < 0:
            raise ValueError("b must be non-negative")
        if not 0 < self.delta <= self.big_delta:
            raise ValueError("need 0 < delta <= Delta")
        object.__setattr__(self, "direction", tuple(float(x) for x in d))

    @classmethod
    def from_si(cls, direction, b_s_mm2, delta, big_delta):
        d = np.asarray(direction, dtype=float)
        return cls(tuple(d / np.linalg.norm(d)), b_s_mm2 / B_UNIT, delta, big_delta)

    @property
    def b_s_mm2(self):
        return self.b * B_UNIT

    @property
    def amplitude(self):
        return amplitude_from_b(self.b, self.delta, self.big_delta)

    @property
    def echo_time(self):
        return self.big_delta + self.delta

    def waveform_intervals(self):
        """Piecewise-constant gradient: ``[(t0, t1, g_vector), ...]``."""
        g = self.amplitude * np.asarray(self.direction)
        return [
            (0.0, self.delta, g),
            (self.delta, self.big_delta, np.zeros(3)),
            (self.big_delta, self.big_delta + self.delta, -g),
        ]


def waveform_intervals(acq):
    return acq.waveform_intervals()


@dataclass(frozen=True)
class Protocol:
    acquisitions: tuple
    long_delta: float = LONG_DELTA
    short_delta: float = SHORT_DELTA
    _groups: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        acqs = tuple(self.acquisitions)
        if not acqs:
            raise ValueError("empty protocol")
        object.__setattr__(self, "acquisitions", acqs)
        groups = {}
        for i, a in enumerate(acqs):
            groups.setdefault(a.big_delta, []).append(i)
        for big_delta, idx in groups.items():
            if not any(acqs[i].b == 0 for i in idx):
                raise ValueError(f"Delta={big_delta} group lacks a b=0 reference")
        object.__setattr__(self, "_groups", {k: np.array(v) for k, v in groups.items()})

    def __len__(self):
        return len(self.acquisitions)

    def __iter__(self):
        return iter(self.acquisitions)

    def __getitem__(self, i):
        return self.acquisitions[i]

    @property
    def groups(self):
        """Acquisition indices keyed by pulse separation."""
        return self._groups

    def reference_index(self, i):
        """Index of the b=0 acquisition that normalises acquisition ``i``."""
        idx = self._groups[self.acquisitions[i].big_delta]
        return int(next(j for j in idx if self.acquisitions[j].b == 0))

    @property
    def long(self):
        return self._groups.get(self.long_delta, np.array([], dtype=int))

    @property
    def short(self):
        return self._groups.get(self.short_delta, np.array([], dtype=int))


def standard_protocol(directions=AXES, bvalues=STANDARD_BVALUES, delta=PULSE_WIDTH,
                   big_deltas=(SHORT_DELTA, LONG_DELTA)):
    directions = list(directions)
    if not directions:
        raise ValueError("empty direction set")
    acqs = [Acquisition.from_si(d, b, delta, bd)
            for bd in big_deltas for d in directions for b in bvalues]
    return Protocol(tuple(acqs))


def save_protocol(protocol, path):
    lines = []
    for a in protocol:
        dx, dy, dz = a.direction
        lines.append(f"{dx!r} {dy!r} {dz!r} {float(a.b_s_mm2)!r} {float(a.delta)!r} {float(a.big_delta)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def parse_acquisition(parts, lineno=None):
    try:
        dx, dy, dz, b, delta, big_delta = (float(p) for p in parts[:6])
    except ValueError:
        raise ValueError(f"line {lineno}: malformed acquisition") from None
    return Acquisition.from_si((dx, dy, dz), b, delta, big_delta)


def load_protocol(path):
    acqs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) != 6:
            raise ValueError(f"line {lineno}: expected 'dx dy dz b delta Delta'")
        acqs.append(parse_acquisition(parts, lineno))
    return Protocol(tuple(acqs))
