"""Fixed population of virtual patients used for twin matching.

Twins are drawn around :data:`glyforge.hovorka.NOMINAL`: the three insulin
sensitivities are sampled log-uniformly between 0.2x and 5x nominal, every
other parameter is jittered uniformly by +/-10%. Sampling uses numpy's PCG64
generator seeded with the population seed, so a seed fully determines the
population.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .hovorka import NOMINAL, PARAM_NAMES, TwinParameters

FORMAT_VERSION = "glyforge-population/1"
DEFAULT_SIZE = 300
SENSITIVITY_SPAN = (0.2, 5.0)
JITTER = 0.10
SENSITIVITIES = ("S_F1", "S_F2", "S_F3")
COLUMNS = ("twin_id",) + PARAM_NAMES


class PopulationFormatError(ValueError):
    """Malformed or incompatible population file."""


@dataclass(frozen=True)
class TwinPopulation:
    twin_ids: tuple
    params: tuple
    seed: int
    version: str = FORMAT_VERSION

    def __post_init__(self):
        if len(self.twin_ids) != len(self.params):
            raise ValueError("twin_ids and params differ in length")
        if tuple(self.twin_ids) != tuple(range(1, len(self.twin_ids) + 1)):
            raise ValueError("twin ids must be 1..J")

    def __len__(self):
        return len(self.twin_ids)

    def __getitem__(self, twin_id):
        return self.params[twin_id - 1]

    def as_matrix(self):
        """``(J, 16)`` parameter matrix, row ``j - 1`` holds twin ``j``."""
        return np.array([p.as_array() for p in self.params])


def generate_population(seed, size=DEFAULT_SIZE):
    if size < 1:
        raise ValueError("population size must be at least 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    nominal = NOMINAL.as_array()
    lo, hi = np.log(SENSITIVITY_SPAN[0]), np.log(SENSITIVITY_SPAN[1])
    params = []
    for _ in range(size):
        values = nominal * rng.uniform(1.0 - JITTER, 1.0 + JITTER, size=nominal.size)
        for name in SENSITIVITIES:
            i = PARAM_NAMES.index(name)
            values[i] = nominal[i] * np.exp(rng.uniform(lo, hi))
        params.append(TwinParameters.from_array(values))
    return TwinPopulation(tuple(range(1, size + 1)), tuple(params), int(seed))


def save_population(pop, path):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {pop.version} seed={pop.seed}\n")
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(COLUMNS)
        for twin_id, p in zip(pop.twin_ids, pop.params):
            writer.writerow([twin_id] + [format(v, ".17g") for v in p.as_array()])


def load_population(path):
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# "):
        raise PopulationFormatError(f"{path}:1: missing version header")
    meta = lines[0][2:].split()
    if meta[0] != FORMAT_VERSION:
        raise PopulationFormatError(
            f"{path}:1: version mismatch, expected {FORMAT_VERSION}, got {meta[0]}")
    try:
        seed = int(dict(kv.split("=", 1) for kv in meta[1:])["seed"])
    except (KeyError, ValueError) as exc:
        raise PopulationFormatError(f"{path}:1: header lacks an integer seed") from exc
    if len(lines) < 2:
        raise PopulationFormatError(f"{path}:2: missing column header")
    header = lines[1].split("\t")
    for col in COLUMNS:
        if col not in header:
            raise PopulationFormatError(f"{path}:2: missing column {col!r}")
    order = [header.index(col) for col in COLUMNS]

    params = []
    for lineno, line in enumerate(lines[2:], start=3):
        cells = line.split("\t")
        if len(cells) != len(header):
            raise PopulationFormatError(
                f"{path}:{lineno}: expected {len(header)} fields, got {len(cells)}")
        try:
            twin_id = int(cells[order[0]])
            values = [float(cells[i]) for i in order[1:]]
        except ValueError as exc:
            raise PopulationFormatError(f"{path}:{lineno}: {exc}") from exc
        if twin_id != len(params) + 1:
            raise PopulationFormatError(
                f"{path}:{lineno}: twin ids must be contiguous from 1, got {twin_id}")
        try:
            params.append(TwinParameters(*values))
        except ValueError as exc:
            raise PopulationFormatError(f"{path}:{lineno}: {exc}") from exc
    if not params:
        raise PopulationFormatError(f"{path}:3: population has no twins")
    return TwinPopulation(tuple(range(1, len(params) + 1)), tuple(params), seed)
