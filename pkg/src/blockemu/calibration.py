"""Offline solve-time calibration and replay sampling.

Calibration runs real puzzle solves for each difficulty and stores the
wall-clock statistics in a :class:`DifficultyTimeMap`.  At runtime nodes draw
solve times from the map instead of searching nonces.
"""
from __future__ import annotations

import logging
import math
import os
import platform
import random
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Iterable, Mapping, Protocol

from .puzzle import Difficulty, PuzzleError, SolutionNotFound, expected_attempts, parse_difficulty, solve

log = logging.getLogger(__name__)

MAP_HEADER = "# blocklite-map v1"
MIN_SOLVE_MS = 0.1
DEFAULT_BUDGET_S = 120.0

_STD_NORMAL = NormalDist()


class CalibrationMiss(KeyError):
    """A difficulty was requested that the map does not cover."""

    def __init__(self, d: Difficulty):
        super().__init__(str(d))
        self.difficulty = d

    def __str__(self) -> str:
        return (f"difficulty {self.difficulty} is not in the difficulty-time map; "
                f"run `blockemu calibrate --difficulties {self.difficulty}` first")


class MapFormatError(ValueError):
    def __init__(self, msg: str, lineno: int | None = None):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {msg}" if lineno is not None else msg)


@dataclass(frozen=True)
class SolveTimeStats:
    difficulty: Difficulty
    mean_ms: float
    stddev_ms: float
    samples: int
    min_ms: float
    max_ms: float

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.stddev_ms < 0:
            raise ValueError("stddev_ms must be >= 0")
        # small tolerance: the mean of floats can land an ulp outside [min, max]
        eps = 1e-9 * max(1.0, abs(self.max_ms))
        if not (self.min_ms - eps <= self.mean_ms <= self.max_ms + eps):
            raise ValueError(f"expected min <= mean <= max for {self.difficulty}")

    @classmethod
    def from_samples(cls, d: Difficulty, samples_ms: list[float]) -> "SolveTimeStats":
        mean = statistics.fmean(samples_ms)
        sd = statistics.stdev(samples_ms) if len(samples_ms) > 1 else 0.0
        lo, hi = min(samples_ms), max(samples_ms)
        return cls(d, min(max(mean, lo), hi), sd, len(samples_ms), lo, hi)

    @property
    def stderr_ms(self) -> float:
        return self.stddev_ms / math.sqrt(self.samples)


@dataclass(frozen=True)
class DifficultyTimeMap:
    entries: Mapping[Difficulty, SolveTimeStats] = field(default_factory=dict)
    host_fingerprint: str = ""

    def __post_init__(self):
        for d, st in self.entries.items():
            if st.difficulty != d:
                raise ValueError(f"entry keyed {d} holds stats for {st.difficulty}")
        # freeze a private copy sorted by (L, M)
        object.__setattr__(self, "entries", dict(sorted(self.entries.items())))

    def __contains__(self, d: Difficulty) -> bool:
        return d in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, d: Difficulty) -> SolveTimeStats:
        return self.lookup(d)

    def __iter__(self):
        return iter(self.entries.values())

    def lookup(self, d: Difficulty) -> SolveTimeStats:
        try:
            return self.entries[d]
        except KeyError:
            raise CalibrationMiss(d) from None

    def difficulties(self) -> list[Difficulty]:
        return list(self.entries)


def host_fingerprint() -> str:
    cpu = platform.processor() or platform.machine() or "unknown-cpu"
    return (f"{platform.system()}-{platform.machine()} cpu={cpu} cores={os.cpu_count()} "
            f"{platform.python_implementation()}-{platform.python_version()}")


# -- range expansion ----------------------------------------------------------

def expand_difficulty_range(spec: str) -> list[Difficulty]:
    """Expand ``"1.0:2.3"`` or ``"1.0,2.1"`` into concrete difficulties.

    In a range, ``L`` runs over ``lo.L..hi.L`` and for each ``L`` the middle
    count ``M`` runs over ``lo.M..hi.M``.
    """
    out: list[Difficulty] = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            lo_s, hi_s = part.split(":", 1)
            lo, hi = parse_difficulty(lo_s), parse_difficulty(hi_s)
            if lo.L > hi.L or lo.M > hi.M:
                raise PuzzleError(f"empty difficulty range {part!r}")
            for L in range(lo.L, hi.L + 1):
                for M in range(lo.M, hi.M + 1):
                    if L + M <= 64:
                        out.append(Difficulty(L, M))
        else:
            out.append(parse_difficulty(part))
    if not out:
        raise PuzzleError(f"no difficulties in {spec!r}")
    return list(dict.fromkeys(out))


# -- calibration --------------------------------------------------------------

def calibrate(difficulties: Iterable[Difficulty], samples: int, seed: int = 0,
              budget_s: float = DEFAULT_BUDGET_S, host: str | None = None,
              chunk: int = 200_000) -> DifficultyTimeMap:
    """Measure real solve times for each difficulty.

    Sample ``i`` solves the same seeded random header at every difficulty,
    and samples are taken round-robin across difficulties so slow drifts in
    host load touch every entry alike.  A difficulty whose accumulated
    solving time exceeds ``budget_s`` is left out of the map.
    """
    difficulties = list(dict.fromkeys(difficulties))
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if not difficulties:
        raise ValueError("no difficulties to calibrate")
    solve(b"warm-up", Difficulty(1, 0))  # keep first-call costs out of the first entry
    times: dict[Difficulty, list[float]] = {d: [] for d in difficulties}
    spent = dict.fromkeys(difficulties, 0.0)
    active = list(difficulties)
    for i in range(samples):
        header = _sample_header(seed, i)
        for d in list(active):
            t = _time_solve(header, d, budget_s - spent[d], chunk)
            if t is not None:
                spent[d] += t / 1000.0
            if t is None or spent[d] > budget_s:
                log.warning("calibration of %s exceeded the %.1f s budget; entry omitted", d, budget_s)
                active.remove(d)
                continue
            times[d].append(t)
    entries: dict[Difficulty, SolveTimeStats] = {}
    for d in difficulties:
        if d in active:
            entries[d] = SolveTimeStats.from_samples(d, times[d])
            log.info("calibrated %s: mean %.3f ms over %d samples", d, entries[d].mean_ms, samples)
    return DifficultyTimeMap(entries, host if host is not None else host_fingerprint())


def _sample_header(seed: int, index: int) -> bytes:
    # shared across difficulties: sample i of L.(M+1) scans at least as far
    # as sample i of L.M, so neighbouring map entries are compared on equal terms
    rng = random.Random(f"{seed}/{index}")
    return rng.randbytes(32)


# solves shorter than this are timed several times and the median kept
SHORT_SOLVE_MS = 5.0
SHORT_SOLVE_REPEATS = 5


def _time_solve(header: bytes, d: Difficulty, allowance_s: float, chunk: int) -> float | None:
    """Wall-clock ms to solve ``header`` at ``d``; None if it runs past ``allowance_s``."""
    deadline = time.monotonic() + allowance_s
    nonce = 0
    t0 = time.perf_counter()
    while True:
        try:
            found = solve(header, d, nonce, chunk)
            break
        except SolutionNotFound as e:
            nonce = e.next_nonce
            if time.monotonic() > deadline:
                return None
    elapsed = (time.perf_counter() - t0) * 1000.0
    if elapsed < SHORT_SOLVE_MS:
        # scheduler and timer jitter rival the work itself here; rerun the
        # identical search (same header, same nonce range) and keep the median
        runs = [elapsed]
        for _ in range(SHORT_SOLVE_REPEATS - 1):
            t0 = time.perf_counter()
            solve(header, d, 0, found.nonce + 1)
            runs.append((time.perf_counter() - t0) * 1000.0)
        elapsed = statistics.median(runs)
    return elapsed


def measure_hash_rate(seconds: float = 0.5) -> float:
    """Hashes per second of the solver loop on this host."""
    header = b"hash-rate-probe"
    impossible = Difficulty(64, 0)
    attempts = 0
    t0 = time.perf_counter()
    while time.perf_counter() - t0 < seconds:
        try:
            solve(header, impossible, attempts, 20_000)
        except SolutionNotFound as e:
            attempts = e.next_nonce
    return attempts / (time.perf_counter() - t0)


def predict_solve_ms(d: Difficulty, hash_rate: float) -> float:
    return expected_attempts(d) / hash_rate * 1000.0


def difficulties_near(target_ms: float, hash_rate: float, count: int = 3,
                      max_L: int = 12) -> list[Difficulty]:
    """The ``count`` difficulties whose predicted solve time is closest to ``target_ms`` in log scale."""
    cands = [Difficulty(L, M) for L in range(max_L + 1) for M in range(0, 16) if L + M <= 64]
    cands.sort(key=lambda d: (abs(math.log(predict_solve_ms(d, hash_rate) / target_ms)), d))
    return sorted(cands[:count])


# -- persistence --------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def save_map(m: DifficultyTimeMap, path: str | os.PathLike) -> Path:
    """Write the map atomically (temp file + rename)."""
    path = Path(path)
    host = m.host_fingerprint.replace("\n", " ")
    lines = [f"{MAP_HEADER} host={host}"]
    for d, st in m.entries.items():
        lines.append(",".join([str(d), _fmt(st.mean_ms), _fmt(st.stddev_ms), str(st.samples),
                               _fmt(st.min_ms), _fmt(st.max_ms)]))
    directory = path.parent if str(path.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(prefix=".map-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_map(path: str | os.PathLike) -> DifficultyTimeMap:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith(MAP_HEADER):
        raise MapFormatError(f"missing '{MAP_HEADER}' header", 1)
    header = lines[0][len(MAP_HEADER):].strip()
    host = header[len("host="):] if header.startswith("host=") else ""
    entries: dict[Difficulty, SolveTimeStats] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split(",")
        if len(cols) != 6:
            raise MapFormatError(f"expected 6 comma-separated fields, got {len(cols)}", lineno)
        try:
            d = parse_difficulty(cols[0])
            st = SolveTimeStats(d, float(cols[1]), float(cols[2]), int(cols[3]),
                                float(cols[4]), float(cols[5]))
        except ValueError as e:
            raise MapFormatError(str(e), lineno) from None
        if d in entries:
            raise MapFormatError(f"duplicate difficulty {d}", lineno)
        entries[d] = st
    return DifficultyTimeMap(entries, host)


# -- replay sampling ----------------------------------------------------------

class SolveTimeSampler(Protocol):
    def __call__(self, stats: SolveTimeStats, rng: random.Random) -> float: ...


def _trunc_point(stats: SolveTimeStats) -> float:
    return max(stats.min_ms, MIN_SOLVE_MS)


def _upper_tail(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _draw_truncated(loc: float, scale: float, lower: float, u: float) -> float:
    # inverse-CDF draw from N(loc, scale) conditioned on x >= lower
    alpha = (lower - loc) / scale
    q = _upper_tail(alpha)
    if q <= 0.0:
        return lower
    p = 1.0 - (1.0 - u) * q
    if p >= 1.0:
        # upper-tail form avoids cancellation when alpha is large
        z = -_STD_NORMAL.inv_cdf(max((1.0 - u) * q, 1e-300))
    else:
        z = _STD_NORMAL.inv_cdf(max(p, 1e-300))
    return max(lower, loc + scale * z)


def truncated_normal_sampler(stats: SolveTimeStats, rng: random.Random) -> float:
    """Normal(mean, stddev) conditioned on being >= max(min, 0.1 ms)."""
    u = rng.random()
    if stats.stddev_ms == 0:
        return stats.mean_ms if stats.mean_ms > 0 else MIN_SOLVE_MS
    return _draw_truncated(stats.mean_ms, stats.stddev_ms, _trunc_point(stats), u)


_MAX_ALPHA = 30.0
_loc_cache: dict[tuple[float, float, float], float] = {}


def _mills_ratio(a: float, terms: int = 80) -> float:
    # continued fraction for Q(a)/pdf(a); accurate for a > ~5
    r = a
    for k in range(terms, 0, -1):
        r = a + k / r
    return 1.0 / r


def truncated_mean(loc: float, scale: float, lower: float) -> float:
    alpha = (lower - loc) / scale
    if alpha > 6.0:
        return loc + scale / _mills_ratio(alpha)
    q = _upper_tail(alpha)
    if q <= 0.0:
        return lower
    pdf = math.exp(-0.5 * alpha * alpha) / math.sqrt(2 * math.pi)
    return loc + scale * pdf / q


def mean_matched_location(mean: float, scale: float, lower: float) -> float:
    """Location of a normal whose lower-truncated mean equals ``mean``."""
    key = (mean, scale, lower)
    hit = _loc_cache.get(key)
    if hit is not None:
        return hit
    if mean <= lower:
        loc = mean
    else:
        lo, hi = lower - _MAX_ALPHA * scale, mean
        if truncated_mean(lo, scale, lower) >= mean:
            loc = lo
        else:
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if truncated_mean(mid, scale, lower) < mean:
                    lo = mid
                else:
                    hi = mid
                if hi - lo <= 1e-12 * max(1.0, abs(mean)):
                    break
            loc = 0.5 * (lo + hi)
    if len(_loc_cache) > 4096:
        _loc_cache.clear()
    _loc_cache[key] = loc
    return loc


def mean_matched_sampler(stats: SolveTimeStats, rng: random.Random) -> float:
    """Truncated normal whose location is shifted so the draws keep the calibrated mean.

    Solve times are roughly exponential, so stddev is close to the mean and a
    plain lower-truncated normal overshoots the mean by almost 30%.
    """
    u = rng.random()
    if stats.stddev_ms == 0:
        return stats.mean_ms if stats.mean_ms > 0 else MIN_SOLVE_MS
    lower = _trunc_point(stats)
    loc = mean_matched_location(stats.mean_ms, stats.stddev_ms, lower)
    return _draw_truncated(loc, stats.stddev_ms, lower, u)


SAMPLERS: dict[str, SolveTimeSampler] = {
    "mean-matched": mean_matched_sampler,
    "truncnorm": truncated_normal_sampler,
}
DEFAULT_SAMPLER = "mean-matched"


def sample_solve_time(m: DifficultyTimeMap, d: Difficulty, rng: random.Random,
                      sampler: SolveTimeSampler | str = DEFAULT_SAMPLER) -> float:
    stats = m.lookup(d)
    if isinstance(sampler, str):
        sampler = SAMPLERS[sampler]
    return sampler(stats, rng)


def select_difficulty(m: DifficultyTimeMap, target_interval_ms: float) -> Difficulty:
    if not m.entries:
        raise ValueError("difficulty-time map is empty")
    return min(m.entries.values(),
               key=lambda st: (abs(st.mean_ms - target_interval_ms), st.difficulty)).difficulty
