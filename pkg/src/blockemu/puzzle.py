"""Two-phase ``L.M`` proof-of-work puzzle over SHA-256 hex digests.

A digest satisfies ``L.M`` when its maximal run of leading ``'0'`` hex digits
is at least ``L`` long and at least ``M`` further ``'0'`` digits appear anywhere
after that run (trailing zeros count, zeros need not be adjacent).  A digest
made of 64 zeros satisfies every feasible difficulty.

The preimage of a solution is ``header_bytes + str(nonce).encode("ascii")``.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from fractions import Fraction
from math import comb

import numpy as np

DIGEST_HEX_LEN = 64
MAX_NONCE = 2**64 - 1

_HEX_DIGITS = frozenset("0123456789abcdefABCDEF")
_DIFFICULTY_RE = re.compile(r"^\s*(-?\d+)\.(-?\d+)\s*$")


class PuzzleError(ValueError):
    """Base class for puzzle input errors."""


class DifficultyParseError(PuzzleError):
    pass


class DifficultyRangeError(PuzzleError):
    pass


class DigestFormatError(PuzzleError):
    pass


class SolutionNotFound(RuntimeError):
    """Raised when ``solve`` exhausts its attempt budget.

    ``next_nonce`` is where a follow-up call should resume.
    """

    def __init__(self, next_nonce: int, attempts: int):
        super().__init__(f"no solution after {attempts} attempts; resume at nonce {next_nonce}")
        self.next_nonce = next_nonce
        self.attempts = attempts


@dataclass(frozen=True, order=True)
class Difficulty:
    L: int
    M: int

    def __post_init__(self):
        if not (0 <= self.L <= DIGEST_HEX_LEN and 0 <= self.M <= DIGEST_HEX_LEN):
            raise DifficultyRangeError(f"L and M must lie in 0..64, got {self.L}.{self.M}")
        if self.L + self.M > DIGEST_HEX_LEN:
            raise DifficultyRangeError(
                f"L + M must not exceed 64, got {self.L}.{self.M}")

    def __str__(self) -> str:
        return f"{self.L}.{self.M}"

    @classmethod
    def parse(cls, text: str) -> "Difficulty":
        return parse_difficulty(text)


@dataclass(frozen=True)
class PuzzleSolution:
    nonce: int
    digest_hex: str
    attempts: int


def parse_difficulty(text: str) -> Difficulty:
    m = _DIFFICULTY_RE.match(text)
    if m is None:
        raise DifficultyParseError(f"difficulty must look like 'L.M', got {text!r}")
    return Difficulty(int(m.group(1)), int(m.group(2)))


def _check_hex(digest_hex: str) -> None:
    if not digest_hex:
        raise DigestFormatError("empty digest")
    if not _HEX_DIGITS.issuperset(digest_hex):
        raise DigestFormatError(f"non-hex character in digest {digest_hex!r}")


def count_leading_zeros(digest_hex: str) -> int:
    _check_hex(digest_hex)
    return len(digest_hex) - len(digest_hex.lstrip("0"))


def count_middle_zeros(digest_hex: str) -> int:
    """Zeros strictly after the maximal leading-zero run."""
    _check_hex(digest_hex)
    lead = len(digest_hex) - len(digest_hex.lstrip("0"))
    return digest_hex.count("0", lead)


def check_difficulty(digest_hex: str, d: Difficulty) -> bool:
    if len(digest_hex) != DIGEST_HEX_LEN:
        raise DigestFormatError(f"digest must have 64 hex digits, got {len(digest_hex)}")
    _check_hex(digest_hex)
    return _satisfies(digest_hex.lower(), d.L, d.M)


def _satisfies(h: str, L: int, M: int) -> bool:
    # h is trusted: 64 lowercase hex digits
    rest = h.lstrip("0")
    lead = DIGEST_HEX_LEN - len(rest)
    if lead == DIGEST_HEX_LEN:
        return True
    return lead >= L and rest.count("0") >= M


def digest(header_bytes: bytes, nonce: int) -> str:
    return hashlib.sha256(header_bytes + b"%d" % nonce).hexdigest()


def solve(header_bytes: bytes, d: Difficulty, start_nonce: int = 0,
          max_attempts: int = MAX_NONCE) -> PuzzleSolution:
    """Scan nonces upward from ``start_nonce`` until one satisfies ``d``."""
    if max_attempts <= 0:
        raise ValueError("max_attempts must be positive")
    if not 0 <= start_nonce <= MAX_NONCE:
        raise ValueError("start_nonce outside the unsigned 64-bit range")
    base = hashlib.sha256(header_bytes)
    L, M = d.L, d.M
    prefix = "0" * L
    stop = min(start_nonce + max_attempts, MAX_NONCE + 1)
    for nonce in range(start_nonce, stop):
        h = base.copy()
        h.update(b"%d" % nonce)
        hx = h.hexdigest()
        if hx.startswith(prefix) and _satisfies(hx, L, M):
            return PuzzleSolution(nonce, hx, nonce - start_nonce + 1)
    raise SolutionNotFound(stop, stop - start_nonce)


def verify(header_bytes: bytes, s: PuzzleSolution, d: Difficulty) -> bool:
    if not isinstance(s.nonce, int) or not 0 <= s.nonce <= MAX_NONCE:
        return False
    recomputed = digest(header_bytes, s.nonce)
    return recomputed == s.digest_hex and _satisfies(recomputed, d.L, d.M)


# -- batch helpers (Monte-Carlo and exhaustive property checks) ---------------

def digests_to_nibbles(digests: np.ndarray) -> np.ndarray:
    """Convert an ``(n, 32)`` uint8 digest array to ``(n, 64)`` hex nibbles."""
    digests = np.asarray(digests, dtype=np.uint8)
    out = np.empty((digests.shape[0], 2 * digests.shape[1]), dtype=np.uint8)
    out[:, 0::2] = digests >> 4
    out[:, 1::2] = digests & 0x0F
    return out


def zero_profile(nibbles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Leading-run length and zeros-after-run counts for each nibble row."""
    is_zero = nibbles == 0
    nonzero = ~is_zero
    width = nibbles.shape[1]
    lead = np.where(nonzero.any(axis=1), nonzero.argmax(axis=1), width)
    mid = is_zero.sum(axis=1) - lead
    return lead, mid


def check_difficulty_batch(lead: np.ndarray, mid: np.ndarray, d: Difficulty) -> np.ndarray:
    return ((lead >= d.L) & (mid >= d.M)) | (lead == DIGEST_HEX_LEN)


def satisfaction_probability(d: Difficulty) -> Fraction:
    """Exact probability that a uniform random digest satisfies ``d``."""
    p_zero = Fraction(1, 16)
    p_nonzero = Fraction(15, 16)
    total = p_zero ** DIGEST_HEX_LEN  # the all-zero digest
    for lead in range(d.L, DIGEST_HEX_LEN):
        # digit at index `lead` is nonzero; the remaining digits are free
        free = DIGEST_HEX_LEN - lead - 1
        tail = sum(comb(free, k) * p_zero**k * p_nonzero**(free - k)
                   for k in range(d.M, free + 1))
        total += p_zero**lead * p_nonzero * tail
    return total


def expected_attempts(d: Difficulty) -> float:
    return float(1 / satisfaction_probability(d))
