"""Pluggable consensus providers.

A provider turns a block candidate into a :class:`Proof` and checks proofs.
Two ship with the package: ``nakamoto-real`` runs the nonce search and
``nakamoto-replay`` draws a calibrated solve time instead.
"""
from __future__ import annotations

import math
import random
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable

from . import puzzle
from .calibration import DEFAULT_SAMPLER, DifficultyTimeMap, sample_solve_time
from .ledger import Block, canonical_header_bytes, header_hash
from .puzzle import Difficulty, PuzzleSolution

REAL = "realPoW"
REPLAY = "replayPoW"
GENESIS = "genesis"


class ProofFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Proof:
    kind: str
    digest_hex: str
    nonce: int | None = None
    claimed_solve_ms: float | None = None

    def render(self) -> str:
        """``kind:nonce:claimedMs:digest`` with empty fields for absent values."""
        nonce = "" if self.nonce is None else str(self.nonce)
        claimed = "" if self.claimed_solve_ms is None else repr(float(self.claimed_solve_ms))
        return f"{self.kind}:{nonce}:{claimed}:{self.digest_hex}"

    @classmethod
    def parse(cls, text: str) -> "Proof":
        parts = text.split(":")
        if len(parts) != 4 or not parts[0]:
            raise ProofFormatError(f"malformed proof {text!r}")
        kind, nonce, claimed, digest = parts
        try:
            return cls(kind, digest,
                       int(nonce) if nonce else None,
                       float(claimed) if claimed else None)
        except ValueError:
            raise ProofFormatError(f"malformed proof {text!r}") from None


@dataclass
class NodeContext:
    """What a provider may consult while proving on behalf of one node."""
    node_id: int
    difficulty: Difficulty
    rng: random.Random


class ConsensusProvider(ABC):
    name: str = ""
    kind: str = ""

    @abstractmethod
    def generate_proof(self, block: Block, ctx: NodeContext) -> Proof: ...

    @abstractmethod
    def verify_proof(self, block: Block, proof: Proof, difficulty: Difficulty) -> bool: ...


class NakamotoReal(ConsensusProvider):
    name = "nakamoto-real"
    kind = REAL

    def generate_proof(self, block, ctx):
        return generate_proof_real(block, ctx.difficulty)

    def verify_proof(self, block, proof, difficulty):
        return _verify_real(block, proof, difficulty)


class NakamotoReplay(ConsensusProvider):
    name = "nakamoto-replay"
    kind = REPLAY

    def __init__(self, time_map: DifficultyTimeMap, sampler: str = DEFAULT_SAMPLER):
        self.time_map = time_map
        self.sampler = sampler

    def generate_proof(self, block, ctx):
        return generate_proof_replay(block, ctx.difficulty, self.time_map, ctx.rng, self.sampler)

    def verify_proof(self, block, proof, difficulty):
        return _verify_replay(block, proof)


def generate_proof_real(candidate: Block, d: Difficulty) -> Proof:
    sol = puzzle.solve(canonical_header_bytes(candidate), d)
    return Proof(REAL, sol.digest_hex, nonce=sol.nonce)


def generate_proof_replay(candidate: Block, d: Difficulty, time_map: DifficultyTimeMap,
                          rng: random.Random, sampler: str = DEFAULT_SAMPLER) -> Proof:
    claimed = sample_solve_time(time_map, d, rng, sampler)
    return Proof(REPLAY, header_hash(candidate), claimed_solve_ms=claimed)


def _verify_real(block: Block, proof: Proof, d: Difficulty) -> bool:
    if proof.kind != REAL or proof.nonce is None or proof.claimed_solve_ms is not None:
        return False
    sol = PuzzleSolution(proof.nonce, proof.digest_hex, 0)
    return puzzle.verify(canonical_header_bytes(block), sol, d)


def _verify_replay(block: Block, proof: Proof) -> bool:
    # replay proofs carry no nonce: only header integrity and a positive cost are checked
    if proof.kind != REPLAY or proof.nonce is not None:
        return False
    claimed = proof.claimed_solve_ms
    if claimed is None or not math.isfinite(claimed) or claimed <= 0:
        return False
    return proof.digest_hex == header_hash(block)


def _verify_genesis(block: Block, proof: Proof) -> bool:
    return (proof.kind == GENESIS and block.parent_block is None and block.depth == 0
            and proof.digest_hex == header_hash(block))


def verify_proof(block: Block, proof: Proof, d: Difficulty, mode: str | None = None) -> bool:
    """Check ``proof`` for ``block``; ``mode`` defaults to the proof's own kind."""
    mode = proof.kind if mode is None else mode
    if mode in (REAL, "real", NakamotoReal.name):
        return _verify_real(block, proof, d)
    if mode in (REPLAY, "replay", NakamotoReplay.name):
        return _verify_replay(block, proof)
    if mode == GENESIS:
        return _verify_genesis(block, proof)
    verifier = _KIND_VERIFIERS.get(mode)
    if verifier is None:
        return False
    try:
        return bool(verifier.verify_proof(block, proof, d))
    except Exception:
        return False


# -- registry -----------------------------------------------------------------

_FACTORIES: dict[str, Callable[..., ConsensusProvider]] = {
    NakamotoReal.name: lambda **kw: NakamotoReal(),
    NakamotoReplay.name: lambda time_map=None, **kw: NakamotoReplay(time_map, **kw),
}
_KIND_VERIFIERS: dict[str, ConsensusProvider] = {}


def register_provider(name: str, factory: Callable[..., ConsensusProvider],
                      verifier: ConsensusProvider | None = None) -> None:
    """Make a provider selectable by name.

    ``verifier`` is used to check stored proofs of its ``kind`` during chain
    integrity checks; pass an instance when the proofs are not built-in kinds.
    """
    if ":" in name or "|" in name:
        raise ValueError("provider names may not contain ':' or '|'")
    _FACTORIES[name] = factory
    if verifier is not None:
        if not verifier.kind or ":" in verifier.kind or "|" in verifier.kind:
            raise ValueError("custom proof kinds must be nonempty and free of ':' and '|'")
        _KIND_VERIFIERS[verifier.kind] = verifier


def provider_names() -> list[str]:
    return list(_FACTORIES)


def make_provider(name: str, **kwargs) -> ConsensusProvider:
    try:
        factory = _FACTORIES[name]
    except KeyError:
        raise KeyError(f"unknown consensus provider {name!r}; known: {', '.join(_FACTORIES)}") from None
    return factory(**kwargs)
