import random

import pytest

from blockemu.calibration import DifficultyTimeMap, SolveTimeStats
from blockemu.consensus import REPLAY, ConsensusProvider, NakamotoReal, NodeContext, Proof, verify_proof
from blockemu.ledger import Block, ChainStore, Transaction, header_hash, make_genesis
from blockemu.puzzle import Difficulty


def synthetic_map(mean_ms=600_000.0, stddev_ms=600_000.0, difficulty=Difficulty(1, 0),
                  samples=30, min_ms=5_000.0, max_ms=3e6):
    st = SolveTimeStats(difficulty, mean_ms, stddev_ms, samples, min_ms, max_ms)
    return DifficultyTimeMap({difficulty: st}, "synthetic")


@pytest.fixture
def replay_map():
    return synthetic_map()


def build_real_chain(length=20, difficulty=Difficulty(1, 0), txns_per_block=3, seed=0):
    """A linear chain mined with the real puzzle, plus its store."""
    rng = random.Random(seed)
    provider = NakamotoReal()
    store = ChainStore(make_genesis(), difficulty)
    next_txn = 0
    for i in range(1, length + 1):
        tip = store.tip
        txns = []
        for _ in range(txns_per_block):
            txns.append(Transaction(next_txn, rng.randrange(5), float(next_txn * 100), 250))
            next_txn += 1
        b = Block(i, float(i * 1000), rng.randrange(5), tip.block_id, tip.depth + 1,
                  store.hashes[tip.block_id], txn_list=tuple(txns))
        b.proof = provider.generate_proof(b, NodeContext(b.creator_id, difficulty, rng))
        store.append(b)
    return store


@pytest.fixture(scope="session")
def real_chain_20():
    return build_real_chain(20)


class Scripted(ConsensusProvider):
    """Replay-style provider whose solve time comes from ``fn(node_id, block)``."""
    name = "scripted"
    kind = REPLAY

    def __init__(self, fn):
        self.fn = fn

    def generate_proof(self, block, ctx):
        return Proof(REPLAY, header_hash(block), claimed_solve_ms=float(self.fn(ctx.node_id, block)))

    def verify_proof(self, block, proof, difficulty):
        return verify_proof(block, proof, difficulty)
