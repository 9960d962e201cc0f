import dataclasses
import math
import random

import pytest

from blockemu import consensus
from blockemu.consensus import (GENESIS, REAL, REPLAY, ConsensusProvider, NakamotoReal, NakamotoReplay,
                                NodeContext, Proof, ProofFormatError, make_provider, provider_names,
                                register_provider, verify_proof)
from blockemu.ledger import Block, ChainStore, Transaction, header_hash, make_genesis, verify_chain_integrity
from blockemu.puzzle import Difficulty, check_difficulty

from conftest import synthetic_map


def candidate(bid=1):
    g = make_genesis()
    return Block(bid, 5.0, 2, g.block_id, 1, header_hash(g), txn_list=(Transaction(1, 2, 1.0),))


def test_proof_render_parse_round_trip():
    for p in [Proof(REAL, "ab" * 32, nonce=17), Proof(REPLAY, "cd" * 32, claimed_solve_ms=0.1 + 0.2),
              Proof(GENESIS, "0" * 64)]:
        assert Proof.parse(p.render()) == p
    assert Proof(REAL, "ab", nonce=3).render() == "realPoW:3::ab"
    for bad in ["", "realPoW:1:2", "realPoW:x::ab", ":1::ab"]:
        with pytest.raises(ProofFormatError):
            Proof.parse(bad)


def test_real_generate_and_verify():
    d = Difficulty(1, 1)
    b = candidate()
    p = NakamotoReal().generate_proof(b, NodeContext(2, d, random.Random(0)))
    assert p.kind == REAL and p.claimed_solve_ms is None
    assert check_difficulty(p.digest_hex, d)
    assert NakamotoReal().verify_proof(b, p, d)
    tampered = dataclasses.replace(b, creation_time=6.0)
    assert not verify_proof(tampered, p, d)
    assert not verify_proof(b, dataclasses.replace(p, nonce=None), d)
    assert not verify_proof(b, dataclasses.replace(p, claimed_solve_ms=3.0), d)


def test_replay_generate_uses_map_and_header_hash():
    m = synthetic_map(mean_ms=250.0, stddev_ms=0.0, min_ms=250.0, max_ms=250.0)
    b = candidate()
    p = NakamotoReplay(m).generate_proof(b, NodeContext(2, Difficulty(1, 0), random.Random(0)))
    assert p.kind == REPLAY and p.nonce is None
    assert p.claimed_solve_ms == 250.0
    assert p.digest_hex == header_hash(b)
    assert verify_proof(b, p, Difficulty(1, 0))


@pytest.mark.parametrize("change", [
    {"claimed_solve_ms": 0.0}, {"claimed_solve_ms": -1.0}, {"claimed_solve_ms": math.nan},
    {"claimed_solve_ms": math.inf}, {"claimed_solve_ms": None}, {"nonce": 3}, {"digest_hex": "0" * 64},
])
def test_replay_verify_rejects(change):
    b = candidate()
    p = Proof(REPLAY, header_hash(b), claimed_solve_ms=10.0)
    assert verify_proof(b, p, Difficulty(1, 0))
    assert not verify_proof(b, dataclasses.replace(p, **change), Difficulty(1, 0))


def test_replay_verify_rejects_tampered_header():
    b = candidate()
    p = Proof(REPLAY, header_hash(b), claimed_solve_ms=10.0)
    assert not verify_proof(dataclasses.replace(b, creator_id=9), p, Difficulty(1, 0))


def test_mode_override_and_unknown_kind():
    b = candidate()
    p = Proof(REPLAY, header_hash(b), claimed_solve_ms=10.0)
    assert not verify_proof(b, p, Difficulty(1, 0), mode="real")
    assert not verify_proof(b, Proof("mystery", "0" * 64), Difficulty(0, 0))


def test_genesis_proof():
    g = make_genesis()
    assert verify_proof(g, g.proof, Difficulty(9, 9))
    assert not verify_proof(candidate(), Proof(GENESIS, header_hash(candidate())), Difficulty(0, 0))


class AlwaysOk(ConsensusProvider):
    name = "always-ok"
    kind = "alwaysOk"

    def generate_proof(self, block, ctx):
        return Proof(self.kind, header_hash(block), claimed_solve_ms=1.0)

    def verify_proof(self, block, proof, difficulty):
        return proof.kind == self.kind and proof.digest_hex == header_hash(block)


def test_registry_and_custom_kind_integrity(monkeypatch):
    monkeypatch.setattr(consensus, "_FACTORIES", dict(consensus._FACTORIES))
    monkeypatch.setattr(consensus, "_KIND_VERIFIERS", dict(consensus._KIND_VERIFIERS))
    register_provider("always-ok", lambda **kw: AlwaysOk(), verifier=AlwaysOk())
    assert "always-ok" in provider_names()
    prov = make_provider("always-ok")
    store = ChainStore()
    b = candidate()
    b.proof = prov.generate_proof(b, NodeContext(0, Difficulty(0, 0), random.Random(0)))
    store.append(b)
    assert verify_chain_integrity(store)
    with pytest.raises(ValueError):
        register_provider("bad:name", lambda **kw: AlwaysOk())
    with pytest.raises(KeyError):
        make_provider("nope")


def test_builtin_names():
    assert {"nakamoto-real", "nakamoto-replay"} <= set(provider_names())
    assert isinstance(make_provider("nakamoto-real"), NakamotoReal)
    rep = make_provider("nakamoto-replay", time_map=synthetic_map())
    assert isinstance(rep, NakamotoReplay)
