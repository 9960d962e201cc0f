"""Blocks, transactions and per-node chain views.

Header preimage layout (every field is a 4-byte big-endian length followed by
ASCII text)::

    blockID | creatorID | creationTime | previousHash | depth | txnDigest

``creationTime`` is ``repr(float(ms))``; ``txnDigest`` is the hex SHA-256 of
the block's transaction ids, each as 8 big-endian bytes, in block order.
The proof and the child links are not part of the header.
"""
from __future__ import annotations

import enum
import hashlib
import struct
from bisect import insort
from dataclasses import dataclass, field, replace
from functools import lru_cache
from operator import attrgetter
from pathlib import Path
from typing import TYPE_CHECKING, Iterable

from .puzzle import Difficulty, parse_difficulty

if TYPE_CHECKING:
    from .consensus import Proof

ZERO_HASH = "0" * 64
GENESIS_ID = 0
LEDGER_HEADER = "# blocklite-ledger v1"

_get_txn_id = attrgetter("txn_id")


class LedgerFormatError(ValueError):
    def __init__(self, msg: str, lineno: int | None = None):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {msg}" if lineno is not None else msg)


class LedgerIntegrityError(LedgerFormatError):
    pass


class AppendOutcome(enum.Enum):
    EXTENDED_TIP = "extendedTip"
    CREATED_FORK = "createdFork"
    ORPHANED = "orphaned"
    REJECTED = "rejected"


@dataclass(frozen=True, slots=True)
class Transaction:
    txn_id: int
    creator_id: int
    creation_time: float
    payload_size: int = 250


@dataclass(slots=True)
class Block:
    block_id: int
    creation_time: float
    creator_id: int
    parent_block: int | None
    depth: int
    previous_hash: str
    child_list: list[int] = field(default_factory=list)
    num_child: int = 0
    txn_list: tuple[Transaction, ...] = ()
    proof: Proof | None = None

    @property
    def txn_ids(self) -> tuple[int, ...]:
        return tuple(map(_get_txn_id, self.txn_list))


def _lp(text: str) -> bytes:
    return len(text).to_bytes(4, "big") + text.encode("ascii")


def _txn_record(t: Transaction) -> bytes:
    # id, creator and size as 8-byte big-endian, then the length-prefixed time text
    when = repr(float(t.creation_time)).encode("ascii")
    return (t.txn_id.to_bytes(8, "big") + t.creator_id.to_bytes(8, "big")
            + t.payload_size.to_bytes(8, "big") + len(when).to_bytes(4, "big") + when)


def _txn_digest(txns: tuple[Transaction, ...]) -> str:
    return hashlib.sha256(b"".join(map(_txn_record, txns))).hexdigest()


_digest_by_tuple: dict[int, tuple[tuple, str]] = {}


def txn_digest(txns: Iterable[Transaction]) -> str:
    """SHA-256 hex over every transaction record, in block order."""
    # tuples of frozen transactions are immutable, so identity is a safe cache key
    if type(txns) is tuple:
        hit = _digest_by_tuple.get(id(txns))
        if hit is not None and hit[0] is txns:
            return hit[1]
        d = _txn_digest(txns)
        if len(_digest_by_tuple) >= 4096:
            _digest_by_tuple.clear()
        _digest_by_tuple[id(txns)] = (txns, d)
        return d
    return _txn_digest(tuple(txns))


@lru_cache(maxsize=256)
def _header_struct(lens: tuple[int, ...]) -> struct.Struct:
    return struct.Struct(">" + "".join(f"I{n}s" for n in lens))


def canonical_header_bytes(b: Block) -> bytes:
    """Six length-prefixed ASCII fields; same bytes as joining ``_lp`` of each."""
    raw = (str(b.block_id).encode("ascii"), str(b.creator_id).encode("ascii"),
           repr(float(b.creation_time)).encode("ascii"), b.previous_hash.encode("ascii"),
           str(b.depth).encode("ascii"), txn_digest(b.txn_list).encode("ascii"))
    a, c, t, p, d, x = raw
    la, lc, lt, lp, ld, lx = lens = (len(a), len(c), len(t), len(p), len(d), len(x))
    return _header_struct(lens).pack(la, a, lc, c, lt, t, lp, p, ld, d, lx, x)


def header_hash(b: Block) -> str:
    return hashlib.sha256(canonical_header_bytes(b)).hexdigest()


def make_genesis() -> Block:
    from .consensus import GENESIS, Proof

    g = Block(GENESIS_ID, 0.0, 0, None, 0, ZERO_HASH)
    g.proof = Proof(GENESIS, header_hash(g))
    return g


class ChainStore:
    """One node's view of the block tree.

    The tip is the deepest block descending from the node's last known
    committed (final) block; among equally deep candidates the first one
    seen wins.  Child lists are kept sorted by block id so that two nodes
    holding the same blocks hold identical stores.
    """

    def __init__(self, genesis: Block | None = None, difficulty: Difficulty | None = None):
        g = genesis if genesis is not None else make_genesis()
        g = replace(g, child_list=[], num_child=0)
        self.difficulty = difficulty if difficulty is not None else Difficulty(0, 0)
        self.blocks: dict[int, Block] = {g.block_id: g}
        self.hashes: dict[int, str] = {g.block_id: header_hash(g)}
        self.orphans: dict[int, list[Block]] = {}
        self._orphan_ids: set[int] = set()
        self._seen: dict[int, int] = {g.block_id: 0}
        self.genesis_id = self.tip_id = self.final_id = g.block_id
        self._pending_final: int | None = None

    def __eq__(self, other):
        if not isinstance(other, ChainStore):
            return NotImplemented
        return (self.blocks == other.blocks and self.tip_id == other.tip_id
                and self.final_id == other.final_id and self.genesis_id == other.genesis_id
                and self.difficulty == other.difficulty
                and self._orphan_view() == other._orphan_view())

    def _orphan_view(self):
        return {p: sorted((b.block_id, b) for b in bs) for p, bs in self.orphans.items()}

    @property
    def tip(self) -> Block:
        return self.blocks[self.tip_id]

    def __contains__(self, block_id: int) -> bool:
        return block_id in self.blocks

    def __len__(self) -> int:
        return len(self.blocks)

    def has_seen(self, block_id: int) -> bool:
        return block_id in self.blocks or block_id in self._orphan_ids

    def append(self, block: Block, block_hash: str | None = None) -> AppendOutcome:
        """Insert ``block``; ``block_hash`` may pass an already computed header hash."""
        bid = block.block_id
        if bid in self.blocks or bid in self._orphan_ids or block.parent_block is None:
            return AppendOutcome.REJECTED
        if block.parent_block not in self.blocks:
            self.orphans.setdefault(block.parent_block, []).append(block)
            self._orphan_ids.add(bid)
            return AppendOutcome.ORPHANED
        old_tip = self.tip_id
        if not self._link(block, block_hash):
            return AppendOutcome.REJECTED
        stack = [bid]
        while stack:
            for ob in self.orphans.pop(stack.pop(), ()):
                self._orphan_ids.discard(ob.block_id)
                if self._link(ob, None):
                    stack.append(ob.block_id)
        if self.tip_id != old_tip and self.descends(self.tip_id, bid):
            return AppendOutcome.EXTENDED_TIP
        return AppendOutcome.CREATED_FORK

    def _link(self, block: Block, block_hash: str | None) -> bool:
        parent = self.blocks[block.parent_block]
        if block.depth != parent.depth + 1 or block.previous_hash != self.hashes[parent.block_id]:
            return False
        b = Block(block.block_id, block.creation_time, block.creator_id, block.parent_block,
                  block.depth, block.previous_hash, [], 0, block.txn_list, block.proof)
        bid = b.block_id
        self.blocks[bid] = b
        self.hashes[bid] = block_hash if block_hash is not None else header_hash(b)
        self._seen[bid] = len(self._seen)
        insort(parent.child_list, bid)
        parent.num_child += 1
        if b.depth > self.blocks[self.tip_id].depth and self.descends(bid, self.final_id):
            self.tip_id = bid
        if self._pending_final == bid:
            self._pending_final = None
            self.set_final(bid)
        return True

    def descends(self, block_id: int, ancestor_id: int) -> bool:
        """True if ``ancestor_id`` lies on the path from genesis to ``block_id``."""
        if ancestor_id == self.genesis_id:
            return block_id in self.blocks
        blocks = self.blocks
        anc_depth = blocks[ancestor_id].depth
        cur = blocks[block_id]
        while cur.depth > anc_depth:
            cur = blocks[cur.parent_block]
        return cur.block_id == ancestor_id

    def set_final(self, block_id: int) -> bool:
        """Pin the chain to ``block_id``; returns True if the tip moved.

        Unknown blocks are remembered and applied on arrival.  A block that
        does not extend the current final block is ignored.
        """
        if block_id not in self.blocks:
            self._pending_final = block_id
            return False
        if block_id == self.final_id or not self.descends(block_id, self.final_id):
            return False
        self.final_id = block_id
        if self.descends(self.tip_id, block_id):
            return False
        self.tip_id = self._deepest_under(block_id)
        return True

    def _deepest_under(self, root: int) -> int:
        best = root
        best_key = (self.blocks[root].depth, -self._seen[root])
        stack = [root]
        while stack:
            for c in self.blocks[stack.pop()].child_list:
                key = (self.blocks[c].depth, -self._seen[c])
                if key > best_key:
                    best, best_key = c, key
                stack.append(c)
        return best

    def longest_chain(self) -> list[int]:
        out = []
        cur: int | None = self.tip_id
        while cur is not None:
            out.append(cur)
            cur = self.blocks[cur].parent_block
        out.reverse()
        return out

    def chain_txn_ids(self, stop_at: int | None = None) -> set[int]:
        """Transaction ids on the path from the tip back to (excluding) ``stop_at``."""
        ids: set[int] = set()
        cur: int | None = self.tip_id
        while cur is not None and cur != stop_at:
            b = self.blocks[cur]
            ids.update(t.txn_id for t in b.txn_list)
            cur = b.parent_block
        return ids

    def snapshot(self) -> dict:
        """Arrival-order independent summary used to compare stores."""
        return {
            "blocks": {k: self.blocks[k] for k in sorted(self.blocks)},
            "orphans": self._orphan_view(),
            "max_depth": max(b.depth for b in self.blocks.values()),
        }


def append_block(store: ChainStore, b: Block) -> AppendOutcome:
    return store.append(b)


def longest_chain(store: ChainStore) -> list[int]:
    return store.longest_chain()


def verify_chain_integrity(store: ChainStore) -> bool:
    """Recompute every header hash, parent link and proof."""
    from .consensus import verify_proof

    blocks = store.blocks
    hashes = {}
    for key, b in blocks.items():
        if key != b.block_id:
            return False
        hashes[key] = header_hash(b)
    for key, b in blocks.items():
        if b.num_child != len(b.child_list) or len(set(b.child_list)) != len(b.child_list):
            return False
        for c in b.child_list:
            child = blocks.get(c)
            if child is None or child.parent_block != key:
                return False
        if b.parent_block is None:
            if key != store.genesis_id or b.depth != 0 or b.previous_hash != ZERO_HASH:
                return False
        else:
            parent = blocks.get(b.parent_block)
            if (parent is None or key not in parent.child_list or b.depth != parent.depth + 1
                    or b.previous_hash != hashes[b.parent_block]):
                return False
        if b.proof is None or not verify_proof(b, b.proof, store.difficulty):
            return False
    for bs in store.orphans.values():
        for b in bs:
            if b.proof is None or not verify_proof(b, b.proof, store.difficulty):
                return False
    return store.tip_id in blocks and store.final_id in blocks


# -- ledger files -------------------------------------------------------------

def _render_txn(t: Transaction) -> str:
    return f"{t.txn_id}:{t.creator_id}:{float(t.creation_time)!r}:{t.payload_size}"


def _render_block(b: Block) -> str:
    parent = "-" if b.parent_block is None else str(b.parent_block)
    txns = ",".join(_render_txn(t) for t in b.txn_list)
    return "|".join([str(b.block_id), str(b.creator_id), repr(float(b.creation_time)), parent,
                     str(b.depth), b.previous_hash, b.proof.render(), txns])


def ledger_path(directory: str | Path, node_id: int) -> Path:
    return Path(directory) / f"ledger_{node_id}.txt"


def persist_ledger(store: ChainStore, node_id: int, directory: str | Path) -> Path:
    path = ledger_path(directory, node_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{LEDGER_HEADER} node={node_id} difficulty={store.difficulty} "
             f"tip={store.tip_id} final={store.final_id}"]
    for b in sorted(store.blocks.values(), key=lambda b: (b.depth, b.block_id)):
        lines.append(_render_block(b))
    for b in sorted((b for bs in store.orphans.values() for b in bs), key=lambda b: b.block_id):
        lines.append(_render_block(b))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _parse_block(line: str, lineno: int) -> Block:
    from .consensus import Proof, ProofFormatError

    cols = line.split("|")
    if len(cols) != 8:
        raise LedgerFormatError(f"expected 8 '|'-separated fields, got {len(cols)}", lineno)
    try:
        txns = []
        for item in filter(None, cols[7].split(",")):
            tid, creator, ctime, size = item.split(":")
            txns.append(Transaction(int(tid), int(creator), float(ctime), int(size)))
        return Block(
            block_id=int(cols[0]), creator_id=int(cols[1]), creation_time=float(cols[2]),
            parent_block=None if cols[3] == "-" else int(cols[3]), depth=int(cols[4]),
            previous_hash=cols[5], txn_list=tuple(txns), proof=Proof.parse(cols[6]))
    except (ValueError, ProofFormatError) as e:
        raise LedgerFormatError(str(e), lineno) from None


def load_ledger(path: str | Path) -> ChainStore:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(LEDGER_HEADER):
        raise LedgerFormatError(f"missing '{LEDGER_HEADER}' header", 1)
    meta = dict(kv.split("=", 1) for kv in lines[0][len(LEDGER_HEADER):].split() if "=" in kv)
    try:
        difficulty = parse_difficulty(meta.get("difficulty", "0.0"))
        tip = int(meta["tip"]) if "tip" in meta else None
        final = int(meta["final"]) if "final" in meta else None
    except (ValueError, KeyError) as e:
        raise LedgerFormatError(f"bad header: {e}", 1) from None
    records = [(n, _parse_block(line, n)) for n, line in enumerate(lines[1:], start=2) if line.strip()]
    if not records or records[0][1].parent_block is not None:
        raise LedgerFormatError("first block must be the genesis block", 2)
    store = ChainStore(records[0][1], difficulty)
    for lineno, b in records[1:]:
        if store.append(b) is AppendOutcome.REJECTED:
            raise LedgerIntegrityError(f"block {b.block_id} breaks the hash chain or is a duplicate", lineno)
    if final is not None and final != store.genesis_id:
        if final not in store.blocks:
            raise LedgerFormatError(f"final block {final} not in ledger", 1)
        store.set_final(final)
    if tip is not None:
        if tip not in store.blocks or not store.descends(tip, store.final_id):
            raise LedgerFormatError(f"tip block {tip} not in ledger", 1)
        if store.blocks[tip].depth != store.tip.depth:
            raise LedgerFormatError(f"tip block {tip} is not a deepest block", 1)
        store.tip_id = tip
    if not verify_chain_integrity(store):
        raise LedgerIntegrityError(f"recomputed hashes or proofs do not match in {path}")
    return store
