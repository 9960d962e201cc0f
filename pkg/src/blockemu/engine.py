"""Single-scheduler emulation of a proof-of-work network.

Every logical node is a small state record; one event loop drives them all
through the global :class:`~blockemu.netqueue.EventQueue`.

Transactions enter one shared pending pool when submitted (propagation of
transactions is not modelled).  A node's mempool is that pool minus the
transactions already on its own uncommitted chain.  Blocks and votes travel
with sampled latency.  A block is committed once its creator has counted
votes from a strict majority of nodes (its own included) and its parent is
committed; nodes that learn of a commitment never reorganise below it.
"""
from __future__ import annotations

import hashlib
import heapq
import logging
import os
import random
import struct
import time
from itertools import islice
from dataclasses import dataclass, field
from typing import Callable

from .calibration import DEFAULT_SAMPLER, SAMPLERS, CalibrationMiss, DifficultyTimeMap
from .consensus import REPLAY, ConsensusProvider, NakamotoReal, NakamotoReplay, NodeContext
from .ledger import AppendOutcome, Block, ChainStore, Transaction, make_genesis
from .netqueue import Event, EventKind, EventQueue, LatencyModel, broadcast
from .puzzle import Difficulty

log = logging.getLogger(__name__)

MODES = ("real", "replay")
# one trace record per processed event: timestamp, seq, kind, target
_pack_trace = struct.Struct(">dQBI").pack
ARRIVALS = ("uniform", "poisson")


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    node_count: int = 100
    total_transactions: int = 1000
    difficulty: Difficulty = Difficulty(1, 0)
    mode: str = "replay"
    seed: int = 0
    block_size_txns: int = 100
    latency: LatencyModel = field(default_factory=LatencyModel)
    txn_rate: float = 10.0
    arrivals: str = "uniform"
    sampler: str = DEFAULT_SAMPLER
    payload_size: int = 250

    def validate(self) -> None:
        if self.node_count < 1:
            raise ConfigError("node_count must be >= 1")
        if self.total_transactions < 0:
            raise ConfigError("total_transactions must be >= 0")
        if self.block_size_txns < 1:
            raise ConfigError("block_size_txns must be >= 1")
        if not self.txn_rate > 0:
            raise ConfigError("txn_rate must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.arrivals not in ARRIVALS:
            raise ConfigError(f"arrivals must be one of {ARRIVALS}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler must be one of {tuple(SAMPLERS)}")


@dataclass
class RunMetrics:
    wall_clock_ms: float = 0.0
    simulated_ms: float = 0.0
    blocks_committed: int = 0
    forks_observed: int = 0
    txns_committed: int = 0
    throughput_txns_per_sec: float = 0.0
    blocks_mined: int = 0
    stale_work: int = 0
    invalid_blocks: int = 0
    rejected_blocks: int = 0
    unknown_votes: int = 0
    conflicting_majorities: int = 0
    events_processed: int = 0
    peak_rss_bytes: int | None = None
    # (simulated ms, blocks committed, txns committed, rss bytes or None, wall ms)
    rows: list[tuple[float, int, int, int | None, float]] = field(default_factory=list)

    # fields that depend on the host rather than on (config, seed)
    HOST_FIELDS = ("wall_clock_ms", "throughput_txns_per_sec", "peak_rss_bytes")

    def deterministic_view(self) -> dict:
        out = {k: v for k, v in vars(self).items() if k not in self.HOST_FIELDS and k != "rows"}
        out["rows"] = [r[:3] for r in self.rows]
        return out


def current_rss_bytes() -> int | None:
    """Resident set size from /proc; None where unsupported."""
    try:
        with open("/proc/self/statm") as f:
            return int(f.read().split()[1]) * os.sysconf("SC_PAGE_SIZE")
    except (OSError, ValueError, IndexError, AttributeError):
        return None


@dataclass(slots=True)
class Mining:
    seq: int
    block: Block
    started: float


@dataclass(slots=True)
class NodeState:
    node_id: int
    store: ChainStore
    mining: Mining | None = None
    votes_cast: set[int] = field(default_factory=set)
    idle_token: int = 0
    ctx: NodeContext | None = None


class Emulation:
    def __init__(self, config: SimConfig, provider: ConsensusProvider | None = None,
                 time_map: DifficultyTimeMap | None = None, record_trace: bool = False,
                 keep_mining_log: bool = False):
        config.validate()
        if provider is None:
            if config.mode == "replay":
                if time_map is None:
                    raise ConfigError("replay mode needs a difficulty-time map")
                provider = NakamotoReplay(time_map, config.sampler)
            else:
                provider = NakamotoReal()
        if isinstance(provider, NakamotoReplay) and config.difficulty not in provider.time_map:
            raise CalibrationMiss(config.difficulty)
        self.config = config
        self.provider = provider
        self.rng = random.Random(config.seed)
        self.queue = EventQueue()
        self.now = 0.0
        n = config.node_count
        self.majority = n // 2 + 1
        genesis = make_genesis()
        self.genesis_id = genesis.block_id
        self.nodes = [NodeState(i, ChainStore(genesis, config.difficulty),
                                ctx=NodeContext(i, config.difficulty, self.rng)) for i in range(n)]
        self.node_ids = range(n)
        self.pending: dict[int, Transaction] = {}
        self.submitted = 0
        self.blocks: dict[int, Block] = {genesis.block_id: genesis}
        self._txn_ids: dict[int, tuple[int, ...]] = {genesis.block_id: ()}
        self._pick_cache: dict[tuple, tuple[Transaction, ...]] = {}
        self._pool_version = 0
        self.children: dict[int, list[int]] = {}
        self.tally: dict[int, int] = {}
        self.committed: list[int] = [genesis.block_id]
        self.committed_set: set[int] = {genesis.block_id}
        self.waiting: dict[int, list[int]] = {}  # parent id -> majority children awaiting it
        self.conflicted: set[int] = set()
        self._idle: list[tuple[int, int, int]] = []
        self._next_block_id = genesis.block_id + 1
        self._next_arrival = 0.0
        self.done = config.total_transactions == 0
        self.metrics = RunMetrics()
        self.mining_log: list[tuple[int, int, float]] | None = [] if keep_mining_log else None
        self._trace = hashlib.sha256() if record_trace else None
        self._wall0: float | None = None
        self._handlers: dict[EventKind, Callable[[Event], None]] = {
            EventKind.TXN_SUBMITTED: self.on_txn_submitted,
            EventKind.MINING_COMPLETE: self.on_mining_complete,
            EventKind.BLOCK_ARRIVAL: self.on_block_arrival,
            EventKind.VOTE_ARRIVAL: self.on_vote_arrival,
            EventKind.BLOCK_COMMITTED: self.on_block_committed,
        }
        if config.total_transactions > 0:
            # every node waits for its first full block of transactions
            self._idle = [(config.block_size_txns, i, 0) for i in self.node_ids]
            self.queue.push(0.0, EventKind.TXN_SUBMITTED, 0, 0)

    # -- driving ----------------------------------------------------------------

    def step(self) -> Event | None:
        if not self.queue:
            return None
        if self._wall0 is None:
            self._start()
        ev = self.queue.pop_earliest()
        self.now = ev.timestamp
        if self._trace is not None:
            self._trace.update(_pack_trace(ev.timestamp, ev.seq, ev.kind, ev.target))
        self._handlers[ev.kind](ev)
        self.metrics.events_processed += 1
        return ev

    def _start(self):
        self._wall0 = time.perf_counter()
        self._record_row()

    def run(self) -> RunMetrics:
        if self._wall0 is None:
            self._start()
        # same as repeated step() without the per-event method call
        heap = self.queue._heap
        pop = self.queue.pop_earliest
        handlers = self._handlers
        trace = self._trace
        m = self.metrics
        while heap:
            ev = pop()
            self.now = ev.timestamp
            if trace is not None:
                trace.update(_pack_trace(ev.timestamp, ev.seq, ev.kind, ev.target))
            handlers[ev.kind](ev)
            m.events_processed += 1
        return self.finish()

    def finish(self) -> RunMetrics:
        m = self.metrics
        m.wall_clock_ms = (time.perf_counter() - (self._wall0 or time.perf_counter())) * 1000.0
        wall_s = m.wall_clock_ms / 1000.0
        m.throughput_txns_per_sec = m.txns_committed / wall_s if wall_s > 0 else 0.0
        rss = current_rss_bytes()
        if rss is not None:
            m.peak_rss_bytes = max(rss, m.peak_rss_bytes or 0)
        return m

    @property
    def trace_digest(self) -> str | None:
        return None if self._trace is None else self._trace.hexdigest()

    def committed_chain(self) -> list[tuple[int, int | None, int]]:
        return [(b, self.blocks[b].parent_block, self.blocks[b].creator_id) for b in self.committed]

    # -- workload -----------------------------------------------------------------

    def on_txn_submitted(self, ev: Event) -> None:
        cfg = self.config
        i = ev.payload
        self.pending[i] = Transaction(i, ev.target, ev.timestamp, cfg.payload_size)
        self.submitted += 1
        if self.submitted < cfg.total_transactions:
            if cfg.arrivals == "uniform":
                t = self.submitted * 1000.0 / cfg.txn_rate
            else:
                t = self._next_arrival + self.rng.expovariate(cfg.txn_rate / 1000.0)
            self._next_arrival = t
            self.queue.push(t, EventKind.TXN_SUBMITTED, self.submitted % cfg.node_count, self.submitted)
            self._wake(self.submitted)
        else:
            self._wake(None)

    def _wake(self, threshold: int | None) -> None:
        idle = self._idle
        nodes = self.nodes
        while idle and (threshold is None or idle[0][0] <= threshold):
            _, nid, token = heapq.heappop(idle)
            node = nodes[nid]
            if node.idle_token == token and node.mining is None:
                self.schedule_mining(node)

    def _select_txns(self, node: NodeState) -> tuple[Transaction, ...] | None:
        cfg = self.config
        want = cfg.block_size_txns
        store = node.store
        # a full pick stays valid until a commit changes the pool: later
        # submissions only append larger ids.  Partial picks also depend on
        # how many transactions have been submitted.
        cache = self._pick_cache
        key = (store.tip_id, self._pool_version)
        hit = cache.get(key)
        if hit is None:
            hit = cache.get(key + (self.submitted,))
        if hit is None:
            blocks = store.blocks
            committed = self.committed_set
            txn_ids = self._txn_ids
            in_chain: set[int] = set()
            cur = store.tip_id
            while cur not in committed:
                in_chain.update(txn_ids[cur])
                cur = blocks[cur].parent_block
            pending = self.pending
            # the pool is ordered by id, so at most len(in_chain) keys need skipping
            head = islice(pending, want + len(in_chain))
            hit = tuple([pending[t] for t in head if t not in in_chain][:want])
            if len(cache) > 4096:
                cache.clear()
            cache[key if len(hit) == want else key + (self.submitted,)] = hit
        picked = hit
        if len(picked) == want:
            return picked
        if picked and self.submitted == cfg.total_transactions:
            return picked
        if self.submitted < cfg.total_transactions:
            node.idle_token += 1
            heapq.heappush(self._idle, (self.submitted + want - len(picked), node.node_id, node.idle_token))
        return None

    # -- mining -------------------------------------------------------------------

    def schedule_mining(self, node: NodeState) -> bool:
        """Start mining on the node's tip if it has enough transactions."""
        if node.mining is not None or self.done:
            return False
        txns = self._select_txns(node)
        if not txns:
            return False
        store = node.store
        tip = store.tip
        block = Block(self._next_block_id, self.now, node.node_id, tip.block_id, tip.depth + 1,
                      store.hashes[tip.block_id], txn_list=txns)
        self._next_block_id += 1
        t0 = time.perf_counter()
        proof = self.provider.generate_proof(block, node.ctx)
        elapsed_ms = (time.perf_counter() - t0) * 1000.0
        block.proof = proof
        duration = proof.claimed_solve_ms if proof.claimed_solve_ms is not None else elapsed_ms
        ev = self.queue.push(self.now + duration, EventKind.MINING_COMPLETE, node.node_id)
        node.mining = Mining(ev.seq, block, self.now)
        if self.mining_log is not None:
            self.mining_log.append((node.node_id, block.block_id, duration))
        return True

    def _retarget(self, node: NodeState) -> None:
        m = node.mining
        if m is not None:
            if m.block.parent_block == node.store.tip_id:
                return
            node.mining = None
            self.metrics.stale_work += 1
        self.schedule_mining(node)

    def on_mining_complete(self, ev: Event) -> None:
        node = self.nodes[ev.target]
        m = node.mining
        if m is None or m.seq != ev.seq:
            return  # superseded attempt
        node.mining = None
        if self.done:
            return  # workload finished; nothing left to propose
        b = m.block
        if node.store.tip_id != b.parent_block:
            self.metrics.stale_work += 1
            self.schedule_mining(node)
            return
        bid = b.block_id
        digest = b.proof.digest_hex if b.proof.kind == REPLAY else None
        node.store.append(b, digest)
        self.blocks[bid] = b
        self._txn_ids[bid] = b.txn_ids
        siblings = self.children.setdefault(b.parent_block, [])
        if siblings:
            self.metrics.forks_observed += 1
        siblings.append(bid)
        self.metrics.blocks_mined += 1
        node.votes_cast.add(bid)
        self.tally[bid] = 1
        broadcast(self.queue, node.node_id, EventKind.BLOCK_ARRIVAL, b, self.node_ids,
                  self.config.latency, self.rng, self.now)
        self._maybe_commit(bid)
        self.schedule_mining(node)

    # -- propagation and voting ---------------------------------------------------

    def on_block_arrival(self, ev: Event) -> None:
        node = self.nodes[ev.target]
        b: Block = ev.payload
        bid = b.block_id
        if bid in node.votes_cast or node.store.has_seen(bid):
            return
        try:
            ok = self.provider.verify_proof(b, b.proof, self.config.difficulty)
        except Exception:
            ok = False
        if not ok:
            self.metrics.invalid_blocks += 1
            return
        old_tip = node.store.tip_id
        digest = b.proof.digest_hex if b.proof.kind == REPLAY else None
        if node.store.append(b, digest) is AppendOutcome.REJECTED:
            self.metrics.rejected_blocks += 1
            return
        node.votes_cast.add(bid)
        self.queue.push(self.now + self.config.latency.sample(self.rng),
                        EventKind.VOTE_ARRIVAL, b.creator_id, bid)
        if node.store.tip_id != old_tip:
            self._retarget(node)

    def on_vote_arrival(self, ev: Event) -> None:
        bid = ev.payload
        b = self.blocks.get(bid)
        if b is None or b.creator_id != ev.target or bid not in self.tally:
            self.metrics.unknown_votes += 1
            return
        self.tally[bid] += 1
        self._maybe_commit(bid)

    def _maybe_commit(self, bid: int) -> None:
        if bid in self.committed_set or bid in self.conflicted or self.tally[bid] < self.majority:
            return
        parent = self.blocks[bid].parent_block
        if parent == self.committed[-1]:
            self._commit(bid)
        elif parent in self.committed_set:
            # a sibling already holds this height
            self.conflicted.add(bid)
            self.metrics.conflicting_majorities += 1
        else:
            waiting = self.waiting.setdefault(parent, [])
            if bid not in waiting:
                waiting.append(bid)

    def _commit(self, bid: int) -> None:
        b = self.blocks[bid]
        self.committed.append(bid)
        self.committed_set.add(bid)
        pending = self.pending
        for t in b.txn_list:
            del pending[t.txn_id]
        self._pool_version += 1
        self._pick_cache.clear()
        m = self.metrics
        m.blocks_committed += 1
        m.txns_committed += len(b.txn_list)
        m.simulated_ms = self.now
        self._record_row()
        creator = b.creator_id
        self.queue.push(self.now, EventKind.BLOCK_COMMITTED, creator, bid)
        broadcast(self.queue, creator, EventKind.BLOCK_COMMITTED, bid, self.node_ids,
                  self.config.latency, self.rng, self.now)
        if m.txns_committed == self.config.total_transactions:
            self.done = True

    def on_block_committed(self, ev: Event) -> None:
        node = self.nodes[ev.target]
        bid = ev.payload
        if node.store.set_final(bid):
            self._retarget(node)
        # the creator of a waiting child commits it once it learns the parent is in
        waiting = self.waiting.get(bid)
        if waiting:
            for c in list(waiting):
                if self.blocks[c].creator_id == ev.target:
                    waiting.remove(c)
                    self._maybe_commit(c)
            if not waiting:
                del self.waiting[bid]

    def _record_row(self) -> None:
        rss = current_rss_bytes()
        m = self.metrics
        if rss is not None:
            m.peak_rss_bytes = max(rss, m.peak_rss_bytes or 0)
        wall = (time.perf_counter() - self._wall0) * 1000.0 if self._wall0 is not None else 0.0
        m.rows.append((self.now, m.blocks_committed, m.txns_committed, rss, wall))


def run_emulation(config: SimConfig, provider: ConsensusProvider | None = None,
                  time_map: DifficultyTimeMap | None = None) -> RunMetrics:
    return Emulation(config, provider, time_map).run()
