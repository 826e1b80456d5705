"""Fully coupled participant: trainer, aggregator, miner and validator in one."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Mapping

from . import chain as ch
from .config import QUORUM, TIMEOUT, WAIT_ALL, AggregationTrigger
from .dataset import DataShard
from .fedavg import (THRESHOLD_FILTER, CombinationScore, SelectionPolicy, enumerate_candidates,
                     score_combinations, select, threshold_members)
from .metrics import DECENTRALIZED, MetricsRow, MetricsTable
from .netsim import MINING_DONE, ROUND_TIMEOUT, TRAINING_DONE, Event, Simulator
from .seeding import mix, rng
from .tensor_nn import ModelParams, TrainingConfig, evaluate, local_training

log = logging.getLogger(__name__)

UPDATE_MSG = "update"
BLOCK_MSG = "block"


class Phase(str, Enum):
    TRAINING = "training"
    AWAITING_UPDATES = "awaiting_updates"
    AGGREGATED = "aggregated"
    DONE = "done"
    HALTED = "halted"


def training_config(base: TrainingConfig, scenario_seed: int, peer_id: int, round: int) -> TrainingConfig:
    """Per-peer, per-round training seed; shared by centralized and decentralized runs."""
    return TrainingConfig(base.learning_rate, base.batch_size, base.local_epochs,
                          mix(scenario_seed, peer_id, round))


@dataclass
class PeerSettings:
    peer_count: int
    rounds: int
    train: TrainingConfig
    policy: SelectionPolicy
    trigger: AggregationTrigger
    difficulty: int
    seed: int
    strict_chain: bool = False
    mining: bool = True
    block_interval: float = 10.0
    train_cost: float = 0.001
    mining_cost_factor: float = 1.0
    threads: int = 1


class Peer:
    """Per-round state machine: training -> awaiting_updates -> aggregated -> training."""

    def __init__(self, peer_id: int, keypair: ch.KeyPair, model: ModelParams, shard: DataShard,
                 testset: DataShard, settings: PeerSettings, sim: Simulator,
                 metrics: MetricsTable, directory: Mapping[int, bytes]):
        self.peer_id = peer_id
        self.keypair = keypair
        self.current_model = model
        self.shard = shard
        self.testset = testset
        self.s = settings
        self.sim = sim
        self.metrics = metrics
        # peer_id -> the only public key accepted for that peer
        self.directory = dict(directory)
        self.chain = ch.ChainState(settings.difficulty)

        self.round = 0
        self.phase = Phase.AGGREGATED
        self.round_start = 0.0
        self.timed_out = False
        self.buffer: dict[int, dict[int, ch.LocalUpdate]] = {}
        self.seen: set[tuple[int, int]] = set()
        self.aggregated_keys: set[tuple[int, int]] = set()
        self.mempool: dict[tuple[int, int], ch.LocalUpdate] = {}
        self.history: list[ModelParams] = []
        self.selections: list[CombinationScore] = []
        self._pending: ch.LocalUpdate | None = None
        self._own_model: ModelParams | None = None
        self._mining_scheduled = False
        self._mine_rng = rng(settings.seed, peer_id, 0xB10C)

    # ------------------------------------------------------------ helpers
    def bump(self, name: str, by: int = 1):
        self.metrics.bump(self.peer_id, name, by)

    @property
    def done(self) -> bool:
        return self.phase in (Phase.DONE, Phase.HALTED)

    def start(self):
        if self.s.rounds == 0:
            self.phase = Phase.DONE
            return
        self.round = 1
        self.phase = Phase.TRAINING
        self.on_round_start()

    def dispatch(self, ev: Event):
        if self.phase == Phase.HALTED:
            return
        if ev.kind == TRAINING_DONE:
            self.on_training_done()
        elif ev.kind == MINING_DONE:
            self.on_mining_done()
        elif ev.kind == ROUND_TIMEOUT:
            if ev.payload == self.round and self.phase == Phase.AWAITING_UPDATES:
                self.timed_out = True
                self.check_trigger()
            elif ev.payload == self.round and self.phase == Phase.TRAINING:
                self.timed_out = True
        else:
            kind, body = ev.payload
            if kind == UPDATE_MSG:
                self.on_update_received(body)
            elif kind == BLOCK_MSG:
                self.on_block_received(body)

    # ----------------------------------------------------------- training
    def on_round_start(self):
        """Train on the carried-forward model; the result is released at training_done."""
        assert self.phase == Phase.TRAINING
        self.round_start = self.sim.now
        self.timed_out = False
        cfg = training_config(self.s.train, self.s.seed, self.peer_id, self.round)
        try:
            trained = local_training(self.peer_id, self.current_model, self.shard, cfg)
        except ArithmeticError as exc:
            log.error("peer %d halted: %s", self.peer_id, exc)
            self.phase = Phase.HALTED
            self.bump("training_failures")
            return
        self._own_model = trained
        self._pending = ch.sign_update(self.round, self.peer_id, trained, self.keypair)
        cost = len(self.shard) * self.s.train.local_epochs * self.s.train_cost
        if self.s.mining:
            cost *= self.s.mining_cost_factor
        self.sim.schedule(cost, TRAINING_DONE, src=self.peer_id, dst=self.peer_id,
                          note=f"round={self.round}")
        if self.s.trigger.mode == TIMEOUT:
            self.sim.schedule(self.s.trigger.timeout, ROUND_TIMEOUT, src=self.peer_id,
                              dst=self.peer_id, payload=self.round, note=f"round={self.round}")

    def on_training_done(self):
        update = self._pending
        self._pending = None
        self.phase = Phase.AWAITING_UPDATES
        self._accept(update)
        self.sim.broadcast(self.peer_id, (UPDATE_MSG, update), size_bytes=len(update.model_payload),
                           note=f"update round={update.round} peer={update.peer_id}")
        self.check_trigger()

    # ------------------------------------------------------------ updates
    def _accept(self, update: ch.LocalUpdate):
        self.seen.add(update.key)
        self.buffer.setdefault(update.round, {})[update.peer_id] = update
        if not self.chain.is_confirmed(update.round, update.peer_id):
            self.mempool[update.key] = update
            self._ensure_mining()

    def on_update_received(self, update: ch.LocalUpdate):
        if update.key in self.seen:
            self.bump("duplicate_updates")
            return
        if (self.directory.get(update.peer_id) != update.public_key
                or ch.check_update(update) is not None):
            self.bump("rejected_updates")
            return
        if update.round < self.round or (update.round == self.round
                                         and self.phase in (Phase.AGGREGATED, Phase.DONE)):
            # still a valid ledger transaction, just too late to aggregate
            self.bump("stale_updates")
            self.seen.add(update.key)
            if not self.chain.is_confirmed(update.round, update.peer_id):
                self.mempool[update.key] = update
                self._ensure_mining()
            return
        self._accept(update)
        if update.round == self.round:
            self.check_trigger()

    def available_ids(self) -> list[int]:
        got = self.buffer.get(self.round, {})
        ids = sorted(got)
        if self.s.strict_chain:
            ids = [i for i in ids if self.chain.is_confirmed(self.round, i)]
        return ids

    def check_trigger(self) -> bool:
        if self.phase != Phase.AWAITING_UPDATES:
            return False
        ids = self.available_ids()
        if self.peer_id not in ids:
            return False
        n = len(ids)
        t = self.s.trigger
        if t.mode == WAIT_ALL:
            fire = n == self.s.peer_count
        elif t.mode == QUORUM:
            fire = n >= t.quorum_size
        else:
            fire = self.timed_out or n == self.s.peer_count
        if fire:
            self.aggregate_round(ids)
        return fire

    # -------------------------------------------------------- aggregation
    def aggregate_round(self, ids: list[int] | None = None) -> CombinationScore:
        ids = self.available_ids() if ids is None else ids
        updates = self.buffer[self.round]
        models = {}
        for i in ids:
            key = (i, self.round)
            assert key not in self.aggregated_keys, f"update {key} aggregated twice"
            models[i] = self._own_model if i == self.peer_id else updates[i].model()
        candidates = enumerate_candidates(self.peer_id, ids)
        individual = None
        if self.s.policy.mode == THRESHOLD_FILTER:
            individual = {i: evaluate(m, self.testset).accuracy for i, m in models.items()}
            survivors = threshold_members(individual, self.s.policy.threshold, self.peer_id)
            if survivors not in candidates:
                candidates.append(survivors)
        scores = score_combinations(candidates, models, self.testset, threads=self.s.threads)
        policy = SelectionPolicy(self.s.policy.mode, self.s.policy.threshold,
                                 mix(self.s.seed, self.peer_id))
        chosen = select(scores, policy, self.round, individual_accuracy=individual,
                        own_id=self.peer_id)
        for sc in scores:
            self.metrics.add(MetricsRow(self.round, self.peer_id, sc.member_ids, sc.accuracy,
                                        sc is chosen, DECENTRALIZED))
        self.aggregated_keys.update((i, self.round) for i in ids)
        self.selections.append(chosen)
        self.current_model = chosen.aggregated
        self.history.append(chosen.aggregated)
        self.phase = Phase.AGGREGATED
        self._advance()
        return chosen

    def _advance(self):
        self.buffer.pop(self.round, None)
        if self.round >= self.s.rounds:
            self.phase = Phase.DONE
            return
        self.round += 1
        self.phase = Phase.TRAINING
        self.on_round_start()

    # ------------------------------------------------------------- mining
    def _unconfirmed(self) -> list[ch.LocalUpdate]:
        on_tip = self.chain.keys_at[self.chain.tip_hash]
        return [u for k, u in sorted(self.mempool.items(), key=lambda kv: (kv[0][1], kv[0][0]))
                if k not in on_tip]

    def _ensure_mining(self):
        if not self.s.mining or self._mining_scheduled or not self._unconfirmed():
            return
        delay = float(self._mine_rng.exponential(self.s.block_interval))
        self._mining_scheduled = True
        self.sim.schedule(delay, MINING_DONE, src=self.peer_id, dst=self.peer_id)

    def on_mining_done(self):
        self._mining_scheduled = False
        pending = self._unconfirmed()
        if pending:
            nonce_start = int(self._mine_rng.integers(0, 1 << 62))
            block = ch.mine_block(pending, self.chain.tip, self.s.difficulty, self.peer_id,
                                  nonce_start=nonce_start, timestamp=self.sim.now)
            verdict = self.chain.add_block(block)
            assert verdict, verdict
            self.bump("blocks_mined")
            size = sum(len(u.model_payload or b"") for u in block.updates)
            self.sim.broadcast(self.peer_id, (BLOCK_MSG, block), size_bytes=size,
                               note=f"block height={block.height}")
            self._after_chain_change()
        self._ensure_mining()

    def on_block_received(self, block: ch.Block):
        verdict = self.chain.add_block(block)
        if verdict.reason == ch.ORPHAN:
            self.bump("orphan_blocks")
        elif not verdict:
            self.bump("rejected_blocks")
            log.info("peer %d rejected block at height %d: %s", self.peer_id, block.height, verdict.reason)
        else:
            self.bump("blocks_accepted")
        self._after_chain_change()
        self._ensure_mining()

    def _after_chain_change(self):
        # updates learned only through blocks still feed the local buffer
        for (rnd, pid), u in sorted(self.chain.confirmed.items()):
            if (pid, rnd) not in self.seen and u.model_payload is not None:
                self.on_update_received(u)
        self.check_trigger()
