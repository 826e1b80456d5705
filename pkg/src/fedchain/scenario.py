"""End-to-end experiment runs: Vanilla (one aggregator) and fully coupled peers."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations

from . import chain as ch
from .config import CENTRALIZED, ScenarioConfig
from .dataset import DataShard, gen_synthetic, load_cifar10, partition
from .fedavg import SelectionPolicy, aggregate, score_combinations, select, CONSIDER_BEST
from .metrics import CONSIDER, NOT_CONSIDER, MetricsRow, MetricsTable
from .netsim import Simulator, TraceRecord
from .peer import Peer, PeerSettings, training_config
from .seeding import mix
from .tensor_nn import ModelParams, TrainingConfig, evaluate, init_model, local_training

log = logging.getLogger(__name__)


class DataUnavailable(FileNotFoundError):
    pass


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    metrics: MetricsTable
    initial_model: ModelParams
    # variant -> global model after each round (centralized)
    global_models: dict[str, list[ModelParams]] = field(default_factory=dict)
    # peer id -> carried-forward model after each round (decentralized)
    peer_models: dict[int, list[ModelParams]] = field(default_factory=dict)
    chains: dict[int, ch.ChainState] = field(default_factory=dict)
    trace: list[TraceRecord] = field(default_factory=list)
    trace_digest: str = ""
    peers: dict[int, Peer] = field(default_factory=dict)


def load_data(cfg: ScenarioConfig) -> tuple[DataShard, DataShard]:
    if cfg.dataset == "cifar10":
        d = cfg.resolved_data_dir()
        if not d:
            raise DataUnavailable("CIFAR-10 directory not given: set data_dir or FEDCHAIN_DATA")
        train, test = load_cifar10(d)
    else:
        train, test = gen_synthetic(cfg.synthetic_n, cfg.synthetic_classes, cfg.synthetic_dim,
                                    cfg.synthetic_margin, cfg.seed)
    if cfg.train_subset and cfg.train_subset < len(train):
        train = train.subset(range(cfg.train_subset))
    return train, test


def build_model(cfg: ScenarioConfig, train: DataShard) -> ModelParams:
    return init_model(cfg.arch, cfg.seed, input_dim=train.width, classes=train.class_count,
                      hidden=cfg.hidden)


def run_scenario(cfg: ScenarioConfig, data: tuple[DataShard, DataShard] | None = None) -> ScenarioResult:
    train, test = data if data is not None else load_data(cfg)
    shards = partition(train, cfg.peers, "iid_equal", cfg.seed).shards(train)
    w0 = build_model(cfg, train)
    if w0.input_width != train.width:
        raise ValueError(f"architecture {cfg.arch} expects width {w0.input_width}, data has {train.width}")
    if cfg.mode == CENTRALIZED:
        return _run_centralized(cfg, shards, test, w0)
    return _run_decentralized(cfg, shards, test, w0)


def base_training(cfg: ScenarioConfig) -> TrainingConfig:
    return TrainingConfig(cfg.learning_rate, cfg.batch_size, cfg.epochs, cfg.seed)


# ---------------------------------------------------------------- Vanilla

class Aggregator:
    """Single central aggregator for the Vanilla baseline.

    ``not_consider`` averages every upload; ``consider`` scores every
    non-empty subset of uploads on the test set and keeps the best.
    """

    def __init__(self, variant: str, testset: DataShard, seed: int, threads: int = 1):
        self.variant = variant
        self.testset = testset
        self.policy = SelectionPolicy(CONSIDER_BEST, None, mix(seed, 0xA66))
        self.threads = threads

    def combine(self, uploads: dict[int, ModelParams], round: int):
        if self.variant == NOT_CONSIDER:
            g = aggregate(uploads)
            return tuple(sorted(uploads)), g, evaluate(g, self.testset)
        ids = sorted(uploads)
        cands = [c for k in range(1, len(ids) + 1) for c in combinations(ids, k)]
        scores = score_combinations(cands, uploads, self.testset, threads=self.threads)
        best = select(scores, self.policy, round)
        return best.member_ids, best.aggregated, best.report


def _run_centralized(cfg, shards, test, w0) -> ScenarioResult:
    metrics = MetricsTable()
    result = ScenarioResult(cfg, metrics, w0)
    base = base_training(cfg)
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        for variant in (NOT_CONSIDER, CONSIDER):
            agg = Aggregator(variant, test, cfg.seed, cfg.threads)
            w = w0
            history = []
            for t in range(1, cfg.rounds + 1):
                def train(k, w=w, t=t):
                    return local_training(k, w, shards[k], training_config(base, cfg.seed, k, t))

                ks = range(cfg.peers)
                trained = list(pool.map(train, ks)) if pool else [train(k) for k in ks]
                members, w, report = agg.combine(dict(zip(ks, trained)), t)
                history.append(w)
                for k in ks:
                    # every client evaluates the same global model on the shared test split
                    metrics.add(MetricsRow(t, k, members, report.accuracy, True, variant))
                log.info("vanilla %s round %d: %s acc=%.4f", variant, t, members, report.accuracy)
            result.global_models[variant] = history
    finally:
        if pool:
            pool.shutdown()
    return result


# ---------------------------------------------------------- decentralized

def _run_decentralized(cfg, shards, test, w0) -> ScenarioResult:
    metrics = MetricsTable()
    result = ScenarioResult(cfg, metrics, w0)
    peers: dict[int, Peer] = {}

    def dispatch(ev):
        peers[ev.dst].dispatch(ev)

    sim = Simulator(cfg.net, dispatch, max_events=cfg.max_events)
    keys = {k: ch.KeyPair.from_seed(cfg.seed, k) for k in range(cfg.peers)}
    directory = {k: kp.public_key for k, kp in keys.items()}
    settings = PeerSettings(
        peer_count=cfg.peers, rounds=cfg.rounds, train=base_training(cfg),
        policy=cfg.selection, trigger=cfg.aggregation_trigger, difficulty=cfg.difficulty,
        seed=cfg.seed, strict_chain=cfg.strict_chain, mining=cfg.mining,
        block_interval=cfg.block_interval, train_cost=cfg.train_cost,
        mining_cost_factor=cfg.mining_cost_factor, threads=cfg.threads,
    )
    for k in range(cfg.peers):
        sim.register(k)
        peers[k] = Peer(k, keys[k], w0, shards[k], test, settings, sim, metrics, directory)
    for k in range(cfg.peers):
        peers[k].start()
    sim.run()

    for k, p in peers.items():
        result.peer_models[k] = list(p.history)
        result.chains[k] = p.chain
        if not p.done:
            log.warning("peer %d stopped in round %d (%s)", k, p.round, p.phase.value)
            metrics.bump(k, "unfinished")
    result.trace = sim.trace
    result.trace_digest = sim.trace_digest()
    result.peers = peers
    return result
