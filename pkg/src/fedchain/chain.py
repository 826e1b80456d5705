"""Hash-chained proof-of-work ledger carrying signed model updates.

Block hashes commit to a fixed-size header. The header holds the root of the
block's updates, and each update is committed through its model digest, not
its payload. Payloads are tied to that digest by the digest-consistency check.
So a chain dump with the payloads stripped can still be verified end to end
(linkage, work, hashes, signatures).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, replace
from typing import IO, Iterable, Iterator, Sequence

import numpy as np
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .tensor_nn import ModelParams

MODEL_MAGIC = b"FCM1"
BLOCK_MAGIC = b"FCB1"
ZERO_HASH = bytes(32)
MAX_NONCE = (1 << 64) - 1

# reject reasons, in the order validate_block checks them
BAD_PREV_HASH = "bad_prev_hash"
BAD_HEIGHT = "bad_height"
INSUFFICIENT_WORK = "insufficient_work"
BAD_BLOCK_HASH = "bad_block_hash"
BAD_SIGNATURE = "bad_signature"
DIGEST_MISMATCH = "digest_mismatch"
DUPLICATE_UPDATE = "duplicate_update"
# add_block / replay outcomes
ORPHAN = "orphan"
KNOWN = "known"
UNKNOWN_PARENT = "unknown_parent"
MALFORMED = "malformed"


class ChainError(Exception):
    pass


class EncodingError(ChainError, ValueError):
    pass


class MiningError(ChainError):
    pass


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# ------------------------------------------------------ model encoding

def canonical_encode(model: ModelParams) -> bytes:
    if not np.all(np.isfinite(model.values)):
        raise EncodingError("refusing to encode non-finite model values")
    head = [MODEL_MAGIC, struct.pack("<I", len(model.layer_shapes))]
    for r, c, b in model.layer_shapes:
        head.append(struct.pack("<III", r, c, int(b)))
    return b"".join(head) + model.values.astype("<f8").tobytes()


def canonical_decode(data: bytes) -> ModelParams:
    if data[:4] != MODEL_MAGIC or len(data) < 8:
        raise EncodingError("not a canonical model encoding (bad magic)")
    (n_layers,) = struct.unpack_from("<I", data, 4)
    off = 8
    if len(data) < off + 12 * n_layers:
        raise EncodingError("truncated layer table")
    shapes = []
    for _ in range(n_layers):
        r, c, b = struct.unpack_from("<III", data, off)
        shapes.append((r, c, bool(b)))
        off += 12
    count = sum(r * c + (c if b else 0) for r, c, b in shapes)
    if len(data) - off != 8 * count:
        raise EncodingError(f"expected {count} float64 values, found {(len(data) - off) / 8:g}")
    values = np.frombuffer(data, dtype="<f8", offset=off).astype(np.float64)
    return ModelParams(tuple(shapes), values)


def model_digest(model: ModelParams) -> bytes:
    return sha256(canonical_encode(model))


# ----------------------------------------------------------- signatures

@dataclass(frozen=True)
class KeyPair:
    private_key: Ed25519PrivateKey
    public_key: bytes

    @classmethod
    def from_seed(cls, *parts: int) -> KeyPair:
        material = b"fedchain-ed25519" + b"".join(struct.pack("<q", int(p)) for p in parts)
        sk = Ed25519PrivateKey.from_private_bytes(sha256(material))
        return cls(sk, sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw))

    def sign(self, message: bytes) -> bytes:
        return self.private_key.sign(message)


def verify_signature(public_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def signed_message(round: int, peer_id: int, digest: bytes) -> bytes:
    return b"FCU1" + struct.pack("<qq", round, peer_id) + digest


@dataclass(frozen=True)
class LocalUpdate:
    round: int
    peer_id: int
    model_digest: bytes
    model_payload: bytes | None  # None once elided from a dump
    public_key: bytes
    signature: bytes

    @property
    def key(self) -> tuple[int, int]:
        return (self.peer_id, self.round)

    def signature_ok(self) -> bool:
        return verify_signature(self.public_key,
                                signed_message(self.round, self.peer_id, self.model_digest),
                                self.signature)

    def digest_ok(self) -> bool:
        return self.model_payload is not None and sha256(self.model_payload) == self.model_digest

    def model(self) -> ModelParams:
        if self.model_payload is None:
            raise ChainError(f"payload of update {self.key} was elided")
        return canonical_decode(self.model_payload)

    def commitment(self) -> bytes:
        return (struct.pack("<qq", self.round, self.peer_id) + self.model_digest
                + struct.pack("<H", len(self.public_key)) + self.public_key
                + struct.pack("<H", len(self.signature)) + self.signature)

    def elided(self) -> LocalUpdate:
        return replace(self, model_payload=None)


def sign_update(round: int, peer_id: int, model: ModelParams, keypair: KeyPair) -> LocalUpdate:
    payload = canonical_encode(model)
    digest = sha256(payload)
    sig = keypair.sign(signed_message(round, peer_id, digest))
    return LocalUpdate(round, peer_id, digest, payload, keypair.public_key, sig)


def check_update(update: LocalUpdate, require_payload: bool = True) -> str | None:
    """Reject reason for a standalone update, or None if it is sound."""
    if not update.signature_ok():
        return BAD_SIGNATURE
    if update.model_payload is None:
        return DIGEST_MISMATCH if require_payload else None
    if not update.digest_ok():
        return DIGEST_MISMATCH
    return None


# ---------------------------------------------------------------- blocks

def updates_root(updates: Sequence[LocalUpdate]) -> bytes:
    h = hashlib.sha256(b"FCR1")
    for u in updates:
        c = u.commitment()
        h.update(struct.pack("<I", len(c)))
        h.update(c)
    return h.digest()


def _header_prefix(height, prev_hash, miner_id, timestamp, root, n_updates) -> bytes:
    return (BLOCK_MAGIC + struct.pack("<Q", height) + prev_hash
            + struct.pack("<qdI", miner_id, timestamp, n_updates) + root)


def leading_zero_bits(h: bytes) -> int:
    v = int.from_bytes(h, "big")
    return 8 * len(h) - v.bit_length()


def meets_difficulty(h: bytes, difficulty: int) -> bool:
    return leading_zero_bits(h) >= difficulty


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    updates: tuple[LocalUpdate, ...]
    miner_id: int
    nonce: int
    timestamp: float
    block_hash: bytes

    def compute_hash(self) -> bytes:
        prefix = _header_prefix(self.height, self.prev_hash, self.miner_id, self.timestamp,
                                updates_root(self.updates), len(self.updates))
        return sha256(prefix + struct.pack("<Q", self.nonce))

    @property
    def hash_int(self) -> int:
        return int.from_bytes(self.block_hash, "big")

    def elided(self) -> Block:
        return replace(self, updates=tuple(u.elided() for u in self.updates))


def make_genesis() -> Block:
    b = Block(0, ZERO_HASH, (), -1, 0, 0.0, b"")
    return replace(b, block_hash=b.compute_hash())


GENESIS = make_genesis()


def order_updates(updates: Iterable[LocalUpdate]) -> tuple[LocalUpdate, ...]:
    return tuple(sorted(updates, key=lambda u: (u.round, u.peer_id)))


def mine_block(mempool: Sequence[LocalUpdate], parent: Block, difficulty: int, miner_id: int,
               nonce_start: int = 0, timestamp: float = 0.0,
               max_attempts: int | None = None) -> Block:
    """Linear nonce scan from ``nonce_start`` until the hash meets ``difficulty``."""
    ups = order_updates(mempool)
    height = parent.height + 1
    prefix = _header_prefix(height, parent.block_hash, miner_id, timestamp,
                            updates_root(ups), len(ups))
    base = hashlib.sha256(prefix)
    limit = MAX_NONCE - nonce_start + 1
    if max_attempts is not None:
        limit = min(limit, max_attempts)
    target = 1 << (256 - difficulty)
    nonce = nonce_start
    for _ in range(limit):
        h = base.copy()
        h.update(struct.pack("<Q", nonce))
        digest = h.digest()
        if int.from_bytes(digest, "big") < target:
            return Block(height, parent.block_hash, ups, miner_id, nonce, timestamp, digest)
        nonce += 1
    raise MiningError(f"no nonce in {limit} attempts from {nonce_start} at difficulty {difficulty}")


@dataclass(frozen=True)
class Verdict:
    ok: bool
    reason: str | None = None
    detail: str = ""

    def __bool__(self):
        return self.ok


ACCEPT = Verdict(True)


def validate_block(block: Block, parent: Block, difficulty: int,
                   seen: Iterable[tuple[int, int]] = (),
                   require_payload: bool = True) -> Verdict:
    """Check ``block`` against ``parent``; ``seen`` holds (peer_id, round) keys
    already confirmed on the parent's branch. First failing check wins."""
    if block.prev_hash != parent.block_hash:
        return Verdict(False, BAD_PREV_HASH)
    if block.height != parent.height + 1:
        return Verdict(False, BAD_HEIGHT, f"expected {parent.height + 1}, got {block.height}")
    if not meets_difficulty(block.block_hash, difficulty):
        return Verdict(False, INSUFFICIENT_WORK)
    if block.compute_hash() != block.block_hash:
        return Verdict(False, BAD_BLOCK_HASH)
    for u in block.updates:
        if not u.signature_ok():
            return Verdict(False, BAD_SIGNATURE, f"update peer={u.peer_id} round={u.round}")
    for u in block.updates:
        if u.model_payload is None:
            if require_payload:
                return Verdict(False, DIGEST_MISMATCH, f"payload missing for peer={u.peer_id} round={u.round}")
        elif not u.digest_ok():
            return Verdict(False, DIGEST_MISMATCH, f"update peer={u.peer_id} round={u.round}")
    keys = set(seen)
    for u in block.updates:
        if u.key in keys:
            return Verdict(False, DUPLICATE_UPDATE, f"peer={u.peer_id} round={u.round}")
        keys.add(u.key)
    return ACCEPT


# ------------------------------------------------------- binary wire form

def serialize_block(block: Block) -> bytes:
    out = [BLOCK_MAGIC, struct.pack("<Q", block.height), block.prev_hash,
           struct.pack("<qQdI", block.miner_id, block.nonce, block.timestamp, len(block.updates)),
           block.block_hash]
    for u in block.updates:
        payload = u.model_payload or b""
        out += [struct.pack("<qq", u.round, u.peer_id), u.model_digest,
                struct.pack("<H", len(u.public_key)), u.public_key,
                struct.pack("<H", len(u.signature)), u.signature,
                struct.pack("<BI", u.model_payload is not None, len(payload)), payload]
    return b"".join(out)


def deserialize_block(data: bytes) -> Block:
    try:
        return _deserialize(data)
    except (struct.error, IndexError) as exc:
        raise EncodingError(f"malformed block bytes: {exc}") from exc


def _deserialize(data: bytes) -> Block:
    if data[:4] != BLOCK_MAGIC:
        raise EncodingError("bad block magic")
    off = 4

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise EncodingError("truncated block")
        chunk = data[off:off + n]
        off += n
        return chunk

    (height,) = struct.unpack("<Q", take(8))
    prev_hash = take(32)
    miner_id, nonce, ts, n = struct.unpack("<qQdI", take(28))
    block_hash = take(32)
    ups = []
    for _ in range(n):
        rnd, peer = struct.unpack("<qq", take(16))
        digest = take(32)
        pk = take(struct.unpack("<H", take(2))[0])
        sig = take(struct.unpack("<H", take(2))[0])
        has_payload, plen = struct.unpack("<BI", take(5))
        if has_payload > 1:
            raise EncodingError("bad payload flag")
        payload = take(plen)
        ups.append(LocalUpdate(rnd, peer, digest, payload if has_payload else None, pk, sig))
    if off != len(data):
        raise EncodingError(f"{len(data) - off} trailing bytes after block")
    return Block(height, prev_hash, tuple(ups), miner_id, nonce, ts, block_hash)


# ------------------------------------------------------------ chain state

class ChainState:
    """One peer's view of the ledger: block tree, orphans, canonical tip.

    Fork choice is longest chain; equal heights go to the numerically smaller
    tip hash (256-bit big-endian).
    """

    def __init__(self, difficulty: int, genesis: Block = GENESIS):
        self.difficulty = difficulty
        self.genesis = genesis
        self.blocks: dict[bytes, Block] = {genesis.block_hash: genesis}
        self.keys_at: dict[bytes, frozenset] = {genesis.block_hash: frozenset()}
        self.orphans: dict[bytes, list[Block]] = {}
        self.tip_hash = genesis.block_hash
        self.confirmed: dict[tuple[int, int], LocalUpdate] = {}
        self.rejected: list[tuple[Block, Verdict]] = []
        self.reorgs = 0

    @property
    def tip(self) -> Block:
        return self.blocks[self.tip_hash]

    @property
    def height(self) -> int:
        return self.tip.height

    def __contains__(self, block_hash: bytes) -> bool:
        return block_hash in self.blocks

    def add_block(self, block: Block) -> Verdict:
        if block.block_hash in self.blocks:
            return Verdict(True, KNOWN)
        parent = self.blocks.get(block.prev_hash)
        if parent is None:
            bucket = self.orphans.setdefault(block.prev_hash, [])
            if all(b.block_hash != block.block_hash for b in bucket):
                bucket.append(block)
            return Verdict(False, ORPHAN)
        verdict = validate_block(block, parent, self.difficulty, self.keys_at[parent.block_hash])
        if not verdict:
            self.rejected.append((block, verdict))
            return verdict
        self._attach(block)
        # connect any orphans waiting on this block, breadth first
        queue = [block.block_hash]
        while queue:
            h = queue.pop(0)
            for child in sorted(self.orphans.pop(h, []), key=lambda b: b.block_hash):
                if child.block_hash in self.blocks:
                    continue
                v = validate_block(child, self.blocks[h], self.difficulty, self.keys_at[h])
                if v:
                    self._attach(child)
                    queue.append(child.block_hash)
                else:
                    self.rejected.append((child, v))
        return verdict

    def _attach(self, block: Block):
        self.blocks[block.block_hash] = block
        self.keys_at[block.block_hash] = self.keys_at[block.prev_hash] | {u.key for u in block.updates}
        tip = self.tip
        better = (block.height > tip.height
                  or (block.height == tip.height and block.hash_int < tip.hash_int))
        if better:
            if block.prev_hash != self.tip_hash:
                self.reorgs += 1
            self.tip_hash = block.block_hash
            self._reindex()

    def _reindex(self):
        self.confirmed = {}
        for b in self.canonical_chain():
            for u in b.updates:
                self.confirmed[(u.round, u.peer_id)] = u

    def canonical_chain(self) -> list[Block]:
        out = []
        h = self.tip_hash
        while True:
            b = self.blocks[h]
            out.append(b)
            if b.height == 0:
                break
            h = b.prev_hash
        return out[::-1]

    def is_confirmed(self, round: int, peer_id: int) -> bool:
        return (round, peer_id) in self.confirmed

    def dump(self, fh: IO[str], full_payloads: bool = False) -> None:
        for b in self.canonical_chain():
            fh.write(block_to_json(b, self.difficulty, full_payloads) + "\n")


# ------------------------------------------------------------ JSON lines

def block_to_json(block: Block, difficulty: int, full_payloads: bool = False) -> str:
    ups = []
    for u in block.updates:
        d = {"round": u.round, "peer": u.peer_id, "digest": u.model_digest.hex(),
             "public_key": u.public_key.hex(), "signature": u.signature.hex()}
        if full_payloads and u.model_payload is not None:
            d["payload"] = u.model_payload.hex()
        ups.append(d)
    return json.dumps({
        "height": block.height, "hash": block.block_hash.hex(), "prev_hash": block.prev_hash.hex(),
        "miner": block.miner_id, "nonce": block.nonce, "timestamp": block.timestamp,
        "difficulty": difficulty, "updates": ups,
    }, sort_keys=True)


def block_from_json(line: str) -> tuple[Block, int]:
    d = json.loads(line)
    ups = tuple(
        LocalUpdate(int(u["round"]), int(u["peer"]), bytes.fromhex(u["digest"]),
                    bytes.fromhex(u["payload"]) if "payload" in u else None,
                    bytes.fromhex(u["public_key"]), bytes.fromhex(u["signature"]))
        for u in d["updates"]
    )
    block = Block(int(d["height"]), bytes.fromhex(d["prev_hash"]), ups, int(d["miner"]),
                  int(d["nonce"]), float(d["timestamp"]), bytes.fromhex(d["hash"]))
    return block, int(d["difficulty"])


@dataclass(frozen=True)
class Violation:
    line: int
    height: int | None
    reason: str
    detail: str = ""

    def __str__(self):
        where = f"block height {self.height}" if self.height is not None else "unparsed block"
        extra = f" ({self.detail})" if self.detail else ""
        return f"line {self.line}: {where}: {self.reason}{extra}"


def replay_chain(lines: Iterable[str]) -> tuple[int, Violation | None]:
    """Re-validate a JSON-lines dump. Returns (blocks checked, first violation)."""
    known: dict[bytes, Block] = {}
    keys: dict[bytes, frozenset] = {}
    checked = 0
    for lineno, line in _nonblank(lines):
        try:
            block, difficulty = block_from_json(line)
        except (ValueError, KeyError, TypeError) as exc:
            return checked, Violation(lineno, None, MALFORMED, str(exc))
        checked += 1
        if block.height == 0:
            if block.prev_hash != ZERO_HASH or block.updates or block.compute_hash() != block.block_hash:
                return checked, Violation(lineno, 0, BAD_BLOCK_HASH, "genesis does not match")
            known[block.block_hash] = block
            keys[block.block_hash] = frozenset()
            continue
        parent = known.get(block.prev_hash)
        if parent is None:
            return checked, Violation(lineno, block.height, UNKNOWN_PARENT)
        v = validate_block(block, parent, difficulty, keys[parent.block_hash], require_payload=False)
        if not v:
            return checked, Violation(lineno, block.height, v.reason, v.detail)
        known[block.block_hash] = block
        keys[block.block_hash] = keys[parent.block_hash] | {u.key for u in block.updates}
    return checked, None


def _nonblank(lines: Iterable[str]) -> Iterator[tuple[int, str]]:
    for i, line in enumerate(lines, 1):
        if line.strip():
            yield i, line
