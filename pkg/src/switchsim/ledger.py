"""Replicated ledger primitives shared by both consensus protocols.

The ledger is an append-only sequence of entries protected by a rolling
64-bit hash chain (blake2b truncated to 8 bytes; hashing sits on every
message sign/verify, so it has to be cheap).  Entry serialization is
canonical little-endian (see ``encode_entry``) so two nodes holding the
same entries always agree on every rolling hash, which is what checkpoint
verification during a protocol switch relies on.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import ClassVar


# Rolling hash of the empty ledger: digest64(b"switchsim:genesis").
GENESIS_HASH = 0xF904A244005ECB1B


class LedgerError(Exception):
    pass


def digest64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


class OriginProtocol(Enum):
    RAFT = 1
    HOTSTUFF = 2


class ProtocolMode(Enum):
    """Runnable protocol configurations; chained HotStuff shares the
    HOTSTUFF origin stamp with basic."""

    RAFT = "RAFT"
    HOTSTUFF_BASIC = "HOTSTUFF_BASIC"
    HOTSTUFF_CHAINED = "HOTSTUFF_CHAINED"

    @property
    def origin(self) -> OriginProtocol:
        if self is ProtocolMode.RAFT:
            return OriginProtocol.RAFT
        return OriginProtocol.HOTSTUFF

    @property
    def is_bft(self) -> bool:
        return self is not ProtocolMode.RAFT


@dataclass(frozen=True)
class Command:
    """Client command; (client, seq) is unique per run.  client -1 marks a
    protocol no-op block."""

    client: int
    seq: int
    payload: bytes = b""


@dataclass(frozen=True)
class LedgerEntry:
    height: int
    cmd: Command
    origin_protocol: OriginProtocol
    origin_round: int


def encode_command(cmd: Command) -> bytes:
    # <client:i64><seq:u64><len:u32><payload>
    return struct.pack("<qQI", cmd.client, cmd.seq, len(cmd.payload)) + cmd.payload


def encode_entry(entry: LedgerEntry) -> bytes:
    # <height:u64><origin:u8><round:u64> followed by the command encoding
    return (
        struct.pack("<QBQ", entry.height, entry.origin_protocol.value, entry.origin_round)
        + encode_command(entry.cmd)
    )


def chain_hash(prev_hash: int, entry: LedgerEntry) -> int:
    return digest64(struct.pack("<Q", prev_hash) + encode_entry(entry))


@dataclass(frozen=True)
class AuthTag:
    """Simulated keyed digest standing in for a signature.

    Verification recomputes the digest for the claimed signer, so a tag
    made by node A over bytes B never verifies for a different signer or
    different bytes.  Unforgeability of honest tags is a model constraint:
    fault actors only ever sign with their own id.
    """

    signer: int
    value: int

    _key_cache: ClassVar[dict[int, bytes]] = {}

    @classmethod
    def _key(cls, signer: int) -> bytes:
        key = cls._key_cache.get(signer)
        if key is None:
            key = struct.pack("<Q", digest64(b"node-key:" + struct.pack("<q", signer)))
            cls._key_cache[signer] = key
        return key

    @classmethod
    def sign(cls, signer: int, payload: bytes) -> "AuthTag":
        return cls(signer, digest64(cls._key(signer) + payload))

    def verify(self, payload: bytes) -> bool:
        return self.value == digest64(self._key(self.signer) + payload)


@dataclass(frozen=True)
class Checkpoint:
    height: int
    ledger_hash: int
    protocol: ProtocolMode


@dataclass
class CommittedLedger:
    """Append-only committed log with rolling hashes.

    ``hash_at(h)`` is the chain hash after the first h entries;
    ``hash_at(0)`` is the fixed genesis constant.
    """

    entries: list[LedgerEntry] = field(default_factory=list)
    _hashes: list[int] = field(default_factory=lambda: [GENESIS_HASH])

    @property
    def height(self) -> int:
        return len(self.entries)

    @property
    def head_hash(self) -> int:
        return self._hashes[-1]

    def hash_at(self, height: int) -> int:
        if not 0 <= height <= self.height:
            raise LedgerError(f"no hash at height {height} (height={self.height})")
        return self._hashes[height]

    def entry_at(self, height: int) -> LedgerEntry:
        if not 1 <= height <= self.height:
            raise LedgerError(f"no entry at height {height}")
        return self.entries[height - 1]

    def append(self, entry: LedgerEntry) -> None:
        if entry.height != self.height + 1:
            raise LedgerError(
                f"height gap: appending {entry.height} onto {self.height}"
            )
        self.entries.append(entry)
        self._hashes.append(chain_hash(self._hashes[-1], entry))

    def verify_chain(self) -> bool:
        h = GENESIS_HASH
        for i, entry in enumerate(self.entries):
            if entry.height != i + 1:
                return False
            h = chain_hash(h, entry)
            if h != self._hashes[i + 1]:
                return False
        return True


def make_checkpoint(ledger: CommittedLedger, height: int, protocol: ProtocolMode) -> Checkpoint:
    if height > ledger.height:
        raise LedgerError(f"checkpoint height {height} beyond ledger {ledger.height}")
    return Checkpoint(height, ledger.hash_at(height), protocol)


def verify_checkpoint(cp: Checkpoint, ledger: CommittedLedger) -> bool:
    if cp.height > ledger.height:
        return False
    return ledger.hash_at(cp.height) == cp.ledger_hash
