"""Blinded capability chains over Ed25519.

A 256-bit chain seed ``H_0`` plus a root keypair ``(S_R, P_R)`` yields an
unbounded sequence of storage boxes.  For chain index ``i`` and context
``ctx`` the box has

* a Box-ID ``M = P_R * K_ctx``, which is also the box's Ed25519 public key,
* a symmetric key ``E_ctx`` and a 96-bit nonce for AES-256-GCM-SIV,
* a signing scalar ``S_ctx = S_R * K_ctx mod l`` (write side only).

A :class:`WriteCapability` ``(S_R, H_0)`` can create boxes; the paired
:class:`ReadCapability` ``(P_R, H_0)`` can locate, verify and decrypt them
but cannot sign.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCMSIV
from cryptography.hazmat.primitives.kdf.hkdf import HKDFExpand
from nacl import bindings as sodium

# prime order of the Ed25519 base point
ELL = 2**252 + 27742317777372353535851937790883648493

CTX_IN = b"funion/ctx-in/v1"
CTX_OUT = b"funion/ctx-out/v1"

BOX_ID_SIZE = 32
SIGNATURE_SIZE = 64
TAG_SIZE = 16
NONCE_SIZE = 12
SEED_SIZE = 32
ENTROPY_SIZE = 64

# application bytes per box: one Sphinx payload (7 500 tokens at 4 B/token);
# record framing travels inside the fixed 1 kB packet overhead
MAX_PLAINTEXT = 30_000
RECORD_OVERHEAD = 4 + BOX_ID_SIZE + SIGNATURE_SIZE + TAG_SIZE

_ROOT_SALT = b"funion/bacap/v1/root"
_CHAIN_SALT = b"funion/bacap/v1/chain"
_CTX_SALT = b"funion/bacap/v1/ctx"


class BacapError(Exception):
    """Base class for capability and record errors."""


class DomainError(BacapError, ValueError):
    """An index, context or key value lies outside its domain."""


class SizeError(BacapError, ValueError):
    """Plaintext larger than one box can carry."""


class OpenError(BacapError):
    """A record could not be opened with the given read capability."""


class WrongBox(OpenError):
    """The record's Box-ID is not the one derived for (index, ctx)."""


class BadSignature(OpenError):
    """The signature does not verify under the Box-ID."""


class DecryptFailure(OpenError):
    """Authenticated decryption rejected the ciphertext."""


def _expand(prk: bytes, label: bytes, length: int) -> bytes:
    return HKDFExpand(hashes.SHA512(), length, label).derive(prk)


def _extract(salt: bytes, ikm: bytes) -> bytes:
    return hmac.digest(salt, ikm, "sha512")


def _nonzero_scalar(prk: bytes, label: bytes) -> int:
    # 512 bits reduced mod l; zero is rejected and re-derived with a retry counter
    retry = 0
    while True:
        suffix = b"" if retry == 0 else struct.pack(">I", retry)
        k = int.from_bytes(_expand(prk, label + suffix, 64), "little") % ELL
        if k:
            return k
        retry += 1


def scalar_bytes(k: int) -> bytes:
    return (k % ELL).to_bytes(32, "little")


def base_mult(k: int) -> bytes:
    """Encoded point ``B * k`` for a nonzero scalar ``k``."""
    return sodium.crypto_scalarmult_ed25519_base_noclamp(scalar_bytes(k))


def point_mult(k: int, point: bytes) -> bytes:
    """Encoded point ``point * k``."""
    return sodium.crypto_scalarmult_ed25519_noclamp(scalar_bytes(k), point)


@dataclass(frozen=True)
class RootKeypair:
    secret: int
    public: bytes

    def __post_init__(self):
        if not 1 <= self.secret < ELL:
            raise DomainError("root secret must lie in [1, l-1]")


@dataclass(frozen=True)
class ReadCapability:
    """``(P_R, H_0)``: enumerate, verify and decrypt boxes."""

    p_root: bytes
    h0: bytes

    def __post_init__(self):
        if len(self.p_root) != BOX_ID_SIZE or len(self.h0) != SEED_SIZE:
            raise DomainError("read capability needs a 32-byte point and a 32-byte seed")


@dataclass(frozen=True)
class WriteCapability:
    """``(S_R, H_0)``: everything a reader can do, plus signing new boxes."""

    s_root: int
    h0: bytes

    def __post_init__(self):
        if not 1 <= self.s_root < ELL:
            raise DomainError("root secret must lie in [1, l-1]")
        if len(self.h0) != SEED_SIZE:
            raise DomainError("chain seed must be 32 bytes")

    @property
    def p_root(self) -> bytes:
        return _public_root(self.s_root)

    def read_capability(self) -> ReadCapability:
        return ReadCapability(self.p_root, self.h0)

    def __repr__(self):
        # keep the root secret out of logs and tracebacks
        return f"WriteCapability(p_root={self.p_root.hex()[:16]}...)"


@lru_cache(maxsize=65536)
def _public_root(s_root: int) -> bytes:
    return base_mult(s_root)


def generate_capability(seed: bytes | None = None) -> tuple[WriteCapability, ReadCapability]:
    """Create a fresh write/read capability pair.

    ``seed`` supplies the entropy (at least 64 bytes); when omitted it is
    drawn from the OS.  The same seed always gives the same pair.
    """
    if seed is None:
        seed = os.urandom(ENTROPY_SIZE)
    if len(seed) < ENTROPY_SIZE:
        raise DomainError(f"capability seed needs at least {ENTROPY_SIZE} bytes")
    prk = _extract(_ROOT_SALT, seed)
    s_root = _nonzero_scalar(prk, b"root-scalar")
    h0 = _expand(prk, b"chain-seed", SEED_SIZE)
    write = WriteCapability(s_root, h0)
    return write, write.read_capability()


def root_keypair(write: WriteCapability) -> RootKeypair:
    return RootKeypair(write.s_root, write.p_root)


@dataclass(frozen=True)
class ChainState:
    h: bytes
    i: int = 0


@dataclass(frozen=True)
class ChainOutput:
    h: bytes
    e: bytes
    k: int
    nonce: bytes


def advance_chain(state: ChainState) -> tuple[ChainState, ChainOutput]:
    """One step ``H_i, E_i, K_i = KDF(H_{i-1}, i)``."""
    if len(state.h) != SEED_SIZE:
        raise DomainError("chain value must be 32 bytes")
    i = state.i + 1
    prk = _extract(_CHAIN_SALT, state.h + i.to_bytes(8, "big"))
    out = ChainOutput(
        h=_expand(prk, b"H", SEED_SIZE),
        e=_expand(prk, b"E", 32),
        k=_nonzero_scalar(prk, b"K"),
        nonce=_expand(prk, b"nonce", NONCE_SIZE),
    )
    return ChainState(out.h, i), out


# the chain is sequential; keep a state every _CHECKPOINT steps per seed so
# random access costs at most _CHECKPOINT advances after the first walk
_CHECKPOINT = 256
_MAX_CHAINS = 4096
_CHAINS: OrderedDict[bytes, dict[int, ChainState]] = OrderedDict()


def _chain_at(h0: bytes, index: int) -> ChainOutput:
    cps = _CHAINS.get(h0)
    if cps is None:
        cps = _CHAINS[h0] = {0: ChainState(h0, 0)}
        if len(_CHAINS) > _MAX_CHAINS:
            _CHAINS.popitem(last=False)
    else:
        _CHAINS.move_to_end(h0)
    state = cps.get((index - 1) // _CHECKPOINT * _CHECKPOINT)
    if state is None:
        state = cps[max(cps)]
    while state.i < index:
        state, out = advance_chain(state)
        if state.i % _CHECKPOINT == 0:
            cps[state.i] = state
    return out


@lru_cache(maxsize=1 << 16)
def chain_output(h0: bytes, index: int) -> ChainOutput:
    """``(H_i, E_i, K_i, nonce_i)`` for chain seed ``h0``."""
    if index < 1:
        raise DomainError("chain indices start at 1")
    return _chain_at(h0, index)


@dataclass(frozen=True)
class BoxKeys:
    k_ctx: int
    e_ctx: bytes
    nonce: bytes
    box_id: bytes
    s_ctx: int | None = None


def _context_material(out: ChainOutput, ctx: bytes) -> tuple[int, bytes, bytes]:
    info = struct.pack(">H", len(ctx)) + ctx
    k_prk = _extract(_CTX_SALT, b"K" + scalar_bytes(out.k) + info)
    e_prk = _extract(_CTX_SALT, b"E" + out.e + out.nonce + info)
    return (
        _nonzero_scalar(k_prk, b"K-ctx"),
        _expand(e_prk, b"E-ctx", 32),
        _expand(e_prk, b"nonce-ctx", NONCE_SIZE),
    )


def derive_box(cap: ReadCapability | WriteCapability, index: int, ctx: bytes) -> BoxKeys:
    """Keys and Box-ID for box ``index`` under context ``ctx``."""
    if isinstance(index, bool) or not isinstance(index, int) or index < 1:
        raise DomainError(f"box index must be a positive integer, got {index!r}")
    if not ctx:
        raise DomainError("context must be a non-empty byte string")
    k_ctx, e_ctx, nonce = _context_material(chain_output(cap.h0, index), bytes(ctx))
    if isinstance(cap, WriteCapability):
        s_ctx = cap.s_root * k_ctx % ELL
        # B * (S_R K) == (B * S_R) * K == P_R * K
        return BoxKeys(k_ctx, e_ctx, nonce, base_mult(s_ctx), s_ctx)
    return BoxKeys(k_ctx, e_ctx, nonce, point_mult(k_ctx, cap.p_root))


@dataclass(frozen=True)
class BoxRecord:
    """The stored triple ``(M, c, s)``."""

    box_id: bytes
    ciphertext: bytes
    signature: bytes

    def to_bytes(self) -> bytes:
        return struct.pack(">I", len(self.ciphertext)) + self.box_id + self.signature + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "BoxRecord":
        if len(data) < 4 + BOX_ID_SIZE + SIGNATURE_SIZE:
            raise ValueError("truncated box record")
        (n,) = struct.unpack_from(">I", data)
        body = data[4:]
        if len(body) != BOX_ID_SIZE + SIGNATURE_SIZE + n:
            raise ValueError("box record length prefix does not match body")
        return cls(body[:32], body[96:], body[32:96])

    def __len__(self):
        return 4 + BOX_ID_SIZE + SIGNATURE_SIZE + len(self.ciphertext)


def sign_ciphertext(s_ctx: int, box_id: bytes, ciphertext: bytes) -> bytes:
    """Ed25519 signature by a raw scalar whose public key is ``box_id``.

    Stock Ed25519 signs from a seed; here the secret is already a scalar,
    so the Schnorr equation is applied directly with a deterministic nonce
    ``r = H(S_ctx || c)``.
    """
    r = int.from_bytes(hashlib.sha512(scalar_bytes(s_ctx) + ciphertext).digest(), "little") % ELL
    big_r = base_mult(r)
    h = int.from_bytes(hashlib.sha512(big_r + box_id + ciphertext).digest(), "little") % ELL
    return big_r + scalar_bytes(r + h * s_ctx)


def seal(write_cap: WriteCapability, index: int, ctx: bytes, plaintext: bytes) -> BoxRecord:
    """Encrypt and sign ``plaintext`` into box ``index`` of context ``ctx``."""
    if len(plaintext) > MAX_PLAINTEXT:
        raise SizeError(f"plaintext of {len(plaintext)} bytes exceeds box capacity {MAX_PLAINTEXT}")
    keys = derive_box(write_cap, index, ctx)
    c = AESGCMSIV(keys.e_ctx).encrypt(keys.nonce, bytes(plaintext), None)
    return BoxRecord(keys.box_id, c, sign_ciphertext(keys.s_ctx, keys.box_id, c))


def verify_record(record: BoxRecord) -> bool:
    """Replica-side check: does ``s`` verify over ``c`` under key ``M``?"""
    if len(record.box_id) != BOX_ID_SIZE or len(record.signature) != SIGNATURE_SIZE:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(record.box_id).verify(record.signature, record.ciphertext)
    except (InvalidSignature, ValueError):
        return False
    return True


def decrypt(keys: BoxKeys, ciphertext: bytes) -> bytes:
    try:
        return AESGCMSIV(keys.e_ctx).decrypt(keys.nonce, ciphertext, None)
    except InvalidTag as exc:
        raise DecryptFailure("authenticated decryption failed") from exc


def open_record(read_cap: ReadCapability | WriteCapability, index: int, ctx: bytes, record: BoxRecord) -> bytes:
    """Return the plaintext of ``record``.

    The Box-ID, the signature and the ciphertext tag are checked in that
    order; each failure raises its own :class:`OpenError` subclass.
    """
    return open_with_keys(derive_box(read_cap, index, ctx), record)


def open_with_keys(keys: BoxKeys, record: BoxRecord) -> bytes:
    """:func:`open_record` for callers that already derived the box keys."""
    if not hmac.compare_digest(keys.box_id, record.box_id):
        raise WrongBox("record is not the expected box")
    if not verify_record(record):
        raise BadSignature("signature does not verify under the Box-ID")
    return decrypt(keys, record.ciphertext)


def vector_lines(seeds: list[bytes], indices: range, contexts: tuple[bytes, ...] = (CTX_IN, CTX_OUT)) -> list[str]:
    """Golden-vector lines ``seed_hex index ctx_hex M_hex E_hex nonce_hex``."""
    lines = []
    for seed in seeds:
        _, read = generate_capability(seed)
        for index in indices:
            for ctx in contexts:
                keys = derive_box(read, index, ctx)
                lines.append(
                    f"{seed.hex()} {index} {ctx.hex()} {keys.box_id.hex()} {keys.e_ctx.hex()} {keys.nonce.hex()}"
                )
    return lines


def default_vector_seeds() -> list[bytes]:
    return [bytes([b]) * ENTROPY_SIZE for b in (0x01, 0x02, 0x5A, 0xFF)]
