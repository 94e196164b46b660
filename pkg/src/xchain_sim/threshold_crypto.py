"""M-of-N BLS threshold signatures on BLS12-381.

Public keys live in G1 (48-byte compressed), signatures in G2 (96-byte
compressed). Messages are hashed to G2 with the IETF basic-scheme DST, so a
1-of-1 key set produces ordinary BLS signatures.

Key material is split by a trusted dealer with Feldman coefficient
commitments; signature shares are combined by Lagrange interpolation at 0.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from itertools import islice

import blspy
from py_arkworks_bls12381 import G1Point, G2Point, Scalar

CURVE_ORDER = 0x73EDA753299D7D483339D80809A1D80553BDA402FFFE5BFEFFFFFFFF00000001
HASH_DST = b"BLS_SIG_BLS12381G2_XMD:SHA-256_SSWU_RO_NUL_"

G1_SIZE = 48
G2_SIZE = 96

_G1 = G1Point()


class ThresholdError(Exception):
    pass


class InsufficientShares(ThresholdError):
    """Raised when fewer than ``m`` usable shares are available.

    ``bad_indices`` lists the shares identified as invalid before giving up.
    """

    def __init__(self, message: str, bad_indices: list[int] | None = None):
        super().__init__(message)
        self.bad_indices = bad_indices or []


def _g1_bytes(p: G1Point) -> bytes:
    return bytes(p.to_compressed_bytes())


def _g2_bytes(p: G2Point) -> bytes:
    return bytes(p.to_compressed_bytes())


@lru_cache(maxsize=4096)
def _decode_g1(data: bytes) -> G1Point | None:
    try:
        return G1Point.from_compressed_bytes(data)
    except ValueError:
        return None


@lru_cache(maxsize=4096)
def _decode_g2(data: bytes) -> G2Point | None:
    try:
        return G2Point.from_compressed_bytes(data)
    except ValueError:
        return None


@lru_cache(maxsize=8192)
def _pairing_check(pk: bytes, message: bytes, sig: bytes) -> bool:
    # e(pk, H(m)) == e(g1, sig), evaluated by blst
    try:
        pk_el = blspy.G1Element.from_bytes(pk)
        sig_el = blspy.G2Element.from_bytes(sig)
    except (ValueError, RuntimeError):
        return False
    return blspy.BasicSchemeMPL.verify(pk_el, message, sig_el)


@dataclass(frozen=True)
class ThresholdParams:
    n: int
    m: int

    def __post_init__(self):
        if not (1 <= self.m <= self.n):
            raise ValueError(f"invalid threshold parameters: need 1 <= m <= n, got m={self.m}, n={self.n}")


@dataclass(frozen=True)
class GroupPublicKey:
    data: bytes

    def to_bytes(self) -> bytes:
        return self.data

    @classmethod
    def from_bytes(cls, data: bytes) -> GroupPublicKey:
        if len(data) != G1_SIZE:
            raise ValueError(f"group public key must be {G1_SIZE} bytes")
        return cls(bytes(data))


@dataclass(frozen=True)
class KeyShare:
    signer_index: int
    secret_scalar: int = field(repr=False)
    public_share: bytes


@dataclass(frozen=True)
class ShareCommitments:
    coefficient_commitments: tuple[bytes, ...]

    @property
    def threshold(self) -> int:
        return len(self.coefficient_commitments)


@dataclass(frozen=True)
class SignatureShare:
    signer_index: int
    data: bytes

    @cached_property
    def point(self) -> G2Point | None:
        return _decode_g2(self.data)

    def to_bytes(self) -> bytes:
        return self.data


@dataclass(frozen=True)
class GroupSignature:
    data: bytes

    @cached_property
    def point(self) -> G2Point | None:
        return _decode_g2(self.data)

    def to_bytes(self) -> bytes:
        return self.data

    @classmethod
    def from_bytes(cls, data: bytes) -> GroupSignature:
        if len(data) != G2_SIZE:
            raise ValueError(f"group signature must be {G2_SIZE} bytes")
        return cls(bytes(data))


@dataclass
class VerifyStats:
    """Caller-owned verification counters used for cost accounting."""

    group: int = 0
    share: int = 0


@dataclass(frozen=True)
class KeySet:
    params: ThresholdParams
    group_pk: GroupPublicKey
    commitments: ShareCommitments
    shares: tuple[KeyShare, ...]

    def public_shares(self) -> dict[int, bytes]:
        return {s.signer_index: s.public_share for s in self.shares}


def _eval_poly(coefficients: list[int], x: int) -> int:
    acc = 0
    for c in reversed(coefficients):
        acc = (acc * x + c) % CURVE_ORDER
    return acc


def keygen(params: ThresholdParams, seed: int) -> tuple[GroupPublicKey, ShareCommitments, list[KeyShare]]:
    """Deal ``params.n`` shares of a fresh secret with threshold ``params.m``.

    The dealer polynomial only exists inside this call.
    """
    rng = random.Random(seed)
    coefficients = [rng.randrange(1, CURVE_ORDER) for _ in range(params.m)]
    commitments = ShareCommitments(tuple(_g1_bytes(_G1 * Scalar(c)) for c in coefficients))
    shares = []
    for i in range(1, params.n + 1):
        s = _eval_poly(coefficients, i)
        shares.append(KeyShare(i, s, _g1_bytes(_G1 * Scalar(s))))
    group_pk = GroupPublicKey(commitments.coefficient_commitments[0])
    del coefficients
    return group_pk, commitments, shares


def make_keyset(params: ThresholdParams, seed: int) -> KeySet:
    group_pk, commitments, shares = keygen(params, seed)
    return KeySet(params, group_pk, commitments, tuple(shares))


def verify_key_share(share: KeyShare, commitments: ShareCommitments) -> bool:
    """Check ``g1 * s_i == sum_j C_j * i^j`` and that the public share matches."""
    if share.signer_index < 1:
        return False
    points = [_decode_g1(c) for c in commitments.coefficient_commitments]
    if any(p is None for p in points):
        return False
    acc = G1Point.identity()
    power = 1
    for p in points:
        acc = acc + p * Scalar(power)
        power = power * share.signer_index % CURVE_ORDER
    expected = _G1 * Scalar(share.secret_scalar % CURVE_ORDER)
    return acc == expected and _g1_bytes(expected) == share.public_share


def sign_share(share: KeyShare, message: bytes) -> SignatureShare:
    if not message:
        raise ValueError("message must be non-empty")
    sk = blspy.PrivateKey.from_bytes((share.secret_scalar % CURVE_ORDER).to_bytes(32, "big"))
    data = bytes(blspy.BasicSchemeMPL.sign(sk, message))
    sig = SignatureShare(share.signer_index, data)
    # our own output is a valid subgroup point, so skip the subgroup check
    sig.__dict__["point"] = G2Point.from_compressed_bytes_unchecked(data)
    return sig


class DeferredSignatureShare:
    """A signature share that is only computed when its bytes or point are used.

    Signing rounds collect a share from every validator but the fast path
    combines only ``m`` of them, so the rest are never evaluated.
    """

    def __init__(self, share: KeyShare, message: bytes):
        if not message:
            raise ValueError("message must be non-empty")
        self.signer_index = share.signer_index
        self._share = share
        self._message = message

    @cached_property
    def _signed(self) -> SignatureShare:
        return sign_share(self._share, self._message)

    @property
    def data(self) -> bytes:
        return self._signed.data

    @property
    def point(self) -> G2Point | None:
        return self._signed.point

    def to_bytes(self) -> bytes:
        return self.data


def verify_signature_share(
    share_sig: SignatureShare, public_share: bytes, message: bytes, stats: VerifyStats | None = None
) -> bool:
    if stats is not None:
        stats.share += 1
    return _pairing_check(public_share, message, share_sig.data)


def lagrange_at_zero(indices: list[int]) -> list[int]:
    coeffs = []
    for i in indices:
        num, den = 1, 1
        for j in indices:
            if j != i:
                num = num * j % CURVE_ORDER
                den = den * (j - i) % CURVE_ORDER
        coeffs.append(num * pow(den, -1, CURVE_ORDER) % CURVE_ORDER)
    return coeffs


def combine_shares(shares: list[SignatureShare], params: ThresholdParams) -> GroupSignature:
    """Interpolate the first ``params.m`` shares (by list order) at index 0."""
    indices = [s.signer_index for s in shares]
    if len(set(indices)) != len(indices):
        raise ThresholdError(f"duplicate signer indices in {indices}")
    if len(shares) < params.m:
        raise InsufficientShares(f"need {params.m} shares, got {len(shares)}")
    chosen = list(islice(shares, params.m))
    points = [s.point for s in chosen]
    if any(p is None for p in points):
        bad = [s.signer_index for s in chosen if s.point is None]
        raise ThresholdError(f"undecodable signature shares from signers {bad}")
    lambdas = lagrange_at_zero([s.signer_index for s in chosen])
    combined = G2Point.multiexp_unchecked(points, [Scalar(c) for c in lambdas])
    return GroupSignature(_g2_bytes(combined))


def verify_group(
    group_pk: GroupPublicKey, message: bytes, sig: GroupSignature, stats: VerifyStats | None = None
) -> bool:
    if stats is not None:
        stats.group += 1
    return _pairing_check(group_pk.data, message, sig.data)


def robust_combine(
    shares: list[SignatureShare],
    params: ThresholdParams,
    group_pk: GroupPublicKey,
    public_shares: dict[int, bytes],
    message: bytes,
    stats: VerifyStats | None = None,
) -> tuple[GroupSignature, list[int]]:
    """Combine shares, falling back to per-share checks if the fast path fails.

    Returns the verified group signature and the signer indices whose shares
    were found invalid (empty when the first ``m`` shares were all good).
    """
    if stats is None:
        stats = VerifyStats()
    if len(shares) >= params.m:
        try:
            sig = combine_shares(shares, params)
        except ThresholdError:
            sig = None
        if sig is not None and verify_group(group_pk, message, sig, stats):
            return sig, []

    good, bad = [], []
    for s in shares:
        pub = public_shares.get(s.signer_index)
        if pub is not None and s.point is not None and verify_signature_share(s, pub, message, stats):
            good.append(s)
        else:
            bad.append(s.signer_index)
    if len(good) < params.m:
        raise InsufficientShares(
            f"only {len(good)} valid shares, threshold is {params.m}", bad_indices=bad
        )
    sig = combine_shares(good, params)
    if not verify_group(group_pk, message, sig, stats):
        raise ThresholdError("recombined signature failed verification; public shares inconsistent")
    return sig, bad
