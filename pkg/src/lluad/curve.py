"""x-only scalar multiplication on the prime-order subgroup of curve25519.

The mix network blinds ephemeral public keys by repeated scalar
multiplication, so scalars must compose multiplicatively:

    mult(a, mult(b, P)) == mult(a*b mod L, P)

Standard X25519 APIs clamp scalars (forcing bits 3, 254, 255) and break that
identity, which is why this module carries its own Montgomery ladder over
unclamped scalars reduced mod the group order L.  The base point (u=9)
generates the prime-order subgroup, so every honestly derived element has
order L and multiplicativity holds exactly.

Field arithmetic runs over gmpy2 integers when available (about twice as
fast as plain ints); the ladder is not constant-time and is not meant to
resist local side channels.
"""

from __future__ import annotations

import secrets
from random import Random

try:
    from gmpy2 import mpz
except ImportError:  # pragma: no cover - exercised only without gmpy2
    mpz = int

FIELD_PRIME = 2**255 - 19
GROUP_ORDER = 2**252 + 27742317777372353535851937790883648493
BASE_U = 9
ELEMENT_LEN = 32

_P = mpz(FIELD_PRIME)
_A24 = mpz(121665)

# u-coordinates of all canonical points with order dividing 8 (curve and
# twist).  Feeding any of these into DH would yield a predictable shared
# key, so they are rejected on decode.
LOW_ORDER_U = frozenset(
    {
        0,
        1,
        325606250916557431795983626356110631294008115727848805560023387167927233504,
        39382357235489614581723060781553021112529911719440698176882885853963445705823,
        FIELD_PRIME - 1,
    }
)


class InvalidElement(ValueError):
    """Raised for non-canonical, low-order, or otherwise unusable elements."""


def mult(scalar: int, u: int) -> int:
    """Montgomery ladder: u-coordinate of scalar * (point with coordinate u).

    The scalar is used as-is (no clamping); callers are expected to pass
    values already reduced mod GROUP_ORDER.  Returns 0 for the identity.
    """
    if scalar <= 0 or scalar >= 1 << 255:
        raise ValueError("scalar out of range")
    x1 = mpz(u % FIELD_PRIME)
    x2, z2 = mpz(1), mpz(0)
    x3, z3 = x1, mpz(1)
    swap = 0
    for t in range(254, -1, -1):
        bit = (scalar >> t) & 1
        if swap ^ bit:
            x2, x3 = x3, x2
            z2, z3 = z3, z2
        swap = bit
        a = (x2 + z2) % _P
        aa = a * a % _P
        b = (x2 - z2) % _P
        bb = b * b % _P
        e = (aa - bb) % _P
        c = (x3 + z3) % _P
        d = (x3 - z3) % _P
        da = d * a % _P
        cb = c * b % _P
        t0 = (da + cb) % _P
        x3 = t0 * t0 % _P
        t1 = (da - cb) % _P
        z3 = x1 * (t1 * t1 % _P) % _P
        x2 = aa * bb % _P
        z2 = e * ((aa + _A24 * e) % _P) % _P
    if swap:
        x2, z2 = x3, z3
    if z2 == 0:
        return 0
    return int(x2 * pow(z2, _P - 2, _P) % _P)


def mult_base(scalar: int) -> int:
    """u-coordinate of scalar * base point."""
    return mult(scalar, BASE_U)


def encode_element(u: int) -> bytes:
    """32-byte little-endian encoding of a u-coordinate."""
    if not 0 <= u < FIELD_PRIME:
        raise ValueError("coordinate out of field range")
    return int(u).to_bytes(ELEMENT_LEN, "little")


def decode_element(data: bytes) -> int:
    """Decode and validate a 32-byte element.

    Rejects wrong lengths, non-canonical encodings (high bit set or value
    >= field prime), and the low-order blacklist.
    """
    if len(data) != ELEMENT_LEN:
        raise InvalidElement(f"element must be {ELEMENT_LEN} bytes, got {len(data)}")
    u = int.from_bytes(data, "little")
    if u >> 255:
        raise InvalidElement("non-canonical element (high bit set)")
    if u >= FIELD_PRIME:
        raise InvalidElement("non-canonical element (not reduced)")
    if u in LOW_ORDER_U:
        raise InvalidElement("low-order element")
    return u


def random_scalar(rng: Random | None = None) -> int:
    """Uniform nonzero scalar mod GROUP_ORDER.

    Pass a seeded Random for reproducible runs; the default draws from the
    OS entropy pool.
    """
    if rng is None:
        return 1 + secrets.randbelow(GROUP_ORDER - 1)
    return rng.randrange(1, GROUP_ORDER)
