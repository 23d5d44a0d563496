"""Key generation, including RSA sizes the ``cryptography`` keygen refuses (< 1024 bits)."""

from __future__ import annotations

import secrets

from cryptography.hazmat.primitives.asymmetric import ec, rsa

PUBLIC_EXPONENT = 65537
_SMALL_PRIMES = [p for p in range(3, 2000) if all(p % d for d in range(2, int(p ** 0.5) + 1))]


def _probably_prime(n: int, rounds: int = 40) -> bool:
    if n < 2:
        return False
    for p in _SMALL_PRIMES:
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for _ in range(rounds):
        a = secrets.randbelow(n - 3) + 2
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = pow(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


def _random_prime(bits: int) -> int:
    while True:
        # top two bits set so the product has exactly 2*bits bits
        candidate = secrets.randbits(bits) | (0b11 << (bits - 2)) | 1
        if candidate % PUBLIC_EXPONENT != 1 and _probably_prime(candidate):
            return candidate


def small_rsa_key(bits: int) -> rsa.RSAPrivateKey:
    if bits % 2:
        raise ValueError("modulus size must be even")
    half = bits // 2
    while True:
        p, q = _random_prime(half), _random_prime(half)
        if p == q:
            continue
        n = p * q
        phi = (p - 1) * (q - 1)
        if n.bit_length() != bits or phi % PUBLIC_EXPONENT == 0:
            continue
        d = pow(PUBLIC_EXPONENT, -1, phi)
        numbers = rsa.RSAPrivateNumbers(
            p, q, d, d % (p - 1), d % (q - 1), rsa.rsa_crt_iqmp(p, q),
            rsa.RSAPublicNumbers(PUBLIC_EXPONENT, n))
        return numbers.private_key()


def generate_key(algorithm: str, bits: int):
    if algorithm == "ec":
        curve = {256: ec.SECP256R1, 384: ec.SECP384R1}[bits]
        return ec.generate_private_key(curve())
    if bits < 1024:
        return small_rsa_key(bits)
    return rsa.generate_private_key(PUBLIC_EXPONENT, bits)
