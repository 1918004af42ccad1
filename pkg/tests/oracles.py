"""Independent reference implementations used to check the product code.

These deliberately avoid the production algorithms: the CRC here is a
bit-serial shift register (the product uses a lookup table), and the
float32 codec builds IEEE-754 bit fields by hand with integer
arithmetic (the product uses struct). If both routes agree, a shared
systematic mistake is much less likely.
"""

from __future__ import annotations

import math


def crc16_bitwise(data: bytes) -> int:
    """CRC-16 as a plain shift register: init 0xFFFF, reflected 0xA001."""
    crc = 0xFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            if crc & 1:
                crc = (crc >> 1) ^ 0xA001
            else:
                crc >>= 1
    return crc


def crc16_bitwise_wire(data: bytes) -> bytes:
    """The two CRC bytes as they appear on the wire (low byte first)."""
    crc = crc16_bitwise(data)
    return bytes([crc & 0xFF, crc >> 8])


def float32_bits(value: float) -> int:
    """IEEE-754 single-precision bit pattern, built field by field.

    Rounds ties to even like the hardware does. Raises ValueError for
    NaN or infinity, OverflowError for finite doubles too large for
    single precision.
    """
    if math.isnan(value) or math.isinf(value):
        raise ValueError("only finite values have a single-precision encoding here")
    sign = 1 if math.copysign(1.0, value) < 0 else 0
    magnitude = abs(value)
    if magnitude == 0.0:
        return sign << 31
    mantissa, exponent = math.frexp(magnitude)  # magnitude = mantissa * 2**exponent
    e = exponent - 1                            # now magnitude = (2*mantissa) * 2**e
    if e < -126:
        # subnormal range: count units of 2**-149
        frac = round(magnitude * 2.0 ** 149)
        if frac == 0:
            return sign << 31
        if frac >= 1 << 23:
            # rounded up into the smallest normal (exponent field 1)
            return (sign << 31) | (1 << 23)
        return (sign << 31) | frac
    # normal: significand 2*mantissa is in [1, 2)
    frac = round((mantissa * 2.0 - 1.0) * (1 << 23))
    if frac == 1 << 23:  # rounding carried into the next binade
        frac = 0
        e += 1
    if e > 127:
        raise OverflowError(f"{value!r} overflows single precision")
    return (sign << 31) | ((e + 127) << 23) | frac


def float32_from_bits(bits: int) -> float:
    """Decode a single-precision bit pattern using integer arithmetic."""
    if not 0 <= bits <= 0xFFFFFFFF:
        raise ValueError(f"not a 32-bit pattern: {bits:#x}")
    sign = -1.0 if bits >> 31 else 1.0
    exponent = (bits >> 23) & 0xFF
    frac = bits & 0x7FFFFF
    if exponent == 0xFF:
        raise ValueError("NaN or infinity pattern")
    if exponent == 0:
        return sign * frac * 2.0 ** -149
    return sign * (1.0 + frac * 2.0 ** -23) * 2.0 ** (exponent - 127)


def registers_for(value: float) -> tuple[int, int]:
    """(high word, low word) of the single-precision encoding."""
    bits = float32_bits(value)
    return bits >> 16, bits & 0xFFFF
