"""Compact binary frame for acoustic and serial links.

    frame   := varint(len(payload)) payload
    payload := varint(n) record*n
    record  := varint(sensor_index) varint(t_ms) zigzag(value_milli) varint(count)
               [zigzag(min_milli) zigzag(max_milli)]   -- only when count > 1

Values travel as signed thousandths, so a decoded value is rounded to
three decimals.
"""

from __future__ import annotations

from typing import Sequence

from seaflow.sim.model import OutRecord

SCALE = 1000


class FrameError(ValueError):
    pass


def put_varint(out: bytearray, n: int) -> None:
    if n < 0:
        raise ValueError("varint must be >= 0")
    while True:
        byte = n & 0x7F
        n >>= 7
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def get_varint(data: bytes, pos: int) -> tuple[int, int]:
    shift = 0
    n = 0
    while True:
        if pos >= len(data):
            raise FrameError("truncated varint")
        byte = data[pos]
        pos += 1
        n |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return n, pos
        shift += 7
        if shift > 63:
            raise FrameError("varint too long")


def zigzag(n: int) -> int:
    return n * 2 if n >= 0 else -n * 2 - 1


def unzigzag(n: int) -> int:
    return n // 2 if n % 2 == 0 else -(n + 1) // 2


def quantize(value: float) -> int:
    return int(round(value * SCALE))


def encode_frame(records: Sequence[OutRecord], index: dict[str, int]) -> bytes:
    payload = bytearray()
    put_varint(payload, len(records))
    for r in records:
        put_varint(payload, index[r.sensor_id])
        put_varint(payload, r.t_ms)
        put_varint(payload, zigzag(quantize(r.value)))
        put_varint(payload, r.count)
        if r.count > 1:
            put_varint(payload, zigzag(quantize(r.vmin)))
            put_varint(payload, zigzag(quantize(r.vmax)))
    frame = bytearray()
    put_varint(frame, len(payload))
    return bytes(frame + payload)


def decode_frame(frame: bytes, names: Sequence[str]) -> list[OutRecord]:
    length, pos = get_varint(frame, 0)
    if len(frame) - pos != length:
        raise FrameError(f"length prefix {length} but {len(frame) - pos} payload bytes")
    n, pos = get_varint(frame, pos)
    out = []
    for _ in range(n):
        idx, pos = get_varint(frame, pos)
        if idx >= len(names):
            raise FrameError(f"unknown sensor index {idx}")
        t_ms, pos = get_varint(frame, pos)
        v, pos = get_varint(frame, pos)
        count, pos = get_varint(frame, pos)
        vmin = vmax = None
        if count > 1:
            lo, pos = get_varint(frame, pos)
            hi, pos = get_varint(frame, pos)
            vmin, vmax = unzigzag(lo) / SCALE, unzigzag(hi) / SCALE
        out.append(OutRecord(names[idx], t_ms, unzigzag(v) / SCALE, vmin, vmax, count))
    if pos != len(frame):
        raise FrameError("trailing bytes")
    return out
