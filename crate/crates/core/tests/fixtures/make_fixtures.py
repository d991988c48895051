"""Writes the .3dqp fixtures used by codec_golden.rs, straight from the
format description (independent of the Rust encoder)."""

import struct
import zlib


def mask(bits):
    out = bytearray((len(bits) + 7) // 8)
    for i, b in enumerate(bits):
        if b:
            out[i // 8] |= 0x80 >> (i % 8)
    return bytes(out)


def layer(name, shape, gp, gn, alpha, values, binary):
    raw = name.encode()
    out = struct.pack("<H", len(raw)) + raw
    out += struct.pack("<B", len(shape)) + b"".join(struct.pack("<I", d) for d in shape)
    out += struct.pack("<ff", gp, gn)
    out += struct.pack("<I", len(alpha)) + b"".join(struct.pack("<f", a) for a in alpha)
    if binary:
        out += mask([v > 0 for v in values])
    else:
        out += mask([v > 0 for v in values]) + mask([v < 0 for v in values])
    return out


def model(scheme, layers):
    body = struct.pack("<BBI", 1, scheme, len(layers)) + b"".join(layers)
    return b"3DQP" + body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


ternary = model(0, [
    layer("enc.kernel", [2, 1, 1, 1, 3], 1.5, 0.75, [0.5, 0.25], [1, 0, -1, 0, 1, 1], False),
    layer("head.kernel", [1, 1, 1, 1, 10], 1.0, 1.0, [0.125], [1, -1, 0, 0, 1, 1, -1, 0, 0, 1], False),
])
binary = model(1, [
    layer("b.kernel", [1, 1, 1, 3, 3], 2.0, 0.5, [0.375], [1, -1, -1, 1, 1, 1, -1, 1, -1], True),
])

with open("ternary.3dqp", "wb") as f:
    f.write(ternary)
with open("binary.3dqp", "wb") as f:
    f.write(binary)
with open("empty.3dqp", "wb") as f:
    f.write(model(0, []))
