"""Reference synthetic task-vector generator (pure Python, IEEE doubles).

Prints the flat values for a small configuration so C++ tests can freeze them.
"""
import math
import struct
import sys

M64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x):
    x = (x + GOLDEN) & M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & M64
    return x ^ (x >> 31)


def draw(seed, stream, counter):
    key = splitmix64(seed ^ splitmix64(stream))
    return splitmix64((key + counter * GOLDEN) & M64)


def to_unit(x):
    return float(x >> 11) * 2.0**-53


def plog(x):
    m, e = math.frexp(x)
    if m < 0.70710678118654752440:
        m *= 2.0
        e -= 1
    z = (m - 1.0) / (m + 1.0)
    z2 = z * z
    term, total = z, 0.0
    for k in range(1, 32, 2):
        total += term / k
        term *= z2
    return 2.0 * total + e * 0.69314718055994530942


def normal(seed, stream, index):
    for attempt in range(128):
        base = (index << 8) + 2 * attempt
        u = 2.0 * to_unit(draw(seed, stream, base)) - 1.0
        v = 2.0 * to_unit(draw(seed, stream, base + 1)) - 1.0
        s = u * u + v * v
        if 0.0 < s < 1.0:
            return u * math.sqrt(-2.0 * plog(s) / s)
    return 0.0


def f32(x):
    return struct.unpack("<f", struct.pack("<f", x))[0]


def generate(d, n, density, agreement, scale, seed):
    exact = density * 100.0 * d / 100.0
    support = max(1, min(d, int(math.floor(exact + 0.5))))
    agree_cut = int(agreement * 2.0**53)
    out = []
    for task in range(n):
        sup = (task << 8) | 2
        order = sorted(range(d), key=lambda i: (draw(seed, sup, i), i))
        chosen = set(order[:support])
        vals = []
        for i in range(d):
            if i not in chosen:
                vals.append(0.0)
                continue
            consensus_pos = (draw(seed, 1, i) >> 63) != 0
            agree = (draw(seed, (task << 8) | 3, i) >> 11) < agree_cut
            positive = consensus_pos == agree
            mag, attempt = 0.0, 0
            while mag == 0.0:
                mag = f32(abs(normal(seed, (task << 8) | 4, (i << 4) + attempt)) * scale)
                attempt += 1
            vals.append(mag if positive else -mag)
        out.append(vals)
    return out


if __name__ == "__main__":
    d, n, density, agreement, scale, seed = 8, 2, 0.5, 0.7, 1.0, 123
    if len(sys.argv) > 1:
        d, n, density, agreement, scale, seed = (
            int(sys.argv[1]), int(sys.argv[2]), float(sys.argv[3]), float(sys.argv[4]),
            float(sys.argv[5]), int(sys.argv[6]))
    for row in generate(d, n, density, agreement, scale, seed):
        print(", ".join("%.9gf" % v for v in row))
