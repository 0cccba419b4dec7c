"""Independent reference implementations used to freeze expected values.

Nothing here imports the simulator internals: each oracle is a plain-Python
re-derivation of the quantity under test.
"""

from __future__ import annotations

import itertools


def wrap_int(v: int, width: int) -> int:
    m = 1 << width
    v %= m
    return v - m if v >= m // 2 else v


def naive_matmul(a, b, width: int = 32):
    """Exact integer triple loop, reduced to ``width`` bits at the end."""
    a = [[int(x) for x in row] for row in a]
    b = [[int(x) for x in row] for row in b]
    n, k, m = len(a), len(b), len(b[0])
    return [[wrap_int(sum(a[i][t] * b[t][j] for t in range(k)), width) for j in range(m)] for i in range(n)]


def direct_conv(x, w, stride: int, padding: int, width: int = 32):
    """Scalar-loop convolution of ``x (C,H,W)`` with ``w (K,C,kh,kw)``."""
    C, H, W = len(x), len(x[0]), len(x[0][0])
    K, _, kh, kw = len(w), len(w[0]), len(w[0][0]), len(w[0][0][0])
    oh = (H + 2 * padding - kh) // stride + 1
    ow = (W + 2 * padding - kw) // stride + 1

    def px(c, r, s):
        r -= padding
        s -= padding
        return int(x[c][r][s]) if 0 <= r < H and 0 <= s < W else 0

    out = []
    for k in range(K):
        plane = []
        for oy in range(oh):
            row = []
            for ox in range(ow):
                acc = 0
                for c in range(C):
                    for ky in range(kh):
                        for kx in range(kw):
                            acc += px(c, oy * stride + ky, ox * stride + kx) * int(w[k][c][ky][kx])
                row.append(wrap_int(acc, width))
            plane.append(row)
        out.append(plane)
    return out


def domain_points(n1, n2, n3):
    return list(itertools.product(range(1, n1 + 1), range(1, n2 + 1), range(1, n3 + 1)))


def dot(u, v):
    return sum(int(a) * int(b) for a, b in zip(u, v))


def matvec(P, p):
    return tuple(dot(row, p) for row in P)


def cycle_span(pi, extents):
    ts = [dot(pi, p) for p in domain_points(*extents)]
    return max(ts) - min(ts) + 1


def first_collision(P, pi, extents):
    seen = {}
    for p in domain_points(*extents):
        key = (matvec(P, p), dot(pi, p))
        if key in seen:
            return seen[key], p
        seen[key] = p
    return None


DEPS = {"A": (0, 1, 0), "B": (1, 0, 0), "C": (0, 0, 1)}


def tag_walk(line, pe, t_start, t_end, P, pi, extents, cycle_offset=0):
    """Mark corrupted values of ``line`` by walking the recurrence forward.

    A value is tagged if it is read at the faulty PE inside the window, or if
    the value it was forwarded from (one dependence step back) was tagged.
    Returns ``{(point, global_cycle)}``.
    """
    pts = domain_points(*extents)
    mins = [min(matvec(P, p)[r] for p in pts) for r in range(2)]
    d = DEPS[line]
    order = sorted(pts, key=lambda p: dot(pi, p))
    tagged = set()
    for p in order:
        t = cycle_offset + dot(pi, p)
        x = tuple(v - m for v, m in zip(matvec(P, p), mins))
        here = x == tuple(pe) and t >= t_start and (t_end is None or t <= t_end)
        prev = tuple(a - b for a, b in zip(p, d))
        if here or prev in tagged:
            tagged.add(p)
    return {(p, cycle_offset + dot(pi, p)) for p in tagged}
