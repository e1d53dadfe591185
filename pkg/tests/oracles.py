"""Independent reference implementations used only by the tests.

These deliberately avoid the package's code paths: plain loops, no numpy
linear algebra, no scipy.
"""

import math


def naive_dct2(matrix):
    """Orthonormal 2-D DCT-II evaluated straight from its O(n^4) definition."""
    n = len(matrix)
    # cosine table only hoists the repeated cos() calls; the sum is still the definition
    cos = [[math.cos(math.pi * (2 * x + 1) * u / (2 * n)) for x in range(n)] for u in range(n)]
    out = [[0.0] * n for _ in range(n)]
    for u in range(n):
        for v in range(n):
            total = 0.0
            for x in range(n):
                row = matrix[x]
                cu = cos[u][x]
                for y in range(n):
                    total += row[y] * cu * cos[v][y]
            au = math.sqrt(1.0 / n) if u == 0 else math.sqrt(2.0 / n)
            av = math.sqrt(1.0 / n) if v == 0 else math.sqrt(2.0 / n)
            out[u][v] = au * av * total
    return out


def naive_box_resize(pixels, w, h):
    """Area-average resize by supersampling each source pixel onto a fine common grid."""
    from fractions import Fraction

    src_h, src_w = len(pixels), len(pixels[0])
    out = []
    for i in range(h):
        row = []
        y0, y1 = Fraction(i * src_h, h), Fraction((i + 1) * src_h, h)
        for j in range(w):
            x0, x1 = Fraction(j * src_w, w), Fraction((j + 1) * src_w, w)
            acc = Fraction(0)
            for sy in range(src_h):
                oy = min(y1, sy + 1) - max(y0, sy)
                if oy <= 0:
                    continue
                for sx in range(src_w):
                    ox = min(x1, sx + 1) - max(x0, sx)
                    if ox <= 0:
                        continue
                    acc += oy * ox * Fraction(pixels[sy][sx])
            row.append(float(acc / ((y1 - y0) * (x1 - x0))))
        out.append(row)
    return out


def reference_phash_bits(pixels):
    """pHash recipe, step by step: 32x32 box resize, naive DCT, 8x8 block, median split."""
    small = naive_box_resize(pixels, 32, 32)
    coeffs = naive_dct2(small)
    block = [coeffs[r][c] for r in range(8) for c in range(8)]
    ordered = sorted(block)
    median = (ordered[31] + ordered[32]) / 2
    return [c > median for c in block]


def brute_precision(relevance, k):
    n = len(relevance)
    if n == 0:
        return 0.0
    if k < n:
        hits = 0
        for pos in range(1, k + 1):
            if relevance[pos - 1]:
                hits += 1
        return hits / k
    hits = 0
    for pos in range(1, n + 1):
        if relevance[pos - 1]:
            hits += 1
    return hits / n


def brute_first_rank(relevance):
    pos = 1
    for rel in relevance:
        if rel:
            return pos
        pos += 1
    return None


def brute_retrievability(relevance, c):
    rank = brute_first_rank(relevance)
    found = 0
    for pos in range(1, c + 1):
        if rank == pos:
            found = 1
    return float(found)


def brute_rr(relevance):
    rank = brute_first_rank(relevance)
    return 0.0 if rank is None else 1.0 / rank


def brute_mrr(rankings):
    total = 0.0
    for r in rankings:
        total += brute_rr(r)
    return total / len(rankings)
