"""Brute-force reference implementations, written independently of the package code."""

from __future__ import annotations

import math
from collections import deque


def knn_edges(points, k, d_min):
    """All-pairs kNN filter: u joins v if u is among v's k nearest (ties by id) and closer than d_min."""
    n = len(points)
    edges = set()
    for v in range(n):
        others = []
        for u in range(n):
            if u != v:
                dx = points[u][0] - points[v][0]
                dy = points[u][1] - points[v][1]
                others.append((math.sqrt(dx * dx + dy * dy), u))
        others.sort()
        for dist, u in others[:k]:
            if dist < d_min:
                edges.add((min(u, v), max(u, v)))
    return edges


def rag_edges(labels):
    """Pixel scan: every 4-neighbor pair of pixels with different labels gives an edge."""
    h, w = len(labels), len(labels[0])
    edges = set()
    for r in range(h):
        for c in range(w):
            for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w:
                    a, b = int(labels[r][c]), int(labels[rr][cc])
                    if a != b:
                        edges.add((min(a, b), max(a, b)))
    return edges


def glcm_counts(q, offset, levels):
    """Symmetric co-occurrence counts by visiting every pixel pair at ``offset``."""
    dr, dc = offset
    h, w = len(q), len(q[0])
    m = [[0] * levels for _ in range(levels)]
    for r in range(h):
        for c in range(w):
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w:
                a, b = int(q[r][c]), int(q[rr][cc])
                m[a][b] += 1
                m[b][a] += 1
    return m


def glcm_props(q, offsets, levels):
    """Dissimilarity, homogeneity, energy, ASM from brute-force counts, averaged over offsets."""
    acc = []
    for off in offsets:
        m = glcm_counts(q, off, levels)
        total = sum(sum(row) for row in m)
        if total == 0:
            continue
        dis = hom = asm = 0.0
        for i in range(levels):
            for j in range(levels):
                p = m[i][j] / total
                dis += p * abs(i - j)
                hom += p / (1 + (i - j) ** 2)
                asm += p * p
        acc.append((dis, hom, math.sqrt(asm), asm))
    return [sum(x[i] for x in acc) / len(acc) for i in range(4)]


def per_class_f1(confusion):
    """Direct per-class F1 and support-weighted F1 from a square confusion matrix (rows = truth)."""
    c = len(confusion)
    total = sum(sum(row) for row in confusion)
    f1s = []
    weighted = 0.0
    for k in range(c):
        tp = confusion[k][k]
        fp = sum(confusion[i][k] for i in range(c)) - tp
        fn = sum(confusion[k]) - tp
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        f1s.append(f1)
        weighted += sum(confusion[k]) / total * f1
    return f1s, weighted


def components_4(mask):
    """4-connected components of a boolean grid by breadth-first search (list of pixel lists)."""
    h, w = len(mask), len(mask[0])
    seen = [[False] * w for _ in range(h)]
    comps = []
    for r in range(h):
        for c in range(w):
            if mask[r][c] and not seen[r][c]:
                comp = []
                queue = deque([(r, c)])
                seen[r][c] = True
                while queue:
                    y, x = queue.popleft()
                    comp.append((y, x))
                    for dy, dx in ((0, 1), (1, 0), (0, -1), (-1, 0)):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and mask[yy][xx] and not seen[yy][xx]:
                            seen[yy][xx] = True
                            queue.append((yy, xx))
                comps.append(comp)
    return comps


def is_4_connected(labels, region):
    mask = [[int(v) == region for v in row] for row in labels]
    return len(components_4(mask)) == 1
