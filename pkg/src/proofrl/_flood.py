"""Compiled kernels for the seeded watershed split."""
import numba
import numpy as np


@numba.njit(cache=True)
def component_bfs(labels, start):
    """Breadth-first search over the 4-connected component of ``labels.flat[start]``.

    Returns ``(order, dist)``: visited flat indices in BFS order and the
    geodesic distance of every pixel (-1 outside the component).
    """
    h, w = labels.shape
    flat = labels.ravel()
    target = flat[start]
    dist = np.full(h * w, -1, dtype=np.int64)
    order = np.empty(h * w, dtype=np.int64)
    dist[start] = 0
    order[0] = start
    head = 0
    tail = 1
    while head < tail:
        p = order[head]
        head += 1
        y = p // w
        x = p - y * w
        d = dist[p] + 1
        # fixed neighbour order: up, left, right, down
        if y > 0:
            q = p - w
            if dist[q] < 0 and flat[q] == target:
                dist[q] = d
                order[tail] = q
                tail += 1
        if x > 0:
            q = p - 1
            if dist[q] < 0 and flat[q] == target:
                dist[q] = d
                order[tail] = q
                tail += 1
        if x < w - 1:
            q = p + 1
            if dist[q] < 0 and flat[q] == target:
                dist[q] = d
                order[tail] = q
                tail += 1
        if y < h - 1:
            q = p + w
            if dist[q] < 0 and flat[q] == target:
                dist[q] = d
                order[tail] = q
                tail += 1
    return order[:tail], dist


@numba.njit(cache=True)
def farthest_pixel(order, dist):
    """Pixel of maximal geodesic distance, lowest flat index on ties."""
    best = order[0]
    best_d = dist[best]
    for k in range(order.shape[0]):
        p = order[k]
        d = dist[p]
        if d > best_d or (d == best_d and p < best):
            best = p
            best_d = d
    return best


@numba.njit(cache=True)
def _before(alt, a, b):
    # heap order: altitude, then insertion rank (FIFO among equal altitudes)
    return alt[a] < alt[b] or (alt[a] == alt[b] and a < b)


@numba.njit(cache=True)
def _push(heap, size, alt, item):
    i = size
    heap[i] = item
    while i > 0:
        parent = (i - 1) >> 1
        if not _before(alt, heap[i], heap[parent]):
            break
        heap[i], heap[parent] = heap[parent], heap[i]
        i = parent
    return size + 1


@numba.njit(cache=True)
def _pop(heap, size, alt):
    top = heap[0]
    size -= 1
    heap[0] = heap[size]
    i = 0
    while True:
        left = 2 * i + 1
        if left >= size:
            break
        child = left
        if left + 1 < size and _before(alt, heap[left + 1], heap[left]):
            child = left + 1
        if not _before(alt, heap[child], heap[i]):
            break
        heap[i], heap[child] = heap[child], heap[i]
        i = child
    return top, size


@numba.njit(cache=True)
def two_seed_flood(altitude, member, seed_a, seed_b):
    """Priority-flood watershed from two seeds inside the ``member`` mask.

    Pixels are labelled when first reached (1 from ``seed_a``, 2 from
    ``seed_b``); the queue orders by altitude, then by insertion (FIFO).
    Each pixel enters the queue once, so entries are identified by their
    insertion rank and the heap holds ranks only.
    """
    h, w = altitude.shape
    alt = altitude.ravel()
    inside = member.ravel()
    n = h * w
    basin = np.zeros(n, dtype=np.uint8)
    rank_alt = np.empty(n, dtype=np.float64)
    rank_pix = np.empty(n, dtype=np.int64)
    heap = np.empty(n, dtype=np.int64)
    basin[seed_a] = 1
    basin[seed_b] = 2
    rank_alt[0] = alt[seed_a]
    rank_pix[0] = seed_a
    rank_alt[1] = alt[seed_b]
    rank_pix[1] = seed_b
    size = _push(heap, 0, rank_alt, 0)
    size = _push(heap, size, rank_alt, 1)
    count = 2
    while size > 0:
        r, size = _pop(heap, size, rank_alt)
        p = rank_pix[r]
        lab = basin[p]
        y = p // w
        x = p - y * w
        for k in range(4):
            if k == 0:
                if y == 0:
                    continue
                q = p - w
            elif k == 1:
                if x == 0:
                    continue
                q = p - 1
            elif k == 2:
                if x == w - 1:
                    continue
                q = p + 1
            else:
                if y == h - 1:
                    continue
                q = p + w
            if inside[q] and basin[q] == 0:
                basin[q] = lab
                rank_alt[count] = alt[q]
                rank_pix[count] = q
                size = _push(heap, size, rank_alt, count)
                count += 1
    return basin.reshape(h, w)
