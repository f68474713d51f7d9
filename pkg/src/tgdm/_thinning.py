"""Directional boundary thinning of 3D binary images (26-connected foreground).

A voxel is deleted only if it is a border voxel for the current direction, is
not a curve end (exactly one foreground 26-neighbour) and is *simple*: its
foreground 26-neighbourhood forms one 26-component and its background
18-neighbourhood has exactly one 6-component touching it. Deletions within a
sub-iteration are re-checked sequentially so topology is preserved.
"""
import numpy as np
from numba import njit

_OFF = np.array(
    [(dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=np.int64
)


def _adjacency(kind):
    adj = np.full((27, 26), -1, dtype=np.int64)
    for i in range(27):
        k = 0
        for j in range(27):
            if i == j:
                continue
            d = np.abs(_OFF[i] - _OFF[j])
            if d.max() > 1:
                continue
            if kind == 6 and d.sum() != 1:
                continue
            adj[i, k] = j
            k += 1
    return adj


_ADJ26 = _adjacency(26)
_ADJ6 = _adjacency(6)
# positions in the 18-neighbourhood (face and edge neighbours)
_N18 = np.array([np.abs(o).sum() <= 2 for o in _OFF])
_N6 = np.array([np.abs(o).sum() == 1 for o in _OFF])
_DIRS = np.array([(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)], dtype=np.int64)


@njit(cache=True)
def _components(member, adj, seeds, use_seeds):
    """Count components among positions where ``member`` is true.

    With ``use_seeds``, only components containing a ``seeds`` position count.
    """
    seen = np.zeros(27, dtype=np.bool_)
    stack = np.empty(27, dtype=np.int64)
    count = 0
    for s in range(27):
        if not member[s] or seen[s]:
            continue
        if use_seeds and not seeds[s]:
            continue
        count += 1
        top = 0
        stack[0] = s
        seen[s] = True
        while top >= 0:
            cur = stack[top]
            top -= 1
            for k in range(26):
                j = adj[cur, k]
                if j < 0:
                    break
                if member[j] and not seen[j]:
                    seen[j] = True
                    top += 1
                    stack[top] = j
    return count


@njit(cache=True)
def _is_simple(img, z, y, x, off, adj26, adj6, n18, n6):
    nb = np.zeros(27, dtype=np.bool_)
    for i in range(27):
        nb[i] = img[z + off[i, 0], y + off[i, 1], x + off[i, 2]]
    fg = np.zeros(27, dtype=np.bool_)
    bg = np.zeros(27, dtype=np.bool_)
    for i in range(27):
        if i == 13:
            continue
        fg[i] = nb[i]
        bg[i] = (not nb[i]) and n18[i]
    if _components(fg, adj26, n6, False) != 1:
        return False
    return _components(bg, adj6, n6, True) == 1


@njit(cache=True)
def _n_neighbours(img, z, y, x, off):
    n = 0
    for i in range(27):
        if i != 13 and img[z + off[i, 0], y + off[i, 1], x + off[i, 2]]:
            n += 1
    return n


@njit(cache=True)
def _thin(img, off, adj26, adj6, n18, n6, dirs):
    nz, ny, nx = img.shape
    cand = np.empty((img.size, 3), dtype=np.int64)
    changed = True
    while changed:
        changed = False
        for d in range(6):
            dz, dy, dx = dirs[d, 0], dirs[d, 1], dirs[d, 2]
            m = 0
            for z in range(1, nz - 1):
                for y in range(1, ny - 1):
                    for x in range(1, nx - 1):
                        if not img[z, y, x] or img[z + dz, y + dy, x + dx]:
                            continue
                        if _n_neighbours(img, z, y, x, off) <= 1:
                            continue
                        if _is_simple(img, z, y, x, off, adj26, adj6, n18, n6):
                            cand[m, 0] = z
                            cand[m, 1] = y
                            cand[m, 2] = x
                            m += 1
            for k in range(m):
                z, y, x = cand[k, 0], cand[k, 1], cand[k, 2]
                if _n_neighbours(img, z, y, x, off) <= 1:
                    continue
                if _is_simple(img, z, y, x, off, adj26, adj6, n18, n6):
                    img[z, y, x] = False
                    changed = True
    return img


def thin(mask: np.ndarray) -> np.ndarray:
    """Return the curve skeleton of ``mask`` (same shape, bool)."""
    img = np.pad(np.asarray(mask, dtype=np.bool_), 1)
    img = _thin(img, _OFF, _ADJ26, _ADJ6, _N18, _N6, _DIRS)
    return img[1:-1, 1:-1, 1:-1].copy()
