"""Hot loops used by the sampler, the corpus filter and the ranking code.

Every kernel exists twice: a numba ``@njit`` version and a vectorised
pure-numpy version.  Both consume the same pre-drawn uniforms, so for a
given input they return identical arrays; the backend only changes speed.

Set ``SEQMIM_DISABLE_NUMBA=1`` to force the numpy path (numba is also
skipped automatically when it cannot be imported).
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("SEQMIM_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def sample_complement_numpy(uniforms, excl_indptr, excl_values, universe):
    """Draw ``k`` distinct ids per slot from ``{1..universe}`` minus a per-slot exclusion list.

    ``uniforms`` has shape (slots, k) with entries in [0, 1).  Slot ``s``
    excludes the sorted, unique ids ``excl_values[excl_indptr[s]:excl_indptr[s+1]]``.
    Draw ``j`` picks uniformly among the ``M - j`` ids still available, so each
    row is a uniform sample without replacement.
    """
    uniforms = np.asarray(uniforms, dtype=np.float64)
    n_slots, k = uniforms.shape
    excl_indptr = np.asarray(excl_indptr, dtype=np.int64)
    excl_values = np.asarray(excl_values, dtype=np.int64)
    n_excl = np.diff(excl_indptr)
    available = universe - n_excl

    # draw distinct ranks inside each slot's complement
    ranks = np.empty((n_slots, k), dtype=np.int64)
    for j in range(k):
        r = np.floor(uniforms[:, j] * (available - j)).astype(np.int64)
        r = np.minimum(r, available - j - 1)
        if j:
            prev = np.sort(ranks[:, :j], axis=1)
            for col in range(j):
                r += prev[:, col] <= r
        ranks[:, j] = r

    # rank r -> (r+1) + #{e_m - m <= r+1}, where m counts within the slot
    if excl_values.size == 0:
        return ranks + 1
    slot_of = np.repeat(np.arange(n_slots, dtype=np.int64), n_excl)
    within = np.arange(excl_values.size, dtype=np.int64) - excl_indptr[slot_of]
    stride = np.int64(universe + 2)
    keys = slot_of * stride + (excl_values - within)
    query = np.arange(n_slots, dtype=np.int64)[:, None] * stride + (ranks + 1)
    shift = np.searchsorted(keys, query.ravel(), side="right").reshape(n_slots, k)
    shift -= excl_indptr[:-1, None]
    return ranks + 1 + shift


def kcore_mask_numpy(user_codes, item_codes, k):
    """Boolean keep-mask over records after iterating the k-core filter to a fixpoint."""
    user_codes = np.asarray(user_codes, dtype=np.int64)
    item_codes = np.asarray(item_codes, dtype=np.int64)
    keep = np.ones(user_codes.size, dtype=bool)
    n_users = int(user_codes.max()) + 1 if user_codes.size else 0
    n_items = int(item_codes.max()) + 1 if item_codes.size else 0
    while True:
        u_count = np.bincount(user_codes[keep], minlength=n_users)
        i_count = np.bincount(item_codes[keep], minlength=n_items)
        new_keep = keep & (u_count[user_codes] >= k) & (i_count[item_codes] >= k)
        if np.array_equal(new_keep, keep):
            return keep
        keep = new_keep


def pessimistic_ranks_numpy(scores, gt_index):
    """1-based rank of the ground truth per row; ties count against it."""
    scores = np.asarray(scores)
    gt_index = np.asarray(gt_index, dtype=np.int64)
    gt = scores[np.arange(scores.shape[0]), gt_index]
    return (scores >= gt[:, None]).sum(axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def sample_complement_numba(uniforms, excl_indptr, excl_values, universe):
        n_slots, k = uniforms.shape
        out = np.empty((n_slots, k), dtype=np.int64)
        chosen = np.empty(k, dtype=np.int64)
        for s in range(n_slots):
            lo = excl_indptr[s]
            hi = excl_indptr[s + 1]
            available = universe - (hi - lo)
            for j in range(k):
                r = np.int64(np.floor(uniforms[s, j] * (available - j)))
                if r > available - j - 1:
                    r = available - j - 1
                # chosen[:j] is kept sorted; skip ranks already taken
                for c in range(j):
                    if chosen[c] <= r:
                        r += 1
                    else:
                        break
                pos = j
                while pos > 0 and chosen[pos - 1] > r:
                    chosen[pos] = chosen[pos - 1]
                    pos -= 1
                chosen[pos] = r
                x = r + 1
                for m in range(lo, hi):
                    if excl_values[m] <= x:
                        x += 1
                    else:
                        break
                out[s, j] = x
        return out

    @numba.njit(cache=True)
    def kcore_mask_numba(user_codes, item_codes, k):
        n = user_codes.shape[0]
        keep = np.ones(n, dtype=np.bool_)
        if n == 0:
            return keep
        n_users = user_codes.max() + 1
        n_items = item_codes.max() + 1
        u_count = np.zeros(n_users, dtype=np.int64)
        i_count = np.zeros(n_items, dtype=np.int64)
        for r in range(n):
            u_count[user_codes[r]] += 1
            i_count[item_codes[r]] += 1
        changed = True
        while changed:
            changed = False
            # one synchronous sweep, matching the numpy path's update order
            drop = np.zeros(n, dtype=np.bool_)
            for r in range(n):
                if keep[r] and (u_count[user_codes[r]] < k or i_count[item_codes[r]] < k):
                    drop[r] = True
            for r in range(n):
                if drop[r]:
                    keep[r] = False
                    u_count[user_codes[r]] -= 1
                    i_count[item_codes[r]] -= 1
                    changed = True
        return keep

    @numba.njit(cache=True)
    def pessimistic_ranks_numba(scores, gt_index):
        n_rows, n_cols = scores.shape
        out = np.empty(n_rows, dtype=np.int64)
        for u in range(n_rows):
            gt = scores[u, gt_index[u]]
            c = 0
            for j in range(n_cols):
                if scores[u, j] >= gt:
                    c += 1
            out[u] = c
        return out

else:  # pragma: no cover
    sample_complement_numba = sample_complement_numpy
    kcore_mask_numba = kcore_mask_numpy
    pessimistic_ranks_numba = pessimistic_ranks_numpy


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def sample_complement(uniforms, excl_indptr, excl_values, universe):
    uniforms = np.ascontiguousarray(uniforms, dtype=np.float64)
    excl_indptr = np.ascontiguousarray(excl_indptr, dtype=np.int64)
    excl_values = np.ascontiguousarray(excl_values, dtype=np.int64)
    if uniforms.shape[1] == 0:
        return np.empty(uniforms.shape, dtype=np.int64)
    if USE_NUMBA:
        return sample_complement_numba(uniforms, excl_indptr, excl_values, np.int64(universe))
    return sample_complement_numpy(uniforms, excl_indptr, excl_values, universe)


def kcore_mask(user_codes, item_codes, k):
    user_codes = np.ascontiguousarray(user_codes, dtype=np.int64)
    item_codes = np.ascontiguousarray(item_codes, dtype=np.int64)
    if USE_NUMBA:
        return kcore_mask_numba(user_codes, item_codes, np.int64(k))
    return kcore_mask_numpy(user_codes, item_codes, k)


def pessimistic_ranks(scores, gt_index):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    gt_index = np.ascontiguousarray(gt_index, dtype=np.int64)
    if USE_NUMBA:
        return pessimistic_ranks_numba(scores, gt_index)
    return pessimistic_ranks_numpy(scores, gt_index)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
