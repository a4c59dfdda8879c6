"""Independent reference computations used by the tests.

Nothing here calls into the code paths under test except to evaluate the
forward function being differentiated.
"""

import itertools

import numpy as np

FD_STEP = 1e-3


def central_difference(f, x, step=FD_STEP, coords=None):
    """Central finite differences of scalar ``f`` w.r.t. entries of ``x``.

    ``x`` is perturbed in place and restored. ``coords`` limits the entries
    checked (flat indices); the result is aligned with it.
    """
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = []
    for i in coords:
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        out.append((up - down) / (2 * step))
    return np.array(out)


def relative_error(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def brute_force_accuracy(pred, truth, k):
    """Max over all k! cluster-to-class permutations."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    best = 0
    for perm in itertools.permutations(range(k)):
        mapped = np.asarray(perm)[pred]
        best = max(best, int((mapped == truth).sum()))
    return best / len(pred)


def best_two_partition_inertia(values):
    """Global k=2 optimum by enumerating every split into two nonempty sets."""
    x = np.asarray(values, dtype=np.float64)
    n = len(x)
    best = np.inf
    for mask in range(1, 2 ** (n - 1)):
        sel = np.array([(mask >> i) & 1 for i in range(n)], dtype=bool)
        a, b = x[sel], x[~sel]
        if len(b) == 0:
            continue
        cost = ((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()
        best = min(best, cost)
    return best


def naive_conv3d(x, weight, bias):
    """Direct loops over output voxels, channel-last single sample."""
    d, h, w, c = x.shape
    o, _, kd, kh, kw = weight.shape
    p = kd // 2
    xp = np.zeros((d + 2 * p, h + 2 * p, w + 2 * p, c))
    xp[p:p + d, p:p + h, p:p + w] = x
    out = np.zeros((d, h, w, o))
    for z, y, xx in itertools.product(range(d), range(h), range(w)):
        patch = xp[z:z + kd, y:y + kh, xx:xx + kw]  # kd kh kw c
        out[z, y, xx] = np.einsum("ijkc,ocijk->o", patch, weight) + bias
    return out


def naive_silhouette(points, labels):
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(labels)
    scores = []
    for i in range(len(x)):
        same = [j for j in range(len(x)) if labels[j] == labels[i] and j != i]
        if not same:
            scores.append(0.0)
            continue
        a = np.mean([np.linalg.norm(x[i] - x[j]) for j in same])
        b = min(np.mean([np.linalg.norm(x[i] - x[j]) for j in range(len(x)) if labels[j] == c])
                for c in set(labels.tolist()) if c != labels[i])
        scores.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    return float(np.mean(scores))
