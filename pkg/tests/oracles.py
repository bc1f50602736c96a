"""Independent reference implementations used by the test suite.

Each oracle recomputes a quantity the slow, obvious way so that the
vectorized library code can be compared against it.
"""

import numpy as np

from citune import numkernel as nk
from citune.model import SHARED, task_loss


def ewc_bruteforce(model, samples, task_id=SHARED):
    """Mean over samples of the squared per-sample task-loss gradient, one backward each."""
    params = model.block(task_id).params()
    acc = [np.zeros(p.shape) for p in params]
    for s in samples:
        for p in params:
            p.grad = None
        nk.backward(task_loss(model, [s], task_id))
        for a, p in zip(acc, params):
            a += p.grad**2
    for p in params:
        p.grad = None
    return [a / len(samples) for a in acc]


def mas_bruteforce(model, samples, task_id=SHARED):
    """Mean |d ||logits||^2 / d theta| with a finite-difference free tape pass per sample."""
    from citune.model import fused_inputs, logits_from_inputs

    params = model.block(task_id).params()
    acc = [np.zeros(p.shape) for p in params]
    for s in samples:
        for p in params:
            p.grad = None
        nk.backward(nk.l2sq(logits_from_inputs(model, fused_inputs(model, [s]), task_id)))
        for a, p in zip(acc, params):
            a += np.abs(p.grad)
    for p in params:
        p.grad = None
    return [a / len(samples) for a in acc]


def si_replay(a, c, theta0, lr, steps, damping):
    """Replay gradient descent on 0.5 (x-c)^T A (x-c) with plain floats."""
    theta = [float(v) for v in theta0]
    omega = [0.0, 0.0]
    for _ in range(steps):
        g = [sum(a[i][j] * (theta[j] - c[j]) for j in range(2)) for i in range(2)]
        new = [theta[i] - lr * g[i] for i in range(2)]
        for i in range(2):
            omega[i] -= g[i] * (new[i] - theta[i])
        theta = new
    out = []
    for i in range(2):
        d = theta[i] - theta0[i]
        out.append(max(omega[i] / (d * d + damping), 0.0))
    return out, theta


def store_update_oracle(r_max, owner, r_new, task_id):
    """Max-importance and owner update applied coordinate by coordinate."""
    r_out, l_out = [], []
    for rm, ow, rn in zip(r_max, owner, r_new):
        rm_f, ow_f, rn_f = rm.ravel().tolist(), ow.ravel().tolist(), rn.ravel().tolist()
        new_r, new_l = [], []
        for a, l, b in zip(rm_f, ow_f, rn_f):
            new_l.append(task_id if b > a else l)
            new_r.append(b if b > a else a)
        r_out.append(np.array(new_r).reshape(rm.shape))
        l_out.append(np.array(new_l, dtype=np.int64).reshape(rm.shape))
    return r_out, l_out


def avg_performance_oracle(rows, t):
    seen = [v for v in rows[t] if v is not None]
    return sum(seen) / len(seen)


def avg_forgetting_oracle(rows, intro, t):
    terms = []
    for i, start in enumerate(intro):
        if start >= t:
            continue
        best = rows[start][i]
        for j in range(start + 1, t):
            if rows[j][i] > best:
                best = rows[j][i]
        terms.append(best - rows[t][i])
    return sum(terms) / len(terms)


def random_lower_rows(rng, n):
    """Random stream score matrix rows; entries i > t are None."""
    return [[float(rng.integers(0, 10001)) / 100 if i <= t else None for i in range(n)] for t in range(n)]


def metrics_oracle_mismatches(cases=1000, seed=0):
    """Compare the metric functions against the loop oracles on random matrices."""
    from citune.metrics import ScoreMatrix, avg_forgetting, avg_performance

    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(cases):
        n = int(rng.integers(1, 8))
        rows = random_lower_rows(rng, n)
        m = ScoreMatrix.from_rows(rows)
        intro = list(range(n))
        for t in range(n):
            bad += avg_performance(m, t) != avg_performance_oracle(rows, t)
            if t >= 1:
                bad += avg_forgetting(m, t) != avg_forgetting_oracle(rows, intro, t)
    return bad
