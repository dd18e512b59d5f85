"""Independent reference implementations used as test oracles.

Nothing here calls into the autodiff engine: gradients come from central
finite differences and forward values from plain Python loops.
"""

from __future__ import annotations

import math

import numpy as np

FD_STEP = 1e-3


def numeric_grad(f, arrays: list[np.ndarray], which: int, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f(*arrays)`` w.r.t. ``arrays[which]``."""
    base = [a.astype(np.float64).copy() for a in arrays]
    target = base[which]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(*base)
        flat[i] = old - h
        down = f(*base)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(diff / scale)


def gradcheck(build, arrays: list[np.ndarray], h: float = FD_STEP) -> list[float]:
    """Relative error of the autodiff gradient for every input of ``build``.

    ``build`` maps Tensors to a scalar Tensor; it is also evaluated on
    constant Tensors to produce the finite-difference values.
    """
    from moelab.numerics import Tensor

    params = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    out = build(*params)
    out.backward()

    def f(*arrs):
        return float(build(*[Tensor(a) for a in arrs]).data)

    return [rel_error(p.grad, numeric_grad(f, arrays, i, h)) for i, p in enumerate(params)]


# -- forward references ---------------------------------------------------------------


def softmax_row(row) -> list[float]:
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def matmul_loop(a, b) -> np.ndarray:
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            out[i, j] = sum(a[i][t] * b[t][j] for t in range(k))
    return out


def swiglu_loop(x, w_gate, w_up, w_down) -> np.ndarray:
    T, d = x.shape
    h = w_gate.shape[1]
    out = np.zeros((T, w_down.shape[1]))
    for t in range(T):
        hidden = []
        for j in range(h):
            g = sum(x[t, i] * w_gate[i, j] for i in range(d))
            u = sum(x[t, i] * w_up[i, j] for i in range(d))
            hidden.append(g / (1.0 + math.exp(-g)) * u)
        for o in range(w_down.shape[1]):
            out[t, o] = sum(hidden[j] * w_down[j, o] for j in range(h))
    return out


def normalize_row(row, lam: float, eps: float) -> list[float]:
    n = len(row)
    mu = sum(row) / n
    sigma = math.sqrt(sum((v - mu) ** 2 for v in row) / n)
    return [lam * (v - mu) / (sigma + eps) for v in row]


def top_k_sorted(row, k: int) -> list[int]:
    """Indices of the k largest values; equal values keep ascending index order."""
    return [j for _, j in sorted(((-v, j) for j, v in enumerate(row)))[:k]]


def gate_stats_loop(probs) -> dict:
    r12, r23, ent, top = [], [], [], []
    for row in probs:
        s = sorted(row, reverse=True)
        r12.append(s[0] / s[1])
        if len(s) > 2:
            r23.append(s[1] / s[2])
        ent.append(-sum(p * math.log(p) for p in row if p > 0))
        top.append(s[0])
    mean = lambda xs: sum(xs) / len(xs)
    return {"max1_over_max2": mean(r12), "max2_over_max3": mean(r23) if r23 else None,
            "mean_entropy": mean(ent), "mean_top1": mean(top)}


def dispatch_loop(selected, n: int, capacity: int):
    """Token-major, slot-minor arrival; an expert past capacity drops the rest."""
    T, k = len(selected), len(selected[0])
    load = [0] * n
    kept = [[] for _ in range(n)]
    dropped = [[False] * k for _ in range(T)]
    for t in range(T):
        for s in range(k):
            e = selected[t][s]
            if load[e] < capacity:
                load[e] += 1
                kept[e].append((t, s))
            else:
                dropped[t][s] = True
    return kept, dropped


def moe_loop(x, experts, probs, k: int, capacity: int) -> np.ndarray:
    """Per-token weighted expert sum with capacity drops, written as loops."""
    T = x.shape[0]
    selected = [top_k_sorted(list(probs[t]), k) for t in range(T)]
    _, dropped = dispatch_loop(selected, len(experts), capacity)
    out = np.zeros_like(x, dtype=np.float64)
    for t in range(T):
        s = sum(probs[t][e] for e in selected[t])
        for slot, e in enumerate(selected[t]):
            if dropped[t][slot]:
                continue
            wg, wu, wd = experts[e]
            out[t] += probs[t][e] / s * swiglu_loop(x[t:t + 1], wg, wu, wd)[0]
    return out


def surrogate_loop(probs) -> float:
    T, n = len(probs), len(probs[0])
    total = 0.0
    for j in range(n):
        m = sum(probs[i][j] for i in range(T)) / T
        total += (1.0 / n - m) ** 2
    return total


def cosine_loop(a, b) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb)


def ema_step_response(alpha0: float, beta: float, targets: list[float]) -> list[float]:
    """Closed-form alpha after each step for piecewise-constant targets.

    Within a constant segment of length L and target f the EMA obeys
    alpha_L = f + (alpha_0 - f) * beta**L, evaluated per step here.
    """
    out = []
    alpha_seg_start = alpha0
    i = 0
    while i < len(targets):
        f = targets[i]
        j = i
        while j < len(targets) and targets[j] == f:
            j += 1
        for step in range(1, j - i + 1):
            out.append(f + (alpha_seg_start - f) * beta ** step)
        alpha_seg_start = out[-1]
        i = j
    return out


def pipeline_relaxation(fwd: list[float], bwd: list[float], m: int, hop: float = 0.0) -> float:
    """Makespan of a 1F1B pipeline by repeated relaxation of start times.

    Builds each stage's op sequence and every dependency edge explicitly, then
    raises start times until no constraint is violated (longest path on a DAG).
    """
    S = len(fwd)
    seqs = []
    for s in range(S):
        warm = min(S - s - 1, m)
        seq = [("F", j) for j in range(warm)]
        fs, bs = list(range(warm, m)), list(range(m))
        while fs:
            seq += [("F", fs.pop(0)), ("B", bs.pop(0))]
        seq += [("B", j) for j in bs]
        seqs.append(seq)
    dur = {}
    preds = {}
    for s, seq in enumerate(seqs):
        for i, (kind, j) in enumerate(seq):
            key = (kind, s, j)
            dur[key] = fwd[s] if kind == "F" else bwd[s]
            p = []
            if i:
                p.append((seq[i - 1][0], s, seq[i - 1][1]) + (0.0,))
            if kind == "F" and s > 0:
                p.append(("F", s - 1, j, hop))
            if kind == "B":
                p.append(("F", s, j, 0.0))
                if s < S - 1:
                    p.append(("B", s + 1, j, hop))
            preds[key] = p
    start = {k: 0.0 for k in dur}
    changed = True
    while changed:
        changed = False
        for key, plist in preds.items():
            for kind, s, j, lag in plist:
                ready = start[(kind, s, j)] + dur[(kind, s, j)] + lag
                if ready > start[key] + 1e-12:
                    start[key] = ready
                    changed = True
    return max(start[k] + dur[k] for k in dur)
