"""Post-training verification: IBP certificates, PGD falsification and a small
branch-and-bound complete verifier over ReLU phase splits.

Everything here works on a single sample ``(x, y)`` and on plain numpy copies of
the weights. Arithmetic is float64 without outward rounding, so certificates
are sound up to floating-point error.
"""

from __future__ import annotations

import csv
import heapq
import itertools
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog

from .attacks import AttackConfig, eval_attack_config, pgd
from .bounds import PerturbationSpec
from .network import Dense, Network, Relu, _require_affine_head
from .tensor import no_grad

STATUSES = ("certified", "falsified", "unknown")
CSV_FIELDS = ("idx", "status", "min_bound", "nodes", "time_ms")
_LP_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


class BudgetError(ValueError):
    pass


@dataclass
class VerificationResult:
    status: str
    bound: np.ndarray  # best known lower bound on every logit difference; entry y is +inf
    counterexample: np.ndarray | None = None
    nodes_explored: int = 0
    wall_time: float = 0.0

    @property
    def min_bound(self) -> float:
        return float(np.min(self.bound))


@dataclass
class BabNode:
    phases: dict  # relu layer position -> int8 array (1 active, -1 inactive, 0 free)
    bound: np.ndarray
    pre_bounds: dict = field(repr=False, default_factory=dict)

    def __lt__(self, other):  # heap ties fall back to insertion order via the counter
        return False


# ---------------------------------------------------------------- numpy plumbing


def _single(spec: PerturbationSpec, y):
    if spec.center.ndim != 1:
        raise ValueError(f"verification works on one sample at a time, got input shape {spec.center.shape}")
    return int(np.asarray(y))


def _weights(net: Network):
    return [(layer.weight.data, layer.bias.data) if isinstance(layer, Dense) else None for layer in net.layers]


def _diff_head(net: Network, y: int):
    w, b = net.layers[-1].weight.data, net.layers[-1].bias.data
    return w[y] - w, b[y] - b


def _head_lower(wt, bt, lo, hi):
    z = np.maximum(wt, 0) @ lo + np.minimum(wt, 0) @ hi + bt
    return z


def _mask_y(z: np.ndarray, y: int) -> np.ndarray:
    z = np.array(z, dtype=np.float64)
    z[y] = np.inf
    return z


def phase_ibp(net: Network, lo, hi, phases=None):
    """IBP with some ReLUs fixed to a phase.

    Returns ``(pre_bounds, feature_lo, feature_hi)`` or ``None`` when a fixed
    phase contradicts the propagated interval (the node's region is empty).
    """
    phases = phases or {}
    pre = {}
    for pos, layer in enumerate(net.layers[:-1]):
        if isinstance(layer, Dense):
            w, b = layer.weight.data, layer.bias.data
            wp, wn = np.maximum(w, 0), np.minimum(w, 0)
            lo, hi = wp @ lo + wn @ hi + b, wp @ hi + wn @ lo + b
        else:
            pre[pos] = (lo, hi)
            ph = phases.get(pos)
            new_lo, new_hi = np.maximum(lo, 0), np.maximum(hi, 0)
            if ph is not None:
                if np.any((ph == 1) & (hi < 0)) or np.any((ph == -1) & (lo > 0)):
                    return None
                off = ph == -1
                new_lo = np.where(off, 0.0, new_lo)
                new_hi = np.where(off, 0.0, new_hi)
            lo, hi = new_lo, new_hi
    return pre, lo, hi


def _region(net: Network, pattern: dict, upto: int | None = None):
    """Affine maps of every ReLU input under a fixed activation pattern.

    Returns the list of ``(pos, A, c)`` with pre-activation ``A x + c`` for each
    ReLU position before ``upto``, plus the affine map of the head input.
    """
    d = net.input_dim
    a, c = np.eye(d), np.zeros(d)
    maps = []
    layers = net.layers[:-1] if upto is None else net.layers[:upto]
    for pos, layer in enumerate(layers):
        if isinstance(layer, Dense):
            w, b = layer.weight.data, layer.bias.data
            a, c = w @ a, w @ c + b
        else:
            maps.append((pos, a, c))
            on = (pattern[pos] == 1).astype(np.float64)
            a, c = a * on[:, None], c * on
    return maps, a, c


def _constraints(maps, pattern):
    rows, rhs = [], []
    for pos, a, c in maps:
        ph = pattern[pos]
        # active: -(A x + c) <= 0 ; inactive: A x + c <= 0
        for sign, sel in ((-1.0, ph == 1), (1.0, ph == -1)):
            if np.any(sel):
                rows.append(sign * a[sel])
                rhs.append(-sign * c[sel])
    if not rows:
        return None, None
    return np.vstack(rows), np.concatenate(rhs)


def _lp_min(obj, const, a_ub, b_ub, lo, hi):
    """min obj.x + const over the box and the region; None if infeasible."""
    res = linprog(obj, A_ub=a_ub, b_ub=b_ub, bounds=list(zip(lo, hi)), method="highs", options=_LP_OPTIONS)
    if res.status == 2:
        return None
    if res.status != 0:
        raise RuntimeError(f"linear program failed: {res.message}")
    return float(res.fun) + const, np.clip(res.x, lo, hi)


def _feasible(a_ub, b_ub, lo, hi) -> bool:
    if a_ub is None:
        return True
    return _lp_min(np.zeros(len(lo)), 0.0, a_ub, b_ub, lo, hi) is not None


def _forward_diffs(net: Network, x, y: int) -> np.ndarray:
    with no_grad():
        logits = net(x).data
    return logits[y] - logits


def _linear_min(net: Network, pattern, lo, hi, y: int):
    """Exact per-class minima of the logit differences on one linear region.

    Returns ``(values, argmins)`` (``values[y] = inf``) or ``None`` if the
    region is empty.
    """
    maps, a, c = _region(net, pattern)
    a_ub, b_ub = _constraints(maps, pattern)
    wt, bt = _diff_head(net, y)
    values = np.full(len(bt), np.inf)
    points = {}
    for i in range(len(bt)):
        if i == y:
            continue
        sol = _lp_min(wt[i] @ a, float(wt[i] @ c + bt[i]), a_ub, b_ub, lo, hi)
        if sol is None:
            return None
        values[i], points[i] = sol
    return values, points


def _witness(net: Network, pattern, lo, hi, y: int, i: int, x_lp):
    """A point where the forward pass confirms ``z_i <= 0``, or None.

    The LP optimum may sit on a region boundary where the forward pass follows
    a neighbouring pattern; retry with the region shrunk by a small margin.
    """
    if _forward_diffs(net, x_lp, y)[i] <= 0:
        return x_lp
    maps, a, c = _region(net, pattern)
    a_ub, b_ub = _constraints(maps, pattern)
    if a_ub is None:
        return None
    wt, bt = _diff_head(net, y)
    scale = np.linalg.norm(a_ub, axis=1) + 1e-300
    for margin in (1e-9, 1e-7, 1e-5):
        sol = _lp_min(wt[i] @ a, 0.0, a_ub, b_ub - margin * scale, lo, hi)
        if sol is not None and _forward_diffs(net, sol[1], y)[i] <= 0:
            return sol[1]
    return None


# ---------------------------------------------------------------- incomplete + attack


def verify_incomplete(net: Network, spec: PerturbationSpec, y) -> VerificationResult:
    start = time.perf_counter()
    y = _single(spec, y)
    _require_affine_head(net)
    lo, hi = spec.box()
    _, flo, fhi = phase_ibp(net, lo, hi)
    wt, bt = _diff_head(net, y)
    z = _mask_y(_head_lower(wt, bt, flo, fhi), y)
    status = "certified" if np.all(z > 0) else "unknown"
    return VerificationResult(status, z, None, 0, time.perf_counter() - start)


def falsify(net: Network, spec: PerturbationSpec, y, attack_cfg: AttackConfig | None = None) -> VerificationResult:
    """Look for a feasible input whose ground-truth logit is not strictly the largest."""
    start = time.perf_counter()
    y = _single(spec, y)
    attack_cfg = attack_cfg or eval_attack_config()
    lo, hi = spec.box()
    candidates = [spec.center]
    if spec.eps > 0:
        x_adv = pgd(net, PerturbationSpec(spec.center[None], spec.eps, spec.domain), np.array([y]), attack_cfg)
        candidates.append(x_adv[0])
    best = None
    for cand in candidates:
        cand = np.clip(cand, lo, hi)
        z = _mask_y(_forward_diffs(net, cand, y), y)
        if best is None or z.min() < best[1].min():
            best = (cand, z)
        if np.any(z <= 0):
            return VerificationResult("falsified", z, cand.copy(), 0, time.perf_counter() - start)
    return VerificationResult("unknown", np.full_like(best[1], -np.inf), None, 0, time.perf_counter() - start)


# ---------------------------------------------------------------- branch and bound


def _check_budget(value, name):
    if value is not None and value <= 0:
        raise BudgetError(f"{name} must be positive (or None for no limit), got {value}")


def _node_from(net, lo, hi, phases, wt, bt, y, parent_bound=None):
    out = phase_ibp(net, lo, hi, phases)
    if out is None:
        return None
    pre, flo, fhi = out
    z = _mask_y(_head_lower(wt, bt, flo, fhi), y)
    if parent_bound is not None:
        z = np.maximum(z, parent_bound)  # the child's region is a subset of the parent's
    return BabNode(phases, z, pre)


def _pick_split(node: BabNode):
    """The free unstable neuron with the widest pre-activation interval, or None."""
    best, width = None, -1.0
    for pos in sorted(node.pre_bounds):
        lo, hi = node.pre_bounds[pos]
        free = (node.phases[pos] == 0) & (lo < 0) & (hi > 0)
        if np.any(free):
            w = np.where(free, hi - lo, -1.0)
            j = int(np.argmax(w))
            if w[j] > width:
                best, width = (pos, j), w[j]
    return best


def _leaf_pattern(node: BabNode) -> dict:
    pattern = {}
    for pos, (lo, hi) in node.pre_bounds.items():
        ph = node.phases[pos].copy()
        ph[(ph == 0) & (lo >= 0)] = 1
        ph[(ph == 0) & (hi <= 0)] = -1
        pattern[pos] = ph
    return pattern


def branch_and_bound(net: Network, spec: PerturbationSpec, y, max_nodes: int | None = None,
                     time_limit: float | None = None) -> VerificationResult:
    """Best-first BaB on the smallest lower bound, splitting ReLUs into active/inactive.

    ``nodes_explored`` counts split operations. Leaves (no free unstable
    neurons) are linear and solved exactly by linear programming.
    """
    _check_budget(max_nodes, "max_nodes")
    _check_budget(time_limit, "time_limit")
    start = time.perf_counter()
    y = _single(spec, y)
    _require_affine_head(net)
    lo, hi = spec.box()
    wt, bt = _diff_head(net, y)
    phases = {pos: np.zeros(layer_out, dtype=np.int8) for pos, layer_out in _relu_sizes(net)}
    root = _node_from(net, lo, hi, phases, wt, bt, y)
    closed = np.full(len(bt), np.inf)  # elementwise min over resolved leaves
    heap = [(root.bound.min(), 0, root)]
    counter = itertools.count(1)
    splits = 0
    unresolved = False

    def result(status, cex=None):
        bound = closed.copy()
        for _, _, node in heap:
            bound = np.minimum(bound, node.bound)
        return VerificationResult(status, bound, cex, splits, time.perf_counter() - start)

    while heap:
        key, _, node = heapq.heappop(heap)
        if key > 0:
            closed = np.minimum(closed, node.bound)
            continue
        target = _pick_split(node)
        if target is None:
            solved = _linear_min(net, _leaf_pattern(node), lo, hi, y)
            if solved is None:
                continue
            values, points = solved
            for i in np.argsort(values):
                if values[i] > 0:
                    break
                x_star = _witness(net, _leaf_pattern(node), lo, hi, y, int(i), points[int(i)])
                if x_star is not None:
                    heapq.heappush(heap, (key, next(counter), node))
                    return result("falsified", x_star)
            if values.min() <= 0:
                unresolved = True
            closed = np.minimum(closed, values)
            continue
        if (max_nodes is not None and splits >= max_nodes) or \
                (time_limit is not None and time.perf_counter() - start > time_limit):
            heapq.heappush(heap, (key, next(counter), node))
            return result("unknown")
        splits += 1
        pos, j = target
        for phase in (1, -1):
            child_phases = {p: a.copy() for p, a in node.phases.items()}
            child_phases[pos][j] = phase
            child = _node_from(net, lo, hi, child_phases, wt, bt, y, node.bound)
            if child is not None:
                heapq.heappush(heap, (child.bound.min(), next(counter), child))
    return result("unknown" if unresolved else "certified")


def _relu_sizes(net: Network):
    width = net.input_dim
    out = []
    for pos, layer in enumerate(net.layers):
        if isinstance(layer, Dense):
            width = layer.out_features
        elif isinstance(layer, Relu):
            out.append((pos, width))
    return out


def verify_complete(net: Network, spec: PerturbationSpec, y, max_nodes: int | None = None,
                    time_limit: float | None = None, attack_cfg: AttackConfig | None = None) -> VerificationResult:
    """IBP first, then a PGD falsification attempt, then branch-and-bound."""
    _check_budget(max_nodes, "max_nodes")
    _check_budget(time_limit, "time_limit")
    start = time.perf_counter()
    res = verify_incomplete(net, spec, y)
    if res.status == "certified":
        res.wall_time = time.perf_counter() - start
        return res
    attacked = falsify(net, spec, y, attack_cfg)
    if attacked.status == "falsified":
        attacked.wall_time = time.perf_counter() - start
        return attacked
    remaining = None if time_limit is None else max(time_limit - (time.perf_counter() - start), 1e-9)
    res = branch_and_bound(net, spec, y, max_nodes, remaining)
    res.wall_time = time.perf_counter() - start
    return res


# ---------------------------------------------------------------- oracle


def brute_force_min(net: Network, spec: PerturbationSpec, y, cap: int = 16) -> np.ndarray:
    """Exact minimum of every logit difference over the box (entry y is +inf).

    Enumerates the activation patterns of the ReLUs left unstable by IBP with
    a depth-first search in layer order, discarding empty regions by LP
    feasibility, and solves one LP per class on every non-empty region.
    """
    y = _single(spec, y)
    _require_affine_head(net)
    lo, hi = spec.box()
    pre, _, _ = phase_ibp(net, lo, hi)
    base = {}
    unstable = []
    for pos in sorted(pre):
        plo, phi = pre[pos]
        mixed = (plo < 0) & (phi > 0)
        base[pos] = np.where(mixed, 0, np.where(plo >= 0, 1, -1)).astype(np.int8)
        unstable.extend((pos, int(j)) for j in np.flatnonzero(mixed))
    if len(unstable) > cap:
        raise ValueError(f"{len(unstable)} unstable ReLUs exceed the enumeration cap of {cap}")
    best = np.full(net.classes, np.inf)

    def visit(i, pattern):
        nonlocal best
        if i < len(unstable):
            pos, j = unstable[i]
            for phase in (1, -1):
                child = {p: a.copy() for p, a in pattern.items()}
                child[pos][j] = phase
                maps, _, _ = _region(net, child, upto=pos + 1)
                a_ub, b_ub = _constraints(maps, child)
                if _feasible(a_ub, b_ub, lo, hi):
                    visit(i + 1, child)
            return
        solved = _linear_min(net, pattern, lo, hi, y)
        if solved is not None:
            best = np.minimum(best, solved[0])

    visit(0, base)
    return best


# ---------------------------------------------------------------- reporting


def append_csv(path, idx: int, res: VerificationResult) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(CSV_FIELDS)
        w.writerow([idx, res.status, f"{res.min_bound:.9g}", res.nodes_explored, f"{res.wall_time * 1000:.3f}"])
