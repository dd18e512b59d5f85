"""Expert-parallel mesh validation and a pipeline-schedule simulator.

Mesh strategies tie the expert-parallel group size to the other axes:

* EP:  ep == dp * tp, and ep may not exceed the number of experts
* ETP: ep == dp
* EDP: ep == tp

The pipeline simulator runs a synchronous one-forward-one-backward schedule
with per-stage FIFO order and reports makespan and idle ("bubble") time.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Optional

from .errors import ParameterError

STRATEGIES = ("EP", "ETP", "EDP")


# -- meshes ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeshSpec:
    world: int
    pp: int
    dp: int
    tp: int
    ep: int
    strategy: str
    n_experts: int

    def __post_init__(self):
        object.__setattr__(self, "strategy", self.strategy.upper())


@dataclass
class MeshCheck:
    valid: bool
    violations: list[str]

    def to_dict(self) -> dict:
        return asdict(self)


def strategy_holds(strategy: str, ep: int, dp: int, tp: int, n_experts: int) -> bool:
    strategy = strategy.upper()
    if strategy == "EP":
        return ep == dp * tp and ep <= n_experts
    if strategy == "ETP":
        return ep == dp
    if strategy == "EDP":
        return ep == tp
    raise ParameterError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def check_mesh(spec: MeshSpec) -> MeshCheck:
    v: list[str] = []
    sizes = {"world": spec.world, "pp": spec.pp, "dp": spec.dp, "tp": spec.tp, "ep": spec.ep,
             "n_experts": spec.n_experts}
    for name, value in sizes.items():
        if value < 1:
            v.append(f"{name} must be positive, got {value}")
    if spec.strategy not in STRATEGIES:
        v.append(f"unknown strategy {spec.strategy!r}; expected one of {', '.join(STRATEGIES)}")
    if v:
        return MeshCheck(False, v)
    product = spec.pp * spec.dp * spec.tp
    if product != spec.world:
        v.append(f"pp*dp*tp = {spec.pp}*{spec.dp}*{spec.tp} = {product} != world {spec.world}")
    if spec.strategy == "EP":
        if spec.ep != spec.dp * spec.tp:
            v.append(f"EP requires ep == dp*tp: {spec.ep} != {spec.dp}*{spec.tp} = {spec.dp * spec.tp}")
        if spec.ep > spec.n_experts:
            v.append(f"EP size exceeds expert count: ep={spec.ep} > n_experts={spec.n_experts} "
                     "(EP cannot split a single expert, so ep <= number of experts)")
    elif spec.strategy == "ETP":
        if spec.ep != spec.dp:
            v.append(f"ETP requires ep == dp: {spec.ep} != {spec.dp}")
    elif spec.ep != spec.tp:
        v.append(f"EDP requires ep == tp: {spec.ep} != {spec.tp}")
    return MeshCheck(not v, v)


def alltoall_messages(spec: MeshSpec, tokens: int, k: int = 2) -> float:
    """Relative count of token-assignments crossing expert-group boundaries per device.

    A crude comparison aid, not a latency model: each of a device's
    ``tokens * k`` assignments lands on a uniformly random member of its
    expert-parallel group. ETP additionally fans every crossing out to the
    ``tp`` shards of the target expert; under EDP the ``tp`` ranks share
    their tokens, so each device dispatches only its 1/tp share.
    """
    cross = tokens * k * (spec.ep - 1) / spec.ep
    if spec.strategy == "ETP":
        return cross * spec.tp
    if spec.strategy == "EDP":
        return cross / spec.tp
    return cross


# -- pipeline schedules ----------------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    t_layer: float = 1.0
    t_loss: Optional[float] = None  # None: 2 * t_layer
    backward_multiplier: float = 2.0
    hop_cost: float = 0.0  # per stage-to-stage transfer

    @property
    def loss_time(self) -> float:
        return 2.0 * self.t_layer if self.t_loss is None else self.t_loss


@dataclass
class PipelinePlan:
    splits: list[int]
    cost_model: CostModel = field(default_factory=CostModel)
    microbatches: int = 1

    def __post_init__(self):
        self.splits = [int(s) for s in self.splits]
        if not self.splits or any(s < 1 for s in self.splits):
            raise ParameterError(f"every stage needs at least one layer, got {self.splits}")
        if self.microbatches < 1:
            raise ParameterError(f"microbatches must be >= 1, got {self.microbatches}")

    @property
    def stages(self) -> int:
        return len(self.splits)

    @property
    def layers(self) -> int:
        return sum(self.splits)

    def stage_times(self) -> tuple[list[float], list[float]]:
        c = self.cost_model
        fwd = [n * c.t_layer for n in self.splits]
        fwd[-1] += c.loss_time
        return fwd, [c.backward_multiplier * f for f in fwd]


@dataclass
class ScheduleReport:
    makespan: float
    per_device_busy: list[float]
    bubble_time: float
    bubble_fraction: float
    events: list[tuple] = field(default_factory=list)  # (stage, "F"|"B", microbatch, start, end)

    def to_dict(self, events: bool = False) -> dict:
        d = asdict(self)
        if not events:
            d.pop("events")
        return d


def one_f_one_b_order(stages: int, m: int, stage: int) -> list[tuple[str, int]]:
    """Per-stage op order: warm-up forwards, alternating steady state, cool-down backwards."""
    warmup = min(stages - stage - 1, m)
    order = [("F", j) for j in range(warmup)]
    f_next, b_next = warmup, 0
    while f_next < m:
        order.append(("F", f_next))
        f_next += 1
        order.append(("B", b_next))
        b_next += 1
    order.extend(("B", j) for j in range(b_next, m))
    return order


NO_DELAY, HOP, TAIL = 0, 1, 2


@lru_cache(maxsize=1024)
def _schedule_program(stages: int, m: int, upto: int | None = None) -> tuple:
    """Ops of a 1F1B schedule in a dependency-respecting order.

    Each op is ``(stage, is_backward, microbatch, prev, dep, delay, own)``:
    indices of the previous op on the same stage, the cross-stage dependency
    and (for a backward) the stage's own forward of that microbatch, or -1 when
    absent. ``delay`` says what is added to the dependency's end time.

    With ``upto`` only stages ``0..upto-1`` are kept and the rest of the
    pipeline becomes a pure delay (TAIL) between a microbatch's forward on
    stage ``upto-1`` and its backward there.
    """
    kept = stages if upto is None else upto
    orders = [one_f_one_b_order(stages, m, s) for s in range(kept)]
    index: dict[tuple[str, int, int], int] = {}
    program = []
    cursor = [0] * kept
    last = [-1] * kept
    while len(program) < 2 * kept * m:
        progressed = False
        for s in range(kept):
            while cursor[s] < len(orders[s]):
                kind, j = orders[s][cursor[s]]
                if ("F", s, j) not in index and kind == "B":
                    break
                own = index[("F", s, j)] if kind == "B" else -1
                delay = HOP
                if kind == "F":
                    key = None if s == 0 else ("F", s - 1, j)
                elif s == stages - 1:
                    key = None
                elif s == kept - 1:
                    key, delay = ("F", s, j), TAIL
                else:
                    key = ("B", s + 1, j)
                if key is not None and key not in index:
                    break
                dep = -1 if key is None else index[key]
                index[(kind, s, j)] = len(program)
                program.append((s, kind == "B", j, last[s], dep, delay if dep >= 0 else NO_DELAY, own))
                last[s] = len(program) - 1
                cursor[s] += 1
                progressed = True
        if not progressed:
            raise RuntimeError("pipeline schedule deadlocked")  # unreachable for 1F1B orders
    return tuple(program)


def _run_program(program, fwd, bwd, hop: float, ends: list | None = None, tail: float = 0.0,
                 tail_gap: float = 0.0) -> float:
    """Run ``program``; a TAIL return also trails the previous one by ``tail_gap``."""
    if ends is None:
        ends = [0.0] * len(program)
    makespan = 0.0
    last_return = -math.inf
    for i, (s, is_b, _, prev, dep, delay, own) in enumerate(program):
        start = ends[prev] if prev >= 0 else 0.0
        if dep >= 0:
            if delay == TAIL:
                ready = max(ends[dep] + tail, last_return + tail_gap)
                last_return = ready
            else:
                ready = ends[dep] + (hop if delay == HOP else 0.0)
            if ready > start:
                start = ready
        if own >= 0 and ends[own] > start:
            start = ends[own]
        end = start + (bwd[s] if is_b else fwd[s])
        ends[i] = end
        if end > makespan:
            makespan = end
    return makespan


def simulate_pipeline(plan: PipelinePlan, record_events: bool = False) -> ScheduleReport:
    S, m = plan.stages, plan.microbatches
    fwd, bwd = plan.stage_times()
    program = _schedule_program(S, m)
    ends = [0.0] * len(program)
    makespan = _run_program(program, fwd, bwd, plan.cost_model.hop_cost, ends)
    busy = [m * (f + b) for f, b in zip(fwd, bwd)]
    bubble = makespan * S - sum(busy)
    events = []
    if record_events:
        for (s, is_b, j, *_), end in zip(program, ends):
            dur = bwd[s] if is_b else fwd[s]
            events.append((s, "B" if is_b else "F", j, end - dur, end))
        events.sort(key=lambda e: (e[3], e[0]))
    return ScheduleReport(makespan=makespan, per_device_busy=busy, bubble_time=bubble,
                          bubble_fraction=bubble / (makespan * S), events=events)


def _compositions(total: int, parts: int):
    """All compositions of ``total`` into ``parts`` positive integers, lexicographic."""
    if parts == 1:
        yield (total,)
        return
    for first in range(1, total - parts + 2):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def best_split_bruteforce(layers: int, stages: int, cost_model: CostModel, m: int) -> PipelinePlan:
    """Reference search with no pruning; only for small instances."""
    best, best_val = None, math.inf
    for comp in _compositions(layers, stages):
        val = simulate_pipeline(PipelinePlan(list(comp), cost_model, m)).makespan
        if val < best_val - 1e-9 * max(1.0, val):
            best, best_val = comp, val
    return PipelinePlan(list(best), cost_model, m)


def best_split(layers: int, stages: int, cost_model: CostModel = CostModel(), m: int = 8) -> PipelinePlan:
    """Split ``layers`` over ``stages`` to minimize simulated makespan.

    Depth-first over compositions in lexicographic order with branch-and-bound,
    so the first minimizer found is the lexicographically smallest one. See
    ``_search`` for the bounds.
    """
    if stages < 1 or layers < 1:
        raise ParameterError("layers and stages must be positive")
    if stages > layers:
        raise ParameterError(f"cannot split {layers} layers over {stages} stages")
    if m < 1:
        raise ParameterError(f"microbatches must be >= 1, got {m}")
    splits, _ = _search(layers, stages, cost_model, m)
    return PipelinePlan(list(splits), cost_model, m)


@lru_cache(maxsize=4096)
def _search(layers: int, stages: int, c: CostModel, m: int) -> tuple[tuple[int, ...], float]:
    """Lexicographically smallest minimizer and its makespan.

    With ``c_s = f_s + b_s`` and ``w_s`` the number of warm-up forwards at
    stage s, these lower bounds prune a prefix:

    * ``sum_{s'<s} c_s' + m*c_s``: the first forward reaches s only after the
      earlier stages ran it, and the last backward must travel back through them.
    * ``sum_{s'!=s} c_s' + m*c_s - w_s*b_s``: between its last forward and last
      backward, stage s waits for a full round trip through the later stages and
      can cover at most ``w_s`` backwards of that wait.
    * the prefix simulated exactly with the later stages collapsed to a delay.
    * the later stages on their own: they see the prefix only through forward
      arrivals, none earlier than the prefix's forward time, and their last
      backward still has to cross the prefix. A later stage's warm-up count only
      depends on how many stages follow it, so the rest is a smaller instance of
      the same problem.
    """
    rho = c.backward_multiplier / (1.0 + c.backward_multiplier)
    per_layer = c.t_layer * (1.0 + c.backward_multiplier)
    loss_cost = c.loss_time * (1.0 + c.backward_multiplier)
    total = layers * per_layer + loss_cost

    program = _schedule_program(stages, m)
    scratch = [0.0] * len(program)

    def evaluate(splits) -> float:
        fwd = [n * c.t_layer for n in splits]
        fwd[-1] += c.loss_time
        return _run_program(program, fwd, [c.backward_multiplier * f for f in fwd], c.hop_cost, scratch)

    if stages == 1:
        return (layers,), evaluate([layers])

    def relaxed(prefix, rest: int) -> float:
        # Later stages become a delay: microbatch j cannot come back to the last
        # fixed stage before its round trip through the remaining layers, nor
        # sooner after microbatch j-1 than any single later stage can pass both
        # on. The final stage alternates F and B, so it needs f+b per microbatch;
        # the fullest later stage needs at least its backward time.
        pos = len(prefix)
        fwd = [n * c.t_layer for n in prefix]
        bwd = [c.backward_multiplier * f for f in fwd]
        tail = rest * per_layer + loss_cost + 2 * (stages - pos) * c.hop_cost
        fullest = math.ceil(rest / (stages - pos))
        gap = max(per_layer + loss_cost, c.backward_multiplier * c.t_layer * fullest)
        return _run_program(_schedule_program(stages, m, pos), fwd, bwd, c.hop_cost, tail=tail, tail_gap=gap)

    def suffix_bound(done: int, pos: int) -> float:
        return done * per_layer + 2 * pos * c.hop_cost + _search(layers - done, stages - pos, c, m)[1]

    def stage_bound(prefix_cost: float, pos: int, cost: float) -> float:
        w = min(stages - pos - 1, m)
        return max(prefix_cost + m * cost, total + (m - 1 - rho * w) * cost)

    # seed the incumbent: near-uniform split, improved by single-layer moves
    q, r = divmod(layers, stages)
    incumbent = [q + 1] * r + [q] * (stages - r)
    best_val = evaluate(incumbent)
    improved = True
    while improved:
        improved = False
        for i in range(stages):
            for j in range(stages):
                if i == j or incumbent[i] == 1:
                    continue
                trial = list(incumbent)
                trial[i] -= 1
                trial[j] += 1
                val = evaluate(trial)
                if val < best_val - 1e-9 * max(1.0, val):
                    incumbent, best_val, improved = trial, val, True
    best: list[int] | None = None
    tol = 1e-9 * max(1.0, best_val)

    def hopeless(lb: float) -> bool:
        # before the first hit, ties with the incumbent must still be visited
        return lb > best_val + tol if best is None else lb >= best_val - tol

    def search(prefix: list[int], prefix_cost: float, remaining: int):
        nonlocal best, best_val
        pos = len(prefix)
        left = stages - pos
        if left == 1:
            if hopeless(stage_bound(prefix_cost, pos, remaining * per_layer + loss_cost)):
                return
            splits = prefix + [remaining]
            val = evaluate(splits)
            if best is None and val <= best_val + tol or val < best_val - tol:
                best, best_val = splits, val
            return
        for n in range(1, remaining - left + 2):
            cost = n * per_layer
            if hopeless(stage_bound(prefix_cost, pos, cost)):
                # both bounds grow with this stage's cost
                break
            rest = remaining - n
            nxt = prefix_cost + cost
            # some later stage holds at least ceil(rest/(left-1)) layers; the last one carries the loss
            fullest = math.ceil(rest / (left - 1)) * per_layer
            last_cost = (rest - (left - 2)) * per_layer + loss_cost if left == 2 else per_layer + loss_cost
            if hopeless(max(stage_bound(nxt, pos + 1, fullest),
                            stage_bound(nxt + (left - 2) * per_layer, stages - 1, last_cost))):
                continue
            if hopeless(suffix_bound(layers - rest, pos + 1)):
                continue
            if left > 2 and hopeless(relaxed(prefix + [n], rest)):
                continue
            search(prefix + [n], nxt, rest)

    search([], 0.0, layers)
    if best is None:
        best = incumbent
    return tuple(best), best_val


def compare_splits(baseline: list[int], candidate: list[int], cost_model: CostModel = CostModel(),
                   m: int = 8) -> dict:
    a = simulate_pipeline(PipelinePlan(baseline, cost_model, m))
    b = simulate_pipeline(PipelinePlan(candidate, cost_model, m))
    return {
        "microbatches": m,
        "baseline": {"splits": list(baseline), **a.to_dict()},
        "candidate": {"splits": list(candidate), **b.to_dict()},
        "bubble_time_reduction": (a.bubble_time - b.bubble_time) / a.bubble_time if a.bubble_time else 0.0,
        "bubble_fraction_reduction": ((a.bubble_fraction - b.bubble_fraction) / a.bubble_fraction
                                      if a.bubble_fraction else 0.0),
    }
