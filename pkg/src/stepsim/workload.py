"""Workload expansion: (model, parallelism) into a per-step execution DAG.

The model is an ordered list of layers, each a list of operators tagged with a
pass (fwd/bwd), a kind (compute / collective / p2p) and, for communication,
the collective type, participant group and message size. Expansion stamps the
per-layer template once per microbatch per pipeline stage, inserts group
barrier nodes for blocking collectives, forks overlapped operators off the
serial chain (they rejoin at the rank's step end), and wires pipeline stages
together through explicit point-to-point transfer nodes so variance on the
wire is first class.

Rank layout places tensor parallelism innermost and pipeline parallelism
outermost: ``rank = ((stage * dp + replica) * cp + cp_idx) * tp + tp_idx``.
Data-parallel replicas are materialised as structurally independent subgraphs;
their synchronisation is the final max over all finish times, and the gradient
collective's cost is still priced for the full dp group. That keeps the
replica graph identical whether one replica or all of them are expanded, which
is what the engine's replica shortcut relies on.
"""

from __future__ import annotations

import json
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from stepsim.distributions import DistributionCatalog, PointMass, UnknownKernelError
from stepsim.topology import Topology, canonical_collective, collective_distribution

__all__ = [
    "OperatorSpec",
    "LayerSpec",
    "ModelSpec",
    "ParallelismConfig",
    "CommSpec",
    "TaskNode",
    "ExecutionDag",
    "DagError",
    "RankTask",
    "build_rank_graph",
    "expand_pipeline_schedule",
    "validate_dag",
    "resolve_node",
    "one_f_one_b_slots",
    "load_schedule_file",
    "load_model_file",
    "PIPELINE_SEND_FWD",
    "PIPELINE_SEND_BWD",
]

OP_KINDS = ("compute", "collective", "p2p")
PHASES = ("fwd", "bwd")
COMM_GROUPS = ("tp", "cp", "dp", "pp")

# Kernel keys of the auto-generated pipeline boundary transfers.
PIPELINE_SEND_FWD = "pp_send_fwd"
PIPELINE_SEND_BWD = "pp_send_bwd"


class DagError(ValueError):
    """Structural problem in a DAG or schedule (cycle, bad reference, ...)."""


# ---------------------------------------------------------------------------
# Model and parallelism descriptions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OperatorSpec:
    """One operator of a layer template (or a per-step aggregate kernel)."""

    name: str
    kind: str
    phase: str
    message_bytes: int = 0
    collective: str = ""
    group: str = ""
    overlap: bool = False

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ValueError(f"operator {self.name!r}: unknown kind {self.kind!r}")
        if self.phase not in PHASES:
            raise ValueError(f"operator {self.name!r}: unknown phase {self.phase!r}")
        if self.kind == "collective":
            if not self.collective:
                raise ValueError(f"operator {self.name!r}: collective type required")
            canonical_collective(self.collective)
            if self.group not in ("tp", "cp", "dp"):
                raise ValueError(f"operator {self.name!r}: collective group must be tp/cp/dp")
        if self.kind in ("collective", "p2p") and self.message_bytes <= 0:
            raise ValueError(f"operator {self.name!r}: communication needs message_bytes > 0")
        if self.group and self.group not in COMM_GROUPS:
            raise ValueError(f"operator {self.name!r}: unknown group {self.group!r}")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    ops: tuple[OperatorSpec, ...]


@dataclass(frozen=True)
class ModelSpec:
    """Layer templates plus per-step aggregate kernels and boundary sizes."""

    name: str
    layers: tuple[LayerSpec, ...]
    step_ops: tuple[OperatorSpec, ...] = ()
    activation_bytes: int = 0
    grad_bytes: int = 0
    batch: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        if self.grad_bytes == 0:
            object.__setattr__(self, "grad_bytes", self.activation_bytes)

    def kernel_names(self) -> list[str]:
        names = []
        for layer in self.layers:
            names.extend(op.name for op in layer.ops)
        names.extend(op.name for op in self.step_ops)
        return sorted(set(names))


@dataclass(frozen=True)
class ParallelismConfig:
    tp: int = 1
    pp: int = 1
    dp: int = 1
    cp: int = 1
    microbatches: int = 1
    schedule: str = "1f1b"

    def __post_init__(self):
        for name in ("tp", "pp", "dp", "cp", "microbatches"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def world_size(self) -> int:
        return self.tp * self.pp * self.dp * self.cp

    def rank_of(self, stage: int, replica: int, cp_idx: int, tp_idx: int) -> int:
        return ((stage * self.dp + replica) * self.cp + cp_idx) * self.tp + tp_idx

    def stage_of(self, rank: int) -> int:
        if not 0 <= rank < self.world_size:
            raise ValueError(f"rank {rank} outside world of {self.world_size}")
        return rank // (self.dp * self.cp * self.tp)

    def coords_of(self, rank: int) -> tuple[int, int, int, int]:
        """Inverse of :meth:`rank_of`: (stage, replica, cp_idx, tp_idx)."""
        stage = self.stage_of(rank)
        rem = rank % (self.dp * self.cp * self.tp)
        replica, rem = divmod(rem, self.cp * self.tp)
        cp_idx, tp_idx = divmod(rem, self.tp)
        return stage, replica, cp_idx, tp_idx

    def stage_ranks(self, stage: int, replica: int) -> list[int]:
        return [
            self.rank_of(stage, replica, c, t)
            for c in range((self.cp))
            for t in range(self.tp)
        ]


def check_world(par: ParallelismConfig, topo: Topology) -> None:
    if par.world_size != topo.world_size:
        raise ValueError(
            f"parallelism implies world size {par.world_size} but topology has "
            f"{topo.world_size} ranks"
        )


# ---------------------------------------------------------------------------
# DAG structures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CommSpec:
    """Communication metadata used to synthesize a cost when unmeasured."""

    kind: str
    message_bytes: int
    ranks: tuple[int, ...]


@dataclass(frozen=True)
class TaskNode:
    id: str
    kernel: str | None
    rank: int
    microbatch: int  # -1 for per-step work
    phase: str  # fwd | bwd | step
    comm: CommSpec | None = None


EDGE_KINDS = ("serial", "sync_join", "pipeline")


class ExecutionDag:
    """Immutable-after-build task graph with typed precedence edges."""

    def __init__(self):
        self.nodes: dict[str, TaskNode] = {}
        self.edges: list[tuple[str, str, str]] = []
        self._preds: dict[str, list[str]] = defaultdict(list)
        self._succs: dict[str, list[str]] = defaultdict(list)
        self.meta: dict = {}

    def add_node(self, node: TaskNode) -> TaskNode:
        if node.id in self.nodes:
            raise DagError(f"duplicate node id {node.id!r}")
        self.nodes[node.id] = node
        return node

    def add_edge(self, src: str, dst: str, kind: str = "serial") -> None:
        if kind not in EDGE_KINDS:
            raise DagError(f"unknown edge kind {kind!r}")
        if src == dst:
            raise DagError(f"self edge on {src!r}")
        self.edges.append((src, dst, kind))
        self._preds[dst].append(src)
        self._succs[src].append(dst)

    def preds(self, node_id: str) -> list[str]:
        return self._preds.get(node_id, [])

    def succs(self, node_id: str) -> list[str]:
        return self._succs.get(node_id, [])

    def __len__(self) -> int:
        return len(self.nodes)

    def topological_order(self) -> list[str]:
        indeg = {nid: 0 for nid in self.nodes}
        for _, dst, _ in self.edges:
            indeg[dst] += 1
        queue = [nid for nid in self.nodes if indeg[nid] == 0]
        order: list[str] = []
        head = 0
        while head < len(queue):
            nid = queue[head]
            head += 1
            order.append(nid)
            for succ in self._succs.get(nid, []):
                indeg[succ] -= 1
                if indeg[succ] == 0:
                    queue.append(succ)
        if len(order) != len(self.nodes):
            stuck = sorted(nid for nid, d in indeg.items() if d > 0)
            shown = ", ".join(stuck[:20])
            raise DagError(f"cycle involving nodes: {shown}")
        return order


def resolve_node(
    node: TaskNode, catalog: DistributionCatalog | None, topo: Topology | None = None
):
    """Latency distribution for one task node.

    Structural nodes (no kernel) cost nothing. Communication over a trivial
    group costs nothing. Otherwise the catalog entry for (kernel, rank) wins,
    falling back to a synthesized cost from the topology for communication
    nodes; a miss on every route is a hard error naming the kernel.
    """
    if node.kernel is None:
        return PointMass(0.0)
    if node.comm is not None and len(set(node.comm.ranks)) <= 1:
        return PointMass(0.0)
    if catalog is not None:
        try:
            return catalog.lookup(node.kernel, node.rank)
        except UnknownKernelError:
            pass
    if node.comm is not None and topo is not None:
        return collective_distribution(
            node.comm.kind, node.comm.message_bytes, node.comm.ranks, topo, catalog
        )
    raise UnknownKernelError(
        f"no distribution for kernel {node.kernel!r} (rank {node.rank})"
    )


def validate_dag(
    dag: ExecutionDag,
    catalog: DistributionCatalog | None = None,
    topo: Topology | None = None,
) -> None:
    """Structural validation plus (optional) catalog resolution.

    Checks edge endpoints, acyclicity (reporting the stuck nodes), join
    barrier ordering, and that every kernel key resolves when a catalog is
    supplied. An empty DAG is vacuously valid.
    """
    for src, dst, _ in dag.edges:
        for endpoint in (src, dst):
            if endpoint not in dag.nodes:
                raise DagError(f"edge references unknown node {endpoint!r}")
    order = dag.topological_order()
    position = {nid: i for i, nid in enumerate(order)}
    for src, dst, kind in dag.edges:
        if kind == "sync_join" and position[src] >= position[dst]:
            raise DagError(f"join member {src!r} does not precede barrier {dst!r}")
    if catalog is not None:
        for node in dag.nodes.values():
            resolve_node(node, catalog, topo)


# ---------------------------------------------------------------------------
# Per-rank program (single microbatch view)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RankTask:
    op: OperatorSpec
    mode: str  # serial | overlapped


def _stage_layers(model: ModelSpec, par: ParallelismConfig, stage: int) -> tuple[LayerSpec, ...]:
    n, p = len(model.layers), par.pp
    if n < p:
        raise DagError(f"cannot split {n} layers over {p} pipeline stages")
    base, extra = divmod(n, p)
    counts = [base + (1 if i < extra else 0) for i in range(p)]
    lo = sum(counts[:stage])
    return model.layers[lo : lo + counts[stage]]


def _phase_ops(layers: Sequence[LayerSpec], phase: str) -> list[tuple[int, OperatorSpec]]:
    indexed = list(enumerate(layers))
    if phase == "bwd":
        indexed = list(reversed(indexed))  # backward walks layers in reverse
    return [(li, op) for li, layer in indexed for op in layer.ops if op.phase == phase]


def build_rank_graph(model: ModelSpec, par: ParallelismConfig, rank: int) -> list[RankTask]:
    """Ordered task list one rank executes for a single microbatch plus step work.

    Blocking operators chain serially; overlapped operators fork off the chain
    and rejoin at the end of the step.
    """
    stage = par.stage_of(rank)
    layers = _stage_layers(model, par, stage)
    tasks: list[RankTask] = []
    for phase in PHASES:
        for _, op in _phase_ops(layers, phase):
            tasks.append(RankTask(op, "overlapped" if op.overlap else "serial"))
    for op in model.step_ops:
        tasks.append(RankTask(op, "overlapped" if op.overlap else "serial"))
    return tasks


# ---------------------------------------------------------------------------
# Pipeline schedules
# ---------------------------------------------------------------------------


def one_f_one_b_slots(p: int, m: int) -> list[list[tuple[int, str]]]:
    """Per-stage slot order: warmup forwards, steady 1B1F alternation, drain.

    Stage ``s`` warms up with ``min(m, p - s)`` forwards, then alternates one
    backward / one forward until forwards run out, then drains backwards.
    """
    slots: list[list[tuple[int, str]]] = []
    for s in range(p):
        warmup = min(m, p - s)
        order: list[tuple[int, str]] = [(k, "fwd") for k in range(warmup)]
        next_fwd = warmup
        next_bwd = 0
        while next_fwd < m:
            order.append((next_bwd, "bwd"))
            next_bwd += 1
            order.append((next_fwd, "fwd"))
            next_fwd += 1
        while next_bwd < m:
            order.append((next_bwd, "bwd"))
            next_bwd += 1
        slots.append(order)
    return slots


def load_schedule_file(path, par: ParallelismConfig) -> list[list[tuple[int, str]]]:
    """Load a declarative schedule: per stage, an ordered list of {mb, pass}.

    Each (microbatch, pass) pair must appear exactly once per stage; a repeat
    is an oversubscription error and a gap leaves the step incomplete.
    """
    with open(path) as fh:
        doc = json.load(fh)
    stages = doc.get("stages")
    if not isinstance(stages, list) or len(stages) != par.pp:
        raise DagError(
            f"schedule file must define exactly {par.pp} stages, got "
            f"{len(stages) if isinstance(stages, list) else 'none'}"
        )
    expected = {(mb, phase) for mb in range(par.microbatches) for phase in PHASES}
    slots: list[list[tuple[int, str]]] = []
    for s, entries in enumerate(stages):
        order: list[tuple[int, str]] = []
        seen: set[tuple[int, str]] = set()
        for entry in entries:
            slot = (int(entry["mb"]), str(entry["pass"]))
            if slot[1] not in PHASES:
                raise DagError(f"stage {s}: unknown pass {slot[1]!r}")
            if slot in seen:
                raise DagError(f"rank oversubscribed: stage {s} schedules {slot} twice")
            seen.add(slot)
            order.append(slot)
        if seen != expected:
            missing = sorted(expected - seen)[:5]
            raise DagError(f"incomplete schedule: stage {s} missing {missing}")
        slots.append(order)
    return slots


# ---------------------------------------------------------------------------
# Full expansion
# ---------------------------------------------------------------------------


class _Builder:
    def __init__(self, model: ModelSpec, par: ParallelismConfig):
        self.model = model
        self.par = par
        self.dag = ExecutionDag()
        self.frontier: dict[int, str] = {}
        self.overlapped: dict[int, list[str]] = defaultdict(list)

    # -- primitives -------------------------------------------------------------

    def _emit(self, node: TaskNode, member_ranks: Iterable[int], advance: bool,
              firsts: dict[int, str]) -> None:
        self.dag.add_node(node)
        members = list(member_ranks)
        pred_ids = []
        for r in members:
            prev = self.frontier.get(r)
            if prev is not None and prev not in pred_ids:
                pred_ids.append(prev)
        for prev in pred_ids:
            self.dag.add_edge(prev, node.id, "serial")
        for r in members:
            firsts.setdefault(r, node.id)
        if advance:
            for r in members:
                self.frontier[r] = node.id
        else:
            for r in members:
                self.overlapped[r].append(node.id)

    def _p2p_partner(self, op: OperatorSpec, s: int, d: int, c: int, t: int) -> int | None:
        par = self.par
        group = op.group or "pp"
        if group == "pp":
            return par.rank_of(s + 1, d, c, t) if s + 1 < par.pp else None
        if group == "cp" and par.cp > 1:
            return par.rank_of(s, d, (c + 1) % par.cp, t)
        if group == "tp" and par.tp > 1:
            return par.rank_of(s, d, c, (t + 1) % par.tp)
        return None

    # -- slot body -------------------------------------------------------------

    def build_body(
        self,
        ops: Sequence[tuple[int, OperatorSpec]],
        stage: int,
        replica: int,
        mb: int,
        phase: str,
        tag: str,
    ) -> tuple[dict[int, str], dict[int, str]]:
        """Stamp one op sequence over the stage grid; returns (firsts, lasts)."""
        par = self.par
        firsts: dict[int, str] = {}
        members_all = par.stage_ranks(stage, replica)
        for oi, (li, op) in enumerate(ops):
            base = f"{tag}.o{oi}.{op.name}"
            advance = not op.overlap
            if op.kind == "collective" and op.group == "tp":
                for c in range(par.cp):
                    group = tuple(par.rank_of(stage, replica, c, t) for t in range(par.tp))
                    node = TaskNode(
                        f"{base}.c{c}", op.name, group[0], mb, phase,
                        CommSpec(canonical_collective(op.collective), op.message_bytes, group),
                    )
                    self._emit(node, group, advance, firsts)
            elif op.kind == "collective" and op.group == "cp":
                for t in range(par.tp):
                    group = tuple(par.rank_of(stage, replica, c, t) for c in range(par.cp))
                    node = TaskNode(
                        f"{base}.t{t}", op.name, group[0], mb, phase,
                        CommSpec(canonical_collective(op.collective), op.message_bytes, group),
                    )
                    self._emit(node, group, advance, firsts)
            elif op.kind == "collective" and op.group == "dp":
                # Replicas stay structurally independent: per-rank node whose
                # cost is still priced for the full dp group.
                for c in range(par.cp):
                    for t in range(par.tp):
                        rank = par.rank_of(stage, replica, c, t)
                        group = tuple(par.rank_of(stage, d2, c, t) for d2 in range(par.dp))
                        node = TaskNode(
                            f"{base}.r{rank}", op.name, rank, mb, phase,
                            CommSpec(canonical_collective(op.collective), op.message_bytes, group),
                        )
                        self._emit(node, [rank], advance, firsts)
            elif op.kind == "p2p":
                for c in range(par.cp):
                    for t in range(par.tp):
                        rank = par.rank_of(stage, replica, c, t)
                        partner = self._p2p_partner(op, stage, replica, c, t)
                        ranks = (rank,) if partner is None else (rank, partner)
                        node = TaskNode(
                            f"{base}.r{rank}", op.name, rank, mb, phase,
                            CommSpec("p2p", op.message_bytes, ranks),
                        )
                        self._emit(node, [rank], advance, firsts)
            else:  # compute
                for rank in members_all:
                    node = TaskNode(f"{base}.r{rank}", op.name, rank, mb, phase)
                    self._emit(node, [rank], advance, firsts)
        lasts = {r: self.frontier[r] for r in members_all if r in self.frontier}
        return firsts, lasts


def expand_pipeline_schedule(
    model: ModelSpec,
    par: ParallelismConfig,
    schedule: list[list[tuple[int, str]]] | None = None,
    replicate_dp: bool = True,
) -> ExecutionDag:
    """Expand the full training-step DAG.

    ``schedule`` defaults to the built-in 1F1B order; declarative schedules
    loaded from file slot straight in. With ``replicate_dp=False`` only the
    first data-parallel replica is materialised (the engine combines replicas
    through the parallel-composition shortcut instead).
    """
    p, m = par.pp, par.microbatches
    if m < p:
        warnings.warn(
            f"microbatches ({m}) < pipeline stages ({p}): pipeline underfilled",
            stacklevel=2,
        )
    slots = schedule if schedule is not None else one_f_one_b_slots(p, m)
    if len(slots) != p:
        raise DagError(f"schedule has {len(slots)} stages, parallelism has {p}")

    builder = _Builder(model, par)
    dag = builder.dag
    replicas = range(par.dp) if replicate_dp else range(1)

    fwd_ops = {s: _phase_ops(_stage_layers(model, par, s), "fwd") for s in range(p)}
    bwd_ops = {s: _phase_ops(_stage_layers(model, par, s), "bwd") for s in range(p)}
    for s in range(p):
        if not fwd_ops[s] or not bwd_ops[s]:
            raise DagError(f"stage {s} has no operators for one of the passes")

    for d in replicas:
        bodies: dict[tuple[int, int, str], tuple[dict, dict]] = {}
        for s in range(p):
            for mb, phase in slots[s]:
                ops = fwd_ops[s] if phase == "fwd" else bwd_ops[s]
                tag = f"d{d}.s{s}.m{mb}.{phase}"
                bodies[(s, mb, phase)] = builder.build_body(ops, s, d, mb, phase, tag)

        # Activation dependency: a microbatch's backward needs its forward.
        for s in range(p):
            for mb in range(m):
                _, f_last = bodies[(s, mb, "fwd")]
                b_first, _ = bodies[(s, mb, "bwd")]
                for last_id, first_id in dict.fromkeys(
                    (f_last[rank], first_id)
                    for rank, first_id in b_first.items()
                    if rank in f_last
                ):
                    if last_id != first_id and last_id not in dag.preds(first_id):
                        dag.add_edge(last_id, first_id, "serial")

        # Pipeline boundary transfers as explicit nodes.
        for s in range(p - 1):
            src = par.rank_of(s, d, 0, 0)
            dst = par.rank_of(s + 1, d, 0, 0)
            for mb in range(m):
                fwd_node = TaskNode(
                    f"d{d}.m{mb}.p2p_fwd.s{s}", PIPELINE_SEND_FWD, src, mb, "fwd",
                    CommSpec("p2p", model.activation_bytes, (src, dst)),
                )
                dag.add_node(fwd_node)
                _, f_last = bodies[(s, mb, "fwd")]
                f_first, _ = bodies[(s + 1, mb, "fwd")]
                for last_id in dict.fromkeys(f_last.values()):
                    dag.add_edge(last_id, fwd_node.id, "pipeline")
                for first_id in dict.fromkeys(f_first.values()):
                    dag.add_edge(fwd_node.id, first_id, "pipeline")

                bwd_node = TaskNode(
                    f"d{d}.m{mb}.p2p_bwd.s{s + 1}", PIPELINE_SEND_BWD, dst, mb, "bwd",
                    CommSpec("p2p", model.grad_bytes, (dst, src)),
                )
                dag.add_node(bwd_node)
                _, b_last = bodies[(s + 1, mb, "bwd")]
                b_first, _ = bodies[(s, mb, "bwd")]
                for last_id in dict.fromkeys(b_last.values()):
                    dag.add_edge(last_id, bwd_node.id, "pipeline")
                for first_id in dict.fromkeys(b_first.values()):
                    dag.add_edge(bwd_node.id, first_id, "pipeline")

        # Per-step aggregate work runs once per rank after its last slot.
        if model.step_ops:
            step_ops = [(0, op) for op in model.step_ops]
            for s in range(p):
                builder.build_body(step_ops, s, d, -1, "step", f"d{d}.s{s}.step")

        # Overlapped work rejoins at the rank's step end.
        for rank in sorted(builder.overlapped):
            pending = builder.overlapped[rank]
            if not pending:
                continue
            end = TaskNode(f"d{d}.end.r{rank}", None, rank, -1, "step")
            if end.id in dag.nodes:
                continue
            dag.add_node(end)
            prev = builder.frontier.get(rank)
            if prev is not None:
                dag.add_edge(prev, end.id, "serial")
            for node_id in pending:
                dag.add_edge(node_id, end.id, "sync_join")
            builder.frontier[rank] = end.id
        builder.overlapped.clear()

    dag.meta = {
        "model": model.name,
        "tp": par.tp,
        "pp": par.pp,
        "dp": par.dp,
        "cp": par.cp,
        "microbatches": m,
        "dp_replicated": bool(replicate_dp),
        "schedule": par.schedule,
    }
    return dag


# ---------------------------------------------------------------------------
# File loading
# ---------------------------------------------------------------------------


def _op_from_obj(obj: Mapping) -> OperatorSpec:
    known = {"name", "kind", "pass", "message_bytes", "collective", "group", "overlap"}
    unknown = set(obj) - known
    if unknown:
        raise ValueError(f"operator has unknown fields: {sorted(unknown)}")
    return OperatorSpec(
        name=str(obj["name"]),
        kind=str(obj["kind"]),
        phase=str(obj["pass"]),
        message_bytes=int(obj.get("message_bytes", 0)),
        collective=str(obj.get("collective", "")),
        group=str(obj.get("group", "")),
        overlap=bool(obj.get("overlap", False)),
    )


def model_from_json_obj(obj: Mapping) -> ModelSpec:
    layers = tuple(
        LayerSpec(
            name=str(layer.get("name", f"layer{i}")),
            ops=tuple(_op_from_obj(op) for op in layer["ops"]),
        )
        for i, layer in enumerate(obj["layers"])
    )
    return ModelSpec(
        name=str(obj.get("name", "model")),
        layers=layers,
        step_ops=tuple(_op_from_obj(op) for op in obj.get("step_ops", [])),
        activation_bytes=int(obj.get("activation_bytes", 0)),
        grad_bytes=int(obj.get("grad_bytes", 0)),
        batch=dict(obj.get("batch", {})),
    )


def parallelism_from_json_obj(obj: Mapping) -> ParallelismConfig:
    return ParallelismConfig(
        tp=int(obj.get("tp", 1)),
        pp=int(obj.get("pp", 1)),
        dp=int(obj.get("dp", 1)),
        cp=int(obj.get("cp", 1)),
        microbatches=int(obj.get("microbatches", 1)),
        schedule=str(obj.get("schedule", "1f1b")),
    )


def load_model_file(path) -> tuple[ModelSpec, ParallelismConfig]:
    """Load the combined model + parallelism JSON document."""
    with open(path) as fh:
        doc = json.load(fh)
    model = model_from_json_obj(doc["model"])
    par = parallelism_from_json_obj(doc.get("parallelism", {}))
    return model, par


def _op_to_obj(op: OperatorSpec) -> dict:
    obj: dict = {"name": op.name, "kind": op.kind, "pass": op.phase}
    if op.message_bytes:
        obj["message_bytes"] = op.message_bytes
    if op.collective:
        obj["collective"] = op.collective
    if op.group:
        obj["group"] = op.group
    if op.overlap:
        obj["overlap"] = True
    return obj


def model_to_json_obj(model: ModelSpec, par: ParallelismConfig | None = None) -> dict:
    doc: dict = {
        "model": {
            "name": model.name,
            "layers": [
                {"name": layer.name, "ops": [_op_to_obj(op) for op in layer.ops]}
                for layer in model.layers
            ],
        }
    }
    if model.step_ops:
        doc["model"]["step_ops"] = [_op_to_obj(op) for op in model.step_ops]
    if model.activation_bytes:
        doc["model"]["activation_bytes"] = model.activation_bytes
    if model.grad_bytes and model.grad_bytes != model.activation_bytes:
        doc["model"]["grad_bytes"] = model.grad_bytes
    if model.batch:
        doc["model"]["batch"] = dict(model.batch)
    if par is not None:
        doc["parallelism"] = {
            "tp": par.tp,
            "pp": par.pp,
            "dp": par.dp,
            "cp": par.cp,
            "microbatches": par.microbatches,
            "schedule": par.schedule,
        }
    return doc
