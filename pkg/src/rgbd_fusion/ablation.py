"""Multi-seed ablation suites with ordering checks.

A suite names a base network and training plan, a list of cells that
override network fields, the seeds to run, and the orderings expected
between cells. Each (cell, seed) is trained on the training split and
scored on the evaluation split. An ordering ``a > b`` holds when the gap
between mean mIoUs exceeds the pooled standard error
``sqrt(s_a**2 / n_a + s_b**2 / n_b)``; ``a >= b`` holds when ``a`` is not
worse than ``b`` by more than that error.

With ``pretrain`` set, every two-encoder cell starts from unimodal RGB and
depth networks trained with the same seed and plan (shared across cells
and reused for unimodal cells with the same network), then trains end to
end.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .data.prepare import PreparedDataset
from .networks import NetworkSpec, build_network
from .train import UNIMODAL_VARIANTS, TrainPlan, TrainResult, evaluate, train

log = logging.getLogger(__name__)

MIN_SEEDS = 5
RELATIONS = (">", ">=")
TABLE_FIELDS = ("cell", "variant", "gates", "inject", "shrink", "seed", "miou")


class SuiteError(ValueError):
    pass


@dataclass
class Ordering:
    a: str
    b: list[str]
    relation: str = ">"

    @classmethod
    def from_dict(cls, d: dict) -> "Ordering":
        unknown = set(d) - {"a", "b", "relation"}
        if unknown:
            raise SuiteError(f"unknown ordering keys: {sorted(unknown)}")
        b = d["b"] if isinstance(d["b"], list) else [d["b"]]
        rel = d.get("relation", ">")
        if rel not in RELATIONS:
            raise SuiteError(f"relation must be one of {RELATIONS}, got {rel!r}")
        return cls(d["a"], list(b), rel)

    def describe(self) -> str:
        rhs = self.b[0] if len(self.b) == 1 else "best of " + "/".join(self.b)
        return f"{self.a} {self.relation} {rhs}"


@dataclass
class Suite:
    base_spec: dict
    plan: dict
    cells: list[dict]
    seeds: list[int]
    orderings: list[Ordering] = field(default_factory=list)
    pretrain: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "Suite":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise SuiteError(f"unknown suite keys: {sorted(unknown)}")
        suite = cls(dict(d.get("base_spec", {})), dict(d.get("plan", {})), list(d.get("cells", [])),
                    list(d.get("seeds", [])), [Ordering.from_dict(o) for o in d.get("orderings", [])],
                    bool(d.get("pretrain", False)))
        return suite.validate()

    def validate(self) -> "Suite":
        if not self.cells:
            raise SuiteError("suite has no cells")
        if len(set(self.seeds)) < MIN_SEEDS:
            raise SuiteError(f"each cell needs at least {MIN_SEEDS} distinct seeds, got {self.seeds}")
        names = []
        for cell in self.cells:
            if "name" not in cell:
                raise SuiteError(f"cell without a name: {cell}")
            names.append(cell["name"])
            self.spec_for(cell)
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise SuiteError(f"duplicate cell names: {sorted(dup)}")
        for o in self.orderings:
            for n in [o.a, *o.b]:
                if n not in names:
                    raise SuiteError(f"ordering {o.describe()!r} names unknown cell {n!r}")
        TrainPlan.from_dict({**self.plan, "stage": "multimodal"})
        return self

    def spec_for(self, cell: dict) -> NetworkSpec:
        overrides = {k: v for k, v in cell.items() if k != "name"}
        try:
            return NetworkSpec.from_dict({**self.base_spec, **overrides})
        except (TypeError, ValueError) as exc:
            raise SuiteError(f"cell {cell.get('name')!r}: {exc}") from exc


@dataclass
class CellStats:
    name: str
    mious: list[float]

    @property
    def n(self) -> int:
        return len(self.mious)

    @property
    def mean(self) -> float:
        return float(np.mean(self.mious)) if self.mious else math.nan

    @property
    def std(self) -> float:
        return float(np.std(self.mious, ddof=1)) if self.n > 1 else math.nan


@dataclass
class OrderingResult:
    ordering: Ordering
    compared_to: str
    gap: float
    pooled_se: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.ordering.a} {self.ordering.relation} {self.compared_to}: "
                f"gap={self.gap:+.4f} pooled_se={self.pooled_se:.4f}")


@dataclass
class AblationReport:
    rows: list[dict]
    stats: dict[str, CellStats]
    orderings: list[OrderingResult]
    failures: list[dict]
    aliases: dict[str, str]

    @property
    def all_passed(self) -> bool:
        return not self.failures and all(o.passed for o in self.orderings)

    def table(self, delimiter: str = "\t") -> str:
        """Delimited text, one row per (cell, seed), with per-class IoUs."""
        n_cls = max((len(r["iou"]) for r in self.rows), default=0)
        header = list(TABLE_FIELDS) + [f"iou_{k}" for k in range(n_cls)]
        buf = io.StringIO()
        writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        writer.writerow(header)
        for r in self.rows:
            ious = ["" if v is None else f"{v:.6f}" for v in r["iou"]]
            writer.writerow([r["cell"], r["variant"], r["gates"], r["inject"], r["shrink"], r["seed"],
                             f"{r['miou']:.6f}"] + ious)
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"{'cell':<24} {'mean':>8} {'std':>8}  n"]
        for s in self.stats.values():
            lines.append(f"{s.name:<24} {s.mean:8.4f} {s.std:8.4f}  {s.n}")
        lines += [o.line() for o in self.orderings]
        lines += [f"FAILED CELL {f['cell']} seed={f['seed']}: {f['error']}" for f in self.failures]
        return "\n".join(lines)


def pooled_se(a: CellStats, b: CellStats) -> float:
    return math.sqrt(a.std ** 2 / a.n + b.std ** 2 / b.n)


def check_ordering(o: Ordering, stats: dict[str, CellStats]) -> OrderingResult:
    a = stats[o.a]
    b = max((stats[n] for n in o.b), key=lambda s: s.mean)
    if a.n < 2 or b.n < 2:
        return OrderingResult(o, b.name, math.nan, math.nan, False)
    gap = a.mean - b.mean
    se = pooled_se(a, b)
    passed = gap > se if o.relation == ">" else gap >= -se
    return OrderingResult(o, b.name, gap, se, bool(passed))


def _key(spec: NetworkSpec) -> tuple:
    return tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in spec.to_dict().items()))


def ablate(suite: Suite, train_set: PreparedDataset, eval_set: PreparedDataset,
           dtype=np.float64, progress=None) -> AblationReport:
    """Train and score every (cell, seed); failures are recorded, not raised."""
    suite.validate()
    seeds = list(dict.fromkeys(suite.seeds))
    first_by_key: dict[tuple, str] = {}
    aliases: dict[str, str] = {}
    for cell in suite.cells:
        key = _key(suite.spec_for(cell))
        if key in first_by_key:
            log.warning("cell %r duplicates %r; reusing its results", cell["name"], first_by_key[key])
            aliases[cell["name"]] = first_by_key[key]
        else:
            first_by_key[key] = cell["name"]

    unimodal_runs: dict[tuple, TrainResult] = {}

    def run_unimodal(spec: NetworkSpec, seed: int) -> TrainResult:
        key = (_key(spec), seed)
        if key not in unimodal_runs:
            plan = TrainPlan.from_dict({**suite.plan, "stage": "unimodal", "seed": seed, "init_from": None})
            unimodal_runs[key] = train(plan, spec, train_set, dtype=dtype)
        return unimodal_runs[key]

    def run(spec: NetworkSpec, seed: int) -> TrainResult:
        if spec.variant in UNIMODAL_VARIANTS:
            return run_unimodal(spec, seed)
        init = None
        if suite.pretrain and {"rgb_encoder", "depth_encoder"} <= set(build_network(spec, 0).encoders()):
            init = {m: run_unimodal(spec.replace(variant=f"unimodal_{m}", rfb_start_stage=None), seed)
                    .net.state_dict() for m in ("rgb", "depth")}
        plan = TrainPlan.from_dict({**suite.plan, "stage": "multimodal", "seed": seed, "init_from": init})
        return train(plan, spec, train_set, dtype=dtype)

    rows, failures = [], []
    results: dict[str, list[dict]] = {}
    for cell in suite.cells:
        name = cell["name"]
        if name in aliases:
            continue
        spec = suite.spec_for(cell)
        results[name] = []
        for seed in seeds:
            try:
                res = run(spec, seed)
                metrics = evaluate(res.net, eval_set, dtype=dtype)
            except Exception as exc:  # recorded so the rest of the suite still runs
                failures.append({"cell": name, "seed": seed, "error": f"{type(exc).__name__}: {exc}"})
                continue
            results[name].append({"seed": seed, "miou": metrics["miou"], "iou": metrics["iou"]})
            if progress is not None:
                progress(name, seed, metrics["miou"])

    stats: dict[str, CellStats] = {}
    for cell in suite.cells:
        name = cell["name"]
        spec = suite.spec_for(cell)
        source = results.get(aliases.get(name, name), [])
        stats[name] = CellStats(name, [r["miou"] for r in source])
        for r in source:
            rows.append({"cell": name, "variant": spec.variant, "gates": spec.use_gates, "inject": spec.inject,
                         "shrink": spec.shrink_depth, **r})
    checked = [check_ordering(o, stats) for o in suite.orderings]
    return AblationReport(rows, stats, checked, failures, aliases)
