"""Planner suite and the spec-string factory used by the harness and CLI.

Spec strings::

    astar | safe | esafe[:K=3] | mdp:fixed | mdp:update | qmdp
    uts:n=2,m=0,eval=cbs,backup=exact          (m=inf solves M(b) at the frontier)
    uts:...,backup=sampled:10,belief=fixed
    cbs:fixed | cbs:update                     (depth-0 search with the NE oracle)
    mcts:sel=puct,budget=50,eval=cbs
    pomdp:h=3                                  (finite-horizon belief lookahead, zero leaves)

Parameters left out are filled from the scenario family's defaults.
"""
from __future__ import annotations

from dataclasses import dataclass

from .base import Planner, PlannerContext, SearchModel
from .mdp import MdpPlanner, QmdpPlanner
from .rules import AstarPlanner, EnhancedSafePlanner, SafePlanner, astar_act, safe_act, unsafe_actions
from .search import (
    INF_DEPTH,
    CbsEval,
    MctsPlanner,
    QmdpEval,
    ShortestPathEval,
    TsConfig,
    UniformTsPlanner,
    ZeroEval,
    mcts,
    uniform_ts,
)

__all__ = [
    "AstarPlanner",
    "CbsEval",
    "EnhancedSafePlanner",
    "INF_DEPTH",
    "MctsPlanner",
    "MdpPlanner",
    "Planner",
    "PlannerContext",
    "PlannerSpec",
    "QmdpEval",
    "QmdpPlanner",
    "SafePlanner",
    "SearchModel",
    "ShortestPathEval",
    "TsConfig",
    "UniformTsPlanner",
    "ZeroEval",
    "astar_act",
    "make_planner",
    "mcts",
    "parse_planner_spec",
    "safe_act",
    "uniform_ts",
    "unsafe_actions",
]

KINDS = ("astar", "safe", "esafe", "mdp", "qmdp", "uts", "cbs", "mcts", "pomdp")


@dataclass(frozen=True)
class PlannerSpec:
    kind: str
    params: tuple  # sorted (key, value) string pairs
    text: str

    def get(self, key, default=None):
        return dict(self.params).get(key, default)


def parse_planner_spec(text: str) -> PlannerSpec:
    text = text.strip()
    kind, _, rest = text.partition(":")
    kind = kind.strip().lower()
    if kind not in KINDS:
        raise ValueError(f"unknown planner {kind!r}; expected one of {', '.join(KINDS)}")
    params = {}
    if rest:
        if kind in ("mdp", "cbs") and "=" not in rest:
            params["belief" if kind == "cbs" else "mode"] = rest.strip()
        else:
            for item in rest.split(","):
                key, eq, value = item.partition("=")
                if not eq:
                    raise ValueError(f"bad parameter {item!r} in planner spec {text!r}")
                params[key.strip().lower()] = value.strip()
    allowed = {
        "astar": set(),
        "safe": set(),
        "esafe": {"k"},
        "mdp": {"mode"},
        "qmdp": set(),
        "uts": {"n", "m", "eval", "backup", "belief", "beta", "budget", "samples", "w"},
        "cbs": {"belief", "samples", "w"},
        "mcts": {"sel", "budget", "eval", "samples", "select", "belief", "beta", "c", "c1", "c2", "w"},
        "pomdp": {"h", "budget"},
    }[kind]
    extra = set(params) - allowed
    if extra:
        raise ValueError(f"planner {kind!r} does not take {', '.join(sorted(extra))}")
    return PlannerSpec(kind, tuple(sorted(params.items())), text)


def _depth(value: str):
    if value.lower() in ("inf", "infinity", "∞"):
        return INF_DEPTH
    n = int(value)
    if n < 0:
        raise ValueError("depth must be >= 0")
    return n


def _belief_mode(value: str) -> bool:
    if value not in ("update", "fixed"):
        raise ValueError("belief must be 'update' or 'fixed'")
    return value == "update"


def _backup(value: str, ctx: PlannerContext):
    if value == "exact":
        return "exact", 1
    kind, _, k = value.partition(":")
    if kind != "sampled":
        raise ValueError("backup must be exact or sampled:k")
    return "sampled", int(k) if k else int(ctx.default("backup_samples", 10))


def ts_config(spec: PlannerSpec, ctx: PlannerContext) -> tuple[TsConfig, bool]:
    """TsConfig plus the belief-update flag for the search-based planner kinds."""
    get = spec.get
    samples = int(get("samples", ctx.default("eval_samples", 5)))
    w = float(get("w", 0.2))
    if spec.kind == "cbs":
        cfg = TsConfig(n=0, m=0, eval="cbs", eval_samples=samples, w=w)
        return cfg, _belief_mode(get("belief", "update"))
    if spec.kind == "pomdp":
        h = int(get("h", ctx.default("depth", 2)))
        return TsConfig(n=h, m=0, eval="zero", budget=int(get("budget", 10**7))), True
    beta = float(get("beta", 1.0))
    update = _belief_mode(get("belief", "update"))
    if spec.kind == "uts":
        fam_backup = ctx.default("backup_samples", None)
        default_backup = f"sampled:{fam_backup}" if fam_backup else "exact"
        backup, k = _backup(get("backup", default_backup), ctx)
        cfg = TsConfig(
            n=_depth(get("n", str(ctx.default("depth", 1)))),
            m=_depth(get("m", "0")),
            eval=get("eval", "cbs"),
            backup=backup,
            backup_samples=k,
            eval_samples=samples,
            budget=int(get("budget", 200_000)),
            w=w,
            beta=beta,
        )
        if cfg.n == INF_DEPTH:
            raise ValueError("n must be finite")
        return cfg, update
    sel = get("sel", "puct")
    cfg = TsConfig(
        n=0,
        m=0,
        eval=get("eval", "cbs"),
        selection=sel,
        budget=int(get("budget", ctx.default("max_iter", 50))),
        select_samples=int(get("select", ctx.default("select_samples", 50))),
        eval_samples=samples,
        c=float(get("c", TsConfig.c)),
        c1=float(get("c1", TsConfig.c1)),
        c2=float(get("c2", TsConfig.c2)),
        w=w,
        beta=beta,
    )
    if sel not in ("uct", "puct"):
        raise ValueError("sel must be uct or puct")
    return cfg, update


def make_planner(spec: str | PlannerSpec, ctx: PlannerContext) -> Planner:
    if isinstance(spec, str):
        spec = parse_planner_spec(spec)
    kind = spec.kind
    if kind == "astar":
        return AstarPlanner(ctx)
    if kind == "safe":
        return SafePlanner(ctx)
    if kind == "esafe":
        return EnhancedSafePlanner(ctx, int(spec.get("k", 3)))
    if kind == "mdp":
        return MdpPlanner(ctx, spec.get("mode", "update"))
    if kind == "qmdp":
        return QmdpPlanner(ctx)
    cfg, update = ts_config(spec, ctx)
    if kind == "mcts":
        return MctsPlanner(ctx, cfg, update, name=spec.text)
    return UniformTsPlanner(ctx, cfg, update, name=spec.text)
