"""A toy leak economy: greedy vs. arbitrated editing without any LLM.

Each leak is either genuine (privacy gain ``gamma``) or a ghost the attacker
hallucinated (gain ``xi``). Every executed edit costs ``epsilon`` utility.
The greedy agent edits everything it is shown; the arbitrated agent edits a
leak only when a noisy validity judgment (correct with probability ``p``)
says it is real, and stops at the first step where it edits nothing.
"""

from __future__ import annotations

import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .domain import EPS_P, mrs_value

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

GREEDY = "greedy"
ARBITRATED = "arbitrated"
AGENTS = (GREEDY, ARBITRATED)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimLeak:
    is_genuine: bool
    gain: float
    cost: float
    u: float  # the arbitrator's judgment draw for this leak


@dataclass(frozen=True)
class SimConfig:
    n_genuine: int = 5
    n_ghost: int = 50
    gamma: float = 0.1
    xi: float = 0.001
    epsilon: float = 0.02
    arbitrator_accuracy: float = 0.9
    T: int = 10
    leaks_per_step: int = 2
    seed: int = 7
    shuffle: bool = False

    def __post_init__(self) -> None:
        if self.n_genuine < 0 or self.n_ghost < 0:
            raise ConfigError("leak counts must be >= 0")
        if not self.xi < self.gamma:
            raise ConfigError(f"xi ({self.xi}) must be below gamma ({self.gamma})")
        if not self.xi >= 0:
            raise ConfigError("xi must be >= 0")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not 0.5 <= self.arbitrator_accuracy <= 1.0:
            raise ConfigError("arbitrator_accuracy must lie in [0.5, 1]")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.leaks_per_step < 1:
            raise ConfigError("leaks_per_step must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SimConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown simulator keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class SimStep:
    t: int
    delta_p: float
    delta_c: float
    mrs: float
    executed_genuine: int
    executed_ghost: int
    rejected_genuine: int
    rejected_ghost: int

    @property
    def executed(self) -> int:
        return self.executed_genuine + self.executed_ghost


@dataclass(frozen=True)
class AgentRun:
    steps: tuple[SimStep, ...]
    stop_step: int
    cumulative_mrs: tuple[float, ...]  # length T, flat after the stop
    epsilon: float

    @property
    def executed_count(self) -> int:
        return sum(s.executed for s in self.steps)

    @property
    def total_cost(self) -> float:
        return self.epsilon * self.executed_count

    @property
    def total_gain(self) -> float:
        return sum(s.delta_p for s in self.steps)

    @property
    def final_cumulative_mrs(self) -> float:
        return self.cumulative_mrs[-1]


@dataclass(frozen=True)
class SimResult:
    config: SimConfig
    greedy: AgentRun
    arbitrated: AgentRun
    error_model: str = field(default="symmetric label flip with rate 1 - p")

    def agent(self, name: str) -> AgentRun:
        return {GREEDY: self.greedy, ARBITRATED: self.arbitrated}[name]


def implicit_budget_interval(config: SimConfig) -> tuple[float, float]:
    """[ε/γ, ε/ξ): any threshold here separates genuine from ghost edits."""
    upper = math.inf if config.xi == 0 else config.epsilon / config.xi
    return config.epsilon / config.gamma, upper


def _population(config: SimConfig, rng: random.Random) -> list[SimLeak]:
    kinds = [True] * config.n_genuine + [False] * config.n_ghost
    if config.shuffle:
        rng.shuffle(kinds)
    return [
        SimLeak(g, config.gamma if g else config.xi, config.epsilon, rng.random())
        for g in kinds
    ]


def _executes(leak: SimLeak, p: float) -> bool:
    correct = leak.u < p
    return leak.is_genuine == correct


def _run(population: Sequence[SimLeak], config: SimConfig, arbitrated: bool) -> AgentRun:
    remaining = list(population)
    steps: list[SimStep] = []
    stop = config.T
    for t in range(1, config.T + 1):
        drawn, remaining = remaining[: config.leaks_per_step], remaining[config.leaks_per_step:]
        keep = [not arbitrated or _executes(leak, config.arbitrator_accuracy) for leak in drawn]
        run = [leak for leak, k in zip(drawn, keep) if k]
        skipped = [leak for leak, k in zip(drawn, keep) if not k]
        dp = sum((leak.gain for leak in run), 0.0)
        dc = config.epsilon * len(run)
        steps.append(
            SimStep(
                t, dp, dc, mrs_value(dc, dp),
                sum(leak.is_genuine for leak in run), sum(not leak.is_genuine for leak in run),
                sum(leak.is_genuine for leak in skipped), sum(not leak.is_genuine for leak in skipped),
            )
        )
        if not run:
            stop = t
            break
    cumulative, cost, gain = [], 0.0, 0.0
    for s in steps:
        cost += s.delta_c
        gain += s.delta_p
        cumulative.append(cost / max(gain, EPS_P))
    cumulative += [cumulative[-1]] * (config.T - len(cumulative))
    return AgentRun(tuple(steps), stop, tuple(cumulative), config.epsilon)


def simulate(config: SimConfig) -> SimResult:
    """Both agents face the same leak sequence and the same judgment draws."""
    population = _population(config, random.Random(config.seed))
    return SimResult(config, _run(population, config, False), _run(population, config, True))


@dataclass(frozen=True)
class SweepRow:
    config: SimConfig
    greedy_final_mrs: float
    arbitrated_final_mrs: float
    greedy_stop: int
    arbitrated_stop: int


def sweep(configs: Sequence[SimConfig]) -> list[SweepRow]:
    if not configs:
        raise ValueError("sweep needs at least one config")
    rows = []
    for c in configs:
        r = simulate(c)
        rows.append(
            SweepRow(c, r.greedy.final_cumulative_mrs, r.arbitrated.final_cumulative_mrs,
                     r.greedy.stop_step, r.arbitrated.stop_step)
        )
    return rows


def budget_separation_holds(result: SimResult) -> bool:
    """With a perfect arbitrator, some λ in [ε/γ, ε/ξ) splits executed from rejected edits."""
    c = result.config
    lo, hi = implicit_budget_interval(c)
    executed = [s.mrs for s in result.arbitrated.steps if s.executed]
    worst_kept = max(executed, default=lo)
    # a rejected leak would have cost ε for gain ξ (ghost) or γ (genuine)
    rejected = []
    for s in result.arbitrated.steps:
        rejected += [c.epsilon / c.gamma] * s.rejected_genuine
        rejected += [hi] * s.rejected_ghost
    lam = max(lo, worst_kept)
    return lam < hi and all(m <= lam + 1e-12 for m in executed) and all(m > lam for m in rejected)


# ---------------------------------------------------------------------------
# Config files and CSV output
# ---------------------------------------------------------------------------


def load_sim_configs(path: str | Path | None = None) -> list[SimConfig]:
    """Read a TOML file with a [base] table and optional [sweep] lists.

    Each key in [sweep] maps to a list of values; the configs are the
    cartesian product applied over [base], in file order.
    """
    if path is None:
        from importlib import resources

        text = (resources.files("rational_anon") / "data" / "default_sim.toml").read_text(encoding="utf-8")
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"bad TOML: {exc}") from exc
    base = dict(data.get("base", {}))
    configs = [base]
    for key, values in data.get("sweep", {}).items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.{key} must be a non-empty list")
        configs = [{**c, key: v} for c in configs for v in values]
    return [SimConfig.from_dict(c) for c in configs]


def _num(x: float) -> str:
    return "inf" if math.isinf(x) else repr(x)


def sweep_csv_rows(rows: Sequence[SweepRow]) -> list[list[str]]:
    out = [[
        "config", "arbitrator_accuracy", "n_genuine", "n_ghost", "gamma", "xi", "epsilon", "T",
        "leaks_per_step", "seed", "greedy_final_cumulative_mrs", "arbitrated_final_cumulative_mrs",
        "greedy_stop_step", "arbitrated_stop_step", "budget_low", "budget_high",
    ]]
    for i, r in enumerate(rows):
        c = r.config
        lo, hi = implicit_budget_interval(c)
        out.append([
            str(i), _num(c.arbitrator_accuracy), str(c.n_genuine), str(c.n_ghost), _num(c.gamma), _num(c.xi),
            _num(c.epsilon), str(c.T), str(c.leaks_per_step), str(c.seed),
            _num(r.greedy_final_mrs), _num(r.arbitrated_final_mrs), str(r.greedy_stop), str(r.arbitrated_stop),
            _num(lo), _num(hi),
        ])
    return out


def series_csv_rows(results: Sequence[SimResult]) -> list[list[str]]:
    out = [[
        "config", "agent", "t", "delta_p", "delta_c", "mrs", "cumulative_mrs",
        "executed_genuine", "executed_ghost", "rejected_genuine", "rejected_ghost",
    ]]
    for i, res in enumerate(results):
        for name in AGENTS:
            run = res.agent(name)
            for t in range(1, res.config.T + 1):
                cum = _num(run.cumulative_mrs[t - 1])
                if t <= len(run.steps):
                    s = run.steps[t - 1]
                    out.append([
                        str(i), name, str(t), _num(s.delta_p), _num(s.delta_c), _num(s.mrs), cum,
                        str(s.executed_genuine), str(s.executed_ghost),
                        str(s.rejected_genuine), str(s.rejected_ghost),
                    ])
                else:
                    out.append([str(i), name, str(t), "", "", "", cum, "", "", "", ""])
    return out
