"""Scenario files: TOML/JSON config trees, sweeps, and resolution."""

import copy
import json
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

try:
    import tomllib
except ModuleNotFoundError:                      # python < 3.11
    import tomli as tomllib

from .attacker import AttackerConfig
from .engine import ConfigError, KvConfig, ProbeSimConfig, SimConfig
from .latency import LatencyModelConfig
from .scheduler import RecoveryMode, SchedulerConfig, TenantQuota
from .workload import WorkloadConfig


@dataclass
class Sweep:
    parameter: str
    values: List[Any]


@dataclass
class Scenario:
    name: str
    raw: Dict[str, Any]                  # config tree before mix/sweep
    sweep: Optional[Sweep] = None
    baseline_ref: Optional[str] = None

    def points(self) -> List[Tuple[str, Dict[str, Any]]]:
        """Resolved (point-name, config-tree) pairs: one per sweep value."""
        if self.sweep is None:
            return [("run", _apply_mix(copy.deepcopy(self.raw)))]
        leaf = self.sweep.parameter.split(".")[-1]
        out = []
        for value in self.sweep.values:
            tree = copy.deepcopy(self.raw)
            _set_path(tree, self.sweep.parameter, value)
            out.append((f"{leaf}={value}", _apply_mix(tree)))
        return out


def _set_path(tree: Dict[str, Any], path: str, value: Any) -> None:
    parts = path.split(".")
    node = tree
    for key in parts[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"sweep parameter {path!r} crosses a leaf")
    node[parts[-1]] = value


def _apply_mix(tree: Dict[str, Any]) -> Dict[str, Any]:
    """Translate the [mix] convenience block into concrete rates.

    With a fixed total request rate, the malicious ratio splits traffic
    between benign clients and the attacker: fixed-interval attackers get
    a matching dispatch period, closed-loop ones a proportional
    concurrency quota.
    """
    mix = tree.pop("mix", None)
    if mix is None:
        return tree
    total = float(mix["total_rate_per_s"])
    ratio = float(mix["malicious_ratio"])
    if not 0 <= ratio < 1:
        raise ConfigError("mix.malicious_ratio must be in [0, 1)")
    workload = tree.setdefault("workload", {})
    n_clients = int(workload.get("n_clients", 1))
    workload["rate_per_s"] = total * (1.0 - ratio) / n_clients
    attacker = tree.setdefault("attacker", {})
    if ratio > 0:
        mode = attacker.get("mode", "none")
        if mode == "baseline":
            attacker["baseline_period_us"] = max(1, int(round(1e6 / (total * ratio))))
        elif mode == "controller":
            user_slots = int(mix.get("user_slots", 16))
            attacker["concurrency_quota"] = max(1, round(ratio * user_slots))
    else:
        attacker["mode"] = "none"
    return tree


def load_scenario(path: str) -> Scenario:
    if path.endswith(".json"):
        with open(path) as fh:
            tree = json.load(fh)
    else:
        with open(path, "rb") as fh:
            tree = tomllib.load(fh)
    if not isinstance(tree, dict):
        raise ConfigError("scenario file must be a table")
    name = tree.pop("name", None)
    if not name:
        raise ConfigError("missing required key 'name'")
    baseline_ref = tree.pop("baseline_ref", None)
    sweep = None
    sweep_tree = tree.pop("sweep", None)
    if sweep_tree is not None:
        try:
            sweep = Sweep(parameter=sweep_tree["parameter"],
                          values=list(sweep_tree["values"]))
        except KeyError as exc:
            raise ConfigError(f"sweep: missing key {exc}") from None
        if not sweep.values:
            raise ConfigError("sweep.values must be non-empty")
    return Scenario(name=name, raw=tree, sweep=sweep, baseline_ref=baseline_ref)


# -- tree -> SimConfig ----------------------------------------------------------


def _take(tree: Dict[str, Any], section: str, known: Dict[str, Any]) -> Dict[str, Any]:
    """Pop known keys, rejecting anything unrecognized by full path."""
    out = {}
    for key in list(tree.keys()):
        if key not in known:
            raise ConfigError(f"unknown key '{section}.{key}'")
        out[key] = tree.pop(key)
    return out


_SIM_KEYS = {"seed": int, "horizon_us": int, "idle_tick_us": int,
             "max_model_len": int}
_KV_KEYS = {"total_blocks": int, "block_size_tokens": int,
            "watermark_blocks": int}
_SCHED_KEYS = {"token_budget_per_iter": int, "recovery_mode": str,
               "max_running": int, "output_cap": int, "tenant_quota": dict}
_QUOTA_KEYS = {"max_outstanding_per_tenant": int, "max_expansion_ratio": float}
_LAT_KEYS = {"kv_bytes_per_token": float, "bw_hbm": float, "bw_pcie": float,
             "prefill_us_per_token": float, "decode_floor_us": float,
             "noise_stddev_frac": float, "noise_floor_us": float}
_WORK_KEYS = {"kind": str, "arrival": str, "rate_per_s": float, "tier": str,
              "trace_path": str, "preset": str, "n_clients": int}
_ATK_KEYS = {"mode": str, "estimator": str, "model_path": str, "c_sat": float,
             "delta_margin": float, "delta_large": float, "delta_small": float,
             "t_wait_us": int, "probe_period_us": int, "concurrency_quota": int,
             "price_in_cents_per_mtok": int, "price_out_cents_per_mtok": int,
             "backoff_enabled": bool, "high_only": bool, "start_us": int,
             "fill_pace_us": int, "baseline_period_us": int,
             "baseline_pool": str, "staircase_levels": int,
             "staircase_hold_us": int, "staircase_peak": float}
_PROBE_KEYS = {"min_window": int, "n_bins": int, "labeling": bool}


def build_sim_config(tree: Dict[str, Any],
                     seed_override: Optional[int] = None) -> SimConfig:
    tree = copy.deepcopy(tree)
    sim_kw = _take(tree.pop("sim", {}), "sim", _SIM_KEYS)
    kv_kw = _take(tree.pop("kv", {}), "kv", _KV_KEYS)
    sched_kw = _take(tree.pop("scheduler", {}), "scheduler", _SCHED_KEYS)
    lat_kw = _take(tree.pop("latency", {}), "latency", _LAT_KEYS)
    work_tree = tree.pop("workload", {})
    atk_kw = _take(tree.pop("attacker", {}), "attacker", _ATK_KEYS)
    probe_kw = _take(tree.pop("probe", {}), "probe", _PROBE_KEYS)
    for key in tree:
        raise ConfigError(f"unknown key '{key}'")

    if "recovery_mode" in sched_kw:
        try:
            sched_kw["recovery_mode"] = RecoveryMode(sched_kw["recovery_mode"])
        except ValueError:
            raise ConfigError(
                f"scheduler.recovery_mode: {sched_kw['recovery_mode']!r}") from None
    if "tenant_quota" in sched_kw:
        quota_kw = _take(dict(sched_kw["tenant_quota"]), "scheduler.tenant_quota",
                         _QUOTA_KEYS)
        sched_kw["tenant_quota"] = TenantQuota(**quota_kw)

    max_model_len = int(sim_kw.get("max_model_len", 8192))
    workload: Optional[WorkloadConfig]
    kind = work_tree.get("kind", work_tree.get("arrival", "poisson"))
    if kind == "none":
        workload = None
    else:
        work_kw = _take(work_tree, "workload", _WORK_KEYS)
        work_kw.pop("kind", None)
        work_kw.setdefault("arrival", kind)
        workload = WorkloadConfig(max_model_len=max_model_len, **work_kw)

    if seed_override is not None:
        sim_kw["seed"] = seed_override
    config = SimConfig(
        kv=KvConfig(**kv_kw),
        scheduler=SchedulerConfig(**sched_kw),
        latency=LatencyModelConfig(**lat_kw),
        workload=workload,
        attacker=AttackerConfig(**atk_kw),
        probe=ProbeSimConfig(**probe_kw),
        **sim_kw,
    )
    config.validate()
    return config


def config_to_tree(config: SimConfig, name: str) -> Dict[str, Any]:
    """Fully resolved scenario tree; loading it reproduces the run."""
    tree: Dict[str, Any] = {
        "name": name,
        "sim": {
            "seed": config.seed,
            "horizon_us": config.horizon_us,
            "idle_tick_us": config.idle_tick_us,
            "max_model_len": config.max_model_len,
        },
        "kv": dict(config.kv.__dict__),
        "scheduler": {
            "token_budget_per_iter": config.scheduler.token_budget_per_iter,
            "recovery_mode": config.scheduler.recovery_mode.value,
        },
        "latency": dict(config.latency.__dict__),
        "attacker": dict(config.attacker.__dict__),
        "probe": dict(config.probe.__dict__),
    }
    if config.scheduler.max_running is not None:
        tree["scheduler"]["max_running"] = config.scheduler.max_running
    if config.scheduler.output_cap is not None:
        tree["scheduler"]["output_cap"] = config.scheduler.output_cap
    if config.scheduler.tenant_quota is not None:
        quota = {k: v for k, v in config.scheduler.tenant_quota.__dict__.items()
                 if v is not None}
        tree["scheduler"]["tenant_quota"] = quota
    tree["attacker"] = {k: v for k, v in tree["attacker"].items() if v is not None}
    if config.workload is None:
        tree["workload"] = {"kind": "none"}
    else:
        work = {k: v for k, v in config.workload.__dict__.items()
                if v is not None and k != "max_model_len"}
        tree["workload"] = work
    return tree
