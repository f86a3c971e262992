"""Run configuration: profiles, JSON loading and schema validation."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .gridoracle import GridSpec
from .problem import ProblemSpec
from .sirennet import NetworkArch
from .training import TrainConfig

PROFILES = ("ci", "desk", "paper")

_CI = {
    "arch": {"hidden_widths": [64, 64]},
    "train": {
        "samples_per_step": 2048,
        "lam": 150.0,
        "pretrain_steps": 500,
        "curriculum_steps": 4500,
        "post_steps": 1000,
        "lr": 1e-3,
        "loss_reduction": "max",
        "checkpoint_every": 500,
    },
    "grid": {"n": [31, 31, 31], "cfl": 0.5},
}

_DESK = {
    "arch": {"hidden_widths": [128, 128, 128]},
    "train": {
        "samples_per_step": 8192,
        "lam": 150.0,
        "pretrain_steps": 2000,
        "curriculum_steps": 20000,
        "post_steps": 5000,
        "lr": 1e-4,
        "loss_reduction": "max",
        "checkpoint_every": 1000,
    },
    "grid": {"n": [101, 101, 101], "cfl": 0.5},
}

# step counts are deliberately absent: full-scale runs must state them
_PAPER = {
    "arch": {"hidden_widths": [512, 512, 512]},
    "train": {"samples_per_step": 65000, "lam": 150.0, "lr": 1e-4, "loss_reduction": "max"},
    "grid": {"n": [101, 101, 101], "cfl": 0.5},
}

_PROFILE_DEFAULTS = {"ci": _CI, "desk": _DESK, "paper": _PAPER}

_TOP_KEYS = {"profile", "problem", "arch", "train", "grid", "t_samples", "output_dir", "finetune", "rollout", "verify"}
_GRID_KEYS = {"n", "cfl"}
_FINETUNE_KEYS = {"steps", "lr", "lam", "samples_per_step", "seed", "checkpoint_every", "terminal_fraction",
                  "pretrain_steps", "curriculum_steps", "post_steps", "loss_reduction"}
_ROLLOUT_KEYS = {"n_outside", "n_inside", "margin", "dt", "tolerance", "time_slices", "seed"}
_VERIFY_KEYS = {"hamiltonian_trials", "lipschitz_trials", "properness_trials", "gradient_cases",
                "param_gradient_cases", "rollout", "mutate_hamiltonian", "seed"}


def profile_defaults(profile: str) -> dict:
    """Copy of the built-in defaults for a profile."""
    if profile not in PROFILES:
        raise ConfigError("profile", f"must be one of {PROFILES}")
    return copy.deepcopy(_PROFILE_DEFAULTS[profile])


class ConfigError(ValueError):
    """Invalid run configuration; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class RunConfig:
    problem: ProblemSpec
    arch: NetworkArch
    train: TrainConfig
    grid: GridSpec
    t_samples: list
    output_dir: Path
    profile: str = "ci"
    cfl: float = 0.5
    finetune: dict = field(default_factory=dict)
    rollout: dict = field(default_factory=dict)
    verify: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _reject_unknown(d, allowed, path):
    if not isinstance(d, dict):
        raise ConfigError(path, "expected an object")
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{path}.{k}" if path else k, "unknown field")


def build_config(doc: dict, base_dir=None) -> RunConfig:
    _reject_unknown(doc, _TOP_KEYS, "")
    profile = doc.get("profile", "ci")
    if profile not in PROFILES:
        raise ConfigError("profile", f"must be one of {PROFILES}")
    merged = _merge(_PROFILE_DEFAULTS[profile], doc)

    try:
        problem = ProblemSpec.from_dict(merged.get("problem", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError("problem", str(exc)) from exc

    arch_doc = dict(merged.get("arch", {}))
    arch_doc.setdefault("in_dim", problem.n_state + 1)
    try:
        arch = NetworkArch.from_dict(arch_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError("arch", str(exc)) from exc
    if arch.in_dim != problem.n_state + 1:
        raise ConfigError("arch.in_dim", "must equal problem.n_state + 1")

    train_doc = merged.get("train", {})
    if profile == "paper":
        for key in ("pretrain_steps", "curriculum_steps", "post_steps"):
            if key not in train_doc:
                raise ConfigError(f"train.{key}", f"required in the {profile!r} profile")
    try:
        train = TrainConfig.from_dict(train_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError("train", str(exc)) from exc

    grid_doc = merged.get("grid", {})
    _reject_unknown(grid_doc, _GRID_KEYS, "grid")
    n = grid_doc.get("n", [31] * problem.n_state)
    if isinstance(n, int):
        n = [n] * problem.n_state
    if len(n) != problem.n_state:
        raise ConfigError("grid.n", "length must equal problem.n_state")
    try:
        grid = GridSpec.for_problem(problem, n)
    except ValueError as exc:
        raise ConfigError("grid.n", str(exc)) from exc
    cfl = float(grid_doc.get("cfl", 0.5))
    if not 0 < cfl < 1:
        raise ConfigError("grid.cfl", "must lie in (0, 1)")

    t_samples = [float(t) for t in merged.get("t_samples", [problem.horizon_T, 0.7 * problem.horizon_T, 0.0])]
    if not t_samples or abs(t_samples[0] - problem.horizon_T) > 1e-12:
        raise ConfigError("t_samples", "must start at horizon_T")
    if any(b >= a for a, b in zip(t_samples, t_samples[1:])) or t_samples[-1] < 0:
        raise ConfigError("t_samples", "must be strictly decreasing within [0, T]")

    for key, allowed in (("finetune", _FINETUNE_KEYS), ("rollout", _ROLLOUT_KEYS), ("verify", _VERIFY_KEYS)):
        if key in merged:
            _reject_unknown(merged[key], allowed, key)
    if "rollout" in merged.get("verify", {}):
        _reject_unknown(merged["verify"]["rollout"], _ROLLOUT_KEYS, "verify.rollout")

    out = Path(merged.get("output_dir", f"runs/{profile}"))
    if base_dir is not None and not out.is_absolute():
        out = Path(base_dir) / out
    return RunConfig(
        problem=problem,
        arch=arch,
        train=train,
        grid=grid,
        t_samples=t_samples,
        output_dir=out,
        profile=profile,
        cfl=cfl,
        finetune=dict(merged.get("finetune", {})),
        rollout=dict(merged.get("rollout", {})),
        verify=dict(merged.get("verify", {})),
        raw=doc,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from exc
    return build_config(doc)


def resolved_dict(cfg: RunConfig) -> dict:
    """Fully resolved configuration, as written into run manifests."""
    return {
        "profile": cfg.profile,
        "problem": cfg.problem.to_dict(),
        "arch": cfg.arch.to_dict(),
        "train": cfg.train.to_dict(),
        "grid": {"n": list(cfg.grid.n), "cfl": cfg.cfl},
        "t_samples": cfg.t_samples,
        "output_dir": str(cfg.output_dir),
        "finetune": cfg.finetune,
        "rollout": cfg.rollout,
        "verify": cfg.verify,
    }
