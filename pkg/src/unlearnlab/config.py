"""Experiment configuration: one YAML document per experiment.

Defaults below are the full schema; a config file may set any subset and
unknown keys are rejected. The fully-resolved document is echoed into the
output directory before any computation, and the config digest (which
excludes the output path) stamps checkpoints and reports so any artifact can
be traced to the exact settings that produced it.
"""

from __future__ import annotations

import copy
import hashlib
from pathlib import Path

import yaml

from .bilevel import BilevelConfig
from .denoiser import DenoiserConfig
from .diffusion import NoiseSchedule, make_schedule
from .mixture import MixtureSpec, default_mixture
from .objectives import FtWeights, UnlearnSpec

__all__ = ["ExperimentConfig", "DEFAULTS"]

DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "runs/exp",
    "mixture": {
        "concepts": 8,
        "radius": 5.0,
        "variance": 0.15,
        "scale": 1.0,
        "n_per_concept": 2000,
    },
    "schedule": {
        "kind": "vp-linear",
        "timesteps": 100,
        "beta_min": 1.0e-4,
        "beta_max": 0.25,
    },
    "denoiser": {
        "input_dim": 2,
        "hidden": [128, 128, 128],
        "time_embed_dim": 16,
        "concept_embed_dim": 16,
        "feature_taps": [1, 2],
    },
    "teacher": {
        "iters": 9000,
        "lr": 1.0e-3,
        "optimizer": "adam",
        "batch_size": 64,
        "uncond_drop": 0.1,
        "eval_every": 500,
    },
    "prune": {
        "strategy": "magnitude",
        "keep_fraction": 0.8,
        "scope": "global",
    },
    "finetune": {
        "iters": 5000,
        "lr": 1.0e-3,
        "optimizer": "adam",
        "batch_size": 64,
        "eval_every": 500,
        "init": "pruned",  # or "random"
        "weights": {"diff": 1.0, "out_kd": 2.0, "feat_kd": 0.1},
    },
    "unlearn": {
        "mode": "negative-guidance",
        "target": 1,
        "anchor": 0,
        "guidance_eta": 1.0,
        "ft_excludes_target": True,
    },
    "bilevel": {
        "upper_iters": 250,
        "lower_iters": 20,
        "penalty": 100.0,
        # desk-scale rates; production-scale references are lower_lr 1e-6,
        # upper_lr 5e-6, far too small for a 2-D model
        "lower_lr": 1.0e-3,
        "upper_lr": 2.0e-4,
        "shadow_policy": "persistent-shadow",
        "batch_size": 64,
        "optimizer": "sgd",
        "diagnostics": True,
        "ema_decay": None,  # weight average for published checkpoints
    },
    "two_stage": {
        "ft_iters": 5000,
        "unlearn_iters": 250,
        "lr": 2.0e-4,  # unlearning-stage rate; fine-tune stage uses bilevel.lower_lr
    },
    "eval": {
        "n": 1000,
        "heldout_n": 2000,
        "guidance": 0.0,
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise KeyError(f"unknown config key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise TypeError(f"config key '{where}' must be a mapping")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


class ExperimentConfig:
    """Resolved configuration with typed accessors for the domain objects."""

    def __init__(self, overrides: dict | None = None):
        self.raw = _merge(DEFAULTS, overrides or {})

    @staticmethod
    def load(path: str | Path, seed: int | None = None,
             out_dir: str | None = None) -> "ExperimentConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        cfg = ExperimentConfig(data)
        if seed is not None:
            cfg.raw["seed"] = int(seed)
        if out_dir is not None:
            cfg.raw["out_dir"] = str(out_dir)
        return cfg

    # -- serialization --------------------------------------------------------

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True, default_flow_style=False)

    def echo(self, out_dir: str | Path | None = None) -> Path:
        """Write the resolved document into the output directory."""
        out = Path(out_dir if out_dir is not None else self.raw["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        path = out / "config.yaml"
        path.write_text(self.to_yaml())
        return path

    def digest(self) -> str:
        """Hash of everything that affects results (output path excluded)."""
        slim = copy.deepcopy(self.raw)
        slim.pop("out_dir", None)
        text = yaml.safe_dump(slim, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    # -- typed accessors -------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def out_dir(self) -> Path:
        return Path(self.raw["out_dir"])

    def mixture_spec(self) -> MixtureSpec:
        m = self.raw["mixture"]
        return default_mixture(concepts=int(m["concepts"]),
                               radius=float(m["radius"]),
                               variance=float(m["variance"]),
                               scale=float(m["scale"]))

    def schedule(self) -> NoiseSchedule:
        s = self.raw["schedule"]
        return make_schedule(s["kind"], timesteps=int(s["timesteps"]),
                             beta_min=float(s["beta_min"]),
                             beta_max=float(s["beta_max"]))

    def denoiser_config(self) -> DenoiserConfig:
        d = self.raw["denoiser"]
        return DenoiserConfig(
            input_dim=int(d["input_dim"]),
            hidden=tuple(int(h) for h in d["hidden"]),
            time_embed_dim=int(d["time_embed_dim"]),
            concept_count=int(self.raw["mixture"]["concepts"]) + 1,
            concept_embed_dim=int(d["concept_embed_dim"]),
            feature_taps=tuple(int(t) for t in d["feature_taps"]),
        )

    def ft_weights(self) -> FtWeights:
        w = self.raw["finetune"]["weights"]
        return FtWeights(w_diff=float(w["diff"]), w_outkd=float(w["out_kd"]),
                         w_featkd=float(w["feat_kd"]))

    def unlearn_spec(self) -> UnlearnSpec:
        u = self.raw["unlearn"]
        return UnlearnSpec(mode=u["mode"], target=int(u["target"]),
                           anchor=int(u["anchor"]),
                           guidance_eta=float(u["guidance_eta"]))

    def bilevel_config(self) -> BilevelConfig:
        b = self.raw["bilevel"]
        return BilevelConfig(
            upper_iters=int(b["upper_iters"]),
            lower_iters=int(b["lower_iters"]),
            penalty=float(b["penalty"]),
            lower_lr=float(b["lower_lr"]),
            upper_lr=float(b["upper_lr"]),
            shadow_policy=b["shadow_policy"],
            batch_size=int(b["batch_size"]),
            optimizer=b["optimizer"],
            diagnostics=bool(b["diagnostics"]),
            ema_decay=None if b["ema_decay"] is None else float(b["ema_decay"]),
            unlearn=self.unlearn_spec(),
            ft_weights=self.ft_weights(),
        )

    def ft_concepts(self) -> list[int] | None:
        """Concepts the fine-tune sampler draws during unlearning runs."""
        spec = self.mixture_spec()
        if self.raw["unlearn"]["ft_excludes_target"]:
            target = int(self.raw["unlearn"]["target"])
            return [c for c in spec.real_concepts() if c != target]
        return spec.real_concepts()
