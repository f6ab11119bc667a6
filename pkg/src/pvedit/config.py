"""Run configuration: a namespaced JSON document with a strict schema and dotted overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import ConfigError

DEFAULTS: dict = {
    "model": {
        "frames": 8,
        "height": 32,
        "width": 32,
        "channels": 3,
        "patch": 4,
        "dim": 64,
        "heads": 4,
        "layers": 4,
        "vocab": 16,
        "prompt_len": 5,
        "max_frames": 8,
        "mlp_ratio": 2,
        # training
        "train_steps": 2000,
        "batch_size": 4,
        "lr": 1e-3,
        "rms_decay": 0.99,
        "rms_eps": 1e-8,
        "p_uncond": 0.1,
        "dataset_size": 512,
        "ema_decay": 0.995,
    },
    "edit": {
        "alpha": 0.9,
        "beta": 0.5,
        "guidance_scale": 7.0,
        "lambda": 0.5,
        "max_subtasks": 6,
        "sampler": "ddpm",
        "stride": 1,
        "progression": True,
        "rer_hook": True,
        # attribute dicts; source defaults to the video's manifest record
        "source": {},
        "target": {},
    },
    "sched": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    "data": {"count": 64, "frames": 8, "height": 32, "width": 32},
    "bench": {"sizes": [128, 256, 512, 1024, 2048, 4096], "d": 64, "dv": 64, "reps": 5, "block": 64,
              "fixed_n": 256},
    "seeds": {"data": 0, "train": 0, "noise": 0},
}


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, type(default))


def _merge(base: dict, doc: dict, prefix: str = "") -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    for key, value in doc.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and base[key] and prefix == "":
            _merge(base[key], value, path + ".")
            continue
        if not _type_ok(base[key], value):
            raise ConfigError(f"{path} expects {type(base[key]).__name__}, got {value!r}")
        base[key] = float(value) if isinstance(base[key], float) else copy.deepcopy(value)


def parse_value(text: str):
    """JSON literal if it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


class RunConfig:
    def __init__(self, doc: dict | None = None, overrides=()):
        self.data = copy.deepcopy(DEFAULTS)
        _merge(self.data, doc or {})
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            self.set(key.strip(), parse_value(raw))

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        doc = {}
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text())
            except FileNotFoundError as e:
                raise ConfigError(f"config file not found: {path}") from e
            except json.JSONDecodeError as e:
                raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        return cls(doc, overrides)

    def set(self, dotted: str, value) -> None:
        ns, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override key {dotted!r} needs a namespace")
        _merge(self.data, {ns: {key: value}})

    def __getitem__(self, dotted: str):
        ns, _, key = dotted.partition(".")
        try:
            return self.data[ns][key] if key else self.data[ns]
        except KeyError:
            raise ConfigError(f"unknown config key {dotted!r}") from None

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def digest(self, *namespaces) -> str:
        """Stable hash of the chosen namespaces (all when none given)."""
        keys = namespaces or tuple(sorted(self.data))
        blob = json.dumps({k: self.data[k] for k in keys}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # -- typed views

    def model_config(self):
        from .denoiser.dit import ToyDiTConfig
        m = self.data["model"]
        try:
            return ToyDiTConfig(frames=m["frames"], height=m["height"], width=m["width"], channels=m["channels"],
                                patch=m["patch"], dim=m["dim"], heads=m["heads"], layers=m["layers"],
                                vocab=m["vocab"], prompt_len=m["prompt_len"], max_frames=m["max_frames"],
                                mlp_ratio=m["mlp_ratio"], steps=self.data["sched"]["T"])
        except ValueError as e:
            raise ConfigError(f"model.*: {e}") from e

    def train_config(self):
        from .denoiser.training import TrainConfig
        m = self.data["model"]
        return TrainConfig(steps=m["train_steps"], batch_size=m["batch_size"], lr=m["lr"], rms_decay=m["rms_decay"],
                           rms_eps=m["rms_eps"], p_uncond=m["p_uncond"], dataset_size=m["dataset_size"],
                           ema_decay=m["ema_decay"], seed=self.data["seeds"]["train"])

    def control_config(self):
        from .editing import ControlConfig
        e = self.data["edit"]
        cfg = ControlConfig(alpha=e["alpha"], beta=e["beta"], guidance_scale=e["guidance_scale"], lam=e["lambda"],
                            max_subtasks=e["max_subtasks"], sampler=e["sampler"], stride=e["stride"])
        cfg.validate()
        return cfg

    def schedule(self):
        from .errors import InvalidScheduleError
        from .schedulers import make_linear_schedule
        s = self.data["sched"]
        try:
            return make_linear_schedule(s["T"], s["beta_start"], s["beta_end"])
        except InvalidScheduleError as e:
            raise ConfigError(f"sched.*: {e}") from e
