"""Checkpoint files: model config, parameters, Adam moments, step counter and
the normalisation statistics the model was trained with."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from eltnilm.container import read_container, write_container
from eltnilm.data import NormStats
from eltnilm.errors import DataError
from eltnilm.model import ELTransformer, ModelConfig, init_params

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model_cfg: ModelConfig, params, adam=None, train_cfg=None, meta: Optional[dict] = None) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "eltnilm-checkpoint",
        "model_config": model_cfg.to_dict(),
        "step": adam.step if adam is not None else 0,
        "param_names": list(params.keys()),
        **(meta or {}),
    }
    if train_cfg is not None:
        header["train_config"] = train_cfg.to_dict()
    arrays = {f"param/{name}": t.data for name, t in params.items()}
    if adam is not None:
        arrays.update({f"adam_m/{name}": m for name, m in adam.m.items()})
        arrays.update({f"adam_v/{name}": v for name, v in adam.v.items()})
    write_container(path, header, arrays)


@dataclass
class Checkpoint:
    model: ELTransformer
    step: int
    meta: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)

    @property
    def mains_stats(self) -> Optional[NormStats]:
        d = self.meta.get("mains_stats")
        return NormStats.from_dict(d) if d else None

    @property
    def appliance_stats(self) -> Optional[NormStats]:
        d = self.meta.get("appliance_stats")
        return NormStats.from_dict(d) if d else None

    @property
    def appliance(self) -> Optional[str]:
        return self.meta.get("appliance")


def load_checkpoint(path) -> Checkpoint:
    meta, arrays = read_container(path)
    if meta.get("kind") != "eltnilm-checkpoint":
        raise DataError(f"{path}: not a checkpoint")
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    cfg = ModelConfig.from_dict(meta["model_config"]).validate()
    params = init_params(cfg)
    params.load_arrays({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    adam_m = {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")}
    adam_v = {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")}
    return Checkpoint(ELTransformer(cfg, params), int(meta.get("step", 0)), meta, adam_m, adam_v)
