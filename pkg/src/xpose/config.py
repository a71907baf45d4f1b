"""Run configuration: JSON schema, defaults and cross-reference checks.

A config names the dataset, the zoo (one training recipe per model), the
attacks and the protocols to run. Budgets (``epsilon``, ``step_size``) are
written in 0-255 pixel levels, as is customary for these attacks, and
converted to [0, 1] units on load.
"""

import json
import os
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .attack import VARIANTS, AttackConfig
from .exceptions import ConfigError
from .xform import TransformSpec
from .zoo import ARCHITECTURES, TrainConfig

__all__ = ["SCHEMA", "RunConfig", "load_config", "parse_config", "default_config", "SEED_ENV"]

SEED_ENV = "XPOSE_SEED"

_NAME = {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"}
_TRANSFORM = {"type": "string", "pattern": "^(identity|transpose|fliplr|rotate:-?[0-9]+(\\.[0-9]+)?)$"}
_NAMES = {"type": "array", "items": _NAME, "minItems": 1, "uniqueItems": True}


def _obj(properties, required=()):
    return {
        "type": "object",
        "properties": properties,
        "required": list(required),
        "additionalProperties": False,
    }


_MODEL = _obj(
    {
        "name": _NAME,
        "arch": {"enum": list(ARCHITECTURES)},
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "learning_rate": {"type": "number", "minimum": 0},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "adv_epsilon": {"type": ["number", "null"], "exclusiveMinimum": 0, "maximum": 255},
        "adv_steps": {"type": "integer", "minimum": 1},
    },
    required=("name", "arch"),
)

_ATTACK = _obj(
    {
        "name": _NAME,
        "variant": {"enum": list(VARIANTS)},
        "epsilon": {"type": "number", "minimum": 0, "maximum": 255},
        "iters": {"type": "integer", "minimum": 1},
        "step_size": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0},
        "diversity_prob": {"type": "number", "minimum": 0, "maximum": 1},
        "resize_ratio": {"type": "number", "minimum": 1},
        "kernel_size": {"type": "integer", "minimum": 1},
        "n_copies": {"type": "integer", "minimum": 1},
        "n_samples": {"type": "integer", "minimum": 1},
        "balance": {"type": "number", "minimum": 0, "maximum": 1},
        "neighborhood": {"type": "number", "minimum": 0},
        "pre_iters": {"type": "integer", "minimum": 0},
        "global_factor": {"type": "number", "minimum": 1},
    },
    required=("name", "variant"),
)

_PROTOCOL = {
    "oneOf": [
        _obj({"kind": {"const": "clean"}, "transform": _TRANSFORM}, required=("kind",)),
        _obj(
            {
                "kind": {"const": "single"},
                "whitebox": _NAME,
                "blackboxes": _NAMES,
                "attacks": _NAMES,
                "transform": _TRANSFORM,
            },
            required=("kind", "whitebox"),
        ),
        _obj(
            {
                "kind": {"const": "ensemble"},
                "members": _NAMES,
                "blackboxes": _NAMES,
                "attacks": _NAMES,
                "transform": _TRANSFORM,
            },
            required=("kind", "members"),
        ),
        _obj(
            {
                "kind": {"const": "rotate1"},
                "whitebox": _NAME,
                "blackboxes": _NAMES,
                "attacks": _NAMES,
                "angles": {"type": "array", "items": {"type": "number"}, "minItems": 1},
            },
            required=("kind", "whitebox"),
        ),
        _obj(
            {
                "kind": {"const": "sweep"},
                "whitebox": _NAME,
                "blackboxes": _NAMES,
                "attack": _NAME,
                "stride": {"type": "integer", "minimum": 1, "maximum": 360},
            },
            required=("kind", "whitebox", "attack"),
        ),
        _obj(
            {
                "kind": {"const": "featdiff"},
                "whitebox": _NAME,
                "attack": _NAME,
                "blackbox": _NAME,
                "layer": {"type": "string", "minLength": 1},
                "k": {"type": "integer", "minimum": 1},
            },
            required=("kind", "whitebox", "attack", "blackbox", "layer"),
        ),
    ]
}

SCHEMA = _obj(
    {
        "output_dir": {"type": "string", "minLength": 1},
        "seed": {"type": "integer", "minimum": 0},
        "eval_images": {"type": "integer", "minimum": 1},
        "dataset": _obj(
            {
                "kind": {"enum": ["synthetic", "cifar10-bin"]},
                "path": {"type": ["string", "null"]},
                "size": {"const": 32},
                "classes": {"type": "integer", "minimum": 2, "maximum": 10},
                "seed": {"type": "integer", "minimum": 0},
                "n_train": {"type": "integer", "minimum": 1},
                "n_test": {"type": "integer", "minimum": 1},
            },
            required=("kind",),
        ),
        "zoo": {"type": "array", "items": _MODEL, "minItems": 1},
        "attacks": {"type": "array", "items": _ATTACK},
        "protocols": {"type": "array", "items": _PROTOCOL},
    },
    required=("dataset", "zoo"),
)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    arch: str
    train: TrainConfig


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration with defaults filled in."""

    output_dir: Path
    seed: int
    eval_images: int
    dataset: dict
    models: tuple
    attacks: dict
    protocols: tuple
    raw: dict

    def model(self, name):
        for spec in self.models:
            if spec.name == name:
                return spec
        raise KeyError(name)

    @property
    def model_names(self):
        return [m.name for m in self.models]


def _pointer(parts):
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in parts) if parts else ""


def _schema_error(doc):
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if not errors:
        return None
    err = jsonschema.exceptions.best_match(errors)
    # descend into oneOf to report the branch whose "kind" matched
    while err.context:
        kind = err.instance.get("kind") if isinstance(err.instance, dict) else None
        branch = [
            e for e in err.context
            if kind is not None and e.schema_path and e.schema_path[0] == _protocol_branch(kind)
        ]
        err = jsonschema.exceptions.best_match(branch or err.context)
    path = list(err.absolute_path)
    if err.validator == "additionalProperties" and isinstance(err.instance, dict):
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        if extra:
            path.append(extra[0])
            return ConfigError(f"unknown key {extra[0]!r}", _pointer(path))
    return ConfigError(err.message, _pointer(path))


def _protocol_branch(kind):
    kinds = [b["properties"]["kind"]["const"] for b in _PROTOCOL["oneOf"]]
    return kinds.index(kind) if kind in kinds else -1


def default_config(output_dir="xpose-out"):
    """A small end-to-end run covering every protocol."""
    zoo = [{"name": arch, "arch": arch} for arch in ARCHITECTURES]
    return {
        "output_dir": str(output_dir),
        "seed": 0,
        "eval_images": 100,
        "dataset": {"kind": "synthetic", "size": 32, "classes": 10, "n_train": 2000, "n_test": 500},
        "zoo": zoo,
        "attacks": [
            {"name": "MIFGSM", "variant": "MIFGSM", "epsilon": 8},
            {"name": "DIM", "variant": "DIM", "epsilon": 8},
            {"name": "TIM", "variant": "TIM", "epsilon": 8},
        ],
        "protocols": [
            {"kind": "clean", "transform": "transpose"},
            {"kind": "single", "whitebox": "plain", "transform": "transpose"},
            {"kind": "ensemble", "members": ["plain", "wide"], "transform": "transpose"},
            {"kind": "rotate1", "whitebox": "plain"},
            {"kind": "sweep", "whitebox": "plain", "attack": "MIFGSM", "stride": 10},
            {"kind": "featdiff", "whitebox": "plain", "attack": "MIFGSM", "blackbox": "vgg", "layer": "relu3_1"},
        ],
    }


def _attack_config(entry, seed):
    params = {k: v for k, v in entry.items() if k != "name"}
    for key in ("epsilon", "step_size"):
        if params.get(key) is not None:
            params[key] = params[key] / 255.0
    return AttackConfig(seed=seed, **params)


def _check_refs(doc, cfg):
    names = cfg.model_names
    if len(set(names)) != len(names):
        dup = next(n for n in names if names.count(n) > 1)
        raise ConfigError(f"duplicate model name {dup!r}", _pointer(["zoo", names.index(dup, names.index(dup) + 1), "name"]))
    attack_names = [a["name"] for a in doc.get("attacks", [])]
    if len(set(attack_names)) != len(attack_names):
        dup = next(n for n in attack_names if attack_names.count(n) > 1)
        raise ConfigError(f"duplicate attack name {dup!r}", _pointer(["attacks", attack_names.index(dup, attack_names.index(dup) + 1), "name"]))
    for i, proto in enumerate(doc.get("protocols", [])):
        at = ["protocols", i]
        white_key = "members" if "members" in proto else "whitebox"
        white = proto.get("members") or ([proto["whitebox"]] if "whitebox" in proto else [])
        refs = [([white_key, j] if white_key == "members" else [white_key], r) for j, r in enumerate(white)]
        refs += [(["blackboxes", j], r) for j, r in enumerate(proto.get("blackboxes", []))]
        if "blackbox" in proto:
            refs.append((["blackbox"], proto["blackbox"]))
        for where, ref in refs:
            if ref not in names:
                raise ConfigError(f"unknown model {ref!r}", _pointer(at + where))
        blacks = proto.get("blackboxes") or [n for n in names if n not in white]
        if white and (set(blacks) & set(white) or not blacks):
            raise ConfigError("white-box and black-box sets must be disjoint and non-empty", _pointer(at))
        arefs = [(["attacks", j], r) for j, r in enumerate(proto.get("attacks", []))]
        if "attack" in proto:
            arefs.append((["attack"], proto["attack"]))
        for where, ref in arefs:
            if ref not in attack_names:
                raise ConfigError(f"unknown attack {ref!r}", _pointer(at + where))
        if proto["kind"] == "sweep" and 360 % proto.get("stride", 10):
            raise ConfigError("stride must divide 360", _pointer(at + ["stride"]))
        if proto["kind"] == "featdiff":
            if proto["blackbox"] == proto["whitebox"]:
                raise ConfigError("featdiff black box must differ from the white box", _pointer(at + ["blackbox"]))
            from .zoo import build_model

            probe = build_model(cfg.model(proto["blackbox"]).arch, (32, 32, 3, cfg.dataset["classes"]))
            if proto["layer"] not in probe.layer_names:
                raise ConfigError(f"layer {proto['layer']!r} not in {proto['blackbox']}", _pointer(at + ["layer"]))


def parse_config(doc, env=None):
    """Validate a config document and fill in defaults.

    ``env`` defaults to ``os.environ``; a ``XPOSE_SEED`` entry replaces both
    the run seed and the dataset seed.
    """
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object", "")
    err = _schema_error(doc)
    if err is not None:
        raise err
    env = os.environ if env is None else env
    seed = doc.get("seed", 0)
    data = {"path": None, "size": 32, "classes": 10, "n_train": 2000, "n_test": 500, **doc["dataset"]}
    data.setdefault("seed", seed)
    if env.get(SEED_ENV) not in (None, ""):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer", "/seed") from None
        if seed < 0:
            raise ConfigError(f"{SEED_ENV} must be non-negative", "/seed")
        data["seed"] = seed
    if data["kind"] == "cifar10-bin" and not data["path"]:
        raise ConfigError("cifar10-bin datasets need a path", "/dataset/path")
    models = []
    for i, entry in enumerate(doc["zoo"]):
        params = {k: v for k, v in entry.items() if k not in ("name", "arch")}
        if params.get("adv_epsilon") is not None:
            params["adv_epsilon"] = params["adv_epsilon"] / 255.0
        models.append(ModelSpec(entry["name"], entry["arch"], TrainConfig(seed=seed + i, **params)))
    attacks = {}
    for i, entry in enumerate(doc.get("attacks", [])):
        try:
            attacks[entry["name"]] = _attack_config(entry, seed)
        except ValueError as exc:
            raise ConfigError(str(exc), _pointer(["attacks", i])) from None
    cfg = RunConfig(
        output_dir=Path(doc.get("output_dir", "xpose-out")),
        seed=seed,
        eval_images=doc.get("eval_images", 100),
        dataset=data,
        models=tuple(models),
        attacks=attacks,
        protocols=tuple(_protocol_defaults(p) for p in doc.get("protocols", [])),
        raw=doc,
    )
    _check_refs(doc, cfg)
    return cfg


def _protocol_defaults(proto):
    out = dict(proto)
    if out["kind"] in ("clean", "single", "ensemble"):
        out.setdefault("transform", "transpose")
        TransformSpec.parse(out["transform"])
    if out["kind"] == "rotate1":
        out.setdefault("angles", [1.0, -1.0])
    if out["kind"] == "sweep":
        out.setdefault("stride", 10)
    if out["kind"] == "featdiff":
        out.setdefault("k", 16)
    return out


def load_config(path, env=None):
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found", "") from None
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}", "") from None
    return parse_config(doc, env)
