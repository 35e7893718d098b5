"""Run configuration: one JSON document per training run, plus ablation plans.

A run config names its corpus (a manifest path or a synthetic generator
config), the batch structure, loss, encoder, optimizer and evaluation
settings. ``preset`` is shorthand that fills the batch structure and loss
levels of the four standard variants from a total batch size.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .augment import AugKind, AugPolicy
from .data import LEVELS, Level, SynthConfig
from .evaluation import DEFAULT_K, DEFAULT_SUBSAMPLE
from .loss import LossConfig
from .sampler import SampleSpec
from .trainer import EncoderConfig, OptimConfig, run_digest


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


# (n_s, n_p, n_a, levels, supcon)
PRESETS: dict[str, tuple] = {
    "hidisc-patch": (1, 1, 2, (Level.PATCH,), False),
    "hidisc-slide": (2, 1, 2, (Level.PATCH, Level.SLIDE), False),
    "hidisc-patient": (2, 2, 2, LEVELS, False),
    "supcon": (2, 2, 2, LEVELS, True),
}

DISPLAY_NAMES = {
    "hidisc-patch": "HiDisc-Patch",
    "hidisc-slide": "HiDisc-Slide",
    "hidisc-patient": "HiDisc-Patient",
    "supcon": "SupCon",
}


@dataclass(frozen=True)
class EvalSettings:
    k: int = DEFAULT_K
    per_slide_subsample: Optional[int] = DEFAULT_SUBSAMPLE
    seed: int = 0
    probe_size: int = 512
    features: str = "backbone"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.per_slide_subsample is not None and self.per_slide_subsample < 1:
            raise ValueError("per_slide_subsample must be >= 1 or null")
        if self.features not in ("backbone", "projection"):
            raise ValueError(f"features must be 'backbone' or 'projection', got {self.features!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class CorpusSource:
    manifest: Optional[str] = None
    synthetic: Optional[SynthConfig] = None

    def __post_init__(self):
        if (self.manifest is None) == (self.synthetic is None):
            raise ValueError("give exactly one of 'manifest' or 'synthetic'")

    def to_dict(self) -> dict:
        if self.manifest is not None:
            return {"manifest": self.manifest}
        return {"synthetic": self.synthetic.to_dict()}


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusSource
    sample: SampleSpec
    loss: LossConfig
    encoder: EncoderConfig = EncoderConfig()
    optim: OptimConfig = OptimConfig()
    eval: EvalSettings = EvalSettings()
    batch_size: Optional[int] = None
    name: str = "run"
    out_dir: str = "runs"
    preset: Optional[str] = None

    def __post_init__(self):
        if self.batch_size is None:
            object.__setattr__(self, "batch_size", self.sample.batch_size)
        if self.batch_size != self.sample.batch_size:
            raise ConfigError(
                "batch_size",
                f"{self.batch_size} != n*n_s*n_p*n_a = {self.sample.batch_size}",
            )
        syn = self.corpus.synthetic
        if syn is not None and tuple(syn.patch_shape) != tuple(self.encoder.patch_shape):
            raise ConfigError(
                "encoder.patch_shape",
                f"{list(self.encoder.patch_shape)} does not match corpus patches {list(syn.patch_shape)}",
            )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "out_dir": self.out_dir,
            "preset": self.preset,
            "batch_size": self.batch_size,
            "corpus": self.corpus.to_dict(),
            "sample": self.sample.to_dict(),
            "loss": self.loss.to_dict(),
            "encoder": self.encoder.to_dict(),
            "optim": self.optim.to_dict(),
            "eval": self.eval.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        """Digest that training checkpoints are stamped with."""
        return run_digest(self.sample, self.loss, self.encoder, self.optim, {"corpus": self.corpus.to_dict()})

    def with_seed(self, seed: int) -> "RunConfig":
        """Same run with every training and evaluation stream reseeded; the corpus is unchanged."""
        return dataclasses.replace(
            self,
            sample=dataclasses.replace(self.sample, seed=int(seed)),
            encoder=dataclasses.replace(self.encoder, init_seed=int(seed)),
            eval=dataclasses.replace(self.eval, seed=int(seed)),
        )

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "RunConfig":
        return run_config_from_dict(d, base_dir)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError("", f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"{path} is not valid JSON: {exc}") from None
        return run_config_from_dict(d, path.parent)


def _build(path: str, fn, *args):
    try:
        return fn(*args)
    except ConfigError as exc:
        raise ConfigError(f"{path}.{exc.path}" if exc.path else path, str(exc).split(": ", 1)[-1]) from None
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(path, str(exc)) from None


def _section(d: dict, key: str) -> dict:
    val = d.get(key, {})
    if not isinstance(val, dict):
        raise ConfigError(key, "must be an object")
    return dict(val)


def _check_keys(path: str, d: dict, allowed) -> None:
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"{path}.{extra[0]}" if path else extra[0], "unknown field")


def _preset_parts(name: str, total: int, seed: int, policy: AugPolicy):
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    n_s, n_p, n_a, levels, supcon = PRESETS[name]
    try:
        spec = SampleSpec.for_total(total, n_s, n_p, n_a, policy=policy, seed=seed)
    except ValueError as exc:
        raise ConfigError("batch_size", str(exc)) from None
    return spec, levels, supcon


def run_config_from_dict(d: dict, base_dir: Optional[Path] = None) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("", "config must be a JSON object")
    _check_keys("", d, ("name", "out_dir", "preset", "batch_size", "corpus", "sample", "loss", "encoder", "optim", "eval"))

    corpus_d = _section(d, "corpus")
    _check_keys("corpus", corpus_d, ("manifest", "synthetic"))
    if "synthetic" in corpus_d and corpus_d["synthetic"] is not None:
        corpus_d["synthetic"] = _build("corpus.synthetic", SynthConfig.from_dict, corpus_d["synthetic"])
    if corpus_d.get("manifest") is not None and base_dir is not None:
        corpus_d["manifest"] = str((Path(base_dir) / corpus_d["manifest"]).resolve())
    corpus = _build("corpus", lambda: CorpusSource(**corpus_d))

    sample_d = _section(d, "sample")
    loss_d = _section(d, "loss")
    preset = d.get("preset")
    if preset is not None and "n" in sample_d:
        # explicit structure (e.g. a saved config): it must agree with the preset
        spec = _build("sample", SampleSpec.from_dict, sample_d)
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        n_s, n_p, n_a, levels, supcon = PRESETS[preset]
        if (spec.n_s, spec.n_p, spec.n_a) != (n_s, n_p, n_a):
            raise ConfigError("sample", f"preset {preset} needs n_s={n_s}, n_p={n_p}, n_a={n_a}")
        want = {"levels": [lv.value for lv in levels], "supcon": supcon}
        for key, val in want.items():
            if key in loss_d and loss_d[key] != val:
                raise ConfigError(f"loss.{key}", f"preset {preset} fixes {key} to {val}")
        loss_d.update(want)
    elif preset is not None:
        total = d.get("batch_size")
        if not isinstance(total, int) or total < 1:
            raise ConfigError("batch_size", "a preset needs a positive integer batch_size")
        _check_keys("sample", sample_d, ("policy", "seed"))
        policy = _build("sample.policy", AugPolicy.from_dict, sample_d.get("policy", {}))
        spec, levels, supcon = _preset_parts(preset, total, sample_d.get("seed", 0), policy)
        if "levels" in loss_d or "supcon" in loss_d:
            raise ConfigError("loss.levels", "levels and supcon are fixed by the preset")
        loss_d.update(levels=[lv.value for lv in levels], supcon=supcon)
    else:
        spec = _build("sample", SampleSpec.from_dict, sample_d)
    loss = _build("loss", LossConfig.from_dict, loss_d)

    encoder_d = _section(d, "encoder")
    if "patch_shape" not in encoder_d and corpus.synthetic is not None:
        encoder_d["patch_shape"] = list(corpus.synthetic.patch_shape)
    encoder = _build("encoder", EncoderConfig.from_dict, encoder_d)
    optim = _build("optim", OptimConfig.from_dict, _section(d, "optim"))
    ev = _build("eval", lambda: EvalSettings(**_section(d, "eval")))

    return _build(
        "",
        lambda: RunConfig(
            corpus=corpus,
            sample=spec,
            loss=loss,
            encoder=encoder,
            optim=optim,
            eval=ev,
            batch_size=d.get("batch_size"),
            name=str(d.get("name", "run")),
            out_dir=str(d.get("out_dir", "runs")),
            preset=preset,
        ),
    )


def preset_config(preset: str, batch_size: int = 64, synthetic: Optional[SynthConfig] = None, **overrides) -> RunConfig:
    """A synthetic-corpus run config for one of the standard variants."""
    d: dict[str, Any] = {
        "name": preset,
        "preset": preset,
        "batch_size": batch_size,
        "corpus": {"synthetic": (synthetic or SynthConfig()).to_dict()},
    }
    for key, val in overrides.items():
        d[key] = val
    return run_config_from_dict(d)


# ---------------------------------------------------------------------------
# ablations

AXES = ("variant", "lambda", "lr", "batch", "augment", "iterations")


@dataclass(frozen=True)
class AblationPlan:
    """Base config, one axis, its values and a list of seeds.

    Axis values: ``variant`` takes preset names; ``lambda`` takes
    ``[lambda_patient, lambda_slide, lambda_patch]`` triples; ``lr`` peak
    learning rates; ``batch`` total batch sizes; ``augment`` policy kinds;
    ``iterations`` training lengths.
    """

    base: RunConfig
    axis: str
    values: tuple
    seeds: tuple = (0, 1, 2)
    name: str = "sweep"

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(_freeze(v) for v in self.values))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.axis not in AXES:
            raise ConfigError("axis", f"unknown axis {self.axis!r}; choose from {list(AXES)}")
        if not self.values:
            raise ConfigError("values", "need at least one value")
        if not self.seeds:
            raise ConfigError("seeds", "need at least one seed")
        for i, v in enumerate(self.values):
            _build(f"values[{i}]", self.config_for, v, self.seeds[0])

    def cell_label(self, value) -> str:
        if self.axis == "variant":
            return DISPLAY_NAMES.get(value, str(value))
        if self.axis == "lambda":
            return "lambda=" + ",".join(f"{x:g}" for x in value)
        return f"{self.axis}={value}"

    def config_for(self, value, seed: int) -> RunConfig:
        d = copy.deepcopy(self.base.to_dict())
        if self.axis == "variant":
            d["preset"] = value
            d["sample"] = {"policy": d["sample"]["policy"], "seed": d["sample"]["seed"]}
            d["loss"] = {k: v for k, v in d["loss"].items() if k not in ("levels", "supcon")}
            d["name"] = value
        elif self.axis == "lambda":
            if len(value) != 3 or min(value) < 0:
                raise ConfigError("", "lambda values are [lambda_patient, lambda_slide, lambda_patch] triples of nonnegative numbers")
            d["loss"].update(lambda_patient=float(value[0]), lambda_slide=float(value[1]), lambda_patch=float(value[2]))
        elif self.axis == "lr":
            d["optim"]["peak_lr"] = float(value)
        elif self.axis == "batch":
            s = d["sample"]
            per = s["n_s"] * s["n_p"] * s["n_a"]
            if int(value) % per:
                raise ConfigError("", f"batch {value} is not a multiple of n_s*n_p*n_a = {per}")
            s["n"] = int(value) // per
            d["batch_size"] = int(value)
        elif self.axis == "augment":
            d["sample"]["policy"]["kind"] = AugKind(value).value
        elif self.axis == "iterations":
            d["optim"]["total_iterations"] = int(value)
        return run_config_from_dict(d).with_seed(seed)

    def runs(self):
        """``(value, seed, config)`` for every cell and seed, in plan order."""
        for v in self.values:
            for s in self.seeds:
                yield v, s, self.config_for(v, s)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "base": self.base.to_dict(),
            "axis": self.axis,
            "values": [list(v) if isinstance(v, tuple) else v for v in self.values],
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "AblationPlan":
        if not isinstance(d, dict):
            raise ConfigError("", "plan must be a JSON object")
        _check_keys("", d, ("name", "base", "axis", "values", "seeds"))
        if "base" not in d:
            raise ConfigError("base", "missing")
        base = _build("base", run_config_from_dict, d["base"], base_dir)
        return cls(base, d.get("axis", ""), tuple(d.get("values", ())), tuple(d.get("seeds", (0, 1, 2))),
                   str(d.get("name", "sweep")))

    @classmethod
    def from_file(cls, path) -> "AblationPlan":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError("", f"plan file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"{path} is not valid JSON: {exc}") from None
        return cls.from_dict(d, path.parent)


def _freeze(v):
    return tuple(v) if isinstance(v, list) else v


def is_plan(d: dict) -> bool:
    return isinstance(d, dict) and "axis" in d and "base" in d

