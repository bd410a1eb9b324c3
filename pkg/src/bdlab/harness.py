"""Config-driven experiment pipeline with hashed, resumable stage checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml
from filelock import FileLock, Timeout

from .baselines import NcConfig, blur_evaluate, early_defense_points, fp_sweep, nc_detect
from .data import clean_detection_set, load_dataset, save_dataset, split, synth_dataset
from .mamf import DetectionConfig, MamfResult, scan
from .model import (attack_success_rate, build_cnn, clean_accuracy, collateral_damage, load_model, save_model,
                    train)
from .poison import (AttackSpec, PerceptiblePattern, Placement, Variant, craft_attack,
                     default_pattern, load_pattern, make_backdoor_test_set, save_pattern)

log = logging.getLogger("bdlab")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage


class LockedError(RuntimeError):
    pass


# -- configuration ------------------------------------------------------------------------------

@dataclass
class DatasetSection:
    class_count: int = 5
    image_size: int = 24
    channels: int = 3
    train_per_class: int = 500
    test_per_class: int = 100


@dataclass
class AttackSection:
    pattern: str = "quadrants"          # built-in name or a path to a pattern container
    pattern_size: int = 6
    source_classes: list[int] | str = field(default_factory=lambda: [0])   # or "all"
    target_class: int = 1
    poison_per_source: int = 50
    placement: str = "random"           # random | fixed
    anchor: str | list[int] | None = None


@dataclass
class TrainingSection:
    arch: str = "tiny"
    lr: float = 1e-3
    batch: int = 32
    epochs: int = 40


@dataclass
class DetectionSection:
    r_min: float = 0.08
    r_max: float = 0.22
    anchor: str | list[int] = "top-left"
    pi: float = 0.7
    lr: float = 0.5
    epochs: int = 100
    batch: int = 32
    early_stop: bool = True
    max_width_count: int | None = None
    clean_per_class: int = 50


@dataclass
class NcSection:
    enabled: bool = True
    lambdas: list[float] = field(default_factory=lambda: [0.05, 0.1, 0.5])
    phi: float = 0.9
    lr: float = 0.05
    epochs: int = 200
    batch: int = 32
    clean_per_class: int = 20
    models: list[str] = field(default_factory=lambda: ["attacked"])


@dataclass
class FpSection:
    enabled: bool = True
    stride: int = 1


@dataclass
class BlurSection:
    enabled: bool = True
    filters: list[str] = field(default_factory=lambda: ["average", "median"])
    sizes: list[int] = field(default_factory=lambda: [2, 3])


@dataclass
class RobustnessSection:
    enabled: bool = True
    noise: list[float] = field(default_factory=lambda: [0.01, 0.25, 1.0])
    crop: list[float] = field(default_factory=lambda: [0.64, 0.36])
    fixed_location: bool = True
    fixed_anchor: str | list[int] = "bottom-left"
    shift: list[int] = field(default_factory=lambda: [-1, 0])          # the headline one-row shift
    extra_shifts: list[list[int]] = field(default_factory=list)        # reported for context only


_SECTIONS = {
    "dataset": DatasetSection, "attack": AttackSection, "training": TrainingSection,
    "detection": DetectionSection, "nc": NcSection, "fp": FpSection, "blur": BlurSection,
    "robustness": RobustnessSection,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/experiment"
    workers: int = 1
    dataset: DatasetSection = field(default_factory=DatasetSection)
    attack: AttackSection = field(default_factory=AttackSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    detection: DetectionSection = field(default_factory=DetectionSection)
    nc: NcSection = field(default_factory=NcSection)
    fp: FpSection = field(default_factory=FpSection)
    blur: BlurSection = field(default_factory=BlurSection)
    robustness: RobustnessSection = field(default_factory=RobustnessSection)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        top = {f.name for f in fields(cls)}
        unknown = set(d) - top - {"baselines"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        # baselines may be grouped under one key
        for k, v in (d.pop("baselines", None) or {}).items():
            if k not in ("nc", "fp", "blur"):
                raise ConfigError(f"unknown baseline {k!r}")
            d[k] = v
        kwargs: dict[str, Any] = {}
        for name, value in d.items():
            if name in _SECTIONS:
                sec = _SECTIONS[name]
                if not isinstance(value, dict):
                    raise ConfigError(f"section {name!r} must be a mapping")
                bad = set(value) - {f.name for f in fields(sec)}
                if bad:
                    raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
                kwargs[name] = sec(**value)
            else:
                kwargs[name] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(changes)
        return ExperimentConfig.from_dict(d)

    # -- derived ----------------------------------------------------------------------------
    @property
    def sources(self) -> tuple[int, ...]:
        s = self.attack.source_classes
        if s == "all":
            return tuple(c for c in range(self.dataset.class_count) if c != self.attack.target_class)
        return tuple(int(c) for c in s)

    def detection_config(self, **overrides) -> DetectionConfig:
        d = self.detection
        kw = dict(r_min=d.r_min, r_max=d.r_max, anchor=d.anchor, pi=d.pi, lr=d.lr, epochs=d.epochs,
                  batch=d.batch, max_width_count=d.max_width_count, early_stop=d.early_stop, seed=self.seed)
        kw.update(overrides)
        return DetectionConfig(**kw)

    def nc_config(self, lam: float) -> NcConfig:
        n = self.nc
        return NcConfig(lam=lam, phi=n.phi, lr=n.lr, epochs=n.epochs, batch=n.batch, seed=self.seed)

    def validate(self) -> None:
        ds, at = self.dataset, self.attack
        k = ds.class_count
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        if not 3 <= k <= 10:
            raise ConfigError("dataset.class_count must lie in [3, 10]")
        if ds.train_per_class < 1 or ds.test_per_class < 1:
            raise ConfigError("per-class counts must be positive")
        if not 0 <= at.target_class < k:
            raise ConfigError(f"attack.target_class {at.target_class} out of range for K={k}")
        if at.source_classes != "all":
            if not isinstance(at.source_classes, list) or not at.source_classes:
                raise ConfigError("attack.source_classes must be a nonempty list or 'all'")
            for s in at.source_classes:
                if not 0 <= s < k:
                    raise ConfigError(f"source class {s} out of range for K={k}")
            if at.target_class in at.source_classes:
                raise ConfigError("attack.target_class must not be a source class")
        if at.poison_per_source < 1 or at.poison_per_source > ds.train_per_class:
            raise ConfigError("attack.poison_per_source must lie in [1, train_per_class]")
        if at.placement not in ("random", "fixed"):
            raise ConfigError("attack.placement must be 'random' or 'fixed'")
        if at.placement == "fixed" and at.anchor is None:
            raise ConfigError("fixed placement needs attack.anchor")
        if at.pattern_size < 1 or at.pattern_size > ds.image_size:
            raise ConfigError("attack.pattern_size must fit the image")
        if at.pattern != "quadrants" and not Path(at.pattern).exists():
            raise ConfigError(f"unknown pattern {at.pattern!r}")
        try:
            self.detection_config()
            for lam in self.nc.lambdas:
                self.nc_config(lam)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.detection.clean_per_class < 1 or self.nc.clean_per_class < 1:
            raise ConfigError("clean_per_class must be positive")
        if set(self.nc.models) - {"attacked", "clean"}:
            raise ConfigError("nc.models entries must be 'attacked' or 'clean'")
        if set(self.blur.filters) - {"average", "median"}:
            raise ConfigError("blur.filters entries must be 'average' or 'median'")
        if any(s < 2 or s > ds.image_size for s in self.blur.sizes):
            raise ConfigError("blur.sizes must lie in [2, image_size]")
        if self.fp.stride < 1:
            raise ConfigError("fp.stride must be positive")
        if any(not 0 < a <= 1 for a in self.robustness.crop) or any(s < 0 for s in self.robustness.noise):
            raise ConfigError("invalid robustness variants")

    def pattern(self) -> PerceptiblePattern:
        at = self.attack
        if at.pattern == "quadrants":
            return default_pattern(at.pattern_size, self.dataset.channels)
        return load_pattern(at.pattern)

    def attack_spec(self, placement: Placement | None = None) -> AttackSpec:
        at = self.attack
        if placement is None:
            placement = Placement("random") if at.placement == "random" else Placement.fixed(at.anchor)
        return AttackSpec(self.pattern(), self.sources, at.target_class, at.poison_per_source, placement, self.seed)


# -- checkpointing ----------------------------------------------------------------------------------

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


class Runner:
    """Runs named stages in one output directory, skipping those whose key and file hashes match."""

    def __init__(self, cfg: ExperimentConfig, out: str | Path | None = None):
        self.cfg = cfg
        self.out = Path(out or cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out / "manifest.json"
        self.manifest = json.loads(self.manifest_path.read_text()) if self.manifest_path.exists() else {}
        self.keys: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self.reused: list[str] = []

    def path(self, name: str) -> Path:
        return self.out / name

    def stage(self, name: str, key_parts: tuple, outputs: list[str], compute: Callable[[], None]) -> None:
        key = _key(name, *key_parts)
        self.keys[name] = key
        entry = self.manifest.get(name)
        if entry and entry["key"] == key and self._intact(entry):
            log.info("stage %s: reusing checkpoint", name)
            self.reused.append(name)
            return
        log.info("stage %s: running", name)
        start = time.perf_counter()
        try:
            compute()
        except Exception as exc:
            raise StageError(name, exc) from exc
        self.timings[name] = time.perf_counter() - start
        self.manifest[name] = {"key": key, "files": {f: sha256_file(self.path(f)) for f in outputs}}
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))

    def _intact(self, entry: dict) -> bool:
        for f, digest in entry["files"].items():
            p = self.path(f)
            if not p.exists() or sha256_file(p) != digest:
                log.warning("checkpoint file %s missing or altered; recomputing", f)
                return False
        return True


# -- pipeline -----------------------------------------------------------------------------------------

STAGES = ("data", "poison", "train", "metrics", "detect", "nc", "fp", "blur", "robustness", "report")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _read_json(path: Path):
    return json.loads(path.read_text())


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, out: str | Path | None = None):
        self.cfg = cfg
        self.run = Runner(cfg, out)
        self.out = self.run.out

    # artifacts ----------------------------------------------------------------------------------
    def train_set(self):
        return load_dataset(self.out / "train.bdl")

    def test_set(self):
        return load_dataset(self.out / "test.bdl")

    def model(self, which: str):
        return load_model(self.out / f"{which}.bdm")

    def backdoor_test(self, variant: Variant = Variant(), spec: AttackSpec | None = None):
        return make_backdoor_test_set(self.test_set(), spec or self.cfg.attack_spec(), variant, self.cfg.seed)

    # stages -------------------------------------------------------------------------------------
    def data(self):
        c = self.cfg

        def compute():
            d = c.dataset
            full = synth_dataset(d.class_count, (d.image_size, d.image_size, d.channels),
                                 d.train_per_class + d.test_per_class, c.seed)
            tr, te = split(full, d.test_per_class / (d.train_per_class + d.test_per_class), c.seed)
            save_dataset(tr, self.out / "train.bdl")
            save_dataset(te, self.out / "test.bdl")

        self.run.stage("data", (c.seed, asdict(c.dataset)), ["train.bdl", "test.bdl"], compute)

    def poison(self):
        self.data()
        c = self.cfg

        def compute():
            spec = c.attack_spec()
            poisoned, record = craft_attack(self.train_set(), spec)
            save_dataset(poisoned, self.out / "poisoned_train.bdl")
            save_pattern(spec.pattern, self.out / "pattern.bdp")
            (self.out / "poison_record.json").write_text(record.to_json())

        self.run.stage("poison", (self.run.keys["data"], c.seed, asdict(c.attack)),
                       ["poisoned_train.bdl", "pattern.bdp", "poison_record.json"], compute)

    def train(self):
        self.poison()
        c = self.cfg
        t = c.training

        def fit(source: str, dest: str):
            def compute():
                d = c.dataset
                m0 = build_cnn(t.arch, (d.image_size, d.image_size, d.channels), d.class_count, c.seed)
                m, rep = train(m0, load_dataset(self.out / source), t.lr, t.batch, t.epochs, c.seed)
                m.metadata["final_train_loss"] = rep.epoch_loss[-1] if rep.epoch_loss else None
                save_model(m, self.out / f"{dest}.bdm")
            return compute

        self.run.stage("train_clean", (self.run.keys["data"], c.seed, asdict(t)), ["clean.bdm", "clean.bdm.json"],
                       fit("train.bdl", "clean"))
        self.run.stage("train_attacked", (self.run.keys["poison"], c.seed, asdict(t)),
                       ["attacked.bdm", "attacked.bdm.json"], fit("poisoned_train.bdl", "attacked"))

    def metrics(self):
        self.train()
        c = self.cfg

        def compute():
            te = self.test_set()
            clean, att = self.model("clean"), self.model("attacked")
            bd = self.backdoor_test()
            tgt = c.attack.target_class
            pattern = load_pattern(self.out / "pattern.bdp")
            _write_json(self.out / "metrics.json", {
                "benchmark_accuracy": clean_accuracy(clean, te),
                "attacked_accuracy": clean_accuracy(att, te),
                "attack_success_rate": attack_success_rate(att, bd, tgt),
                "clean_model_success_rate": attack_success_rate(clean, bd, tgt),
                "collateral_damage": {str(k): v for k, v in
                                      collateral_damage(att, te, pattern.pixels, tgt, c.seed).items()
                                      if k not in c.sources},
                "backdoor_test_size": len(bd),
            })

        self.run.stage("metrics", (self.run.keys["train_clean"], self.run.keys["train_attacked"]),
                       ["metrics.json"], compute)

    def detect(self):
        self.train()
        c = self.cfg
        dcfg = c.detection_config()
        for which in ("attacked", "clean"):
            def compute(which=which):
                m = self.model(which)
                cs = clean_detection_set(m, self.test_set(), c.detection.clean_per_class, c.seed)
                res = scan(m, cs, dcfg, keep_patterns=False, workers=c.workers)
                (self.out / f"mamf_{which}.json").write_text(res.to_json())

            self.run.stage(f"detect_{which}", (self.run.keys[f"train_{which}"], dcfg.to_dict(),
                                               c.detection.clean_per_class), [f"mamf_{which}.json"], compute)

    def nc(self):
        self.train()
        c = self.cfg
        for which in c.nc.models:
            def compute(which=which):
                m = self.model(which)
                cs = clean_detection_set(m, self.test_set(), c.nc.clean_per_class, c.seed)
                out = {}
                for lam in c.nc.lambdas:
                    res = nc_detect(m, cs, c.nc_config(lam))
                    out[f"{lam:g}"] = res.to_dict()
                    np.save(self.out / f"nc_{which}_masks_{lam:g}.npy", np.stack([r.mask for r in res.targets]))
                _write_json(self.out / f"nc_{which}.json", out)

            outputs = [f"nc_{which}.json"] + [f"nc_{which}_masks_{lam:g}.npy" for lam in c.nc.lambdas]
            self.run.stage(f"nc_{which}", (self.run.keys[f"train_{which}"], asdict(c.nc), c.seed), outputs, compute)

    def fp(self):
        self.train()
        c = self.cfg

        def compute():
            curve = fp_sweep(self.model("attacked"), self.test_set(), self.backdoor_test(), c.attack.target_class,
                             c.fp.stride)
            d = curve.to_dict()
            d["early_defense_points"] = early_defense_points(curve)
            d["trend_violated"] = bool(d["early_defense_points"])
            _write_json(self.out / "fp.json", d)

        self.run.stage("fp", (self.run.keys["train_attacked"], asdict(c.fp)), ["fp.json"], compute)

    def blur(self):
        self.train()
        c = self.cfg

        def compute():
            m, te = self.model("attacked"), self.test_set()
            bd = self.backdoor_test()
            rows = []
            for f in c.blur.filters:
                for s in c.blur.sizes:
                    rep = blur_evaluate(m, te.images, te.labels, bd.images, bd.labels, f, s)
                    (self.out / f"blur_{f}_{s}.csv").write_text(rep.to_csv())
                    rows.append(rep.to_dict())
            _write_json(self.out / "blur.json", rows)

        outputs = ["blur.json"] + [f"blur_{f}_{s}.csv" for f in c.blur.filters for s in c.blur.sizes]
        self.run.stage("blur", (self.run.keys["train_attacked"], asdict(c.blur), c.seed), outputs, compute)

    def robustness(self):
        self.train()
        c = self.cfg
        r = c.robustness
        tgt = c.attack.target_class

        def compute():
            m = self.model("attacked")
            exact = attack_success_rate(m, self.backdoor_test(), tgt)
            out: dict[str, Any] = {"exact": exact, "noise": {}, "crop": {}}
            for s2 in r.noise:
                asr = attack_success_rate(m, self.backdoor_test(Variant.noisy(s2)), tgt)
                out["noise"][f"{s2:g}"] = {"success": asr, "retention": asr / exact if exact else None}
            for a in r.crop:
                asr = attack_success_rate(m, self.backdoor_test(Variant.cropped(a)), tgt)
                out["crop"][f"{a:g}"] = {"success": asr, "retention": asr / exact if exact else None}
            _write_json(self.out / "robustness.json", out)

        self.run.stage("robustness", (self.run.keys["train_attacked"], asdict(r), c.seed), ["robustness.json"],
                       compute)
        if r.fixed_location:
            self._fixed_location()

    def _fixed_location(self):
        c = self.cfg
        r = c.robustness
        t = c.training
        anchor = r.fixed_anchor if isinstance(r.fixed_anchor, str) else tuple(r.fixed_anchor)
        spec = c.attack_spec(Placement.fixed(anchor))

        def compute():
            poisoned, _ = craft_attack(self.train_set(), spec)
            d = c.dataset
            m0 = build_cnn(t.arch, (d.image_size, d.image_size, d.channels), d.class_count, c.seed)
            m, _ = train(m0, poisoned, t.lr, t.batch, t.epochs, c.seed)
            save_model(m, self.out / "fixed.bdm")
            tgt = c.attack.target_class
            res = {
                "anchor": r.fixed_anchor,
                "same_anchor": attack_success_rate(m, self.backdoor_test(Variant.fixed(anchor), spec), tgt),
                "shifted": attack_success_rate(m, self.backdoor_test(Variant.shifted(*r.shift, anchor), spec), tgt),
                "random": attack_success_rate(m, self.backdoor_test(Variant.exact(), spec), tgt),
                "shift": list(r.shift),
                "extra_shifts": {f"{dr},{dc}": attack_success_rate(
                    m, self.backdoor_test(Variant.shifted(dr, dc, anchor), spec), tgt) for dr, dc in r.extra_shifts},
                "clean_accuracy": clean_accuracy(m, self.test_set()),
            }
            _write_json(self.out / "fixed_location.json", res)

        self.run.stage("fixed_location", (self.run.keys["poison"], asdict(r), asdict(t), c.seed),
                       ["fixed.bdm", "fixed.bdm.json", "fixed_location.json"], compute)

    # report -------------------------------------------------------------------------------------
    def report(self) -> dict:
        c = self.cfg
        self.metrics()
        self.detect()
        if c.nc.enabled:
            self.nc()
        if c.fp.enabled:
            self.fp()
        if c.blur.enabled:
            self.blur()
        if c.robustness.enabled:
            self.robustness()
        metrics: dict[str, Any] = dict(_read_json(self.out / "metrics.json"))
        for which in ("attacked", "clean"):
            metrics[f"mamf_{which}"] = _read_json(self.out / f"mamf_{which}.json")
        metrics["nc"] = ({w: _read_json(self.out / f"nc_{w}.json") for w in c.nc.models} if c.nc.enabled else None)
        metrics["fp"] = _read_json(self.out / "fp.json") if c.fp.enabled else None
        metrics["blur"] = _read_json(self.out / "blur.json") if c.blur.enabled else None
        if c.robustness.enabled:
            metrics["robustness"] = _read_json(self.out / "robustness.json")
            if c.robustness.fixed_location:
                metrics["robustness"]["fixed_location"] = _read_json(self.out / "fixed_location.json")
        else:
            metrics["robustness"] = None
        artifacts = {}
        for entry in self.run.manifest.values():
            artifacts.update(entry["files"])
        report = {
            "config": c.to_dict(),
            "metrics": metrics,
            "artifacts": dict(sorted(artifacts.items())),
            "timings": self.run.timings,
            "reused_stages": self.run.reused,
        }
        validate_report(report)
        _write_json(self.out / "report.json", report)
        emit_figure_data(report, self.out / "figures")
        return report


def validate_report(report: dict) -> None:
    """Every enabled section must be present and non-null."""
    cfg, m = report["config"], report["metrics"]
    required = ["benchmark_accuracy", "attacked_accuracy", "attack_success_rate", "mamf_attacked", "mamf_clean"]
    required += [s for s in ("nc", "fp", "blur", "robustness") if cfg[s]["enabled"]]
    missing = [k for k in required if m.get(k) is None]
    if missing:
        raise ValueError(f"report is missing sections: {missing}")


def emit_figure_data(report: dict, out_dir: str | Path) -> list[Path]:
    """CSV projections of a complete report: MAMF curve, rho* bars, prune curve, blur rates."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    m = report["metrics"]
    att = MamfResult.from_dict(m["mamf_attacked"])
    cln = MamfResult.from_dict(m["mamf_clean"])
    written = []

    def put(name, header, rows):
        p = out / name
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        written.append(p)

    pair = att.argmax_pair
    put("mamf_curve.csv", ["width", "rho_attacked", "rho_clean"],
        zip(att.widths, att.curve(pair), cln.curve(pair)))
    put("rho_star_bars.csv", ["model", "rho_star"], [("clean", cln.rho_star), ("attacked", att.rho_star)])
    if m.get("fp"):
        fp = m["fp"]
        put("prune_curve.csv", ["pruned", "accuracy", "attack_success"],
            zip(fp["pruned"], fp["accuracy"], fp["attack_success"]))
    if m.get("blur"):
        put("blur_roc.csv", ["filter", "size", "fpr", "tpr"],
            [(r["filter"], r["size"], r["fpr"], r["tpr"]) for r in m["blur"]])
    return written


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None, upto: str = "report") -> dict | None:
    """Run the pipeline through stage ``upto`` under an exclusive directory lock."""
    if upto not in STAGES:
        raise ConfigError(f"unknown stage {upto!r}; choose from {STAGES}")
    pipe = Pipeline(cfg, out)
    lock = FileLock(str(pipe.out / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise LockedError(f"{pipe.out} is in use by another process") from None
    try:
        if upto == "report":
            return pipe.report()
        {"data": pipe.data, "poison": pipe.poison, "train": pipe.train, "metrics": pipe.metrics,
         "detect": pipe.detect, "nc": pipe.nc, "fp": pipe.fp, "blur": pipe.blur,
         "robustness": pipe.robustness}[upto]()
        return None
    finally:
        lock.release()
