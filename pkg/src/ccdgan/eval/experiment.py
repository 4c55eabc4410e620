"""
Attack / defend / transcribe / score orchestration.

The experiment document is INI-style (sections of ``key = value``)::

    [data]
    source = synthetic          ; or a directory holding index.tsv + WAVs
    n_per_class = 10
    seed = 100
    size = 32

    [probe]
    path =                      ; empty: train one from a separate synthetic split
    train_per_class = 40
    epochs = 5
    seed = 0

    [attack]
    enabled = true
    eps = 0.05
    loudness_bound_db = -15
    steps = 1
    attacked_only = true         ; only items the attack flipped are scored

    [defense]
    enabled = true
    checkpoint = gen.ckpt
    k_max = 400
    restarts = 4
    class_strategy = search-all-classes
    seed = 0
    xi_coeff = 0.05

    [recognizer]
    kind = probe                ; probe | echo | command
    command =
    timeout = 60
    max_concurrent = 2

    [output]
    report =                    ; key-value report path (optional)

Directory datasets use ``index.tsv`` lines ``filename<TAB>class_id[<TAB>transcript]``.
"""

from __future__ import annotations

import configparser
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..ccgan import checkpoint as ckpt_io
from ..defense import DefenseConfig, defend
from ..errors import BadConfig, DataError, MissingArtifact
from ..signal import Waveform, inject_perturbation, load_wav
from ..tfa import TfaConfig
from .attack import craft_perturbation
from .metrics import TranscriptPair, corpus_wer, sla, tokenize
from .probe import ProbeClassifier, load_probe, train_probe
from .recognizer import CommandSpec, recognizer_bridge
from .synth import CLASS_NAMES, analyze, make_dataset

ARMS = ("no_defense", "defense")


@dataclass
class ExperimentConfig:
    source: str = "synthetic"
    n_per_class: int = 10
    data_seed: int = 100
    size: int = 32
    probe_path: str = ""
    probe_train_per_class: int = 40
    probe_epochs: int = 5
    probe_seed: int = 0
    attack: bool = True
    eps: float = 0.05
    loudness_bound_db: float = -15.0
    attack_steps: int = 1
    attacked_only: bool = True
    defense: bool = True
    checkpoint: str = ""
    k_max: int = 400
    restarts: int = 4
    class_strategy: str = "search-all-classes"
    defense_seed: int = 0
    xi_coeff: float = 0.05
    recognizer: str = "probe"
    command: str = ""
    timeout: float = 60.0
    max_concurrent: int = 2
    report: str = ""
    base_dir: str = "."

    _KEYS = {
        ("data", "source"): ("source", str), ("data", "n_per_class"): ("n_per_class", int),
        ("data", "seed"): ("data_seed", int), ("data", "size"): ("size", int),
        ("probe", "path"): ("probe_path", str), ("probe", "train_per_class"): ("probe_train_per_class", int),
        ("probe", "epochs"): ("probe_epochs", int), ("probe", "seed"): ("probe_seed", int),
        ("attack", "enabled"): ("attack", "bool"), ("attack", "eps"): ("eps", float),
        ("attack", "loudness_bound_db"): ("loudness_bound_db", float),
        ("attack", "steps"): ("attack_steps", int), ("attack", "attacked_only"): ("attacked_only", "bool"),
        ("defense", "enabled"): ("defense", "bool"), ("defense", "checkpoint"): ("checkpoint", str),
        ("defense", "k_max"): ("k_max", int), ("defense", "restarts"): ("restarts", int),
        ("defense", "class_strategy"): ("class_strategy", str), ("defense", "seed"): ("defense_seed", int),
        ("defense", "xi_coeff"): ("xi_coeff", float),
        ("recognizer", "kind"): ("recognizer", str), ("recognizer", "command"): ("command", str),
        ("recognizer", "timeout"): ("timeout", float), ("recognizer", "max_concurrent"): ("max_concurrent", int),
        ("output", "report"): ("report", str),
    }

    @classmethod
    def from_text(cls, text: str, base_dir: str = ".") -> "ExperimentConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise BadConfig(f"malformed experiment config: {exc}") from exc
        values = {"base_dir": base_dir}
        for section in parser.sections():
            for key, raw in parser.items(section):
                spec = cls._KEYS.get((section, key))
                if spec is None:
                    raise BadConfig(f"unknown setting [{section}] {key}")
                attr, kind = spec
                try:
                    values[attr] = parser.getboolean(section, key) if kind == "bool" else kind(raw)
                except ValueError as exc:
                    raise BadConfig(f"[{section}] {key}: {exc}") from exc
        cfg = cls(**values)
        if cfg.recognizer not in ("probe", "echo", "command"):
            raise BadConfig("recognizer kind must be probe, echo or command")
        if cfg.recognizer == "command" and not cfg.command:
            raise BadConfig("recognizer kind 'command' needs a command")
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        p = Path(path)
        if not p.is_file():
            raise MissingArtifact(f"experiment config not found: {p}")
        return cls.from_text(p.read_text(), str(p.parent))

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


@dataclass
class Item:
    index: int
    waveform: Waveform
    label: int
    reference: tuple[str, ...]


@dataclass
class ItemRecord:
    index: int
    label: int
    reference: tuple[str, ...]
    hypothesis: tuple[str, ...]
    attack_success: Optional[bool] = None
    loudness_db_rel: Optional[float] = None
    psd_distortion_db: Optional[float] = None
    k_used: int = 0
    final_loss: Optional[float] = None
    class_used: Optional[int] = None


@dataclass
class EvalReport:
    arm: str
    wer_percent: float
    sla_percent: float
    n_total: int
    n_correct: int
    mean_k: float
    items: list = field(default_factory=list)


@dataclass
class ExperimentReport:
    arms: dict
    attack_success_rate: Optional[float]
    probe_heldout_accuracy: float

    def table(self) -> str:
        head = f"{'arm':<12} {'WER (%)':>9} {'SLA (%)':>9} {'n':>5} {'mean k':>8}"
        rows = [head, "-" * len(head)]
        for name, r in self.arms.items():
            rows.append(f"{name:<12} {r.wer_percent:9.2f} {r.sla_percent:9.2f} {r.n_total:5d} {r.mean_k:8.1f}")
        if self.attack_success_rate is not None:
            rows.append(f"attack success rate: {100 * self.attack_success_rate:.2f}%")
        return "\n".join(rows)

    def key_values(self) -> str:
        lines = [f"probe.heldout_accuracy = {self.probe_heldout_accuracy!r}"]
        if self.attack_success_rate is not None:
            lines.append(f"attack.success_rate = {self.attack_success_rate!r}")
        for name, r in self.arms.items():
            lines += [
                f"{name}.wer_percent = {r.wer_percent!r}",
                f"{name}.sla_percent = {r.sla_percent!r}",
                f"{name}.n_total = {r.n_total}",
                f"{name}.n_correct = {r.n_correct}",
                f"{name}.mean_k = {r.mean_k!r}",
            ]
            for it in r.items:
                lines.append(f"{name}.item.{it.index} = label={it.label} hyp={' '.join(it.hypothesis)} "
                             f"k={it.k_used} attack_success={it.attack_success}")
        return "\n".join(lines) + "\n"


def load_items(cfg: ExperimentConfig, tfa_cfg: TfaConfig) -> list[Item]:
    if cfg.source == "synthetic":
        data = make_dataset(cfg.n_per_class, cfg.data_seed, cfg.size, cfg=tfa_cfg)
        return [Item(i, d.waveform, d.label, (CLASS_NAMES[d.label],)) for i, d in enumerate(data)]
    root = cfg.resolve(cfg.source)
    index = root / "index.tsv"
    if not index.is_file():
        raise MissingArtifact(f"dataset index not found: {index}")
    items = []
    for i, line in enumerate(index.read_text().splitlines()):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise DataError(f"{index}:{i + 1}: expected filename<TAB>class_id")
        label = int(parts[1])
        ref = tokenize(parts[2]) if len(parts) > 2 else (CLASS_NAMES[label],)
        wav = root / parts[0]
        if not wav.is_file():
            raise MissingArtifact(f"missing audio file {wav}")
        items.append(Item(len(items), load_wav(wav), label, ref))
    return items


def _probe_for(cfg: ExperimentConfig, tfa_cfg: TfaConfig) -> ProbeClassifier:
    if cfg.probe_path:
        return load_probe(cfg.resolve(cfg.probe_path))
    train = make_dataset(cfg.probe_train_per_class, cfg.data_seed + 1, cfg.size, cfg=tfa_cfg)
    return train_probe([d.unit for d in train], [d.label for d in train], cfg.probe_epochs, cfg.probe_seed)


class _Transcriber:
    def __init__(self, cfg: ExperimentConfig, probe: ProbeClassifier, tfa_cfg: TfaConfig):
        self.cfg, self.probe, self.tfa_cfg = cfg, probe, tfa_cfg
        self.spec = CommandSpec.parse(cfg.command, cfg.timeout) if cfg.recognizer == "command" else None

    def one(self, w: Waveform, ref: tuple[str, ...]) -> tuple[str, ...]:
        if self.cfg.recognizer == "echo":
            return ref
        if self.cfg.recognizer == "command":
            return recognizer_bridge(w, self.spec)
        _, unit = analyze(w, self.probe.size, self.tfa_cfg)
        return (CLASS_NAMES[int(self.probe.predict(unit)[0])],)

    def many(self, waves, refs):
        if self.cfg.recognizer != "command" or self.cfg.max_concurrent <= 1:
            return [self.one(w, r) for w, r in zip(waves, refs)]
        with ThreadPoolExecutor(max_workers=self.cfg.max_concurrent) as pool:
            return list(pool.map(self.one, waves, refs))


def _summarize(arm: str, records: list[ItemRecord]) -> EvalReport:
    pairs = [TranscriptPair(r.reference, r.hypothesis) for r in records]
    n = len(records)
    return EvalReport(
        arm,
        corpus_wer(pairs) if n else 0.0,
        sla(pairs) if n else 0.0,
        n,
        sum(p.exact for p in pairs),
        float(np.mean([r.k_used for r in records])) if n else 0.0,
        records,
    )


def run_experiment(cfg, tfa_cfg: TfaConfig = TfaConfig(), items: Optional[list[Item]] = None,
                   probe: Optional[ProbeClassifier] = None) -> ExperimentReport:
    """Run both arms over identical items; writes the key-value report if configured."""
    if not isinstance(cfg, ExperimentConfig):
        cfg = ExperimentConfig.load(cfg)
    gen = None
    if cfg.defense:
        if not cfg.checkpoint:
            raise MissingArtifact("defense enabled but no generator checkpoint configured")
        gen = ckpt_io.load(cfg.resolve(cfg.checkpoint)).generator()
        if gen.cfg.resolution != cfg.size:
            raise BadConfig(f"checkpoint resolution {gen.cfg.resolution} != data size {cfg.size}")
    items = items if items is not None else load_items(cfg, tfa_cfg)
    probe = probe if probe is not None else _probe_for(cfg, tfa_cfg)
    rec = _Transcriber(cfg, probe, tfa_cfg)

    inputs, base = [], []
    for it in items:
        r = ItemRecord(it.index, it.label, it.reference, ())
        x = it.waveform
        if cfg.attack:
            target = (it.label + 1) % probe.n_classes
            crafted = craft_perturbation(x, probe, target, cfg.eps, tfa_cfg,
                                         cfg.loudness_bound_db, cfg.attack_steps)
            x = inject_perturbation(it.waveform, crafted.perturbation)
            r.loudness_db_rel = crafted.loudness_db_rel
            r.psd_distortion_db = crafted.psd_distortion_db
            _, unit = analyze(x, probe.size, tfa_cfg)
            r.attack_success = bool(probe.predict(unit)[0] == target)
        inputs.append(x)
        base.append(r)

    keep = [i for i, r in enumerate(base) if not (cfg.attack and cfg.attacked_only) or r.attack_success]
    arms = {}
    hyps = rec.many([inputs[i] for i in keep], [base[i].reference for i in keep])
    arms["no_defense"] = _summarize("no_defense", [
        ItemRecord(**{**base[i].__dict__, "hypothesis": h}) for i, h in zip(keep, hyps)])
    if cfg.defense:
        dcfg = DefenseConfig(k_max=cfg.k_max, restarts=cfg.restarts, class_strategy=cfg.class_strategy,
                             seed=cfg.defense_seed, xi_coeff=cfg.xi_coeff)
        outs, records = [], []
        for i in keep:
            res = defend(inputs[i], gen, None, tfa_cfg, dcfg)
            outs.append(res.output)
            records.append(ItemRecord(**{**base[i].__dict__, "k_used": res.k_used,
                                         "final_loss": res.final_loss, "class_used": res.class_used}))
        for r, h in zip(records, rec.many(outs, [r.reference for r in records])):
            r.hypothesis = h
        arms["defense"] = _summarize("defense", records)

    success = None
    if cfg.attack and base:
        success = float(np.mean([r.attack_success for r in base]))
    report = ExperimentReport(arms, success, probe.heldout_accuracy)
    if cfg.report:
        cfg.resolve(cfg.report).write_text(report.key_values())
    return report
