"""Run configuration: one YAML file drives every subcommand and the service.

A single master seed determines every stochastic choice; components draw
derived seeds through scope strings (augment, train, mask, mc, llm-mock,
labspace cells) so streams never collide. Environment variables override
secrets only: INTENTGATE_LLM_URL and INTENTGATE_LLM_TOKEN.

Parse problems are collected and reported together, every offending key
named, rather than failing on the first one.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .augmentation import AugmentationConfig
from .classifier import McConfig, TrainConfig
from .oos_twostep import TwoStepConfig
from .prompting import RetrievalConfig
from .seeds import derive_seed

LLM_KINDS = ("mock", "http")
EMBEDDING_KINDS = ("hashing", "remote")
TIMING_MODES = ("wall", "logical")


class ConfigError(Exception):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems))
        self.problems = problems


@dataclass(frozen=True)
class DatasetPaths:
    utterances: Path
    intents: Path


@dataclass(frozen=True)
class EmbeddingSpec:
    kind: str = "hashing"
    dim: int = 256
    url: str | None = None


@dataclass(frozen=True)
class LlmSpec:
    kind: str = "mock"
    url: str | None = None
    model_name: str = "remote"
    auth_token: str | None = None
    timeout_s: float = 30.0
    retries: int = 1
    error_rate: float = 0.0  # mock only
    oos_miss_rate: float = 0.0  # mock only
    request_log: Path | None = None


@dataclass(frozen=True)
class RouterSpec:
    unstable_action: str = "route_to_llm"
    parse_failure_action: str = "oos"
    llm_failure_action: str = "classifier"


@dataclass(frozen=True)
class EvalSpec:
    f1_mode: str = "micro"
    inscope_match: str = "any"
    timing: str = "wall"


@dataclass(frozen=True)
class RunConfig:
    master_seed: int
    dataset: DatasetPaths
    embedding: EmbeddingSpec
    augmentation: AugmentationConfig
    augment_enabled: bool
    train: TrainConfig
    mc: McConfig
    retrieval: RetrievalConfig
    router: RouterSpec
    llm: LlmSpec
    two_step: TwoStepConfig
    eval: EvalSpec
    artifacts_dir: Path
    threshold: float = 0.5

    def seed_for(self, *scope: str) -> int:
        return derive_seed(self.master_seed, *scope)


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigError([f"{name}: expected a mapping, got {type(value).__name__}"])
    return value


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a config file; referenced files must exist."""
    path = Path(path)
    problems: list[str] = []
    try:
        raw: dict[str, Any] = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except FileNotFoundError:
        raise ConfigError([f"config file {path} does not exist"])
    except yaml.YAMLError as exc:
        raise ConfigError([f"config file {path} is not valid YAML: {exc}"])

    master_seed = raw.get("master_seed", 0)
    if not isinstance(master_seed, int):
        problems.append("master_seed: must be an integer")
        master_seed = 0

    ds = _section(raw, "dataset")
    utterances = Path(ds.get("utterances", ""))
    intents = Path(ds.get("intents", ""))
    base = path.parent
    if not ds.get("utterances"):
        problems.append("dataset.utterances: required")
    else:
        utterances = (base / utterances).resolve() if not utterances.is_absolute() else utterances
        if not utterances.exists():
            problems.append(f"dataset.utterances: file {utterances} does not exist")
    if not ds.get("intents"):
        problems.append("dataset.intents: required")
    else:
        intents = (base / intents).resolve() if not intents.is_absolute() else intents
        if not intents.exists():
            problems.append(f"dataset.intents: file {intents} does not exist")

    emb = _section(raw, "embedding")
    emb_kind = emb.get("kind", "hashing")
    if emb_kind not in EMBEDDING_KINDS:
        problems.append(f"embedding.kind: {emb_kind!r} not one of {EMBEDDING_KINDS}")
    if emb_kind == "remote" and not emb.get("url"):
        problems.append("embedding.url: required when embedding.kind is remote")
    embedding = EmbeddingSpec(kind=emb_kind, dim=int(emb.get("dim", 256)), url=emb.get("url"))

    aug = _section(raw, "augmentation")
    augment_enabled = bool(aug.get("enabled", True))
    try:
        augmentation = AugmentationConfig(
            ratio=float(aug.get("ratio", 0.2)),
            replace_string_len=int(aug.get("replace_string_len", 5)),
            removal_prob=float(aug.get("removal_prob", 0.5)),
            seed=derive_seed(master_seed, "augment"),
        )
    except ValueError as exc:
        problems.append(f"augmentation: {exc}")
        augmentation = AugmentationConfig(seed=derive_seed(master_seed, "augment"))

    tr = _section(raw, "train")
    try:
        train = TrainConfig(
            learning_rate=float(tr.get("learning_rate", 5e-3)),
            epochs=int(tr.get("epochs", 10)),
            batch_size=int(tr.get("batch_size", 32)),
            l2=float(tr.get("l2", 1e-4)),
            seed=derive_seed(master_seed, "train"),
        )
    except ValueError as exc:
        problems.append(f"train: {exc}")
        train = TrainConfig(seed=derive_seed(master_seed, "train"))

    mc_raw = _section(raw, "mc")
    try:
        mc = McConfig(
            samples=int(mc_raw.get("samples", 10)),
            dropout_p=float(mc_raw.get("dropout_p", 0.1)),
            seed=derive_seed(master_seed, "mc"),
        )
    except ValueError as exc:
        problems.append(f"mc: {exc}")
        mc = McConfig(seed=derive_seed(master_seed, "mc"))

    ret = _section(raw, "retrieval")
    try:
        retrieval = RetrievalConfig(k=int(ret.get("k", 5)), t=float(ret.get("t", 1e-5)))
    except ValueError as exc:
        problems.append(f"retrieval: {exc}")
        retrieval = RetrievalConfig()

    rt = _section(raw, "router")
    router = RouterSpec(
        unstable_action=rt.get("unstable_action", "route_to_llm"),
        parse_failure_action=rt.get("parse_failure_action", "oos"),
        llm_failure_action=rt.get("llm_failure_action", "classifier"),
    )
    if router.unstable_action not in ("route_to_llm", "classifier_mean", "reject_oos"):
        problems.append(f"router.unstable_action: unknown value {router.unstable_action!r}")
    if router.parse_failure_action not in ("oos", "classifier"):
        problems.append(f"router.parse_failure_action: unknown value {router.parse_failure_action!r}")
    if router.llm_failure_action not in ("classifier", "raise"):
        problems.append(f"router.llm_failure_action: unknown value {router.llm_failure_action!r}")

    llm_raw = _section(raw, "llm")
    llm_kind = llm_raw.get("kind", "mock")
    if llm_kind not in LLM_KINDS:
        problems.append(f"llm.kind: {llm_kind!r} not one of {LLM_KINDS}")
    llm_url = os.environ.get("INTENTGATE_LLM_URL") or llm_raw.get("url")
    if llm_kind == "http" and not llm_url:
        problems.append("llm.url: required when llm.kind is http (or set INTENTGATE_LLM_URL)")
    llm = LlmSpec(
        kind=llm_kind,
        url=llm_url,
        model_name=llm_raw.get("model_name", "remote"),
        auth_token=os.environ.get("INTENTGATE_LLM_TOKEN") or llm_raw.get("auth_token"),
        timeout_s=float(llm_raw.get("timeout_s", 30.0)),
        retries=int(llm_raw.get("retries", 1)),
        error_rate=float(llm_raw.get("error_rate", 0.0)),
        oos_miss_rate=float(llm_raw.get("oos_miss_rate", 0.0)),
        request_log=Path(llm_raw["request_log"]) if llm_raw.get("request_log") else None,
    )

    ts = _section(raw, "two_step")
    try:
        two_step = TwoStepConfig(
            threshold=float(ts.get("threshold", 0.5)),
            aggregation=ts.get("aggregation", "mean"),
        )
    except ValueError as exc:
        problems.append(f"two_step: {exc}")
        two_step = TwoStepConfig()

    ev = _section(raw, "eval")
    eval_spec = EvalSpec(
        f1_mode=ev.get("f1_mode", "micro"),
        inscope_match=ev.get("inscope_match", "any"),
        timing=ev.get("timing", "wall"),
    )
    if eval_spec.f1_mode not in ("micro", "macro"):
        problems.append(f"eval.f1_mode: unknown value {eval_spec.f1_mode!r}")
    if eval_spec.inscope_match not in ("any", "exact"):
        problems.append(f"eval.inscope_match: unknown value {eval_spec.inscope_match!r}")
    if eval_spec.timing not in TIMING_MODES:
        problems.append(f"eval.timing: unknown value {eval_spec.timing!r}")

    artifacts_dir = Path(raw.get("artifacts_dir", "artifacts"))
    if not artifacts_dir.is_absolute():
        artifacts_dir = (base / artifacts_dir).resolve()

    threshold = float(raw.get("threshold", 0.5))
    if not 0.0 < threshold < 1.0:
        problems.append("threshold: must be in (0, 1)")

    if problems:
        raise ConfigError(problems)

    return RunConfig(
        master_seed=master_seed,
        dataset=DatasetPaths(utterances=utterances, intents=intents),
        embedding=embedding,
        augmentation=augmentation,
        augment_enabled=augment_enabled,
        train=train,
        mc=mc,
        retrieval=retrieval,
        router=router,
        llm=llm,
        two_step=two_step,
        eval=eval_spec,
        artifacts_dir=artifacts_dir,
        threshold=threshold,
    )
