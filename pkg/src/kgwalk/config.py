"""YAML configuration with strict validation, plus factories for the
store, gateway and toolbox it describes."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .crw import REFERENCE_MIX, STRUCTURES, WalkConfig, load_walk_inputs
from .curation import CONVENTIONS, DEFAULT_THRESHOLDS, EXCLUSION_THRESHOLD
from .errors import ConfigError, KGWalkError
from .gateway import PURPOSES, Gateway, HttpGateway, RequestLog, StubGateway, StubScript
from .runtime import RuntimeConfig
from .store import GraphStore, load_store
from .synth import SynthConfig
from .toolbox import DEFAULT_CAP, DEFAULT_DENY_PREFIXES, DEFAULT_K, RelationFilter, Toolbox


@dataclass
class StoreSettings:
    backend: str = "memory"  # "memory" or "sparql"
    paths: list[str] = field(default_factory=list)
    endpoint: str = ""
    timeout: float = 30.0
    retries: int = 2
    max_in_flight: int = 8


@dataclass
class WalkSettings:
    predicates_file: str = ""
    seeds_file: str = ""
    d_min: int = 2
    d_max: int = 40
    structure_mix: dict[str, float] = field(default_factory=lambda: dict(REFERENCE_MIX))
    max_attempts_per_path: int = 100
    rng_seed: int = 0
    n: int = 100


@dataclass
class ToolSettings:
    k: int = DEFAULT_K
    per_relation_cap: int = DEFAULT_CAP
    allow_prefixes: list[str] = field(default_factory=list)
    deny_prefixes: list[str] = field(default_factory=lambda: list(DEFAULT_DENY_PREFIXES))
    rerank: bool = False
    k1: float = 1.2
    b: float = 0.75


@dataclass
class RuntimeSettings:
    max_turns: int = 10
    observation_budget: int = 4096
    strict: bool = False
    enforce_subset: bool = True
    max_output_tokens: int = 1024


@dataclass
class GatewaySettings:
    backend: str = "stub"  # "stub" or "http"
    base_url: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    models: dict[str, str] = field(default_factory=dict)
    embedding_model: str = "bge-m3"
    stub_script: str = ""
    max_in_flight: int = 8
    max_attempts: int = 5
    backoff: float = 0.5
    timeout: float = 60.0
    request_log: str = ""


@dataclass
class PipelineSettings:
    quality_threshold: float = 9.0
    score_json: bool = False
    distractors: int = 3
    question_attempts: int = 3
    thought_attempts: int = 3
    relation_turns: bool = False
    workers: int = 1
    contamination_thresholds: list[float] = field(default_factory=lambda: list(DEFAULT_THRESHOLDS))
    exclusion_threshold: float = EXCLUSION_THRESHOLD
    em_convention: str = "em-hit"


@dataclass
class Config:
    store: StoreSettings = field(default_factory=StoreSettings)
    walk: WalkSettings = field(default_factory=WalkSettings)
    tools: ToolSettings = field(default_factory=ToolSettings)
    runtime: RuntimeSettings = field(default_factory=RuntimeSettings)
    gateway: GatewaySettings = field(default_factory=GatewaySettings)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    output_dir: str = "out"

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    # -- derived objects ---------------------------------------------------

    def walk_config(self, store: GraphStore) -> WalkConfig:
        w = self.walk
        if not w.predicates_file or not w.seeds_file:
            raise ConfigError("walk.predicates_file and walk.seeds_file are required for path sampling")
        predicates, seeds = load_walk_inputs(store, w.predicates_file, w.seeds_file)
        try:
            return WalkConfig(predicates, seeds, w.d_min, w.d_max, dict(w.structure_mix),
                              w.max_attempts_per_path, w.rng_seed)
        except KGWalkError as exc:
            raise ConfigError(f"walk: {exc}") from None

    def runtime_config(self) -> RuntimeConfig:
        r = self.runtime
        return RuntimeConfig(
            max_turns=r.max_turns,
            k=self.tools.k,
            per_relation_cap=self.tools.per_relation_cap,
            observation_budget=r.observation_budget,
            strict=r.strict,
            enforce_subset=r.enforce_subset,
            policy_model=self.gateway.models.get("policy", ""),
            max_output_tokens=r.max_output_tokens,
        )

    def synth_config(self) -> SynthConfig:
        p = self.pipeline
        return SynthConfig(
            k=self.tools.k,
            per_relation_cap=self.tools.per_relation_cap,
            distractors=p.distractors,
            question_attempts=p.question_attempts,
            thought_attempts=p.thought_attempts,
            quality_threshold=p.quality_threshold,
            score_json=p.score_json,
            observation_budget=self.runtime.observation_budget,
            relation_turns=p.relation_turns,
            workers=p.workers,
            models=dict(self.gateway.models),
        )

    def build_store(self) -> GraphStore:
        s = self.store
        if s.backend == "sparql":
            from .sparql import SparqlStore

            return SparqlStore(s.endpoint, timeout=s.timeout, retries=s.retries, max_in_flight=s.max_in_flight)
        if not s.paths:
            raise ConfigError("store.paths is empty; pass --store or set store.paths")
        return load_store(s.paths)

    def build_gateway(self) -> Gateway:
        g = self.gateway
        log = RequestLog(g.request_log or None)
        if g.backend == "stub":
            script = StubScript.from_file(g.stub_script) if g.stub_script else None
            return StubGateway(script, max_in_flight=g.max_in_flight, request_log=log)
        return HttpGateway(
            g.base_url,
            api_key_env=g.api_key_env,
            models=dict(g.models),
            embedding_model=g.embedding_model,
            max_attempts=g.max_attempts,
            backoff=g.backoff,
            timeout=g.timeout,
            max_in_flight=g.max_in_flight,
            request_log=log,
        )

    def build_toolbox(self, store: GraphStore, gateway: Gateway | None = None) -> Toolbox:
        t = self.tools
        return Toolbox(
            store,
            k=t.k,
            per_relation_cap=t.per_relation_cap,
            relation_filter=RelationFilter(tuple(t.allow_prefixes), tuple(t.deny_prefixes)),
            k1=t.k1,
            b=t.b,
            reranker=gateway if t.rerank else None,
            rerank_model=self.gateway.models.get("rerank", ""),
        )


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

_PATH_FIELDS = {
    ("store", "paths"),
    ("walk", "predicates_file"),
    ("walk", "seeds_file"),
    ("gateway", "stub_script"),
    ("gateway", "request_log"),
}  # output_dir stays relative to the working directory


def _coerce(section: str, name: str, default: Any, value: Any) -> Any:
    where = f"{section + '.' if section else ''}{name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if isinstance(value, str):
            value = [value]
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return list(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be a mapping, got {value!r}")
        return dict(value)
    return value


def _fill(obj: Any, data: Mapping[str, Any], section: str) -> None:
    known = {f.name for f in dataclasses.fields(obj)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section or 'config'}: {', '.join(unknown)}")
    for name, value in data.items():
        current = getattr(obj, name)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, Mapping):
                raise ConfigError(f"{name} must be a mapping")
            _fill(current, value, name)
        else:
            setattr(obj, name, _coerce(section, name, current, value))


def _resolve_paths(cfg: Config, base: Path) -> None:
    def fix(p: str) -> str:
        return p if not p or os.path.isabs(p) else str((base / p).resolve())

    for section, name in _PATH_FIELDS:
        owner = getattr(cfg, section) if section else cfg
        value = getattr(owner, name)
        setattr(owner, name, [fix(p) for p in value] if isinstance(value, list) else fix(value))


def validate(cfg: Config) -> Config:
    def need(cond: bool, msg: str) -> None:
        if not cond:
            raise ConfigError(msg)

    need(cfg.store.backend in ("memory", "sparql"), "store.backend must be 'memory' or 'sparql'")
    need(cfg.store.backend != "sparql" or bool(cfg.store.endpoint), "store.endpoint is required for the sparql backend")
    need(cfg.store.timeout > 0 and cfg.store.retries >= 0 and cfg.store.max_in_flight >= 1, "store limits out of range")
    w = cfg.walk
    need(1 <= w.d_min <= w.d_max, f"walk needs 1 <= d_min <= d_max, got {w.d_min}, {w.d_max}")
    need(set(w.structure_mix) <= set(STRUCTURES), f"walk.structure_mix keys must be among {STRUCTURES}")
    need(all(isinstance(v, (int, float)) and v >= 0 for v in w.structure_mix.values()),
         "walk.structure_mix values must be non-negative numbers")
    need(abs(sum(w.structure_mix.values()) - 1.0) <= 1e-9, "walk.structure_mix must sum to 1")
    need(w.max_attempts_per_path >= 1 and w.n >= 1, "walk.max_attempts_per_path and walk.n must be >= 1")
    need(0 <= w.rng_seed < 2**64, "walk.rng_seed must be a 64-bit non-negative integer")
    t = cfg.tools
    need(t.k >= 1 and t.per_relation_cap >= 1, "tools.k and tools.per_relation_cap must be >= 1")
    need(t.k1 >= 0 and 0 <= t.b <= 1, "tools.k1 must be >= 0 and tools.b in [0, 1]")
    r = cfg.runtime
    need(min(r.max_turns, r.observation_budget, r.max_output_tokens) >= 1, "runtime limits must be positive")
    g = cfg.gateway
    need(g.backend in ("stub", "http"), "gateway.backend must be 'stub' or 'http'")
    need(g.backend != "http" or bool(g.base_url), "gateway.base_url is required for the http backend")
    need(set(g.models) <= set(PURPOSES), f"gateway.models keys must be among {PURPOSES}")
    need(g.max_in_flight >= 1 and g.max_attempts >= 1 and g.backoff >= 0 and g.timeout > 0,
         "gateway limits out of range")
    p = cfg.pipeline
    need(0 <= p.quality_threshold <= 10, "pipeline.quality_threshold must be within 0..10")
    need(p.distractors >= 0 and p.question_attempts >= 1 and p.thought_attempts >= 1 and p.workers >= 1,
         "pipeline counts out of range")
    need(bool(p.contamination_thresholds) and all(-1 <= x <= 1 for x in p.contamination_thresholds),
         "pipeline.contamination_thresholds must be non-empty cosine values")
    need(-1 <= p.exclusion_threshold <= 1, "pipeline.exclusion_threshold must be a cosine value")
    need(p.em_convention in CONVENTIONS, f"pipeline.em_convention must be one of {CONVENTIONS}")
    return cfg


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> Config:
    """Defaults, then the YAML file (relative paths resolved against it), then ``overrides``."""
    cfg = Config()
    if path is not None:
        p = Path(path)
        try:
            data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {p} is not valid YAML: {exc}") from None
        if not isinstance(data, Mapping):
            raise ConfigError(f"config {p} must be a mapping at the top level")
        _fill(cfg, data, "")
        _resolve_paths(cfg, p.parent)
    if overrides:
        _fill(cfg, overrides, "")
    env_url = os.environ.get("KGWALK_GATEWAY_URL")
    if env_url:
        cfg.gateway.base_url = env_url
    return validate(cfg)


def config_from_dict(data: Mapping[str, Any]) -> Config:
    cfg = Config()
    _fill(cfg, data, "")
    return validate(cfg)
