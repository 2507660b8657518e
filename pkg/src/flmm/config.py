"""Scenario configuration: INI-style file covering the whole run.

Every knob has a stated default; FLMM_SEED in the environment overrides the
configured seed.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

from flmm.aggregation import AggregationPlan, BLOCK_NAMES
from flmm.dataquality import CorpusSpec, SENSITIVE_TOKENS
from flmm.errors import ConfigError
from flmm.privacy import PrivacyConfig
from flmm.training import TrainConfig


@dataclass(frozen=True)
class PartyConfig:
    party_id: str
    corpus: CorpusSpec
    modalities: tuple = ("image", "text")
    anchor_mu: float = 0.0
    distill_lambda: float = 0.0
    shapley_weight: float = 1.0


@dataclass(frozen=True)
class ModelConfig:
    d_v: int = 16
    d_t: int = 16
    d_emb: int = 8
    rank: int = 2
    vocab: int = 64
    temperature: float = 0.1
    bridge: bool = True


@dataclass(frozen=True)
class QualityConfig:
    iters: int = 0
    target: float = 0.9
    threshold: object = "auto"  # "auto" or a float
    floor: int = 10


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int
    rounds: int
    token: str
    deadline: float
    train: TrainConfig
    model: ModelConfig
    plan: AggregationPlan
    history_window: int
    privacy: PrivacyConfig
    parties: tuple  # PartyConfig, ordered
    eval_spec: CorpusSpec
    quality: QualityConfig

    def party_ids(self) -> tuple:
        return tuple(p.party_id for p in self.parties)


def _ints(s: str) -> tuple:
    return tuple(int(x) for x in s.replace(",", " ").split())


def load_config(path: str) -> ScenarioConfig:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path!r}")
    try:
        return _build(cp)
    except (configparser.Error, KeyError, ValueError) as e:
        raise ConfigError(f"bad config {path!r}: {e}") from e


def _build(cp: configparser.ConfigParser) -> ScenarioConfig:
    run = cp["run"] if cp.has_section("run") else {}
    seed = int(os.environ.get("FLMM_SEED", run.get("seed", "42")))

    model_sec = cp["model"] if cp.has_section("model") else {}
    model = ModelConfig(
        d_v=int(model_sec.get("d_v", 16)),
        d_t=int(model_sec.get("d_t", 16)),
        d_emb=int(model_sec.get("d_emb", 8)),
        rank=int(model_sec.get("rank", 2)),
        vocab=int(model_sec.get("vocab", 64)),
        temperature=float(model_sec.get("temperature", 0.1)),
        bridge=str(model_sec.get("bridge", "true")).lower() in ("1", "true", "yes"),
    )

    agg = cp["aggregation"] if cp.has_section("aggregation") else {}
    mask = agg.get("block_mask", ",".join(BLOCK_NAMES))
    plan = AggregationPlan(
        strategy=agg.get("strategy", "sync_avg"),
        block_mask=frozenset(b.strip() for b in mask.split(",") if b.strip()),
        staleness_exponent=float(agg.get("staleness_exponent", 0.5)),
        mixing_rate=float(agg.get("mixing_rate", 0.5)),
        chain_order=tuple(agg.get("chain_order", "").split(",")) if agg.get("chain_order") else (),
    )

    priv = cp["privacy"] if cp.has_section("privacy") else {}
    privacy = PrivacyConfig(
        dp_enabled=str(priv.get("dp_enabled", "false")).lower() in ("1", "true", "yes"),
        clip_norm=float(priv.get("clip_norm", 1.0)),
        noise_std=float(priv.get("noise_std", 0.0)),
        masking_enabled=str(priv.get("masking_enabled", "false")).lower() in ("1", "true", "yes"),
        blacklist=frozenset(_ints(priv.get("blacklist", ""))),
        sensitive_patterns=frozenset(_ints(priv.get("sensitive_patterns",
                                                    ",".join(map(str, sorted(SENSITIVE_TOKENS)))))),
        refusal_sequence=_ints(priv.get("refusal_sequence", "0")) or (0,),
    )

    parties = []
    for section in cp.sections():
        if not section.startswith("party:"):
            continue
        p = cp[section]
        pid = section.split(":", 1)[1]
        rates = {}
        for tag in ("mismatched", "sensitive_noise", "labels_only", "too_short"):
            if tag in p:
                rates[tag] = float(p[tag])
        corpus = CorpusSpec(
            party=pid,
            size=int(p.get("size", 100)),
            corruption_rates=rates,
            seed=int(p.get("seed", seed)),
            scene_class_pool=_ints(p.get("classes", "0,1,2,3,4,5,6,7")),
            d_v=model.d_v,
        )
        parties.append(PartyConfig(
            party_id=pid, corpus=corpus,
            modalities=tuple(m.strip() for m in p.get("modalities", "image,text").split(",")),
            anchor_mu=float(p.get("anchor_mu", 0.0)),
            distill_lambda=float(p.get("distill_lambda", 0.0)),
            shapley_weight=float(p.get("shapley_weight", 1.0)),
        ))
    if not parties:
        raise ConfigError("at least one [party:<id>] section is required")
    parties.sort(key=lambda p: p.party_id)

    ev = cp["eval"] if cp.has_section("eval") else {}
    eval_spec = CorpusSpec(
        party="eval", size=int(ev.get("size", 200)), corruption_rates={},
        seed=int(ev.get("seed", 999)),
        scene_class_pool=_ints(ev.get("classes", "0,1,2,3,4,5,6,7")),
        d_v=model.d_v,
    )

    q = cp["quality"] if cp.has_section("quality") else {}
    thr = q.get("threshold", "auto")
    quality = QualityConfig(
        iters=int(q.get("iters", 0)),
        target=float(q.get("target", 0.9)),
        threshold="auto" if thr == "auto" else float(thr),
        floor=int(q.get("floor", 10)),
    )

    return ScenarioConfig(
        seed=seed,
        rounds=int(run.get("rounds", 10)),
        token=run.get("token", "flmm-shared-token"),
        deadline=float(run.get("deadline", 60.0)),
        train=TrainConfig(
            epochs=int(run.get("epochs", 2)),
            lr=float(run.get("lr", 0.01)),
            batch_size=int(run.get("batch_size", 16)),
        ),
        model=model,
        plan=plan,
        history_window=int(agg.get("history_window", 16)),
        privacy=privacy,
        parties=tuple(parties),
        eval_spec=eval_spec,
        quality=quality,
    )
