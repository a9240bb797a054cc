"""Evaluation metrics: verification accuracy/F1, character-level BLEU-4 and
ROUGE, the five-level explanation consistency score, hotspot influence and
the influence-weighted perception index."""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np

from . import LABELS
from .corpus import HOTSPOT_FIELDS, ClaimSample

# ---------------------------------------------------------------------------
# verification


def classification_metrics(preds: Sequence[str], golds: Sequence[str],
                           labels: Sequence[str] = LABELS) -> tuple[float, float, float, float]:
    """Accuracy and macro F1/precision/recall; empty classes count as 0 in the macro mean."""
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(golds)} golds")
    if not golds:
        raise ValueError("no samples")
    acc = sum(p == g for p, g in zip(preds, golds)) / len(golds)
    f1s, ps, rs = [], [], []
    for label in labels:
        tp = sum(p == label and g == label for p, g in zip(preds, golds))
        n_pred = sum(p == label for p in preds)
        n_gold = sum(g == label for g in golds)
        p = tp / n_pred if n_pred else 0.0
        r = tp / n_gold if n_gold else 0.0
        f1s.append(2 * p * r / (p + r) if p + r else 0.0)
        ps.append(p)
        rs.append(r)
    k = len(labels)
    return acc, sum(f1s) / k, sum(ps) / k, sum(rs) / k


# ---------------------------------------------------------------------------
# overlap metrics


def chars(text: str) -> list[str]:
    """Character units for overlap metrics; whitespace is dropped."""
    return [c for c in text if not c.isspace()]


def ngrams(units: Sequence[str], n: int) -> Counter:
    return Counter(tuple(units[i:i + n]) for i in range(len(units) - n + 1))


def bleu4(candidate: str, reference: str) -> float:
    """Sentence BLEU-4 on characters with add-one smoothing of zero match counts.

    A precision whose clipped match count is zero becomes 1 / (total + 1).
    """
    cand, ref = chars(candidate), chars(reference)
    if not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        c_grams, r_grams = ngrams(cand, n), ngrams(ref, n)
        total = sum(c_grams.values())
        matches = sum(min(c, r_grams[g]) for g, c in c_grams.items())
        precision = matches / total if matches else 1.0 / (total + 1)
        log_sum += math.log(precision)
    bp = 1.0 if len(cand) > len(ref) else math.exp(1 - len(ref) / len(cand))
    return bp * math.exp(log_sum / 4)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _f1(overlap: float, n_cand: int, n_ref: int) -> float:
    if not overlap or not n_cand or not n_ref:
        return 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return 2 * p * r / (p + r)


def rouge(candidate: str, reference: str, variant="L") -> float:
    """Character ROUGE-1, ROUGE-2 or ROUGE-L F1."""
    cand, ref = chars(candidate), chars(reference)
    variant = str(variant).upper()
    if variant == "L":
        return _f1(lcs_length(cand, ref), len(cand), len(ref))
    if variant not in ("1", "2"):
        raise ValueError(f"unknown ROUGE variant {variant!r}")
    n = int(variant)
    c_grams, r_grams = ngrams(cand, n), ngrams(ref, n)
    overlap = sum((c_grams & r_grams).values())
    return _f1(overlap, sum(c_grams.values()), sum(r_grams.values()))


# ---------------------------------------------------------------------------
# explanation consistency

TIERS = ("full", "partial", "divergence")

# (label correct, judge tier) -> level
_ECS_TABLE = {
    (False, "divergence"): 1,
    (False, "partial"): 2,
    (False, "full"): 2,
    (True, "divergence"): 3,
    (True, "partial"): 4,
    (True, "full"): 5,
}


class JudgeError(RuntimeError):
    pass


@dataclass(frozen=True)
class EcsLevel:
    level: int

    def __post_init__(self):
        if self.level not in (1, 2, 3, 4, 5):
            raise ValueError(f"ECS level must be 1..5, got {self.level}")

    @property
    def normalized(self) -> float:
        return (0.2, 0.4, 0.6, 0.8, 1.0)[self.level - 1]


class Judge(Protocol):
    def judge(self, gold_label: str, pred_label: str, gold_explanation: str,
              pred_explanation: str) -> str: ...


POLARITY_KEYWORDS = {
    "SUP": ("属实", "真实", "正确", "支持", "support", "true", "accurate", "correct"),
    "REF": ("不实", "虚假", "错误", "谣言", "反驳", "refute", "false", "incorrect", "inaccurate"),
    "NEI": ("不足", "无法", "不确定", "难以", "not enough", "insufficient", "unverifiable", "cannot"),
}


class RuleJudge:
    """Offline judge: gold-label keyword plus character ROUGE-L against the gold explanation."""

    def __init__(self, full: float = 0.5, partial: float = 0.2):
        self.full = full
        self.partial = partial

    def judge(self, gold_label, pred_label, gold_explanation, pred_explanation):
        text = pred_explanation.lower()
        keyword = any(k in text for k in POLARITY_KEYWORDS[gold_label])
        if not gold_explanation.strip():
            return "full" if keyword else "divergence"
        score = rouge(pred_explanation, gold_explanation, "L")
        if keyword and score >= self.full:
            return "full"
        if score >= self.partial:
            return "partial"
        return "divergence"


class ConstantJudge:
    def __init__(self, tier: str):
        if tier not in TIERS:
            raise ValueError(f"tier must be one of {TIERS}")
        self.tier = tier

    def judge(self, gold_label, pred_label, gold_explanation, pred_explanation):
        return self.tier


JUDGE_PROMPT = """Compare a generated fact-check explanation with the reference explanation.
Reference label: {gold_label}
Reference explanation: {gold}
Generated explanation: {pred}

Rate how consistent the generated explanation's content is with the reference:
"full" (same conclusion and reasons), "partial" (some reasons match), or "divergence" (conflicting or unrelated).
Reply with JSON only: {{"consistency": "full" | "partial" | "divergence"}}"""


class LLMJudge:
    """Judge backed by an OpenAI-compatible chat endpoint."""

    def __init__(self, base_url: str, model: str, api_key: Optional[str] = None, timeout: float = 60.0,
                 transport=None):
        import httpx

        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.model = model
        self._client = httpx.Client(base_url=base_url.rstrip("/"), timeout=timeout, headers=headers,
                                    transport=transport)

    def judge(self, gold_label, pred_label, gold_explanation, pred_explanation):
        import httpx

        body = {
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": JUDGE_PROMPT.format(
                gold_label=gold_label, gold=gold_explanation or "(none)", pred=pred_explanation)}],
        }
        try:
            resp = self._client.post("/chat/completions", json=body)
            resp.raise_for_status()
            content = resp.json()["choices"][0]["message"]["content"]
        except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
            raise JudgeError(f"judge request failed: {exc}") from exc
        start, end = content.find("{"), content.rfind("}")
        try:
            tier = json.loads(content[start:end + 1])["consistency"]
        except (ValueError, KeyError, TypeError):
            raise JudgeError(f"unparseable judge reply: {content[:120]!r}") from None
        if tier not in TIERS:
            raise JudgeError(f"judge returned unknown tier {tier!r}")
        return tier


def make_judge(spec: str) -> Judge:
    """``rule``, ``full``/``partial``/``divergence`` (constant), ``env`` or an http(s) URL."""
    if spec == "rule":
        return RuleJudge()
    if spec in TIERS:
        return ConstantJudge(spec)
    if spec == "env":
        spec = os.environ.get("FACTVERIFY_JUDGE_URL", "")
        if not spec:
            raise ValueError("FACTVERIFY_JUDGE_URL is unset")
    if spec.startswith(("http://", "https://")):
        return LLMJudge(spec, os.environ.get("FACTVERIFY_JUDGE_MODEL", "gpt-4o"),
                        os.environ.get("FACTVERIFY_JUDGE_API_KEY"))
    raise ValueError(f"unknown judge {spec!r}")


def ecs_score(gold_label: str, pred_label: str, gold_explanation: str, pred_explanation: str,
              judge: Judge) -> EcsLevel:
    tier = judge.judge(gold_label, pred_label, gold_explanation, pred_explanation)
    if tier not in TIERS:
        raise JudgeError(f"judge returned unknown tier {tier!r}")
    return EcsLevel(_ECS_TABLE[(gold_label == pred_label, tier)])


# ---------------------------------------------------------------------------
# influence and the perception index


@dataclass(frozen=True)
class InfluenceWeights:
    alpha: float = 0.05   # views
    beta: float = 0.2     # discussions
    kappa: float = 0.15   # engagements
    lam: float = 0.6      # posts

    def __post_init__(self):
        ws = (self.alpha, self.beta, self.kappa, self.lam)
        if any(w < 0 for w in ws):
            raise ValueError("influence weights must be non-negative")
        if not math.isclose(math.fsum(ws), 1.0, abs_tol=1e-9):
            raise ValueError(f"influence weights must sum to 1, got {math.fsum(ws)}")

    @classmethod
    def parse(cls, text: str) -> "InfluenceWeights":
        parts = [float(x) for x in text.split(",")]
        if len(parts) != 4:
            raise ValueError("expected four comma-separated weights: views,discussions,engagements,posts")
        return cls(*parts)

    def for_field(self, name: str) -> float:
        return {"views": self.alpha, "discussions": self.beta, "engagements": self.kappa, "posts": self.lam}[name]


def hotspot_percentiles(samples: Sequence[ClaimSample], q: float = 25.0) -> dict[str, float]:
    """Per-field percentile over the present values; 0 for a field never observed."""
    out = {}
    for name in HOTSPOT_FIELDS:
        values = [getattr(s.hotspot, name) for s in samples
                  if s.hotspot is not None and getattr(s.hotspot, name) is not None]
        out[name] = float(np.percentile(values, q)) if values else 0.0
    return out


def influence(sample: ClaimSample, weights: InfluenceWeights, imputes: Mapping[str, float]) -> float:
    """Risk-weighted sum of log1p hotspot counts; missing counts take the imputed value."""
    risk = sample.risk_index if sample.risk_index is not None else 1
    total = 0.0
    for name in HOTSPOT_FIELDS:
        value = getattr(sample.hotspot, name) if sample.hotspot is not None else None
        if value is None:
            value = imputes[name]
        if value < 0:
            raise ValueError(f"sample {sample.id!r}: negative {name}")
        total += weights.for_field(name) * math.log(1 + value)
    return risk * total


def scale_influence(raw: Sequence[float], max_ratio: float = 10.0) -> list[float]:
    """Raise every value below ``max / max_ratio`` up to that floor."""
    if not raw:
        raise ValueError("no influence values")
    if any(v < 0 for v in raw):
        raise ValueError("influence values must be non-negative")
    top = max(raw)
    if top == 0:
        return [1.0] * len(raw)
    floor = top / max_ratio
    return [max(v, floor) for v in raw]


def hcpi(golds: Sequence[str], preds: Sequence[str], ecs: Sequence[float],
         influences: Sequence[float]) -> float:
    """Influence-weighted perception index; pairs not listed in the case table score 0."""
    if not (len(golds) == len(preds) == len(ecs) == len(influences)):
        raise ValueError("hcpi inputs must be aligned")
    terms = []
    for g, p, e, inf in zip(golds, preds, ecs, influences):
        if g == "SUP":
            if p == "SUP":
                terms.append(inf * e)
            elif p == "REF":
                terms.append(-2 * inf)
        elif g == "REF":
            if p == "REF":
                terms.append(inf * e)
        elif g == "NEI":
            if p == "REF":
                terms.append(-inf)
            elif p == "NEI":
                terms.append(inf * e)
        else:
            raise ValueError(f"unknown gold label {g!r}")
    num = math.fsum(terms)
    den = math.fsum(influences)
    if den == 0:
        raise ZeroDivisionError("total influence is zero")
    return num / den


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricReport:
    n: int
    accuracy: float
    f1_macro: float
    precision_macro: float
    recall_macro: float
    bleu4: float
    rouge1: float
    rouge2: float
    rougeL: float
    ecs_mean: Optional[float]
    ecs_unscored: int
    hcpi: Optional[float]
    recall_at: Optional[dict[str, float]] = None
    ecs_distribution: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        data = asdict(self)
        if data["recall_at"] is None:
            del data["recall_at"]
        return data

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def evaluate(samples: Sequence[ClaimSample], predictions: Mapping, judge: Judge,
             weights: InfluenceWeights = InfluenceWeights(), rankings: Optional[Mapping] = None,
             ks: Sequence[int] = (1, 2, 3, 5)) -> MetricReport:
    """Build a MetricReport. ``predictions`` maps claim id to an object with
    ``predicted_label`` and ``explanation``.

    Samples whose judge call fails are left out of both the ECS mean and HCPI.
    """
    from .retrieval import recall_at_k

    missing = [s.id for s in samples if s.id not in predictions]
    if missing:
        raise KeyError(f"no prediction for: {', '.join(missing)}")
    preds = [predictions[s.id] for s in samples]
    golds = [s.label for s in samples]
    labels = [p.predicted_label for p in preds]
    acc, f1, prec, rec = classification_metrics(labels, golds)

    cands = [p.explanation for p in preds]
    refs = [s.explanation for s in samples]
    n = len(samples)
    overlap = {
        "bleu4": math.fsum(bleu4(c, r) for c, r in zip(cands, refs)) / n,
        "rouge1": math.fsum(rouge(c, r, "1") for c, r in zip(cands, refs)) / n,
        "rouge2": math.fsum(rouge(c, r, "2") for c, r in zip(cands, refs)) / n,
        "rougeL": math.fsum(rouge(c, r, "L") for c, r in zip(cands, refs)) / n,
    }

    imputes = hotspot_percentiles(samples)
    infs = scale_influence([influence(s, weights, imputes) for s in samples])
    scored, unscored = [], 0
    dist: Counter = Counter()
    for s, p, inf in zip(samples, preds, infs):
        try:
            level = ecs_score(s.label, p.predicted_label, s.explanation, p.explanation, judge)
        except JudgeError:
            unscored += 1
            continue
        dist[str(level.level)] += 1
        scored.append((s.label, p.predicted_label, level.normalized, inf))
    ecs_mean = math.fsum(x[2] for x in scored) / len(scored) if scored else None
    index = hcpi(*map(list, zip(*scored))) if scored else None

    recall_at = None
    if rankings is not None:
        absent = [s.id for s in samples if s.id not in rankings]
        if absent:
            raise KeyError(f"no ranking for: {', '.join(absent)}")
        recall_at = {str(k): recall_at_k(rankings, samples, k) for k in ks}

    return MetricReport(n=n, accuracy=acc, f1_macro=f1, precision_macro=prec, recall_macro=rec,
                        ecs_mean=ecs_mean, ecs_unscored=unscored, hcpi=index, recall_at=recall_at,
                        ecs_distribution=dict(sorted(dist.items())), **overlap)
