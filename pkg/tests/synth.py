"""Synthetic claim/evidence corpus plus a matching mock script for end-to-end runs."""

import json
import math

from scripts import verdict_tail

VERDICTS = {"SUP": "官方证实", "REF": "官方辟谣", "NEI": "仍待核实"}
EXPLANATIONS = {"SUP": "证据支持该说法，属实。", "REF": "证据表明该说法不实，属于谣言。",
                "NEI": "现有证据不足，无法判断。"}
LABEL_CYCLE = ("SUP", "REF", "NEI", "SUP", "REF")


def build(directory, n=20):
    """Write claims.jsonl, evidence.jsonl and model.script under ``directory``."""
    claims, docs = [], []
    for i in range(n):
        label = LABEL_CYCLE[i % len(LABEL_CYCLE)]
        topic = f"第{i}号线路"
        docs.append({"id": f"e{i}", "text": f"{topic}开通消息：{VERDICTS[label]}。", "url": None,
                     "published": f"2023-01-{1 + i % 28:02d}"})
        docs.append({"id": f"n{i}", "text": f"{topic}周边天气晴朗。", "url": None, "published": None})
        claims.append({
            "id": f"c{i:02d}", "claim": f"{topic}已经开通", "label": label,
            "gold_evidence_ids": [f"e{i}"], "explanation": EXPLANATIONS[label],
            "hotspot": {"views": float(10 ** (i % 5)), "discussions": float(i), "engagements": None,
                        "posts": float(i * 3)},
            "risk_index": 1 + i % 5, "claim_date": "2023-06-01",
        })
    _write(directory / "claims.jsonl", claims)
    _write(directory / "evidence.jsonl", docs)
    (directory / "model.script").write_text(script(), encoding="utf-8")
    return directory


def script():
    sections = []
    for label, word in VERDICTS.items():
        sections.append(f"[{label.lower()}]\nReviewing.\n{verdict_tail(label, EXPLANATIONS[label])}")
    branches = [f'branch "{word}" -> {label.lower()}' for label, word in VERDICTS.items()]
    return "\\[NEED_EVIDENCE]\n" + "".join(sections) + "\n".join(branches) + "\n"


def hcpi_fixture(directory):
    """Three claims whose hotspot counts make each influence equal its risk index."""
    e1 = math.e - 1
    hot = {"views": e1, "discussions": e1, "engagements": e1, "posts": e1}
    rows = [("a", "SUP", 2, "SUP"), ("b", "REF", 1, "SUP"), ("c", "NEI", 1, "REF")]
    _write(directory / "claims.jsonl", [
        {"id": cid, "claim": f"claim {cid}", "label": gold, "gold_evidence_ids": ["e1"], "explanation": "x",
         "hotspot": hot, "risk_index": risk, "claim_date": None} for cid, gold, risk, _ in rows])
    _write(directory / "predictions.jsonl", [
        {"id": cid, "predicted_label": pred, "explanation": "y", "conflict_resolved": True, "evidence_used": [],
         "reflections": 0, "dea_injections": 0, "injected_chars": 0, "wall_ms": 0, "flags": []}
        for cid, _, _, pred in rows])
    return directory


def _write(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
