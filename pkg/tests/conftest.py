import json

import pytest


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write((row if isinstance(row, str) else json.dumps(row, ensure_ascii=False)) + "\n")
    return path


def claim_row(id="c1", label="SUP", gold=("e1",), **extra):
    row = {"id": id, "claim": f"claim {id}", "label": label, "gold_evidence_ids": list(gold),
           "explanation": "", "hotspot": None, "risk_index": None, "claim_date": None}
    row.update(extra)
    return row


@pytest.fixture
def jsonl(tmp_path):
    def make(name, rows):
        return write_jsonl(tmp_path / name, rows)
    return make
