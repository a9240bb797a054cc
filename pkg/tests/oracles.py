"""Independent reference computations used by the tests."""

import math
from collections import Counter


def brute_force_postings(docs, tokenize):
    out = {}
    for doc in docs:
        terms = tokenize(doc.text)
        for term in sorted(set(terms)):
            count = 0
            for t in terms:
                if t == term:
                    count += 1
            out.setdefault(term, []).append((doc.id, count))
    return out


def brute_force_search(docs, query, k, tokenize, k1=1.2, b=0.75, as_of=None):
    """Score every document straight from its text, then sort and truncate."""
    toks = {d.id: tokenize(d.text) for d in docs}
    n = len(docs)
    avg = sum(len(t) for t in toks.values()) / n
    scored = []
    for d in docs:
        if as_of is not None and d.published is not None and d.published > as_of:
            continue
        tf_doc = Counter(toks[d.id])
        score = 0.0
        for term in tokenize(query):
            tf = tf_doc[term]
            if not tf:
                continue
            df = sum(1 for other in docs if term in toks[other.id])
            idf = math.log((n - df + 0.5) / (df + 0.5) + 1.0)
            score += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(toks[d.id]) / avg))
        if score > 0:
            scored.append((d.id, score))
    scored.sort(key=lambda x: (-x[1], x[0]))
    return scored[:k]


def confusion_prf(preds, golds, labels=("SUP", "REF", "NEI")):
    """Per-class precision/recall/F1 from an explicit confusion matrix."""
    matrix = {(g, p): 0 for g in labels for p in labels}
    for p, g in zip(preds, golds):
        matrix[(g, p)] += 1
    per_class = {}
    for c in labels:
        tp = matrix[(c, c)]
        col = sum(matrix[(g, c)] for g in labels)
        row = sum(matrix[(c, p)] for p in labels)
        prec = tp / col if col else 0.0
        rec = tp / row if row else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per_class[c] = (prec, rec, f1)
    return per_class


def all_ngrams(units, n):
    return [tuple(units[i:i + n]) for i in range(len(units) - n + 1)]


def clipped_matches(cand, ref, n):
    """Count clipped n-gram matches by enumerating candidate n-grams one by one."""
    remaining = list(all_ngrams(ref, n))
    hits = 0
    for g in all_ngrams(cand, n):
        if g in remaining:
            remaining.remove(g)
            hits += 1
    return hits, len(all_ngrams(cand, n)), len(all_ngrams(ref, n))


def bleu4_oracle(cand, ref):
    cand = [c for c in cand if not c.isspace()]
    ref = [c for c in ref if not c.isspace()]
    if not cand:
        return 0.0
    ps = []
    for n in (1, 2, 3, 4):
        hits, total, _ = clipped_matches(cand, ref, n)
        ps.append(hits / total if hits else 1 / (total + 1))
    geo = (ps[0] * ps[1] * ps[2] * ps[3]) ** 0.25
    bp = 1.0 if len(cand) > len(ref) else math.exp(1 - len(ref) / len(cand))
    return bp * geo


def lcs_oracle(a, b):
    """Plain O(n*m) table LCS."""
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[-1][-1]


def rouge_oracle(cand, ref, variant):
    cand = [c for c in cand if not c.isspace()]
    ref = [c for c in ref if not c.isspace()]
    if variant == "L":
        overlap, nc, nr = lcs_oracle(cand, ref), len(cand), len(ref)
    else:
        overlap, nc, nr = clipped_matches(cand, ref, int(variant))
    if not overlap:
        return 0.0
    p, r = overlap / nc, overlap / nr
    return 2 * p * r / (p + r)
