#!/usr/bin/env python3
"""Generates the seeded mining fixture and its brute-force expected output.

    python3 oracle.py            # rewrite input.jsonl, expected.jsonl, expected_audit.jsonl
    python3 oracle.py --check    # recompute and compare with the committed files

The mining rules are implemented here from scratch with plain loops:
cosine = sequential dot / (sqrt(sequential q.q) * sqrt(sequential d.d)),
top-K by (score desc, id asc), positives kept iff score > t_plus,
negatives = non-positive top-K hits with score < mean_positive + delta_minus.
Floats are printed in the same shortest round-trip layout serde_json uses.
"""

import math
import random
import sys
from decimal import Decimal
from pathlib import Path

HERE = Path(__file__).resolve().parent
SEED = 42
DIM = 16
CLUSTERS = 20
DOCS_PER_CLUSTER = 10
K = 10
T_PLUS = 0.4
DELTA_MINUS = 0.05


def fmt_float(x):
    if x != x or x in (float("inf"), float("-inf")):
        raise ValueError("non-finite")
    if x == 0.0:
        return "-0.0" if math.copysign(1.0, x) < 0 else "0.0"
    sign = "-" if x < 0 else ""
    t = Decimal(repr(abs(x))).as_tuple()
    digits = "".join(map(str, t.digits)).lstrip("0")
    exp = t.exponent + (len("".join(map(str, t.digits))) - len("".join(map(str, t.digits)).rstrip("0")))
    digits = digits.rstrip("0")
    length = len(digits)
    kk = length + exp
    if 0 <= exp and kk <= 16:
        body = digits + "0" * exp + ".0"
    elif 0 < kk <= 16:
        body = digits[:kk] + "." + digits[kk:]
    elif -5 < kk <= 0:
        body = "0." + "0" * (-kk) + digits
    elif length == 1:
        body = digits + "e" + str(kk - 1)
    else:
        body = digits[0] + "." + digits[1:] + "e" + str(kk - 1)
    return sign + body


def js(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return fmt_float(v)
    if isinstance(v, str):
        out = ['"']
        for ch in v:
            if ch == '"':
                out.append('\\"')
            elif ch == "\\":
                out.append("\\\\")
            elif ord(ch) < 0x20:
                out.append({"\n": "\\n", "\t": "\\t", "\r": "\\r", "\b": "\\b", "\f": "\\f"}.get(ch, "\\u%04x" % ord(ch)))
            else:
                out.append(ch)
        out.append('"')
        return "".join(out)
    if isinstance(v, list):
        return "[" + ",".join(js(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ",".join(js(k) + ":" + js(x) for k, x in v.items()) + "}"
    raise TypeError(type(v))


def unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def cos(a, b):
    return seq_dot(a, b) / (math.sqrt(seq_dot(a, a)) * math.sqrt(seq_dot(b, b)))


def generate():
    rng = random.Random(SEED)
    centers = [unit([rng.gauss(0, 1) for _ in range(DIM)]) for _ in range(CLUSTERS)]

    def noisy(c, scale):
        return [round(x + scale * rng.gauss(0, 1) / math.sqrt(DIM), 3) for x in c]

    docs = []
    for c in range(CLUSTERS):
        for j in range(DOCS_PER_CLUSTER):
            docs.append(("d%03d" % (c * DOCS_PER_CLUSTER + j), noisy(centers[c], 0.5)))
    queries = []
    rels = []
    for i in range(CLUSTERS):
        qid = "q%02d" % i
        if i == 16:
            # a direction far from every cluster, labelled with its weakest top-K hits
            while True:
                q = [round(x, 3) for x in unit([rng.gauss(0, 1) for _ in range(DIM)])]
                hits = sorted(((cos(q, v), d) for d, v in docs), key=lambda t: (-t[0], t[1]))[:K]
                weak = [d for sc, d in hits if sc <= T_PLUS]
                if len(weak) >= 2:
                    break
            queries.append((qid, q))
            rels.append({"query": qid, "pos": weak[-2:], "neg": []})
            continue
        scale = 3.0 if i == 15 else 0.4
        queries.append((qid, noisy(centers[i], scale)))
        own = [d for d, _ in docs[i * DOCS_PER_CLUSTER:(i + 1) * DOCS_PER_CLUSTER]]
        other = [d for d, _ in docs if d not in own]
        if i == 17:
            rels.append({"query": qid, "pos": [], "neg": rng.sample(other, 2)})
            continue
        if i == 18:
            continue
        if i == 14:
            far = [d for d, _ in docs[((i + 7) % CLUSTERS) * DOCS_PER_CLUSTER:((i + 8) % CLUSTERS) * DOCS_PER_CLUSTER]]
            pos = rng.sample(far, 2)
        else:
            pos = rng.sample(own, 3 if i % 4 == 0 else 2)
        neg = rng.sample(other, 1)
        rel = {"query": qid, "pos": pos, "neg": neg}
        if i % 3 == 0:
            rel["scores"] = {d: float(s) for d, s in sorted(zip(pos + neg, [5.0, 4.5, 0.5, 3.0]))}
        rels.append(rel)
    return queries, docs, rels


def dataset_lines(instruction, queries, docs, rels):
    lines = [js({"instruction": instruction})]
    for qid, v in queries:
        lines.append(js({"kind": "query", "id": qid, "parts": [{"text": "query " + qid}], "embedding": v}))
    for did, v in docs:
        lines.append(js({"kind": "doc", "id": did, "parts": [{"text": "document " + did}], "embedding": v}))
    for r in rels:
        rec = {"kind": "rel", "query": r["query"], "pos": r["pos"], "neg": r["neg"]}
        if r.get("scores"):
            rec["scores"] = dict(sorted(r["scores"].items()))
        lines.append(js(rec))
    return lines


def seq_dot(a, b):
    s = 0.0
    for x, y in zip(a, b):
        s += x * y
    return s


def mine(queries, docs, rels):
    doc_norms = [math.sqrt(seq_dot(v, v)) for _, v in docs]
    by_query = {r["query"]: r for r in rels}
    audit = []
    kept_rels = []
    kept_ids = set()
    for qid, q in queries:
        qn = math.sqrt(seq_dot(q, q))
        scored = [(seq_dot(q, v) / (qn * doc_norms[j]), did) for j, (did, v) in enumerate(docs)]
        scored.sort(key=lambda t: (-t[0], t[1]))
        top = scored[:K]
        labeled = by_query.get(qid, {}).get("pos", [])
        if not labeled:
            audit.append({"query": qid, "status": "discarded", "reason": "no_labeled_positive"})
            continue
        retrieved = [(s, d) for s, d in top if d in labeled]
        if not retrieved:
            audit.append({"query": qid, "status": "discarded", "reason": "positive_not_retrieved"})
            continue
        refined = [(s, d) for s, d in retrieved if s > T_PLUS]
        if not refined:
            audit.append({"query": qid, "status": "discarded", "reason": "below_threshold"})
            continue
        total = 0.0
        for s, _ in refined:
            total += s
        mean = total / len(refined)
        negs = [d for s, d in top if d not in labeled and s < mean + DELTA_MINUS]
        kept_rels.append({"query": qid, "pos": [d for _, d in refined], "neg": negs,
                          "scores": by_query[qid].get("scores", {})})
        kept_ids.add(qid)
        audit.append({"query": qid, "status": "kept", "mean_positive_score": mean,
                      "positives": len(refined), "negatives": len(negs)})
    kept_queries = [(qid, v) for qid, v in queries if qid in kept_ids]
    return kept_queries, kept_rels, audit


def main():
    instruction = "Retrieve the passage that answers the question."
    queries, docs, rels = generate()
    files = {
        "input.jsonl": dataset_lines(instruction, queries, docs, rels),
    }
    kq, kr, audit = mine(queries, docs, rels)
    files["expected.jsonl"] = dataset_lines(instruction, kq, docs, kr)
    files["expected_audit.jsonl"] = [js(a) for a in audit]
    check = "--check" in sys.argv
    ok = True
    for name, lines in files.items():
        text = "\n".join(lines) + "\n"
        path = HERE / name
        if check:
            if path.read_text() != text:
                print("mismatch:", name)
                ok = False
        else:
            path.write_text(text)
    reasons = {}
    for a in audit:
        key = a.get("reason", a["status"])
        reasons[key] = reasons.get(key, 0) + 1
    print(reasons)
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
