"""Greedy-generation evaluation: per-task metrics, split aggregates, routing stats.

Scoring is deterministic: routing runs in inference mode (no noise), the
decode is greedy, and examples are visited in dataset order. Span tasks
score by exact match and F1; math tasks additionally by answer-extraction
accuracy. The "primary" metric per task (EM for spans, extraction accuracy
for math) feeds the aggregates. Macro averages tasks equally; micro weighs
examples equally; both are reported since they genuinely differ once task
counts do.
"""

import json

import numpy as np

from . import data as dt
from . import metrics as mx
from .model import decode

MATH_TASKS = ("mod_add", "mod_mul")


def primary_metric_name(task):
    return "math_accuracy" if task in MATH_TASKS else "em"


def score_example(pred, gold, task, raw=False):
    em = mx.exact_match(pred, gold, raw=raw)
    f1 = mx.f1(pred, gold, raw=raw)
    rec = {"em": em, "f1": f1}
    if task in MATH_TASKS:
        rec["math_accuracy"] = mx.math_accuracy(pred, gold, raw=raw)
        rec["format_failure"] = mx.extract_answer(pred) is None
        rec["primary"] = rec["math_accuracy"]
    else:
        rec["format_failure"] = False
        rec["primary"] = em
    return rec


def _gen_budget(ex, max_new):
    if max_new is not None:
        return max_new
    return len(dt.encode_example(ex)[1]) + 2  # target incl. EOS, plus slack


def eval_dataset(
    provider,
    lm,
    examples,
    batch_size=64,
    max_new=None,
    raw=False,
    routing_log=None,
    keep_records=False,
):
    """Score a dataset with one routed greedy generation per example.

    Examples whose prompt+input+generation budget cannot fit max_seq are
    skipped and counted, never silently dropped. Returns a JSON-able report.
    """
    n_experts = getattr(provider, "w", None)
    n_experts = None if n_experts is None else n_experts.shape[0]
    expert_counts = None if n_experts is None else np.zeros(n_experts, dtype=np.int64)
    expert_task = {} if n_experts is not None else None

    # prompt length is input-independent per provider kind; probe once
    kept, skipped = [], 0
    if examples:
        probe = dt.build_input_batch([examples[0]])
        k = provider.prompt_node(lm, probe, training=False)[0].value.shape[1]
    else:
        k = 0
    for ex in examples:
        need = k + len(dt.encode_example(ex)[0]) + _gen_budget(ex, max_new)
        if need > lm.cfg.max_seq:
            skipped += 1
        else:
            kept.append(ex)

    per_task = {}
    records = []
    log_handle = open(routing_log, "w", encoding="utf-8") if routing_log else None
    try:
        for lo in range(0, len(kept), batch_size):
            chunk = kept[lo : lo + batch_size]
            batch = dt.build_input_batch(chunk)
            prompt_node, decisions = provider.prompt_node(lm, batch, training=False)
            budget = max(_gen_budget(ex, max_new) for ex in chunk)
            preds = lm.generate(prompt_node.value, batch.token_ids, batch.attn_mask, budget)
            if decisions is not None:
                for ex, dec in zip(chunk, decisions):
                    for idx in dec.selected:
                        expert_counts[idx] += 1
                    row = expert_task.setdefault(ex.task, np.zeros(n_experts, dtype=np.int64))
                    row[dec.selected[0]] += 1
                    if log_handle is not None:
                        log_handle.write(
                            json.dumps(
                                {
                                    "id": ex.id,
                                    "task": ex.task,
                                    "selected": list(dec.selected),
                                    "weights": [float(x) for x in dec.weights],
                                    "soft": [float(x) for x in dec.soft],
                                }
                            )
                            + "\n"
                        )
            for ex, pred_ids in zip(chunk, preds):
                pred = decode(pred_ids)
                rec = score_example(pred, ex.target, ex.task, raw=raw)
                slot = per_task.setdefault(
                    ex.task,
                    {"count": 0, "em": 0.0, "f1": 0.0, "math_accuracy": 0.0,
                     "format_failures": 0, "primary": 0.0},
                )
                slot["count"] += 1
                slot["em"] += rec["em"]
                slot["f1"] += rec["f1"]
                slot["math_accuracy"] += rec.get("math_accuracy", 0.0)
                slot["format_failures"] += int(rec["format_failure"])
                slot["primary"] += rec["primary"]
                if keep_records:
                    records.append({"id": ex.id, "task": ex.task, "pred": pred, **rec})
    finally:
        if log_handle is not None:
            log_handle.close()

    for task, slot in per_task.items():
        c = slot["count"]
        slot["primary_sum"] = slot["primary"]
        for key in ("em", "f1", "math_accuracy", "primary"):
            slot[key] = slot[key] / c if c else 0.0
        if task not in MATH_TASKS:
            del slot["math_accuracy"]

    report = {
        "count": len(kept),
        "skipped": skipped,
        "per_task": per_task,
        "expert_counts": None if expert_counts is None else expert_counts.tolist(),
        "expert_task_counts": None
        if expert_task is None
        else {t: v.tolist() for t, v in expert_task.items()},
    }
    if keep_records:
        report["records"] = records
    return report


def aggregate(report, tasks):
    """Macro and micro primary-metric averages over the named tasks."""
    present = [t for t in tasks if t in report["per_task"]]
    if not present:
        return {"tasks": list(tasks), "count": 0, "macro": 0.0, "micro": 0.0}
    slots = [report["per_task"][t] for t in present]
    total = sum(s["count"] for s in slots)
    return {
        "tasks": list(tasks),
        "count": total,
        "macro": float(np.mean([s["primary"] for s in slots])),
        "micro": float(sum(s["primary_sum"] for s in slots) / total) if total else 0.0,
    }


def split_report(provider, lm, id_examples, ood_examples, **kw):
    """Evaluate both splits and attach labeled aggregates."""
    id_tasks = sorted({ex.task for ex in id_examples})
    ood_tasks = sorted({ex.task for ex in ood_examples})
    rep_id = eval_dataset(provider, lm, id_examples, **kw)
    kw.pop("routing_log", None)
    rep_ood = eval_dataset(provider, lm, ood_examples, **kw)
    return {
        "in_domain": {**rep_id, "aggregate": aggregate(rep_id, id_tasks)},
        "out_of_domain": {**rep_ood, "aggregate": aggregate(rep_ood, ood_tasks)},
    }
