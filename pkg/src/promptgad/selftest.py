"""Verification suites: gradients, assignment, metrics and permutation structure.

Each suite returns a :class:`SuiteResult` carrying the largest error seen
against its tolerance. ``run_all`` is what ``promptgad selftest`` prints.
"""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import oracles
from .backbone import BackboneConfig, MiniViT
from .config import RunConfig
from .gct import GroupContextTransformer
from .heads import OUTLIER, GroupPrediction, PredictionHeads
from .losses import LossConfig, assignment_cost, clip_loss_parts, hungarian, l_con, l_group, l_ind, l_mem, match_groups, total_loss
from .metrics import EvalRecord, evaluate
from .model import build_model
from .tensor_core import (
    DTYPE,
    AttentionConfig,
    MultiHeadAttention,
    cross_entropy,
    gelu,
    grad_check,
    layer_norm,
    log_softmax,
    softmax,
)

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4
EXACT_TOL = 1e-12
METRIC_TOL = 1e-9


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    checks: int
    seconds: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name}\t{self.checks}\t{self.max_error:.3e}\t{self.tolerance:.0e}\t{status}\t{self.detail}"


# ---------------------------------------------------------------------------
# gradient checks


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _randn(g, *shape):
    return torch.randn(*shape, generator=g, dtype=DTYPE)


def _leaf(g, *shape):
    return _randn(g, *shape).requires_grad_(True)


def _weighted(out, g):
    """Scalar probe: fixed random weights dotted with the output."""
    w = _randn(g, *out.shape)
    return lambda y: (y * w).sum()


def _primitive_cases(seed: int) -> dict[str, tuple[Callable, list]]:
    g = _gen(seed)
    x = _leaf(g, 3, 5)
    w = _randn(g, 3, 5)
    gamma, beta = _leaf(g, 5), _leaf(g, 5)
    logits = _leaf(g, 4, 6)
    target = torch.randint(0, 6, (4,), generator=g)
    cw = _randn(g, 4)
    return {
        "softmax": (lambda: (softmax(x, -1) * w).sum(), [x]),
        "log_softmax": (lambda: (log_softmax(x, -1) * w).sum(), [x]),
        "layer_norm": (lambda: (layer_norm(x, gamma, beta) * w).sum(), [x, gamma, beta]),
        "gelu": (lambda: (gelu(x) * w).sum(), [x]),
        "cross_entropy": (lambda: (cross_entropy(logits, target) * cw).sum(), [logits]),
    }


def _tiny_attention() -> AttentionConfig:
    return AttentionConfig(model_dim=8, heads=2, ffn_hidden=16)


def _module_case(module: torch.nn.Module, forward: Callable, g, extra=()):
    with torch.no_grad():
        probe = _weighted(forward(), g)
    params = [p for p in module.parameters() if p.requires_grad] + list(extra)
    return (lambda: probe(forward())), params


def _tiny_run_config(seed: int) -> RunConfig:
    return RunConfig(
        image_size=8, patch_size=4, layers=2, model_dim=8, heads=2, ffn_mult=2, prompt_count=2,
        num_groups=3, frames=2, num_activities=3, num_actions=2, seed=seed,
    )


def _tiny_clip():
    boxes = np.array(
        [[[0.05, 0.1, 0.45, 0.6]] * 2, [[0.3, 0.2, 0.8, 0.7]] * 2, [[0.5, 0.5, 0.95, 0.9]] * 2, [[0.1, 0.55, 0.4, 0.95]] * 2]
    )
    targets = {"groups": [[0, 1]], "activities": [1], "singletons": [2, 3], "actions": [0, 1, 1, 0]}
    return boxes, targets


def _composite_cases(seed: int) -> dict[str, tuple[Callable, list]]:
    torch.manual_seed(seed)
    g = _gen(seed + 1000)
    cfg = _tiny_attention()
    cases = {}

    mha = MultiHeadAttention(cfg)
    q, kv = _leaf(g, 2, 3, 8), _leaf(g, 2, 4, 8)
    cases["attention"] = _module_case(mha, lambda: mha(q, kv, kv)[0], g, [q, kv])

    bb = MiniViT(BackboneConfig(image_size=8, patch_size=4, layers=2, model_dim=8, heads=2, ffn_hidden=16,
                                prompt_mode="deep", prompt_count=2, frozen=False))
    frames = _leaf(g, 2, 3, 8, 8)
    cases["backbone"] = _module_case(bb, lambda: bb(frames), g, [frames])

    gct = GroupContextTransformer(cfg, num_groups=3, frames=2)
    actors, image = _leaf(g, 4, 2, 8), _leaf(g, 4, 2, 8)
    cases["grouping_layer"] = _module_case(gct.grouping, lambda: gct.grouping(gct.g_init, actors)[0], g,
                                           [gct.g_init, actors])
    g_grp = _leaf(g, 3, 2, 8)
    cases["contextual_layer"] = _module_case(
        gct.contextual, lambda: torch.cat(gct.contextual(actors, g_grp, image)[:2]), g, [actors, g_grp, image]
    )

    heads = PredictionHeads(8, num_activities=3, num_actions=2)
    a_pool, g_pool = _leaf(g, 4, 8), _leaf(g, 3, 8)

    def heads_out():
        o = heads(a_pool, g_pool)
        return torch.cat([o["group_logits"].reshape(-1), o["action_logits"].reshape(-1), o["affinity"].reshape(-1),
                          o["actor_embed"].reshape(-1)])

    cases["heads"] = _module_case(heads, heads_out, g, [a_pool, g_pool])

    _boxes, tg = _tiny_clip()
    group_logits, affinity = _leaf(g, 3, 4), _leaf(g, 4, 4)
    with torch.no_grad():
        matching = match_groups(softmax(group_logits), softmax(affinity), tg["groups"], tg["activities"])
    action_logits, embed = _leaf(g, 4, 2), _leaf(g, 4, 8)
    labels = [0, 0, -1, -1]
    emb2 = _leaf(g, 5, 8)
    cases["loss_group"] = (lambda: l_group(group_logits, matching, tg["activities"]), [group_logits])
    cases["loss_ind"] = (lambda: l_ind(action_logits, tg["actions"]), [action_logits])
    cases["loss_mem"] = (lambda: l_mem(affinity, matching, tg["groups"], tg["singletons"]), [affinity])
    cases["loss_con"] = (lambda: l_con(embed, labels, 0.2), [embed])
    cases["loss_con_multi"] = (lambda: l_con(emb2, [0, 1, 0, 1, -1], 0.2), [emb2])

    run = _tiny_run_config(seed)
    run.frozen = True
    model = build_model(run)
    pix = _randn(g, 2, 3, 8, 8).clamp(0, 1)
    boxes, targets = _tiny_clip()
    loss_cfg = LossConfig()

    def composite():
        out = model.forward_grids(model.grids_from_frames(pix), boxes)
        parts, _ = clip_loss_parts(out.layers, out.final, targets, loss_cfg)
        return total_loss(parts, loss_cfg)

    cases["full_composite"] = (composite, [p for p in model.parameters() if p.requires_grad])
    return cases


def gradient_suite(seeds=range(5), max_entries: int = 8) -> list[SuiteResult]:
    """One result for the primitives and one per composite, each the worst over ``seeds``."""
    worst: dict[str, float] = {}
    elapsed: dict[str, float] = {}
    for seed in seeds:
        for group, cases in (("primitive", _primitive_cases(seed)), ("composite", _composite_cases(seed))):
            for name, (fn, params) in cases.items():
                key = f"{group}/{name}"
                t0 = time.perf_counter()
                entries = None if group == "primitive" else max_entries
                err = grad_check(fn, params, eps=1e-5, max_entries=entries, seed=seed)
                worst[key] = max(worst.get(key, 0.0), err)
                elapsed[key] = elapsed.get(key, 0.0) + time.perf_counter() - t0
    results = []
    n = len(list(seeds))
    for key, err in worst.items():
        tol = PRIMITIVE_TOL if key.startswith("primitive/") else COMPOSITE_TOL
        results.append(SuiteResult(f"grad/{key}", err <= tol, err, tol, n, elapsed[key]))
    return results


@contextlib.contextmanager
def flipped_backward(function_cls):
    """Temporarily negate the first input gradient of a custom autograd function."""
    original = function_cls.backward

    def broken(ctx, *grads):
        out = original(ctx, *grads)
        if isinstance(out, tuple):
            return (-out[0],) + tuple(out[1:])
        return -out

    function_cls.backward = staticmethod(broken)
    try:
        yield
    finally:
        function_cls.backward = original


# ---------------------------------------------------------------------------
# assignment


def hungarian_suite(count: int = 200, sizes=range(2, 8), seed: int = 0) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, checks, bad = 0.0, 0, []
    for n in sizes:
        for _ in range(count):
            cost = rng.random((n, n))
            if rng.random() < 0.3:
                cost = np.round(cost * 4)  # plenty of ties
            pairs = hungarian(cost)
            got = assignment_cost(cost, pairs)
            best, _ = oracles.brute_force_assignment(cost)
            err = abs(got - best)
            worst = max(worst, err)
            checks += 1
            if got != best:
                bad.append(n)
    for n in sizes:
        checks += 1
        if hungarian(np.full((n, n), 0.5)) != [(i, i) for i in range(n)]:
            bad.append(f"tie{n}")
    detail = f"failures at {bad[:5]}" if bad else "exact; ties -> identity"
    return SuiteResult("hungarian", not bad, worst, 0.0, checks, time.perf_counter() - t0, detail)


# ---------------------------------------------------------------------------
# metrics


def random_eval_set(rng: np.random.Generator, num_classes: int = 3, max_clips: int = 4,
                    max_groups: int = 4, max_actors: int = 10) -> list[EvalRecord]:
    """Toy clips with a GT partition and a predicted partition of the same actors.

    Confidences come from a small set so ranking ties occur.
    """
    records = []
    for c in range(int(rng.integers(1, max_clips + 1))):
        m = int(rng.integers(1, max_actors + 1))

        def partition(groups_max):
            k = int(rng.integers(0, min(groups_max, m) + 1))
            labels = rng.integers(-1, k, size=m) if k else np.full(m, -1)
            groups = [sorted(np.nonzero(labels == j)[0].tolist()) for j in range(k)]
            groups = [gr for gr in groups if gr]
            return groups

        gt = partition(max_groups)
        gt_members = set(i for gr in gt for i in gr)
        pred_groups = partition(max_groups)
        assignment = [OUTLIER] * m
        preds = []
        for j, gr in enumerate(pred_groups):
            for i in gr:
                assignment[i] = j
            preds.append(GroupPrediction(tuple(gr), int(rng.integers(0, num_classes)),
                                         float(rng.choice([0.3, 0.5, 0.7, 0.9]))))
        records.append(
            EvalRecord(
                clip_id=f"toy{c}",
                predictions=preds,
                pred_actions=rng.integers(0, 3, size=m).tolist(),
                pred_assignment=assignment,
                gt_groups=gt,
                gt_activities=rng.integers(0, num_classes, size=len(gt)).tolist(),
                gt_actions=rng.integers(0, 3, size=m).tolist(),
                gt_singletons=[i for i in range(m) if i not in gt_members],
            )
        )
    return records


def metric_suite(count: int = 100, seed: int = 0, num_classes: int = 3) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, bad = 0.0, []
    for s in range(count):
        recs = random_eval_set(rng, num_classes)
        got = evaluate(recs, (0.5, 1.0), num_classes)
        want = {
            "group_map@0.5": oracles.brute_group_map(recs, 0.5, num_classes),
            "group_map@1": oracles.brute_group_map(recs, 1.0, num_classes),
            "outlier_miou": oracles.brute_outlier_miou(recs),
            "social_accuracy": oracles.brute_social_accuracy(recs),
            "membership_accuracy": oracles.brute_membership_accuracy(recs),
            "individual_accuracy": oracles.brute_individual_accuracy(recs),
        }
        for key, val in want.items():
            err = abs(got[key] - val)
            worst = max(worst, err)
            if err > METRIC_TOL:
                bad.append((s, key))
        if got["group_map@0.5"] < got["group_map@1"]:
            bad.append((s, "monotonicity"))
    detail = f"failures {bad[:3]}" if bad else "matches brute force; mAP@0.5 >= mAP@1"
    return SuiteResult("metrics", not bad, worst, METRIC_TOL, count, time.perf_counter() - t0, detail)


# ---------------------------------------------------------------------------
# permutation structure


def permutation_suite(seeds=range(20)) -> SuiteResult:
    t0 = time.perf_counter()
    worst = 0.0
    cfg = AttentionConfig(model_dim=16, heads=4)
    for seed in seeds:
        torch.manual_seed(seed)
        g = _gen(seed)
        m, k, t, n = 5, 4, 3, 9
        gct = GroupContextTransformer(cfg, num_groups=k, frames=t)
        actors, image = _randn(g, m, t, 16), _randn(g, n, t, 16)
        with torch.no_grad():
            base = gct(actors, image)
            pa = torch.randperm(m, generator=g)
            perm_a = gct(actors[pa], image)
            pk = torch.randperm(k, generator=g)
            perm_k = GroupContextTransformer(cfg, num_groups=k, frames=t)
            perm_k.load_state_dict(gct.state_dict())
            perm_k.g_init.copy_(gct.g_init[pk])
            out_k = perm_k(actors, image)
        diffs = [
            (perm_a.groups_grp - base.groups_grp).abs().max(),
            (perm_a.groups_ctx - base.groups_ctx).abs().max(),
            (perm_a.actors_ctx - base.actors_ctx[pa]).abs().max(),
            (out_k.groups_grp - base.groups_grp[pk]).abs().max(),
            (out_k.groups_ctx - base.groups_ctx[pk]).abs().max(),
            (out_k.actors_ctx - base.actors_ctx).abs().max(),
        ]
        worst = max(worst, max(float(d) for d in diffs))
    counts_ok = True
    for mode in ("none", "shallow", "deep"):
        bb = MiniViT(BackboneConfig(image_size=16, patch_size=4, layers=2, model_dim=16, heads=4, prompt_mode=mode))
        with torch.no_grad():
            tokens = bb.encode(bb.patchify(torch.zeros(1, 3, 16, 16, dtype=DTYPE)))
        counts_ok &= tokens.shape[1] == bb.cfg.num_patches
    n_seeds = len(list(seeds))
    passed = worst <= EXACT_TOL and counts_ok
    detail = "token count N in none/shallow/deep" if counts_ok else "prompt tokens leaked into the output"
    return SuiteResult("permutation", passed, worst, EXACT_TOL, n_seeds, time.perf_counter() - t0, detail)


# ---------------------------------------------------------------------------


def run_all(quick: bool = False) -> list[SuiteResult]:
    results = gradient_suite(seeds=range(2) if quick else range(5))
    results.append(hungarian_suite(count=20 if quick else 200))
    results.append(metric_suite(count=20 if quick else 100))
    results.append(permutation_suite(seeds=range(5) if quick else range(20)))
    return results


def format_results(results: list[SuiteResult]) -> str:
    lines = ["suite\tchecks\tmax_error\ttolerance\tstatus\tdetail"]
    lines += [r.line() for r in results]
    failed = sum(not r.passed for r in results)
    lines.append(f"# {len(results) - failed}/{len(results)} suites passed")
    return "\n".join(lines) + "\n"
