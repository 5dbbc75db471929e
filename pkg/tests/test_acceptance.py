"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line before asserting."""
import itertools
import json
import time

import numpy as np
import pytest
import torch

from promptkpt.cli import main
from promptkpt.config import desk_config
from promptkpt.data.synth import TEMPLATES, synth_dataset
from promptkpt.data.unify import sample_subset, standardize_orientation, unify
from promptkpt.geometry import giou, hflip, oks
from promptkpt.losses import SetPrediction, focal_loss, hungarian, total_loss
from promptkpt.metrics import evaluate_ap, evaluate_pck
from promptkpt.pipeline import SceneSet, alignment_score, build_model, evaluate, train
from promptkpt.prompts import ClassPrompt, TextPrompt, VisualPrompt

import test_data
import test_losses
import test_metrics
from test_prompts import CAT, PERSON, make_text_encoder, make_visual_encoder

FD_EPS = 1e-6
FD_REL_TOL = 1e-4
PCK_TEXT_MIN, AP_TEXT_MIN, PCK_VISUAL_MIN = 0.95, 0.80, 0.90
TRAIN_STEPS_MAX, TRAIN_SECONDS_MAX = 5000, 20 * 60
PARITY_TOL = 0.05
ALIGN_GAP_MIN = 0.2


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    return ok


def fd_relative_error(f, x):
    """Central-difference check of ``f: R^n -> R``: ||g_auto - g_fd|| / ||g_fd||."""
    x = x.detach().clone().requires_grad_()
    (g_auto,) = torch.autograd.grad(f(x), x)
    flat = x.detach().clone().reshape(-1)
    g_fd = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            hi, lo = flat.clone(), flat.clone()
            hi[i] += FD_EPS
            lo[i] -= FD_EPS
            g_fd[i] = (f(hi.view_as(x)) - f(lo.view_as(x))) / (2 * FD_EPS)
    return float((g_auto.reshape(-1) - g_fd).norm() / g_fd.norm().clamp_min(1e-12))


def test_criterion_1_gradient_fidelity(capsys):
    start = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    d = torch.float64
    worst = {}
    for s in range(20):
        w = torch.randn(5, generator=g, dtype=d)
        xy = torch.rand(5, 2, generator=g, dtype=d) * 0.6 + 0.2
        wh = torch.rand(5, 2, generator=g, dtype=d) * 0.3 + 0.1
        ref = torch.cat([torch.rand(5, 2, generator=g, dtype=d) * 0.6 + 0.2,
                         torch.rand(5, 2, generator=g, dtype=d) * 0.3 + 0.1], -1)
        errs = {"giou": fd_relative_error(lambda b: (w * giou(b, ref)).sum(), torch.cat([xy, wh], -1))}
        gt = torch.rand(6, 2, generator=g, dtype=d)
        vis = torch.rand(6, generator=g) > 0.3
        vis[0] = True
        errs["oks"] = fd_relative_error(lambda p: oks(p, gt, vis, 0.2, 0.1), gt + 0.05 * torch.randn(
            6, 2, generator=g, dtype=d))
        t = (torch.rand(6, generator=g) > 0.5).double()
        errs["focal_loss"] = fd_relative_error(lambda p: focal_loss(p, t).sum(),
                                               torch.rand(6, generator=g, dtype=d) * 0.9 + 0.05)
        pred, gts, frozen = test_losses.instance(s)
        sizes = [b.numel() for b in pred.boxes] + [p.numel() for p in pred.kpt_points]
        flat = torch.cat([b.reshape(-1) for b in pred.boxes] + [p.reshape(-1) for p in pred.kpt_points])

        def total(v):
            parts = list(torch.split(v, sizes))
            nb = len(pred.boxes)
            boxes = [p.view(-1, 4) for p in parts[:nb]]
            pts = [p.view(-1, 2) for p in parts[nb:]]
            pr = SetPrediction(pred.obj_logits, boxes, pts, pred.kpt_logits, pred.kpt_owner, pred.kpt_row,
                               pred.kpt_slot)
            return total_loss(pr, gts, matches=frozen).total

        errs["total_loss"] = fd_relative_error(total, flat)
        for k, v in errs.items():
            worst[k] = max(worst.get(k, 0.0), v)
    elapsed = time.perf_counter() - start
    ok = all(v < FD_REL_TOL for v in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert verdict(capsys, 1, ok, f"worst relative error over 20 instances: {detail} (< {FD_REL_TOL}); "
                                  f"{elapsed:.1f}s (< 60s)")


def test_criterion_2_matcher_optimality(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    checked, bad = 0, 0
    for n in range(1, 8):
        perms = np.array(list(itertools.permutations(range(n))))
        for _ in range(1000):
            c = rng.normal(size=(n, n))
            best = c[perms, np.arange(n)].sum(1).min()
            m = hungarian(c)
            got = sum(c[p, q] for p, q in m.pairs)
            bad += not np.isclose(got, best, rtol=0, atol=1e-12)
            checked += 1
    elapsed = time.perf_counter() - start
    ok = bad == 0 and elapsed < 60
    assert verdict(capsys, 2, ok, f"{checked - bad}/{checked} matrices (n = 1..7, 1000 each) hit the exhaustive "
                                  f"minimum; {elapsed:.1f}s (< 60s)")


def test_criterion_3_encoder_invariants(capsys):
    start = time.perf_counter()
    venc = make_visual_encoder().eval()
    rng = np.random.default_rng(0)
    identical, dichotomy = True, True
    for _ in range(50):
        k = int(rng.integers(2, 8))
        kp = np.column_stack([rng.uniform(0, 1, (k, 2)), rng.uniform(size=k) < 0.6]).astype(np.float64)
        image = torch.rand(3, 32, 32)
        moved = kp.copy()
        hidden = moved[:, 2] == 0
        moved[hidden, :2] = rng.uniform(-5, 5, (int(hidden.sum()), 2))
        names = [f"k{i}" for i in range(k)]
        a = venc(VisualPrompt(image, kp, names, "x"))
        b = venc(VisualPrompt(image, moved, names, "x"))
        identical &= torch.equal(a.kpt, b.kpt) and torch.equal(a.obj, b.obj)
        is_mask = (venc.initial_tokens(kp) == venc.mask_token).all(-1).numpy()
        dichotomy &= bool(np.array_equal(is_mask, kp[:, 2] == 0))
    tenc = make_text_encoder().eval()
    pf = tenc(TextPrompt("", [ClassPrompt("person", PERSON), ClassPrompt("cat", CAT)]))
    shared = [n for n in PERSON if n in CAT]
    rows_equal = all(torch.equal(pf.kpt[PERSON.index(n)], pf.kpt[17 + CAT.index(n)]) for n in shared)
    elapsed = time.perf_counter() - start
    ok = identical and dichotomy and rows_equal and bool(shared) and elapsed < 60
    assert verdict(capsys, 3, ok, f"invisible perturbation bit-identical={identical}, mask path == invisible set="
                                  f"{dichotomy}, shared names {shared} give identical rows={rows_equal}; "
                                  f"{elapsed:.1f}s (< 60s)")


@pytest.fixture(scope="module")
def overfit():
    """Mixed-modality model, text-only ablation and untrained baseline on the 16-image set."""
    torch.set_num_threads(1)
    ds, pixels = synth_dataset(0, 16, template_set=("biped", "quadruped", "chair"), objects=(2, 4))
    data = SceneSet(ds, pixels)
    cfg = desk_config()
    cfg.train.steps = TRAIN_STEPS_MAX
    cfg.train.modality_prob = 0.5
    cfg.train.log_every = 0
    out = {"data": data, "cfg": cfg}
    model = build_model(cfg.model, data.prompt_texts(), cfg.train.seed)
    out["untrained_obj"] = alignment_score(model, data, "object", cfg)
    out["untrained_kpt"] = alignment_score(model, data, "keypoint", cfg)
    start = time.perf_counter()
    train(model, data, cfg)
    out["seconds"] = time.perf_counter() - start
    out["text"], _ = evaluate(model, data, cfg, "text")
    out["visual"], _ = evaluate(model, data, cfg, "visual", with_alignment=False)
    ablation_cfg = desk_config()
    ablation_cfg.train.steps = TRAIN_STEPS_MAX
    ablation_cfg.train.modality_prob = 0.0
    ablation_cfg.train.log_every = 0
    ablation = build_model(ablation_cfg.model, data.prompt_texts(), ablation_cfg.train.seed)
    train(ablation, data, ablation_cfg)
    out["ablation_visual"], _ = evaluate(ablation, data, ablation_cfg, "visual", with_alignment=False)
    return out


def test_criterion_4_overfit(capsys, overfit):
    text, visual = overfit["text"], overfit["visual"]
    ds = overfit["data"].dataset
    per_image = [len(ds.annotations_for(im.id)) for im in ds.images]
    fixture_ok = len(ds.images) == 16 and min(per_image) >= 2 and max(per_image) <= 4
    ok = (fixture_ok and text.pck >= PCK_TEXT_MIN and text.ap >= AP_TEXT_MIN and visual.pck >= PCK_VISUAL_MIN
          and overfit["seconds"] <= TRAIN_SECONDS_MAX)
    assert verdict(capsys, 4, ok, f"text PCK {text.pck:.3f} (>= {PCK_TEXT_MIN}), text AP {text.ap:.3f} "
                                  f"(>= {AP_TEXT_MIN}), visual PCK {visual.pck:.3f} (>= {PCK_VISUAL_MIN}); "
                                  f"{TRAIN_STEPS_MAX} steps in {overfit['seconds']:.0f}s "
                                  f"(<= {TRAIN_SECONDS_MAX}s)")


def test_criterion_5_modality_parity(capsys, overfit):
    gap = abs(overfit["text"].pck - overfit["visual"].pck)
    mixed, ablation = overfit["visual"].pck, overfit["ablation_visual"].pck
    ok = gap <= PARITY_TOL and ablation < mixed
    assert verdict(capsys, 5, ok, f"|PCK_text - PCK_visual| = {gap:.3f} (<= {PARITY_TOL}); visual PCK of "
                                  f"text-only ablation {ablation:.3f} vs mixed {mixed:.3f} (ablation lower)")


def test_criterion_6_alignment_ordering(capsys, overfit):
    text = overfit["text"]
    gap_obj = text.align_obj - overfit["untrained_obj"]
    gap_kpt = text.align_kpt - overfit["untrained_kpt"]
    ok = gap_obj >= ALIGN_GAP_MIN and gap_kpt >= ALIGN_GAP_MIN
    assert verdict(capsys, 6, ok, f"object {overfit['untrained_obj']:.3f} -> {text.align_obj:.3f} "
                                  f"(gap {gap_obj:.3f}), keypoint {overfit['untrained_kpt']:.3f} -> "
                                  f"{text.align_kpt:.3f} (gap {gap_kpt:.3f}); need >= {ALIGN_GAP_MIN}")


def test_criterion_7_metric_oracles(capsys):
    gt, pred = test_metrics.gt, test_metrics.pred
    hand = [
        ([pred([[0.5, 0.5]], 0.5), pred([[0.95, 0.05]], 0.9)], [gt([[0.5, 0.5]])], 0.5),
        ([pred([[0.3, 0.3]], 0.9), pred([[0.05, 0.95]], 0.8), pred([[0.7, 0.7]], 0.7)],
         [gt([[0.3, 0.3]]), gt([[0.7, 0.7]])], (51 + 50 * 2 / 3) / 101),
        ([pred([[0.5 + test_metrics.offset_for_oks(0.72), 0.5]], 0.8)], [gt([[0.5, 0.5]])], 0.5),
        ([pred([[0.5, 0.5]], 0.9), pred([[0.5, 0.5]], 0.4)], [gt([[0.5, 0.5]])], 1.0),
        ([pred([[0.5, 0.5]], 0.9)], [gt([[0.5, 0.5]]), gt([[0.2, 0.2]], image_id=2)], 51 / 101),
        ([], [gt([[0.5, 0.5]])], 0.0),
    ]
    hand_ok = all(abs(evaluate_ap(p, g) - want) <= 1e-12 for p, g, want in hand)
    rng = np.random.default_rng(0)
    random_ok, n_random = True, 300
    for _ in range(n_random):
        gts = [gt(rng.uniform(0.05, 0.95, (2, 2)), image_id=int(rng.integers(1, 3)))
               for _ in range(int(rng.integers(1, 4)))]
        preds = []
        for _ in range(int(rng.integers(0, 4))):
            base = gts[int(rng.integers(len(gts)))]
            preds.append(pred(base.keypoints[:, :2] + rng.uniform(0, 0.08), float(rng.uniform(0.01, 1)),
                              base.image_id))
        random_ok &= abs(evaluate_ap(preds, gts) - test_metrics.oracle_ap(preds, gts)) <= 1e-12
    g = gt([[0.5, 0.5]])
    on_edge = evaluate_pck([pred([[0.625, 0.5]], 0.9)], [g], threshold=0.25)
    past_edge = evaluate_pck([pred([[0.625 + 2 ** -30, 0.5]], 0.9)], [g], threshold=0.25)
    ok = hand_ok and random_ok and on_edge == 1.0 and past_edge == 0.0
    assert verdict(capsys, 7, ok, f"{len(hand)} hand-executed AP fixtures match={hand_ok}, {n_random} random "
                                  f"<=3-detection fixtures match the oracle={random_ok}; PCK at exactly "
                                  f"t*max(w,h) = {on_edge}, just beyond = {past_edge}")


def test_criterion_8_data_pipeline(capsys):
    start = time.perf_counter()
    sources = []
    for name, (k, images, instances) in test_data.SOURCE_STATS.items():
        names = test_data.COCO_NAMES if name == "COCO" else [f"{name} point {i}" for i in range(k)]
        doc = test_data.coco_doc(round(images / 1000), round(instances / 1000), names, prefix=name)
        sources.append(test_data.dataset_from_dict(doc, name))
    _, report = unify(sources)
    counts = [r["keypoints"] for r in report["sources"]]
    sums_ok = all(report["unified"][key] == sum(r[key] for r in report["sources"])
                  for key in ("images", "instances"))
    big = test_data.big(13_083, 200)
    subset_ok = sample_subset(big, 2000, 3) == sample_subset(big, 2000, 3) and len(
        sample_subset(big, 2000, 3).images) == 2000
    once = standardize_orientation(test_data.eyes("viewer"))
    orient_ok = standardize_orientation(once) == once and once.annotations[0].keypoints[0, 0] == 0.3
    scenes = SceneSet(*synth_dataset(5, 50))
    maps = {i: c.swap_map() for i, c in enumerate(scenes.categories)}
    flip_ok = all(hflip(hflip(s.annotated(), maps), maps) == s.annotated() for s in scenes.scenes)
    elapsed = time.perf_counter() - start
    ok = counts == [17, 68, 21] and sums_ok and subset_ok and orient_ok and flip_ok and elapsed < 60
    assert verdict(capsys, 8, ok, f"per-source keypoints {counts}, unified images/instances "
                                  f"{report['unified']['images']}/{report['unified']['instances']} "
                                  f"(sums ok={sums_ok}); sample_subset deterministic={subset_ok}; orientation "
                                  f"idempotent={orient_ok}; hflip round trip exact={flip_ok}; {elapsed:.1f}s")


def test_criterion_9_cli_determinism(capsys, tmp_path):
    outputs = []
    for run in ("a", "b"):
        root = tmp_path / run
        steps = [
            ["synth", "--seed", "3", "--n-images", "8", "--out", str(root / "data")],
            ["train", "--data", str(root / "data"), "--steps", "200", "--seed", "3", "--out",
             str(root / "model.pt")],
            ["infer", "--checkpoint", str(root / "model.pt"), "--data", str(root / "data"), "--prompt",
             "biped: " + ", ".join(TEMPLATES["biped"].keypoint_names) + "; quadruped: "
             + ", ".join(TEMPLATES["quadruped"].keypoint_names) + "; chair: "
             + ", ".join(TEMPLATES["chair"].keypoint_names), "--out", str(root / "predictions.json")],
            ["evaluate", "--data", str(root / "data"), "--predictions", str(root / "predictions.json"),
             "--out", str(root / "metrics.json")],
        ]
        codes = [main(s) for s in steps]
        assert codes == [0, 0, 0, 0]
        outputs.append({n: (root / n).read_bytes() for n in ("predictions.json", "metrics.json")})
    same = {n: outputs[0][n] == outputs[1][n] for n in outputs[0]}
    metrics = json.loads(outputs[0]["metrics.json"])
    ok = all(same.values())
    assert verdict(capsys, 9, ok, f"byte-identical across two seeded runs: {same}; pck {metrics['pck']:.3f}, "
                                  f"ap {metrics['ap']:.3f}")
