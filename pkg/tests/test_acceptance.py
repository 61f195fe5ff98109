"""Acceptance suite: one test and one verdict line per criterion."""

import itertools
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest

from ovseg.cli import main
from ovseg.core import BinaryMask, resample_nearest, rle_decode, rle_encode
from ovseg.formats import decode_rle, encode_rle
from ovseg.metrics import evaluate_image
from ovseg.oracles import (
    classification_oracle,
    classification_oracle_on_selection,
    gt_mask_stack,
    hungarian,
    segmentation_oracle_on_selection,
    selection_oracle,
)
from ovseg.proposals import CandidateSet, drop_no_object, panoptic_fusion
from ovseg.reporting import load_dump, save_dump
from ovseg.testkit import (
    SceneSpec,
    brute_assignment,
    brute_pq,
    brute_pq_all,
    gen_features,
    gen_scene,
    no_object_fixture,
    random_text_embeddings,
    synthetic_taxonomy,
)
from ovseg.zeroshot import (
    DenseFeatureGrid,
    TextEmbeddings,
    cosine_logits,
    mask_pool,
    segmentation_oracle_eval,
    softmax_temperature,
)

from conftest import ACCEPTANCE_LINES, pq_of, scene_family


@contextmanager
def criterion(number, title, budget=None):
    start = time.perf_counter()
    ok, detail = False, []
    try:
        yield detail
        ok = True
    finally:
        elapsed = time.perf_counter() - start
        if ok and budget is not None and elapsed >= budget:
            ok = False
            detail.append(f"over budget of {budget:.0f}s")
        note = f" [{'; '.join(detail)}]" if detail else ""
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({elapsed:.1f}s){note}"
        print(line)
        ACCEPTANCE_LINES.append(line)
    assert ok, line


def baseline(cands, tax):
    return panoptic_fusion(drop_no_object(cands), tax)


def selected_map(cands, gt, tax, policy, seg=False, cls=False):
    sel = selection_oracle(cands, gt, no_object_policy=policy)
    if seg:
        sel = segmentation_oracle_on_selection(sel, gt)
    if cls:
        sel = classification_oracle_on_selection(sel, gt)
    kept = sel.candidates
    if kept.has_no_object:
        kept = drop_no_object(kept)
    return panoptic_fusion(kept, tax), sel


def test_c1_pq_matches_brute_force():
    with criterion(1, "pq_scores equals brute_pq on 1000 scenes", budget=60) as detail:
        worst, n = 0.0, 0
        for seed, gt, cands, tax in scene_family("oracle_equivalence"):
            pred = baseline(cands, tax)
            got = pq_of(pred, gt, tax)
            ref = brute_pq(pred, gt)
            assert set(ref) == set(got.per_class), seed
            for c, b in ref.items():
                s = got.per_class[c]
                worst = max(worst, abs(s.pq - b.pq), abs(s.sq - b.sq), abs(s.rq - b.rq))
            worst = max(worst, abs(got.pq_all - brute_pq_all(ref)))
            n += 1
        detail.append(f"{n} scenes, max diff {worst:.1e}")
        assert n == 1000 and worst <= 1e-12


def test_c2_hungarian_matches_brute_force():
    with criterion(2, "hungarian equals brute_assignment on 1000 matrices", budget=30) as detail:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for k in range(1000):
            small = int(rng.integers(1, 8))
            large = int(rng.integers(small, 12))
            shape = (small, large) if rng.random() < 0.5 else (large, small)
            cost = rng.integers(0, 5, shape).astype(float) if k % 4 == 0 else rng.random(shape) * 10
            worst = max(worst, abs(hungarian(cost).total_cost - brute_assignment(cost)))
        detail.append(f"max diff {worst:.1e}")
        assert worst <= 1e-9


def test_c3_decomposition():
    with criterion(3, "per-class pq = sq * rq, all in [0, 1]") as detail:
        worst, checked = 0.0, 0
        for _, gt, cands, tax in scene_family("oracle_equivalence"):
            pred = baseline(cands, tax)
            for p in (pred, classification_oracle(pred, gt)):
                for s in evaluate_image(p, gt).per_class.values():
                    if not s.present:
                        continue
                    assert 0.0 <= s.pq <= 1.0 and 0.0 <= s.sq <= 1.0 and 0.0 <= s.rq <= 1.0
                    worst = max(worst, abs(s.pq - s.sq * s.rq))
                    checked += 1
        detail.append(f"{checked} class rows, max diff {worst:.1e}")
        assert worst <= 1e-12


def test_c4_classification_oracle_monotone():
    with criterion(4, "classification oracle never lowers per-class PQ on 500 scenes") as detail:
        violations = 0
        for _, gt, cands, tax in scene_family("classification_monotonicity"):
            pred = baseline(cands, tax)
            before = pq_of(pred, gt, tax).per_class
            after = pq_of(classification_oracle(pred, gt), gt, tax).per_class
            # a class whose only predictions were relabelled drops out; it scored 0 before
            violations += sum(c in after and after[c].pq < s.pq - 1e-12 for c, s in before.items())
            violations += sum(s.pq > 0 for c, s in before.items() if c not in after)
        detail.append(f"{violations} violations")
        assert violations == 0


def test_c5_no_object_mechanism():
    with criterion(5, "keep < baseline < strip on the fixture; strip >= keep on 500 scenes") as detail:
        tax, gt, cands = no_object_fixture()
        base = pq_of(baseline(cands, tax), gt, tax).pq_all
        keep = pq_of(selected_map(cands, gt, tax, "keep")[0], gt, tax).pq_all
        strip = pq_of(selected_map(cands, gt, tax, "strip")[0], gt, tax).pq_all
        detail.append(f"fixture {keep:.3f} < {base:.3f} < {strip:.3f}")
        assert keep < base < strip
        violations = 0
        for _, gt, cands, tax in scene_family("no_object_dominance"):
            k = pq_of(selected_map(cands, gt, tax, "keep")[0], gt, tax).pq_all
            s = pq_of(selected_map(cands, gt, tax, "strip")[0], gt, tax).pq_all
            violations += s < k - 1e-12
        detail.append(f"{violations} violations")
        assert violations == 0


def test_c6_ceiling_pattern():
    with criterion(6, "oracle ceiling: exact sigmas reach 1.0, corrupted sigmas keep the ordering") as detail:
        exact_scenes = merged_sq = 0
        for _, gt, cands, tax in scene_family("ceiling_exact"):
            indicator = CandidateSet(gt_mask_stack(gt).astype(float), cands.posteriors[: len(gt.segments)])
            for c in (cands, indicator):
                pred, sel = selected_map(c, gt, tax, "strip", cls=True)
                assert sel.shortfall == 0
                assert pq_of(pred, gt, tax).pq_all == 1.0
                # wrong-class stuff can merge into a true segment, so SQ is gated on the
                # class-correct family below and only counted here
                pred, _ = selected_map(c, gt, tax, "strip", seg=True)
                merged_sq += any(m.iou != 1.0 for m in evaluate_image(pred, gt).tp)
            exact_scenes += 1
        seg_bad = cls_bad = sq_bad = 0
        for _, gt, cands, tax in scene_family("ceiling_corrupted"):
            sel_pq = pq_of(selected_map(cands, gt, tax, "strip")[0], gt, tax).pq_all
            seg_map, _ = selected_map(cands, gt, tax, "strip", seg=True)
            cls_map, _ = selected_map(cands, gt, tax, "strip", cls=True)
            seg_bad += pq_of(seg_map, gt, tax).pq_all < sel_pq - 1e-12
            cls_bad += pq_of(cls_map, gt, tax).pq_all < sel_pq - 1e-12
            sq_bad += any(m.iou != 1.0 for m in evaluate_image(seg_map, gt).tp)
        detail.append(
            f"{exact_scenes} exact scenes ({merged_sq} with merged flipped stuff); "
            f"violations seg {seg_bad}, cls {cls_bad}, sq {sq_bad}"
        )
        assert seg_bad == cls_bad == sq_bad == 0


def test_c7_zeroshot_pipeline():
    with criterion(7, "aligned features score 1.0; pooling linearity and argmax/tau invariants") as detail:
        tax = synthetic_taxonomy(8)
        texts = random_text_embeddings(8, 32, 11)
        gts = [gen_scene(SceneSpec(seed=s), tax)[0] for s in range(20)]
        reports = segmentation_oracle_eval([gen_features(g, texts) for g in gts], gts, texts, 0.01, tax)
        assert pq_of_reports(reports, tax) == 1.0

        rng = np.random.default_rng(7)
        worst_lin = worst_inv = 0.0
        for k in range(1000):
            gh, gw, dim = int(rng.integers(2, 9)), int(rng.integers(2, 9)), int(rng.integers(1, 6))
            grid = DenseFeatureGrid(rng.normal(size=(gh, gw, dim)))
            scale = 1 if k % 2 else int(rng.integers(2, 4))
            labels = rng.integers(0, 3, (gh * scale, gw * scale))
            a, b = labels == 1, labels == 2
            ra, rb = resample_nearest(a, (gh, gw)), resample_nearest(b, (gh, gw))
            if not ra.any() or not rb.any():
                continue
            na, nb = ra.sum(), rb.sum()
            expected = (na * mask_pool(grid, a) + nb * mask_pool(grid, b)) / (na + nb)
            worst_lin = max(worst_lin, np.abs(mask_pool(grid, a | b) - expected).max())

            texts_k = TextEmbeddings(rng.normal(size=(int(rng.integers(2, 10)), dim)))
            embed = rng.normal(size=dim)
            logits = cosine_logits(embed, texts_k)
            worst_inv = max(worst_inv, np.abs(cosine_logits(embed * rng.uniform(1e-3, 1e3), texts_k) - logits).max())
            for tau in (1e-3, float(rng.uniform(1e-3, 10)), 10.0):
                probs = softmax_temperature(logits, tau)
                assert int(np.argmax(probs)) == int(np.argmax(logits))
                worst_inv = max(worst_inv, abs(probs.sum() - 1.0))
        detail.append(f"linearity {worst_lin:.1e}, invariants {worst_inv:.1e}")
        assert worst_lin <= 1e-6 and worst_inv <= 1e-6


def pq_of_reports(reports, tax):
    from ovseg.metrics import pq_scores

    return pq_scores(reports, tax).pq_all


def _exhaustive_rle():
    count = 0
    for n in range(1, 13):
        shapes = [(h, n // h) for h in range(1, n + 1) if n % h == 0]
        for bits in itertools.product((False, True), repeat=n):
            flat = np.array(bits, dtype=bool)
            for shape in shapes:
                mask = BinaryMask(flat.reshape(shape))
                rle = rle_encode(mask)
                assert sum(rle.runs) == n
                assert np.array_equal(rle_decode(rle).bits, mask.bits)
                assert decode_rle(encode_rle(rle)) == rle
                count += 1
    return count


def test_c8_determinism_and_formats(tmp_path):
    with criterion(8, "jobs-independent reports; dump and RLE round-trips") as detail:
        synth = tmp_path / "s"
        assert main([
            "synth", "--out", str(synth), "--images", "12", "--features", "--morph-radius", "2",
            "--class-flip-prob", "0.2", "--no-object-flip-prob", "0.2", "--spurious-count", "2",
            "--void-prob", "0.1", "--seed", "3",
        ]) == 0
        common = ["--dump", str(synth / "dump"), "--gt", str(synth / "gt")]
        for cmd in ("evaluate", "oracle-select", "zeroshot"):
            outs = []
            for jobs in ("1", "8"):
                out = tmp_path / f"{cmd}-{jobs}.json"
                assert main([cmd, *common, "--jobs", jobs, "--out", str(out)]) == 0
                outs.append(out.read_bytes())
            assert outs[0] == outs[1], cmd

        tax = synthetic_taxonomy(8)
        rng_rt = np.random.default_rng(80)
        scenes = {}
        for s in range(30):
            c = gen_scene(SceneSpec(morph_radius=2, spurious_count=2, seed=s), tax)[1]
            # move sigmas off the 1/255 grid so quantization is exercised
            off_grid = np.clip(c.sigmas + rng_rt.uniform(-0.5, 0.5, c.sigmas.shape) / 255, 0, 1)
            scenes[f"im{s}"] = CandidateSet(off_grid, c.posteriors, clip_posteriors=c.clip_posteriors)
        save_dump(tmp_path / "rt", tax, scenes)
        dump = load_dump(tmp_path / "rt")
        worst = 0.0
        for k, c in scenes.items():
            assert np.array_equal(dump.candidates[k].posteriors, c.posteriors)
            assert np.array_equal(dump.candidates[k].clip_posteriors, c.clip_posteriors)
            worst = max(worst, np.abs(dump.candidates[k].sigmas - c.sigmas).max())
        assert 0 < worst <= 1 / 255

        count = _exhaustive_rle()
        rng = np.random.default_rng(8)
        for _ in range(200):
            m = BinaryMask(rng.random((int(rng.integers(1, 40)), int(rng.integers(1, 40)))) < rng.random())
            assert np.array_equal(rle_decode(decode_rle(encode_rle(rle_encode(m)))).bits, m.bits)
        detail.append(f"sigma error {worst * 255:.3f}/255, {count} exhaustive masks")


@pytest.mark.skipif(not os.environ.get("OVSEG_REAL_DUMP"), reason="needs real FC-CLIP dumps; see README")
def test_c9_real_dump_reproduction(tmp_path):
    """Optional: set OVSEG_REAL_DUMP and OVSEG_REAL_GT to reproduce 26.8 / 39.8 PQ."""
    with criterion(9, "real dump reproduction within 0.3 PQ") as detail:
        common = ["--dump", os.environ["OVSEG_REAL_DUMP"], "--gt", os.environ["OVSEG_REAL_GT"], "--jobs", "8"]
        from ovseg.reporting import read_report

        assert main(["evaluate", *common, "--out", str(tmp_path / "a.json")]) == 0
        assert main(["evaluate", *common, "--oracle-cls", "--out", str(tmp_path / "b.json")]) == 0
        a, b = (100 * read_report(tmp_path / n).pq_all for n in ("a.json", "b.json"))
        detail.append(f"{a:.1f} / {b:.1f}")
        assert abs(a - 26.8) <= 0.3 and abs(b - 39.8) <= 0.3
