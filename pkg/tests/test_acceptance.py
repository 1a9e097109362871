"""End-to-end acceptance gate.

Each test prints one `[criterion N] PASS/FAIL ...` line with the numbers
it measured, then asserts. The slow pipeline (synthetic corpus -> mining
-> 5,000-iteration training) is built once and shared.
"""

import contextlib
import io
import time

import numpy as np
import pytest

from _oracles import edge_displacement, fd_gradient, rasterized_iou, rel_err
from conftest import random_rect
from croprank import cli, dataset, ranker, search, synth
from croprank.evaluation import (alpha_recall, boundary_displacement, iou,
                                 load_annotations, pair_order_accuracy,
                                 run_benchmark)
from croprank.features import (BackboneSpec, FeatureMap, SppConfig,
                               pool_positions, spp_output_dim, spp_pool)
from croprank.geometry import CropRect, SamplerConfig, sample_crops
from croprank.imaging import ImageBuffer
from croprank.ranker import (ModelSpec, TrainConfig, batch_loss_and_grads,
                             init_params, sgd_momentum_step)


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth --n 300 -> mine -> train (toy architecture, frozen filters,
    C=16, 5,000 iterations on the scaled schedule)."""
    root = tmp_path_factory.mktemp("accept")
    corpus = root / "corpus"
    t0 = time.monotonic()
    with contextlib.redirect_stdout(io.StringIO()):
        assert cli.main(["synth", "--out", str(corpus), "--n", "300",
                         "--seed", "11"]) == 0
    manifest = dataset.mine_pairs(corpus / "train", SamplerConfig(seed=13),
                                  val_fraction=0.19)
    dataset.save_manifest(manifest, root / "pairs.jsonl")
    spec = ModelSpec(BackboneSpec("fixed", (16, 32, 16)), SppConfig())
    cfg = TrainConfig(total_iters=5000, lr_switch_iter=3333,
                      batch_pairs=100, validate_every=1000, seed=17)
    ckpt = ranker.train(manifest, cfg, init_params(spec, seed=17),
                        image_root=corpus / "train")
    ranker.save_checkpoint(ckpt, root / "model.ckpt")
    return {"corpus": corpus, "manifest": manifest, "ckpt": ckpt,
            "build_seconds": time.monotonic() - t0}


def _fd_probe(loss, arr, c, analytic):
    """Central-difference error at one coordinate, refining the step when
    it straddles a kink.

    The network is piecewise linear (ReLU, max pooling), so a step can
    cross an argmax flip and average two slopes; shrinking h isolates the
    local branch, while a genuinely wrong gradient stays wrong at every
    step size. The floor treats structural zeros (bias-path contributions
    of the two pair scores cancel exactly) as an absolute comparison.
    """
    err = np.inf
    for h in (1e-5, 1e-6, 1e-7):
        fd = fd_gradient(loss, arr, [c], h=h)[c]
        err = rel_err(analytic, fd, floor=1e-4)
        if err <= 1e-4:
            break
    return err


def test_criterion_1_gradient_oracle(capsys):
    """Finite-difference check of batch_loss_and_grads over 20 seeds for
    the max-pool, avg-pool, and flatten pooling variants."""
    t0 = time.monotonic()
    variants = {"spp-max": SppConfig(mode="max"),
                "spp-avg": SppConfig(mode="avg"),
                "flatten": None}
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng([7, seed])
        imgs = [ImageBuffer(rng.random((227, 227, 3))) for _ in range(2)]
        for name, spp in variants.items():
            spec = ModelSpec(BackboneSpec("toy", (2, 3, 2)), spp)
            params = init_params(spec, seed=seed, dtype=np.float64)
            # keep every ReLU off its kink: zero-init biases put dead
            # pooled patches exactly at the hinge of max(0, .)
            for v in params.tensors.values():
                v += rng.normal(0.0, 0.05, v.shape)
            # probe whichever pair orientation violates the margin; the
            # two margins sum to 2g, so one of them is >= g
            batches = ([(imgs[0], imgs[1])], [(imgs[1], imgs[0])])
            losses = [batch_loss_and_grads(b, params, 1.0)[0]
                      for b in batches]
            batch = batches[int(np.argmax(losses))]
            loss0, grads = batch_loss_and_grads(batch, params, 1.0)
            assert loss0 >= 1.0

            def loss():
                return batch_loss_and_grads(batch, params, 1.0)[0]

            for tname in params.trainable_names():
                g = grads[tname].reshape(-1)
                c = int(rng.integers(g.size))
                worst = max(worst, _fd_probe(loss, params.tensors[tname],
                                             c, g[c]))
    elapsed = time.monotonic() - t0
    ok = worst <= 1e-4 and elapsed < 120.0
    report(capsys, 1, ok,
           f"max rel err {worst:.2e} (<= 1e-4) over 20 seeds x 3 variants "
           f"in {elapsed:.1f}s (< 120s)")
    assert ok


def test_criterion_2_spp_arithmetic(capsys):
    cfg = SppConfig()
    bins = sum(len(pool_positions(13, k)) ** 2 for k in cfg.sizes)
    per_channel = spp_output_dim(1, 13, cfg)
    full = spp_output_dim(256, 13, cfg)
    data = np.random.default_rng(0).random((256, 13, 13))
    vec = spp_pool(FeatureMap(256, 13, 13, data), cfg)
    ok = (bins == 49 == per_channel and full == 12544
          and vec.shape == (12544,))
    report(capsys, 2, ok,
           f"bins/channel {per_channel} (= 36+9+4 = 49), C=256 length "
           f"{full} (= 12544), pooled vector {vec.shape}")
    assert ok


def test_criterion_3_pair_count_arithmetic(capsys, tiny_manifest):
    sampler = SamplerConfig(scales=(0.5, 0.6), num_square=3, seed=0)
    rng = np.random.default_rng(0)
    per_image = [len(sample_crops(dims, sampler, rng))
                 for dims in ((640, 480), (353, 641), (300, 300))]
    mined = len(tiny_manifest.records) // len(tiny_manifest.image_paths())
    extrapolated = sampler.crops_per_image * 21045
    ok = (per_image == [14, 14, 14] and mined == 14
          and extrapolated == 294630)
    report(capsys, 3, ok,
           f"records/image {per_image + [mined]} (= 14), "
           f"21045 images -> {extrapolated} (= 294630)")
    assert ok


def test_criterion_4_metric_oracles(capsys):
    t0 = time.monotonic()
    rng = np.random.default_rng(42)
    worst_iou, worst_disp = 0.0, 0.0
    canvas = (64, 48)
    for _ in range(1000):
        a = CropRect(*random_rect(rng, canvas))
        b = CropRect(*random_rect(rng, canvas))
        worst_iou = max(worst_iou, abs(
            iou(a, b) - rasterized_iou(a.as_tuple(), b.as_tuple(), canvas)))
        worst_disp = max(worst_disp, abs(
            boundary_displacement(a, b, canvas)
            - edge_displacement(a.as_tuple(), b.as_tuple(), canvas)))
    recall_exact = True
    vals = rng.random(500)
    for alpha in (0.25, 0.5, 0.75):
        direct = 100.0 * sum(1 for v in vals if v > alpha) / len(vals)
        recall_exact &= alpha_recall(vals, alpha) == direct
    elapsed = time.monotonic() - t0
    ok = worst_iou <= 1e-9 and worst_disp <= 1e-9 and recall_exact \
        and elapsed < 10.0
    report(capsys, 4, ok,
           f"iou err {worst_iou:.1e}, displacement err {worst_disp:.1e} "
           f"(<= 1e-9 over 1000 pairs), recall exact {recall_exact}, "
           f"{elapsed:.1f}s (< 10s)")
    assert ok


def test_criterion_5_synthetic_end_to_end(capsys, pipeline):
    t0 = time.monotonic()
    corpus = pipeline["corpus"]
    ckpt = pipeline["ckpt"]
    ordering = pair_order_accuracy(pipeline["manifest"], "val", ckpt,
                                   image_root=corpus / "train")
    anns = load_annotations(corpus / "annotations.json")
    model_report = run_benchmark({"synthetic": anns}, ckpt,
                                 image_root=corpus)
    baseline_report = run_benchmark(
        {"synthetic": anns}, lambda img, rects: np.zeros(len(rects)),
        image_root=corpus)
    model = model_report.summaries[0]
    baseline = baseline_report.summaries[0]
    elapsed = pipeline["build_seconds"] + (time.monotonic() - t0)
    ok = (ordering >= 0.85 and model.mean_iou >= 0.60
          and model.alpha_recall > baseline.alpha_recall
          and elapsed < 900.0)
    report(capsys, 5, ok,
           f"ordering {ordering:.4f} (>= 0.85), mean IoU "
           f"{model.mean_iou:.4f} (>= 0.60) on {model.n_images} images, "
           f"alpha-recall {model.alpha_recall:.1f} > baseline "
           f"{baseline.alpha_recall:.1f}, total {elapsed:.0f}s (< 900s)")
    assert ok


def test_criterion_6_hinge_slack_semantics(capsys):
    params = init_params(ModelSpec(BackboneSpec("fixed", (2, 3, 2)),
                                   SppConfig()), seed=6)
    rng = np.random.default_rng(6)
    d = params.spec.feature_dim
    pairs = []
    while len(pairs) < 8:
        a = (rng.standard_normal(d) * 10).astype(np.float32)
        b = (rng.standard_normal(d) * 10).astype(np.float32)
        sa, sb = ranker.score(a, params), ranker.score(b, params)
        if abs(sa - sb) >= 1.0:  # slack >= gap once ordered correctly
            pairs.append((a, b) if sa >= sb else (b, a))
    loss, grads = batch_loss_and_grads(pairs, params, gap=1.0)
    zero_grads = all(not g.any() for g in grads.values())

    for name in params.trainable_names():
        params.velocity[name][...] = rng.standard_normal(
            params.velocity[name].shape).astype(np.float32)
    before = params.copy()
    lr, momentum = 0.01, 0.9
    sgd_momentum_step(params, grads, lr, momentum)
    decay_exact = True
    for name in params.trainable_names():
        want_v = before.velocity[name] * momentum
        want_p = before.tensors[name] - lr * want_v
        decay_exact &= np.array_equal(params.velocity[name], want_v)
        decay_exact &= np.array_equal(params.tensors[name], want_p)
    ok = loss == 0.0 and zero_grads and decay_exact
    report(capsys, 6, ok,
           f"slack batch loss {loss} (== 0), zero grads {zero_grads}, "
           f"update equals pure momentum decay {decay_exact}")
    assert ok


def test_criterion_7_byte_determinism(capsys, tmp_path):
    artifacts = []
    for run in ("r1", "r2"):
        base = tmp_path / run
        corpus = base / "corpus"
        synth.generate_corpus(corpus, n=12, seed=101)
        manifest = dataset.mine_pairs(corpus / "train",
                                      SamplerConfig(seed=5),
                                      val_fraction=0.25)
        dataset.save_manifest(manifest, base / "pairs.jsonl")
        spec = ModelSpec(BackboneSpec("fixed", (4, 6, 4)), SppConfig())
        cfg = TrainConfig(total_iters=40, validate_every=20,
                          lr_switch_iter=20, batch_pairs=8, seed=3)
        ckpt = ranker.train(manifest, cfg, init_params(spec, seed=9),
                            image_root=corpus / "train")
        ranker.save_checkpoint(ckpt, base / "model.ckpt")
        anns = load_annotations(corpus / "annotations.json")
        rep = run_benchmark({"synthetic": anns}, ckpt, image_root=corpus)
        (base / "report.json").write_text(rep.to_json(), encoding="utf-8")
        corpus_bytes = {str(p.relative_to(corpus)): p.read_bytes()
                        for p in sorted(corpus.rglob("*")) if p.is_file()}
        artifacts.append({
            "corpus": corpus_bytes,
            "manifest": (base / "pairs.jsonl").read_bytes(),
            "checkpoint": (base / "model.ckpt").read_bytes(),
            "report": (base / "report.json").read_bytes(),
        })
    same = {k: artifacts[0][k] == artifacts[1][k] for k in artifacts[0]}
    ok = all(same.values())
    report(capsys, 7, ok,
           "byte-identical across two runs: " +
           ", ".join(f"{k}={v}" for k, v in same.items()))
    assert ok


def test_criterion_8_heatmap_loses_heat_without_subject(capsys, pipeline):
    t0 = time.monotonic()
    ckpt = pipeline["ckpt"]
    scorer = search.checkpoint_scorer(ckpt)
    # the corpus holds 200 train scenes; bench scenes start at index 200
    hits, drops = 0, []
    n_images = 50
    for index in range(200, 200 + n_images):
        scene = synth.make_scene(index, seed=11)
        box = synth.disc_bbox(scene)
        intact = search.heatmap(scene.image, scorer)
        erased = search.heatmap(synth.erase_disc(scene), scorer)
        lo = min(intact.heat.min(), erased.heat.min())
        hi = max(intact.heat.max(), erased.heat.max())
        region = (slice(box.y, box.y2), slice(box.x, box.x2))
        heat_before = float(intact.normalized(lo, hi)[region].mean())
        heat_after = float(erased.normalized(lo, hi)[region].mean())
        drop = (heat_before - heat_after) / heat_before \
            if heat_before > 0 else 0.0
        drops.append(drop)
        if drop >= 0.20:
            hits += 1
    elapsed = time.monotonic() - t0
    ok = hits >= int(0.8 * n_images) and elapsed < 180.0
    report(capsys, 8, ok,
           f"heat drop >= 20% on {hits}/{n_images} images (>= "
           f"{int(0.8 * n_images)}), median drop {np.median(drops):.0%}, "
           f"{elapsed:.1f}s (< 180s)")
    assert ok
