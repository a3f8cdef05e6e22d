"""Acceptance criteria, one test per criterion, at their stated tolerances.

Run alone with ``pytest tests/test_acceptance.py -v``; a PASS/FAIL line per
criterion is printed in the terminal summary.
"""
import csv
import json
import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from oracles import arcface_loss_reference, brute_force_1nn, central_difference, scaled_cosine_ce
from shelfid.arcface import ArcFaceHead, arcface_logits, arcface_loss
from shelfid.balancing import Record, by_class, class_histogram, make_validation_split, resample_to_depth, write_manifest
from shelfid.cli import main
from shelfid.encoder_core import EncoderConfig, build_encoder, embed_images
from shelfid.errors import FormatError
from shelfid.evalharness import zero_shot_eval
from shelfid.finetune import FinetuneConfig, finetune
from shelfid.gallery import Gallery, enroll
from shelfid.images import load_image
from shelfid.lr_schedule import blockwise_lrs
from shelfid.synthetic import long_tail_sizes, write_dataset

SWEEP_DEPTHS = (8, 32, 128)
E2E_EPOCHS = 30
E2E_BUDGET_S = 15 * 60


def _head(W, margin, scale):
    W = torch.as_tensor(np.asarray(W, dtype=np.float64))
    head = ArcFaceHead(W.shape[0], W.shape[1], margin, scale).double()
    with torch.no_grad():
        head.W.copy_(W)
    return head


def test_zero_margin_loss_equals_scaled_cosine_softmax():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        b, d, c = rng.integers(1, 9), rng.integers(2, 33), rng.integers(2, 17)
        E, W = rng.normal(size=(b, d)), rng.normal(size=(d, c))
        y = rng.integers(0, c, size=b)
        s = rng.uniform(0.5, 64.0)
        got = arcface_loss(torch.from_numpy(E), torch.from_numpy(y), _head(W, 0.0, s)).item()
        worst = max(worst, abs(got - scaled_cosine_ce(E, y, W, s)))
    elapsed = time.perf_counter() - start
    print(f"[1] max |diff| = {worst:.3e}, {elapsed:.2f}s")
    assert worst < 1e-6
    assert elapsed < 10.0


def test_arcface_gradients_match_finite_differences():
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(20):
        b, d, c = rng.integers(1, 5), rng.integers(2, 7), rng.integers(2, 6)
        E, W = rng.normal(size=(b, d)), rng.normal(size=(d, c))
        y = rng.integers(0, c, size=b)
        m, s = rng.uniform(0.0, 0.6), rng.uniform(1.0, 16.0)
        head = _head(W, m, s)
        e = torch.tensor(E, requires_grad=True)
        arcface_loss(e, torch.from_numpy(y), head).backward()
        num_e = central_difference(lambda x: arcface_loss_reference(x, y, W, m, s), E, 1e-6)
        num_w = central_difference(lambda x: arcface_loss_reference(E, y, x, m, s), W, 1e-6)
        for analytic, numeric in ((e.grad.numpy(), num_e), (head.W.grad.numpy(), num_w)):
            rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
            worst = max(worst, rel)
    print(f"[2] worst relative gradient error = {worst:.3e}")
    assert worst < 1e-4


def test_loss_non_decreasing_in_margin():
    rng = np.random.default_rng(303)
    margins = [round(0.1 * k, 1) for k in range(6)]
    for _ in range(1000):
        c = int(rng.integers(2, 10))
        cos = rng.uniform(-1, 1, size=(1, c))
        y = int(rng.integers(c))
        theta = rng.uniform(0, math.pi - 0.5)  # theta + m <= pi for every m tested
        cos[0, y] = math.cos(theta)
        s = rng.uniform(1, 64)
        cos_t = torch.from_numpy(cos)
        losses = [F.cross_entropy(arcface_logits(cos_t, [y], m, s), torch.tensor([y])).item() for m in margins]
        for lo, hi in zip(losses, losses[1:]):
            assert hi >= lo - 1e-9, (losses, theta)
    print("[3] loss non-decreasing in margin on 1000 instances")


def test_blockwise_rates_follow_geometric_law():
    for n in (1, 3, 12, 24):
        rates = blockwise_lrs(n, 2e-4, 0.7).rates
        for i, r in enumerate(rates):
            expected = 2e-4 * 0.7 ** (n - 1 - i)
            assert abs(r - expected) / expected < 1e-12
    # 2e-4 * 0.7**23 computed independently (5.473749468016176e-08)
    bottom = blockwise_lrs(24, 2e-4, 0.7).rates[0]
    assert abs(bottom - 5.473749468016176e-08) / 5.473749468016176e-08 < 1e-12
    print(f"[4] 24-block bottom rate = {bottom:.6e}")


def test_resampling_hits_exact_depth_at_full_breadth():
    sizes = np.unique(np.geomspace(2, 400, 40).round().astype(int))
    manifest = [Record(f"c{n}/{i}.png", f"class_{n}") for n in sizes for i in range(n)]
    out = resample_to_depth(manifest, 32, seed=5)
    hist = class_histogram(out)
    assert set(hist) == {f"class_{n}" for n in sizes}
    assert set(hist.values()) == {32}
    for label, recs in by_class(out).items():
        n = int(label.split("_")[1])
        flagged = sum(r.augment for r in recs)
        assert flagged == max(0, 32 - n)
    assert out == resample_to_depth(manifest, 32, seed=5)
    print(f"[5] {len(hist)} classes (sizes {sizes.min()}..{sizes.max()}) -> 32 each")


def test_gallery_agrees_with_brute_force_search():
    rng = np.random.default_rng(606)
    agree = 0
    ties = 0
    for trial in range(1000):
        dim = int(rng.choice([8, 64]))
        n_products = int(rng.integers(1, 51))
        entries = [(f"prod-{rng.integers(1_000_000)}-{i}", rng.normal(size=(int(rng.integers(1, 6)), dim)))
                   for i in range(n_products)]
        if trial % 4 == 0 and n_products > 1:
            # duplicate an earlier product's embedding into a later one to force an exact tie
            src, dst = sorted(rng.choice(n_products, size=2, replace=False))
            entries[dst][1][0] = entries[src][1][-1]
            query = entries[src][1][-1] + (0 if trial % 8 == 0 else 1e-3 * rng.normal(size=dim))
            ties += trial % 8 == 0
        else:
            query = rng.normal(size=dim)
        g = Gallery(dim)
        for pid, e in entries:
            g.add(pid, e)
        got = g.classify_embedding(query)
        want = brute_force_1nn(entries, query)
        agree += got[0] == want[0]
    print(f"[6] {agree}/1000 agree ({ties} forced exact ties)")
    assert agree == 1000


def test_gallery_round_trip_and_corruption(tmp_path):
    rng = np.random.default_rng(707)
    g = Gallery(32)
    for pid in ("alpha", "beta", "gamma-ü"):
        g.add(pid, rng.normal(size=(int(rng.integers(1, 6)), 32)))
    path = tmp_path / "g.bin"
    g.save(path)
    loaded = Gallery.load(path)
    assert loaded == g and loaded.to_bytes() == path.read_bytes()
    for pid in g.product_ids():
        assert loaded.embeddings(pid).tobytes() == g.embeddings(pid).tobytes()

    data = path.read_bytes()
    (tmp_path / "magic.bin").write_bytes(b"XKLIPGAL" + data[8:])
    with pytest.raises(FormatError):
        Gallery.load(tmp_path / "magic.bin")
    (tmp_path / "short.bin").write_bytes(data[:-7])
    with pytest.raises(FormatError):
        Gallery.load(tmp_path / "short.bin")
    print("[7] round-trip bit-exact; bad magic and truncation rejected")


# -- end-to-end ------------------------------------------------------------


@pytest.fixture(scope="module")
def products(tmp_path_factory):
    root = tmp_path_factory.mktemp("products")
    sizes = long_tail_sizes(20, smallest=3, largest=200)
    train, test = write_dataset(root / "images", sizes, n_test=20, seed=2024)
    write_manifest(train, root / "train.csv")
    write_manifest(test, root / "test.csv")
    (root / "run.cfg").write_text(
        f"epochs = {E2E_EPOCHS}\nbatch_size = 64\nseed = 0\nval_per_class = 5\n"
        "num_blocks = 4\nembed_dim = 64\n"
    )
    return root, train, test


def _finetune_config(depth):
    return FinetuneConfig(epochs=E2E_EPOCHS, batch_size=64, seed=0, depth=depth)


@pytest.fixture(scope="module")
def e2e(products):
    """The full pipeline through the CLI: sweep-depth, finetune, eval."""
    root, train, test = products
    start = time.perf_counter()
    rc = main(["sweep-depth", "--manifest", str(root / "train.csv"), "--config", str(root / "run.cfg"),
               "--depths", ",".join(map(str, SWEEP_DEPTHS)), "--out", str(root / "sweep.csv")])
    assert rc == 0
    table = {int(r["depth"]): float(r["macro_accuracy"]) for r in csv.DictReader((root / "sweep.csv").open())}
    best = min(table, key=lambda d: (-table[d], d))

    rc = main(["finetune", "--manifest", str(root / "train.csv"), "--config", str(root / "run.cfg"),
               "--depth", str(best), "--out", str(root / "enc.ckpt"), "--history", str(root / "history.csv")])
    assert rc == 0
    rc = main(["eval", "--checkpoint", str(root / "enc.ckpt"), "--train", str(root / "train.csv"),
               "--test", str(root / "test.csv"), "--aug", "4", "--seed", "0", "--format", "json-lines",
               "--out", str(root / "eval.jsonl")])
    assert rc == 0
    elapsed = time.perf_counter() - start

    summary = json.loads((root / "eval.jsonl").read_text().splitlines()[-1])
    history = list(csv.DictReader((root / "history.csv").open()))
    baseline = zero_shot_eval(build_encoder(EncoderConfig(seed=0)), train, test, 4, seed=0)
    return dict(table=table, best=best, history=history, trained=summary["macro_accuracy"],
                baseline=baseline.macro_accuracy, elapsed=elapsed)


def test_pipeline_beats_untrained_baseline(e2e):
    losses = [float(r["loss"]) for r in e2e["history"]]
    gain = e2e["trained"] - e2e["baseline"]
    print(f"[8] sweep {e2e['table']} -> depth {e2e['best']}; loss {losses[0]:.3f} -> {losses[-1]:.3f}; "
          f"macro acc {e2e['baseline']:.3f} -> {e2e['trained']:.3f} (+{100 * gain:.1f} pp); "
          f"{e2e['elapsed']:.0f}s")
    assert e2e["best"] in SWEEP_DEPTHS
    assert losses[-1] < losses[0]                      # (a)
    assert gain >= 0.20                                 # (b)
    assert e2e["elapsed"] < E2E_BUDGET_S                # (c)


def test_unseen_products_enroll_without_retraining(products, e2e):
    root, train, test = products
    labels = sorted(by_class(train))
    seen, unseen = labels[:15], labels[15:]
    seen_train = [r for r in train if r.class_label in seen]
    tr, val, _ = make_validation_split(seen_train, 5, seed=0)
    encoder, _, _ = finetune(build_encoder(EncoderConfig(seed=0)), None, tr, val, _finetune_config(e2e["best"]))

    trained = zero_shot_eval(encoder, train, test, 4, seed=0)
    baseline = zero_shot_eval(build_encoder(EncoderConfig(seed=0)), train, test, 4, seed=0)
    acc_new, acc_base = trained.accuracy_of(unseen), baseline.accuracy_of(unseen)

    # enrollment of the never-trained products leaves every prior score untouched
    cfg = encoder.config
    enroll_images = {r.class_label: load_image(r.image_ref, cfg.image_size) for r in
                     (by_class(train)[c][0] for c in labels)}
    gallery = Gallery(cfg.embed_dim)
    for c in seen:
        enroll(gallery, c, enroll_images[c], encoder, 4, seed=1)
    queries = embed_images(encoder, np.stack([load_image(r.image_ref, cfg.image_size) for r in test]))
    before_scores = [gallery.similarities(q) for q in queries]
    before_answers = gallery.classify_embeddings(queries)
    for c in unseen:
        enroll(gallery, c, enroll_images[c], encoder, 4, seed=1)
    after_answers = gallery.classify_embeddings(queries)
    changed = 0
    for q, prev, (p0, s0), (p1, s1) in zip(queries, before_scores, before_answers, after_answers):
        assert np.array_equal(gallery.similarities(q)[:len(prev)], prev)
        if p1 != p0:
            changed += 1
            assert p1 in unseen and s1 > s0

    print(f"[9] unseen-class macro acc {acc_base:.3f} (untrained) -> {acc_new:.3f} (trained on 15); "
          f"{changed} answers moved to new products, prior scores unchanged")
    assert acc_new > acc_base
