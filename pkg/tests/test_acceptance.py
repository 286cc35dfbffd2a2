"""Acceptance gate: one marked group per criterion, summarized as PASS/FAIL lines at the end of the run."""
import time
from dataclasses import replace

import numpy as np
import pytest

from protocols import (COSMOS, EUCLIDEAN_ONLY, MNIST_BASE, MNIST_MISSING, MNIST_PIPELINE, MNIST_SPEC, SEEDS,
                       choose_lambda1, mean, mnist_splits, ordering_holds, ordering_inversions, run_seeds)
from supcosmos.cli import ablation
from supcosmos.cli.archive import ModelArchive, ensemble_to_archive, load_model, save_model
from supcosmos.cli.commands import main
from supcosmos.cli.config import ABLATION_CELLS, EXAMPLE, AblationConfig, RunConfig
from supcosmos.cli.datasets import Splits
from supcosmos.data import (DataBatch, load_cifar10, load_idx, parse_cifar10, parse_idx, serialize_cifar10,
                            serialize_idx, split, synth_gaussian_classes, synth_images)
from supcosmos.losses import (LossTerms, cosine_loss, euclidean_loss, mahalanobis_loss, mutual_information,
                              supervised_cosmos_loss)
from supcosmos.model import backward, forward, init_model, regularizer
from supcosmos.pipeline import PatchSpec, PipelineConfig, ClassifierConfig, train_pipeline
from supcosmos.training import Hyperparams, train

H = 1e-5
RTOL, ATOL = 1e-4, 1e-7


def central_diff(f, x):
    """Independent central-difference oracle."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + H
        up = f(x)
        x[i] = old - H
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * H)
    return g


def worst_excess(analytic, numeric) -> float:
    """Largest |a - n| relative to the allowed band; <= 1 means within tolerance."""
    band = ATOL + RTOL * np.abs(numeric)
    return float(np.max(np.abs(np.asarray(analytic) - numeric) / band))


def random_instance(rng):
    n, m = int(rng.integers(1, 5)), int(rng.integers(3, 9))
    c = int(rng.integers(2, m + 1))
    x = rng.uniform(0.05, 1.0, (n, m))
    xhat = rng.uniform(0.05, 1.0, (n, m))
    M = rng.normal(size=(m, m))
    logits = rng.normal(size=(n, c))
    yp = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    yl = rng.integers(0, c, n)
    return x, xhat, M, yp, yl


# ---------------------------------------------------------------- criterion 1

@pytest.mark.criterion(1, "analytic gradients match central differences")
def test_gradient_suite(record_property):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = {}

    def note(name, a, n):
        worst[name] = max(worst.get(name, 0.0), worst_excess(a, n))

    for _ in range(100):
        x, xhat, M, yp, yl = random_instance(rng)
        for mode in ("standard", "paper_literal"):
            note(f"cosine_{mode}", cosine_loss(x, xhat, mode)[1],
                 central_diff(lambda z: cosine_loss(x, z, mode)[0], xhat))
        _, gx, gM = mahalanobis_loss(x, xhat, M)
        note("mahalanobis_xhat", gx, central_diff(lambda z: mahalanobis_loss(x, z, M)[0], xhat))
        note("mahalanobis_M", gM, central_diff(lambda z: mahalanobis_loss(x, xhat, z)[0], M))
        note("mi_probs", mutual_information(yp, yl)[1], central_diff(lambda z: mutual_information(z, yl)[0], yp))

        terms = LossTerms(euclidean=bool(rng.integers(2)), cosine_mode="standard", mahalanobis=True,
                          lambda1=float(rng.uniform(0.1, 2.0)), lambda2=float(rng.uniform(0.0, 0.1)))

        def total(xh=xhat, MM=M, p=yp):
            return supervised_cosmos_loss(x, xh, MM, p, yl, terms, reg=1.5)[0].total

        _, g = supervised_cosmos_loss(x, xhat, M, yp, yl, terms, reg=1.5)
        note("total_xhat", g.xhat, central_diff(lambda z: total(xh=z), xhat))
        note("total_M", g.M, central_diff(lambda z: total(MM=z), M))
        note("total_probs", g.probs, central_diff(lambda z: total(p=z), yp))

        # the whole objective as a function of the first encoder weight, regularizer included
        m_dim = x.shape[1]
        model = init_model([m_dim, int(rng.integers(2, 7)), int(rng.integers(2, 5))], yp.shape[1],
                           int(rng.integers(1 << 30)))

        def through_model(W):
            model.weights[0] = W
            t = forward(model, x)
            return supervised_cosmos_loss(x, t.reconstruction, model.M, t.class_probs, yl, terms,
                                          reg=regularizer(model)[0])[0].total

        W0 = model.weights[0].copy()
        numeric = central_diff(through_model, W0)
        model.weights[0] = W0
        trace = forward(model, x)
        _, lg = supervised_cosmos_loss(x, trace.reconstruction, model.M, trace.class_probs, yl, terms)
        analytic = backward(model, trace, lg).weights[0] + terms.lambda2 * regularizer(model)[1][0]
        note("total_W", analytic, numeric)

    seconds = time.perf_counter() - start
    record_property("detail", f"{seconds:.1f}s, worst/band " + ", ".join(f"{k}={v:.2g}" for k, v in worst.items()))
    assert all(v <= 1.0 for v in worst.values()), worst
    assert seconds < 60


# ---------------------------------------------------------------- criterion 2

@pytest.mark.criterion(2, "oracle identities")
def test_oracle_identities(record_property):
    rng = np.random.default_rng(7)
    worst_maha = worst_cos = 0.0
    for _ in range(1000):
        m = int(rng.integers(1, 9))
        x, xhat = rng.uniform(0, 1, (1, m)), rng.uniform(0, 1, (1, m))
        worst_maha = max(worst_maha, abs(mahalanobis_loss(x, xhat, np.eye(m))[0] - euclidean_loss(x, xhat)[0]))
        alpha = float(np.exp(rng.uniform(-5, 5)))
        x, xhat = x + 0.01, xhat + 0.01
        worst_cos = max(worst_cos, abs(cosine_loss(x, alpha * xhat)[0] - cosine_loss(x, xhat)[0]))
    assert worst_maha <= 1e-12 and worst_cos <= 1e-12

    lo, hi = np.inf, -np.inf
    for _ in range(1000):
        n, c = int(rng.integers(1, 30)), int(rng.integers(2, 8))
        yp = rng.dirichlet(np.full(c, 0.3), size=n)
        value = mutual_information(yp, rng.integers(0, c, n))[0]
        lo, hi = min(lo, value), max(hi, value - np.log(c))
    assert lo >= -1e-9 and hi <= 1e-9

    y = np.array([0, 1] * 10)
    perfect = mutual_information(np.eye(2)[y], y)[0]
    independent = mutual_information(np.full((20, 2), 0.5), y)[0]
    record_property("detail", f"maha-euc {worst_maha:.1e}, cos scale {worst_cos:.1e}, "
                              f"MI perfect-ln2 {perfect - np.log(2):.1e}, independent {independent:.1e}")
    assert abs(perfect - np.log(2)) <= 1e-6
    assert abs(independent) <= 1e-6


# ---------------------------------------------------------------- criterion 3

def eq1_autoencoder_trajectory(data: DataBatch, dims, hyper: Hyperparams, model_seed: int) -> list[float]:
    """Plain tied single-layer ReLU autoencoder trained with Adam on the squared error, written out directly."""
    d, k = dims
    philox = lambda *key: np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))
    W = philox(model_seed, 1, 0).standard_normal((d, k)) * np.sqrt(2.0 / d)
    params = {"W": W, "b": np.zeros(k), "c": np.zeros(d)}
    moments = {n: [np.zeros_like(p), np.zeros_like(p)] for n, p in params.items()}
    t = 0
    b1, b2, eps = 0.9, 0.999, 1e-8

    def recon(x):
        a = x @ params["W"] + params["b"]
        h = np.maximum(a, 0.0)
        return a, h, h @ params["W"].T + params["c"]

    losses = []
    for epoch in range(hyper.max_iters):
        order = philox(hyper.seed, 101, epoch).permutation(data.n)
        for s in range(0, data.n, hyper.batch_size):
            x = data.x[order[s:s + hyper.batch_size]]
            a, h, xhat = recon(x)
            g = 2.0 * (xhat - x)
            gh = (g @ params["W"]) * (a > 0)
            grads = {"W": g.T @ h + x.T @ gh, "b": gh.sum(axis=0), "c": g.sum(axis=0)}
            t += 1
            for name in ("W", "b", "c"):
                m, v = moments[name]
                m[...] = b1 * m + (1 - b1) * grads[name]
                v[...] = b2 * v + (1 - b2) * grads[name] ** 2
                step = hyper.lr_w * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
                params[name] = params[name] - step
        chunks = [np.sum((data.x[s:s + hyper.batch_size] - recon(data.x[s:s + hyper.batch_size])[2]) ** 2)
                  for s in range(0, data.n, hyper.batch_size)]
        losses.append(float(np.mean(chunks)))
    return losses


@pytest.mark.criterion(3, "Euclidean-reduction regression")
def test_euclidean_reduction(record_property):
    data = synth_gaussian_classes(50, 20, 4, 3.0, seed=11, noise=0.1)
    assert data.n == 200
    hyper = Hyperparams(lambda1=0.0, lambda2=0.0, cosine_mode="off", mahalanobis=True, freeze_metric=True,
                        max_iters=20, batch_size=32, convergence_tol=1e-300, patience=10**6, seed=5)
    model = init_model([20, 8], 4, (1,))
    np.testing.assert_array_equal(model.M, np.eye(20))
    _, report = train(model, data, None, hyper)
    ours = report.totals()
    oracle = eq1_autoencoder_trajectory(data, (20, 8), hyper, 1)
    diff = np.max(np.abs(np.array(ours) - np.array(oracle)))
    record_property("detail", f"{len(ours)} epochs, loss {oracle[0]:.3f} -> {oracle[-1]:.3f}, max diff {diff:.1e}")
    assert len(ours) == 20
    assert diff <= 1e-9


# ---------------------------------------------------------------- criteria 4 and 6 (MNIST)

@pytest.fixture(scope="module")
def mnist():
    splits = mnist_splits()
    if splits is None:
        pytest.fail(MNIST_MISSING)
    return splits


@pytest.fixture(scope="module")
def mnist_runs(mnist):
    lambda1, scores = choose_lambda1(mnist, MNIST_PIPELINE.whole_dims, MNIST_BASE, budget=20)
    supervised = replace(MNIST_BASE, lambda1=lambda1, **COSMOS)
    euclidean = replace(MNIST_BASE, **EUCLIDEAN_ONLY)
    return {"lambda1": lambda1, "grid": scores,
            "supervised": run_seeds(mnist, MNIST_SPEC, MNIST_PIPELINE, supervised),
            "euclidean": run_seeds(mnist, MNIST_SPEC, MNIST_PIPELINE, euclidean)}


@pytest.mark.criterion(4, "desk-scale MNIST: >= 90% and supervised beats Euclidean-only")
def test_mnist_desk_scale(mnist_runs, record_property):
    sup, euc = mnist_runs["supervised"], mnist_runs["euclidean"]
    record_property("detail", f"lambda1={mnist_runs['lambda1']}; supervised {[round(r.fused, 4) for r in sup]} "
                              f"vs euclidean {[round(r.fused, 4) for r in euc]}; "
                              f"max cpu {max(r.cpu_seconds for r in sup + euc) / 60:.1f} min")
    assert all(r.fused >= 0.90 for r in sup)
    assert all(r.cpu_seconds <= 30 * 60 for r in sup + euc)
    assert mean(r.fused for r in sup) > mean(r.fused for r in euc)


@pytest.mark.criterion(6, "tessellation: fused 10-stream >= whole-image only")
def test_mnist_tessellation(mnist_runs, record_property):
    sup = mnist_runs["supervised"]
    fused, whole = mean(r.fused for r in sup), mean(r.whole for r in sup)
    record_property("detail", f"fused {fused:.4f} vs whole-image {whole:.4f} over seeds {SEEDS}")
    assert fused >= whole


# ---------------------------------------------------------------- criterion 5

def ablation_table(splits: Splits, whole_dims, base: Hyperparams, tmp_path, tag: str):
    lambda1, _ = choose_lambda1(splits, whole_dims, base, budget=20)
    cfg = RunConfig(patch_shape=None, hyper=replace(base, lambda1=lambda1),
                    pipeline=PipelineConfig(whole_dims=tuple(whole_dims), use_patches=False),
                    ablate=AblationConfig(cells=ABLATION_CELLS, seeds=SEEDS))
    rows = ablation.run_ablation(cfg, splits)
    (tmp_path / f"ablation_{tag}.csv").write_text(ablation.to_csv(rows))
    print(f"\n{tag} ablation (lambda1={lambda1}):\n" + ablation.to_text(rows))
    assert len(rows) == 9
    means = {r.name: r.mean for r in rows}
    return lambda1, means, ordering_inversions(means)


@pytest.mark.criterion(5, "ablation ordering (synthetic Gaussian and MNIST subset)")
def test_ablation_ordering_synthetic(tmp_path, record_property):
    data = synth_gaussian_classes(100, 32, 6, 5.0, seed=0, noise=0.1)
    tr, va, te = split(data, (0.6, 0.15, 0.25), 0)
    base = Hyperparams(max_iters=40, batch_size=32, lr_w=3e-3, lambda2=1e-4)
    lambda1, means, inv = ablation_table(Splits(tr, va, te), (32, 48, 32, 24), base, tmp_path, "synthetic")
    record_property("detail", f"synthetic lambda1={lambda1} inversions="
                              + (", ".join(f"{a}<{b} by {100 * g:.2f}pt" for a, b, g in inv) or "none"))
    assert ordering_holds(inv)


@pytest.mark.criterion(5, "ablation ordering (synthetic Gaussian and MNIST subset)")
def test_ablation_ordering_mnist(mnist, tmp_path, record_property):
    base = replace(MNIST_BASE, max_iters=30)
    lambda1, means, inv = ablation_table(mnist, MNIST_PIPELINE.whole_dims, base, tmp_path, "mnist")
    record_property("detail", f"mnist lambda1={lambda1} inversions="
                              + (", ".join(f"{a}<{b} by {100 * g:.2f}pt" for a, b, g in inv) or "none"))
    assert ordering_holds(inv)


# ---------------------------------------------------------------- criterion 7

@pytest.mark.criterion(7, "IDX and CIFAR-10 parser fidelity")
def test_parsers(tmp_path, record_property):
    images = bytes([0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 128, 255, 0])
    labels = bytes([0, 0, 8, 1, 0, 0, 0, 1, 4])
    (tmp_path / "i").write_bytes(images)
    (tmp_path / "l").write_bytes(labels)
    batch = load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_array_equal(batch.x, [[0.0, 128 / 255, 1.0, 0.0]])
    assert batch.y.tolist() == [4]
    assert serialize_idx(parse_idx(images, 0x803)) == images
    assert serialize_idx(parse_idx(labels, 0x801)) == labels

    planes = np.arange(3072) % 256
    record = bytes([7]) + bytes(planes.astype(np.uint8))
    (tmp_path / "c").write_bytes(record * 10)
    cifar = load_cifar10([tmp_path / "c"])
    assert cifar.n == 10 and cifar.y.tolist() == [7] * 10
    img = cifar.x[0].reshape(32, 32, 3) * 255
    # pixel (r, c) of channel k sits at planar offset 1024 k + 32 r + c
    for r, c, k in [(0, 0, 0), (5, 9, 1), (31, 31, 2)]:
        assert img[r, c, k] == (1024 * k + 32 * r + c) % 256
    assert serialize_cifar10(*parse_cifar10(record * 10)) == record * 10
    record_property("detail", "IDX 2x2 fixture, 10-record CIFAR fixture, byte round trips")


# ---------------------------------------------------------------- criterion 8

@pytest.mark.criterion(8, "persistence: bit-exact round trip and byte-identical reruns")
def test_persistence(tmp_path, record_property):
    data = synth_images(8, (8, 8, 1), 2, seed=3)
    tr, va = split(data, (0.5, 0.5), 0)
    cfg = PipelineConfig(patch_dims=(16, 8, 8), whole_dims=(64, 16, 8), classifier=ClassifierConfig(epochs=3))
    ens = train_pipeline(tr, va, PatchSpec((8, 8, 1), (4, 4)), Hyperparams(max_iters=2, batch_size=8), cfg)
    save_model(ens, tmp_path / "m", {"note": "fixture"})
    back, _ = load_model(tmp_path / "m")
    a, b = ensemble_to_archive(ens, {}).tensors, ensemble_to_archive(back, {}).tensors
    assert a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert ModelArchive.load(tmp_path / "m").to_bytes() == (tmp_path / "m").read_bytes()

    ini = tmp_path / "toy.ini"
    ini.write_text(EXAMPLE)
    for run in ("r1", "r2"):
        assert main(["train", "--config", str(ini), "--seed", "4", "--out", str(tmp_path / run)]) == 0
    same = [(tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()
            for f in ("model.cosmos", "train_log.txt")]
    record_property("detail", f"{len(a)} tensors bit-exact; rerun archive/log identical: {same}")
    assert all(same)
