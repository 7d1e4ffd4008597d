"""Acceptance criteria, each run at its stated tolerance.

Every test prints one ``[PASS]``/``[FAIL]`` line (visible even under
output capture). The MNIST criteria train 15 models from scratch and take
roughly a quarter of an hour on one CPU core.
"""

import itertools
import os

import numpy as np
import pytest

from bla import autodiff as ad
from bla import cli
from bla.attention import BlaConfig, LogitMap, soft_attention
from bla.data import mnist_pair, synthetic_pair
from bla.metrics import (
    MANN_WHITNEY_APPROX_GAP,
    WILCOXON_APPROX_GAP,
    localization_hit_rate,
    mann_whitney_u,
    wilcoxon_signed_rank,
)
from bla.nn import Pooling, forward
from bla.saliency import lime_scores
from bla.training import ExperimentConfig, explanation_sizes, soft_explanations, train

from test_metrics import exact_mann_whitney, exact_wilcoxon
from test_saliency import occlusion_linear

SEEDS = range(5)


@pytest.fixture(autouse=True)
def _announce(request, capsys):
    def announce(passed, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if passed else 'FAIL'}] {request.node.name}: {detail}")

    request.node.announce = announce


def verdict(request, passed, detail):
    request.node.announce(passed, detail)
    assert passed, detail


# shared trained artifacts -------------------------------------------------


@pytest.fixture(scope="module")
def mnist():
    root = os.environ.get("BLA_DATA_DIR")
    if not root:
        pytest.fail("BLA_DATA_DIR is unset; the MNIST IDX files are required for the acceptance suite")
    return mnist_pair(root)


def _runs(mnist, **kwargs):
    return [train(ExperimentConfig(seed=s, **kwargs), *mnist) for s in SEEDS]


@pytest.fixture(scope="module")
def baseline_runs(mnist):
    return _runs(mnist, mode="bl")


@pytest.fixture(scope="module")
def bla_runs(mnist):
    return _runs(mnist, mode="bla", theta=0.1, thresholding=True, gamma=1 / 49)


@pytest.fixture(scope="module")
def l2xf_runs(mnist):
    return _runs(mnist, mode="l2xf", k=4)


def accuracies(runs):
    return [r.accuracy for _, r in runs]


def fmt(xs):
    return "[" + ", ".join(f"{x:.4f}" for x in xs) + "]"


# criteria --------------------------------------------------------------------


class TestAcceptance:
    def test_criterion_01_baseline_accuracy(self, request, baseline_runs):
        acc = accuracies(baseline_runs)
        verdict(request, np.mean(acc) >= 0.988, f"BL mean accuracy {np.mean(acc):.4f} (>= 0.988) per seed {fmt(acc)}")

    def test_criterion_02_bla_accuracy_and_significance(self, request, baseline_runs, bla_runs):
        acc, base = accuracies(bla_runs), accuracies(baseline_runs)
        p = mann_whitney_u(acc, base).pvalue
        ok = np.mean(acc) >= 0.985 and p > 0.05
        verdict(request, ok, f"BLA hard mean accuracy {np.mean(acc):.4f} (>= 0.985), Mann-Whitney p vs BL {p:.4f} (> 0.05) per seed {fmt(acc)}")

    def test_criterion_03_l2xf(self, request, bla_runs, l2xf_runs):
        acc, bla = accuracies(l2xf_runs), accuracies(bla_runs)
        ok = np.mean(acc) >= 0.90 and np.mean(bla) >= np.mean(acc)
        verdict(request, ok, f"L2X-F top-k mean accuracy {np.mean(acc):.4f} (>= 0.90), BLA mean {np.mean(bla):.4f} (>= L2X-F) per seed {fmt(acc)}")

    def test_criterion_04_variable_size(self, request, mnist, bla_runs):
        model, _ = bla_runs[0]
        sizes = explanation_sizes(model, mnist[1])
        distinct = len(np.unique(sizes))
        ok = sizes.std() > 0 and distinct >= 3
        verdict(request, ok, f"seed-0 BLA size std {sizes.std():.3f} (> 0), {distinct} distinct sizes (>= 3)")

    def test_criterion_05_selected_uniformity(self, request):
        rng = np.random.default_rng(0)
        cfg = BlaConfig(theta=0.1)
        worst_spread, ordered = 0.0, True
        for _ in range(1000):
            g = rng.normal(size=(1, 49))
            g[0, rng.choice(49, size=rng.integers(1, 49), replace=False)] = 0.0
            lmap = LogitMap(ad.Tensor(g), ad.Tensor(np.minimum(g, 0.0)), (7, 7))
            q = soft_attention(lmap, cfg).q.data[0]
            sel = lmap.l.data[0] == 0
            worst_spread = max(worst_spread, q[sel].max() - q[sel].min())
            if (~sel).any():
                ordered &= bool(q[sel].min() > q[~sel].max())
        ok = worst_spread <= 1e-12 and ordered
        verdict(request, ok, f"max spread of q on selected cells {worst_spread:.2e} (<= 1e-12), selected above unselected: {ordered}")

    def test_criterion_06_gradient_soundness(self, request, mnist):
        rng = np.random.default_rng(6)
        x1, x2 = rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, size=(3, 4))
        away = lambda shape: rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        w = rng.normal(size=(4, 2))
        img = rng.normal(size=(2, 4, 4, 2))
        up = rng.normal(size=(6, 8))
        checks = {
            "add": (lambda t: ad.sum(ad.mul(ad.add(t, x1), x1)), x2),
            "sub": (lambda t: ad.sum(ad.mul(ad.sub(x1, t), x1)), x2),
            "mul": (lambda t: ad.sum(ad.mul(t, t)), x1),
            "div": (lambda t: ad.sum(ad.div(x1, t)), x2),
            "scale": (lambda t: ad.sum(ad.mul(ad.scale(t, 3.0), x1)), x1),
            "relu": (lambda t: ad.sum(ad.mul(ad.relu(t), x1)), away((3, 4))),
            "beta": (lambda t: ad.sum(ad.mul(ad.beta(t), x1)), away((3, 4))),
            "sigmoid": (lambda t: ad.sum(ad.mul(ad.sigmoid(t), x1)), x1),
            "exp": (lambda t: ad.sum(ad.exp(t)), x1),
            "log": (lambda t: ad.sum(ad.mul(ad.log(t), x1)), x2),
            "sum": (lambda t: ad.sum(ad.mul(ad.sum(t, axis=0), x1[0])), x1),
            "mean": (lambda t: ad.sum(ad.mul(ad.mean(t, axis=1, keepdims=True), x1)), x1),
            "amax": (lambda t: ad.sum(ad.mul(ad.amax(t, axis=1), x1[:, 0])), x1),
            "reshape": (lambda t: ad.sum(ad.mul(ad.reshape(t, (4, 3)), x1.reshape(4, 3))), x2),
            "concatenate": (lambda t: ad.sum(ad.mul(ad.concatenate([t, x2], axis=0), np.vstack([x1, x1]))), x1),
            "getitem": (lambda t: ad.sum(ad.mul(ad.getitem(t, (slice(0, 2), 1)), x1[:2, 0])), x1),
            "matmul": (lambda t: ad.sum(ad.mul(ad.matmul(t, w), x1[:, :2])), x1),
            "dense": (lambda t: ad.sum(ad.mul(ad.dense(x1, t, ad.Tensor(np.ones(2))), x1[:, :2])), w),
            "scaled_softmax": (lambda t: ad.sum(ad.mul(ad.scaled_softmax(t, 0.1), x1)), x1),
            "bce_with_logits": (lambda t: ad.bce_with_logits(t, np.array([[1.0], [0.0], [1.0]])), x1[:, :1]),
            "conv2d_same": (lambda t: ad.sum(ad.mul(ad.conv2d_same(img, t, ad.Tensor(np.zeros(3))), 0.3)), rng.normal(size=(3, 3, 2, 3))),
            "maxpool2": (lambda t: ad.sum(ad.mul(ad.maxpool2(t), img[:, ::2, ::2])), img),
            "upsample_repeat": (lambda t: ad.sum(ad.mul(ad.upsample_repeat(t, 2), up)), x1[:, :4].reshape(3, 4)),
        }
        errors = {name: ad.grad_check(f, x) for name, (f, x) in checks.items()}

        # the full BLA forward pass and loss, differentiated w.r.t. 10 random parameter coordinates
        model, _ = train(ExperimentConfig(mode="bla", epochs=0, seed=0), *mnist)
        # zero biases on a zero background put pre-activations exactly on the
        # ReLU kink and tie the pooling windows; random biases, a random u
        # (mixing selected and unselected cells) and jittered pixels avoid both
        for name, p in model.params.items():
            if name.endswith("bias") or name == "explainer.u":
                p.data = rng.normal(scale=0.1 if name != "explainer.u" else 1.0, size=p.data.shape)
        x = mnist[1].images[:4] + rng.uniform(0.0, 0.05, size=(4, 28, 28, 1))
        y = mnist[1].labels[:4]
        names = sorted(model.params)
        for name in rng.choice(names, size=10, replace=True):
            original = model.params[name]
            index = int(rng.integers(original.data.size))

            def loss(t, name=name):
                model.params[name] = t
                try:
                    return ad.bce_with_logits(forward(model, x, Pooling.SOFT).logit, y)
                finally:
                    model.params[name] = original

            errors[f"bla:{name}[{index}]"] = ad.grad_check(loss, original.data, eps=1e-6, indices=[index])
        worst = max(errors, key=errors.get)
        ok = all(e < 1e-4 for e in errors.values())
        verdict(request, ok, f"{len(errors)} checks, worst relative error {errors[worst]:.2e} at {worst} (< 1e-4)")

    def test_criterion_07_lime_oracle(self, request):
        a = np.random.default_rng(7).normal(size=49)
        s = lime_scores(occlusion_linear(a), np.ones((28, 28, 1)), (7, 7), 1000, np.random.default_rng(8))
        err = float(np.max(np.abs(s.scores - a)))
        verdict(request, err <= 1e-6, f"max coefficient error {err:.2e} (<= 1e-6) with 1000 samples")

    def test_criterion_08_faithfulness_direction(self, request, mnist, bla_runs):
        model, _ = bla_runs[0]
        rng = np.random.default_rng(0)
        idx = np.sort(rng.choice(len(mnist[1]), size=200, replace=False))
        scores = cli.faithfulness_scores(model, mnist[1].images[idx], 1000, rng)
        bla, rand, cam = (float(np.mean(scores[k])) for k in ("BLA", "random", "CAM"))
        verdict(request, bla > rand, f"200 images: mean Spearman LIME/BLA {bla:+.4f} > LIME/random {rand:+.4f} (LIME/CAM {cam:+.4f})")

    def test_criterion_09_synthetic_localization(self, request):
        train_ds, val_ds = synthetic_pair(5000, 1000, seed=0)
        model, result = train(ExperimentConfig(mode="bla", seed=0), train_ds, val_ds)
        rate = localization_hit_rate(soft_explanations(model, val_ds.images), val_ds.masks)
        verdict(request, rate >= 0.8, f"hit rate {rate:.4f} (>= 0.8; chance 4/49 = 0.082), accuracy {result.accuracy:.4f}")

    def test_criterion_10_cli_determinism(self, request, mnist, tmp_path):
        argv = ["train", "--mode", "bla", "--thresholding", "true", "--gamma", str(1 / 49), "--epochs", "1", "--seed", "2", "--data", "mnist38"]
        for out in ("a", "b"):
            assert cli.main(argv + ["--out", str(tmp_path / out)]) == 0
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        same = names == sorted(p.name for p in (tmp_path / "b").iterdir()) and all(
            (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names
        )
        verdict(request, same, f"two identical train invocations, files {names} byte-identical: {same}")

    def test_criterion_11_statistics_oracles(self, request):
        mw_worst, mw_flagged = 0.0, []
        for n1, n2 in itertools.product(range(2, 8), repeat=2):
            pooled = np.arange(float(n1 + n2))
            size_worst = 0.0
            for idx in itertools.combinations(range(n1 + n2), n1):
                a, b = pooled[list(idx)], np.delete(pooled, idx)
                size_worst = max(size_worst, abs(mann_whitney_u(a, b).pvalue - exact_mann_whitney(a, b)))
            mw_worst = max(mw_worst, size_worst)
            if size_worst > 0.05:
                mw_flagged.append((n1, n2))
        wx_worst, wx_flagged = 0.0, []
        for n in range(2, 8):
            size_worst = 0.0
            for signs in itertools.product((-1.0, 1.0), repeat=n):
                d = np.arange(1.0, n + 1) * np.array(signs)
                size_worst = max(size_worst, abs(wilcoxon_signed_rank(d, np.zeros(n)).pvalue - exact_wilcoxon(d, np.zeros(n))))
            wx_worst = max(wx_worst, size_worst)
            if size_worst > 0.05:
                wx_flagged.append(n)
        ok = mw_worst <= MANN_WHITNEY_APPROX_GAP and wx_worst <= WILCOXON_APPROX_GAP
        verdict(
            request,
            ok,
            f"Mann-Whitney worst gap {mw_worst:.4f} (<= {MANN_WHITNEY_APPROX_GAP}), > 0.05 at sizes {mw_flagged}; "
            f"Wilcoxon worst gap {wx_worst:.4f} (<= {WILCOXON_APPROX_GAP}), > 0.05 at n = {wx_flagged}",
        )


class TestTrainingInvariants:
    """Properties of the acceptance runs themselves."""

    @pytest.mark.parametrize("runs", ["baseline_runs", "bla_runs", "l2xf_runs"])
    def test_loss_decreases_after_first_epoch(self, request, runs):
        results = [r for _, r in request.getfixturevalue(runs)]
        drops = [r.history[1]["train_loss"] < r.history[0]["train_loss"] for r in results]
        assert all(drops), [(r.history[0]["train_loss"], r.history[1]["train_loss"]) for r in results]
