import numpy as np
import pytest

from rca.autodiff import NumericsError, Tensor
from rca.data import SynthConfig, split, stratified_batches, synth_generate
from rca.model import classifier_spec, extractor_spec, init_params
from rca.trainer import (AdamState, HyperParams, StepCounters, adam_step,
                         train, train_step)


def tiny_model(seed=0, input_dim=3, hidden=2, feat=4, classes=2, dropout=0.0):
    spec = extractor_spec(input_dim, (hidden,), feat, dropout)
    clf = classifier_spec(classes, input_dim=2 * feat)
    return init_params(spec, spec, clf, seed=seed)


def small_batch(seed=0, n=6, d=3):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    domains = np.array([0, 0, 0, 1, 1, 1])[:n]
    labels = np.array([0, 1, 0, 1, 0, 1])[:n]
    return x, domains, labels


class TestHyperParams:
    def test_defaults(self):
        hp = HyperParams()
        assert (hp.tau1, hp.tau2) == (0.1, 0.1)
        assert (hp.epsilon, hp.lam, hp.alpha) == (0.3, 0.3, 0.01)
        assert hp.learning_rate == 1e-4
        assert hp.dropout == 0.4
        assert hp.batch_size == 32
        assert (hp.use_dscl, hp.use_cscl, hp.use_al) == (True, True, True)
        assert hp.noise_norm_scope == "per_example"

    def test_with_ablation(self):
        hp = HyperParams().with_ablation(dscl=False, al=False)
        assert (hp.use_dscl, hp.use_cscl, hp.use_al) == (False, True, False)


class TestAdamStep:
    def test_first_step_magnitude_near_lr(self):
        p = Tensor(np.array([5.0]))
        p.grad[...] = 2.7
        state = AdamState.for_params([("p", p)])
        adam_step([("p", p)], state, lr=0.01)
        # bias-corrected m_hat/sqrt(v_hat) == sign(g) on the first step
        assert abs((5.0 - p.data[0]) - 0.01) <= 1e-9
        assert state.t == 1

    def test_zero_gradient_leaves_params(self):
        p = Tensor(np.array([1.0, -2.0]))
        state = AdamState.for_params([("p", p)])
        adam_step([("p", p)], state, lr=0.1)
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_quadratic_convergence_matches_reference_recurrence(self):
        # independent straight-line Adam recurrence on f(theta) = theta^2
        theta_ref, m, v = 1.0, 0.0, 0.0
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        traj = []
        for t in range(1, 101):
            g = 2.0 * theta_ref
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta_ref -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            traj.append(theta_ref)
        assert abs(theta_ref) < 0.1

        p = Tensor(np.array([1.0]))
        state = AdamState.for_params([("p", p)])
        for t in range(100):
            p.zero_grad()
            p.grad[...] = 2.0 * p.data
            adam_step([("p", p)], state, lr=0.1)
            assert p.data[0] == pytest.approx(traj[t], abs=1e-12)

    def test_non_finite_gradient_aborts_with_diagnostics(self):
        p = Tensor(np.array([1.0]))
        state = AdamState.for_params([("layer.w0", p)])
        p.grad[...] = np.nan
        with pytest.raises(NumericsError, match=r"step 1 in layer\.w0"):
            adam_step([("layer.w0", p)], state, lr=0.1)


# ---- independent straight-line reimplementation of one train step ---------

def _mlp_fwd(x, w1, b1, w2, b2):
    a1 = x @ w1 + b1
    h1 = np.maximum(a1, 0.0)
    return a1, h1, h1 @ w2 + b2


def _mlp_bwd(df, x, a1, h1, w1, w2):
    dw2 = h1.T @ df
    db2 = df.sum(axis=0)
    da1 = (df @ w2.T) * (a1 > 0)
    return {"w0": x.T @ da1, "b0": da1.sum(axis=0), "w1": dw2, "b1": db2}, da1 @ w1.T


def _nll_fwd_bwd(logits, labels):
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = z / z.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = -np.mean(np.log(probs[np.arange(n), labels]))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def _supcon_fwd_bwd(feats, groups, tau):
    n = feats.shape[0]
    norms = np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    xn = feats / norms
    u = (xn @ xn.T) / tau
    nonself = ~np.eye(n, dtype=bool)
    pos = (groups[:, None] == groups[None, :]) & nonself
    cnt = pos.sum(axis=1)
    anchors = cnt > 0
    n_anchors = anchors.sum()
    z = np.where(nonself, u, -np.inf)
    mx = z.max(axis=1)
    lse = mx + np.log(np.exp(z - mx[:, None]).sum(axis=1))
    w_anchor = anchors / n_anchors
    w_pos = pos / np.maximum(cnt, 1)[:, None] / n_anchors
    loss = np.sum(w_anchor * lse) - np.sum(w_pos * u)
    du = w_anchor[:, None] * np.exp(z - lse[:, None]) - w_pos
    dxn = (du + du.T) @ xn / tau
    dfeats = (dxn - np.sum(dxn * xn, axis=1, keepdims=True) * xn) / norms
    return loss, dfeats


def _reference_train_step(model, x, domains, labels, hp):
    """Plain-numpy forward/backward/FGM/Adam, no tape involved. dropout == 0."""
    feat = model.f_d.spec.output_dim
    p = {name: t.data.copy() for name, t in model.all_params()}

    def joint_forward(inp):
        cache = {}
        cache["d"] = _mlp_fwd(inp, p["f_d.w0"], p["f_d.b0"], p["f_d.w1"], p["f_d.b1"])
        cache["c"] = _mlp_fwd(inp, p["f_c.w0"], p["f_c.b0"], p["f_c.w1"], p["f_c.b1"])
        h = np.hstack([cache["d"][2], cache["c"][2]])
        return cache, h, h @ p["clf.w0"] + p["clf.b0"]

    def joint_backward(inp, cache, h, dlogits, grads, weight, dfd_extra=None, dfc_extra=None):
        grads["clf.w0"] += weight * (h.T @ dlogits)
        grads["clf.b0"] += weight * dlogits.sum(axis=0)
        dh = dlogits @ p["clf.w0"].T
        dfd = weight * dh[:, :feat] + (0.0 if dfd_extra is None else dfd_extra)
        dfc = weight * dh[:, feat:] + (0.0 if dfc_extra is None else dfc_extra)
        a1d, h1d, _ = cache["d"]
        gd, dx_d = _mlp_bwd(dfd, inp, a1d, h1d, p["f_d.w0"], p["f_d.w1"])
        a1c, h1c, _ = cache["c"]
        gc, dx_c = _mlp_bwd(dfc, inp, a1c, h1c, p["f_c.w0"], p["f_c.w1"])
        for k, v in gd.items():
            grads[f"f_d.{k}"] += v
        for k, v in gc.items():
            grads[f"f_c.{k}"] += v
        return dx_d + dx_c

    # phase 1+2: noise from the classification loss alone
    cache, h, logits = joint_forward(x)
    l_C, dlogits = _nll_fwd_bwd(logits, labels)
    probe = {name: np.zeros_like(v) for name, v in p.items()}
    g_x = joint_backward(x, cache, h, dlogits, probe, weight=1.0)
    row_norms = np.linalg.norm(g_x, axis=1, keepdims=True)
    noise = np.where(row_norms >= 1e-12, hp.epsilon * g_x / np.maximum(row_norms, 1e-12), 0.0)

    # phase 3: adversarial forward
    x_adv = x + noise
    cache_adv, h_adv, logits_adv = joint_forward(x_adv)
    l_C_prime, dlogits_adv = _nll_fwd_bwd(logits_adv, labels)

    # alignment losses on the clean features
    l_d, dfd_sup = _supcon_fwd_bwd(cache["d"][2], domains, hp.tau1)
    l_c, dfc_sup = _supcon_fwd_bwd(cache["c"][2], labels, hp.tau2)

    l_adv = l_C + hp.lam * (l_C_prime - l_C)
    l_total = l_adv + hp.alpha * (l_d + l_c)

    grads = {name: np.zeros_like(v) for name, v in p.items()}
    joint_backward(x, cache, h, (1.0 - hp.lam) * dlogits, grads,
                   weight=1.0, dfd_extra=hp.alpha * dfd_sup, dfc_extra=hp.alpha * dfc_sup)
    joint_backward(x_adv, cache_adv, h_adv, dlogits_adv, grads, weight=hp.lam)

    # first Adam step from a fresh state
    updated = {}
    for name, theta in p.items():
        g = grads[name]
        m = (1 - 0.9) * g
        v = (1 - 0.999) * g * g
        updated[name] = theta - hp.learning_rate * (m / (1 - 0.9)) / (
            np.sqrt(v / (1 - 0.999)) + 1e-8)
    return {"l_total": l_total, "l_d": l_d, "l_c": l_c, "l_C": l_C,
            "l_C_prime": l_C_prime, "l_adv": l_adv}, updated


class TestTrainStep:
    def test_matches_straight_line_reimplementation(self):
        # seeds chosen so feature rows and relu pre-activations sit well away
        # from the zero-row / kink corners where the two codepaths may
        # legitimately use the defined subgradient conventions
        model = tiny_model(seed=35)
        x, domains, labels = small_batch(seed=30)
        hp = HyperParams(dropout=0.0, learning_rate=1e-3)
        ref_losses, ref_params = _reference_train_step(model, x, domains, labels, hp)

        adam = AdamState.for_params(model.all_params())
        bundle = train_step(model, x, domains, labels, hp, adam,
                            np.random.default_rng(0))
        vals = bundle.values()
        for key, ref in ref_losses.items():
            assert vals[key] == pytest.approx(ref, abs=1e-12), key
        for name, t in model.all_params():
            assert np.max(np.abs(t.data - ref_params[name])) <= 1e-10, name

    def test_epsilon_zero_gives_bit_identical_perturbed_loss(self):
        model = tiny_model(seed=33, dropout=0.4)
        x, domains, labels = small_batch(seed=34)
        hp = HyperParams(epsilon=0.0)
        adam = AdamState.for_params(model.all_params())
        bundle = train_step(model, x, domains, labels, hp, adam,
                            np.random.default_rng(1))
        assert bundle.l_C_prime.item() == bundle.l_C.item()
        assert bundle.l_adv.item() == bundle.l_C.item()

    def test_al_off_single_forward_single_backward(self):
        model = tiny_model(seed=35, dropout=0.4)
        x, domains, labels = small_batch(seed=36)
        hp = HyperParams(use_al=False)
        adam = AdamState.for_params(model.all_params())
        counters = StepCounters()
        bundle = train_step(model, x, domains, labels, hp, adam,
                            np.random.default_rng(2), counters=counters)
        assert counters.forwards == 1
        assert counters.adv_forwards == 0
        assert counters.backwards == 1
        assert bundle.l_C_prime.item() == bundle.l_C.item()
        assert bundle.l_adv.item() == bundle.l_C.item()

    def test_epsilon_zero_matches_al_off_total(self):
        def run(hp):
            model = tiny_model(seed=37, dropout=0.4)
            adam = AdamState.for_params(model.all_params())
            x, domains, labels = small_batch(seed=38)
            return train_step(model, x, domains, labels, hp, adam,
                              np.random.default_rng(3))

        on = run(HyperParams(epsilon=0.0, use_al=True))
        off = run(HyperParams(use_al=False))
        assert on.l_total.item() == off.l_total.item()

    def test_perturbation_is_ascent_direction(self):
        # first-order property, measured: l_C' >= l_C in nearly all trials
        wins = 0
        trials = 40
        for seed in range(trials):
            model = tiny_model(seed=seed, dropout=0.0)
            x, domains, labels = small_batch(seed=seed + 1000)
            hp = HyperParams(epsilon=0.3)
            adam = AdamState.for_params(model.all_params())
            bundle = train_step(model, x, domains, labels, hp, adam,
                                np.random.default_rng(seed))
            if bundle.l_C_prime.item() >= bundle.l_C.item():
                wins += 1
        assert wins / trials >= 0.9

    def test_noise_row_norms_equal_epsilon(self):
        from rca.losses import adv_noise
        model = tiny_model(seed=39)
        x, domains, labels = small_batch(seed=40)
        from rca.autodiff import Tape
        from rca.losses import nll_loss
        from rca.model import forward
        tape = Tape()
        xt = Tensor(x)
        out = forward(tape, model, xt, "train", rng=np.random.default_rng(4))
        tape.backward(nll_loss(tape, out.logits, labels))
        noise = adv_noise(xt.grad, 0.3)
        norms = np.linalg.norm(noise, axis=1)
        assert np.all(np.abs(norms - 0.3) <= 1e-9)


def separable_corpus(seed=0):
    cfg = SynthConfig(num_domains=2, num_classes=2, per_cell=60, feature_dim=8,
                      class_separation=6.0, domain_shift=0.3, noise_std=0.3, seed=seed)
    return synth_generate(cfg)


class TestTrain:
    def _settings(self, epochs, seed=0):
        return HyperParams(epochs=epochs, seed=seed, batch_size=8,
                           positives_per_cell=2, learning_rate=1e-3, dropout=0.1)

    def test_zero_epochs_returns_initial_params(self):
        corpus = separable_corpus()
        train_set, dev_set, _ = split(corpus, (0.7, 0.1, 0.2), seed=0)
        model = tiny_model(seed=41, input_dim=8)
        before = {n: p.data.copy() for n, p in model.all_params()}
        best, history = train(model, train_set, dev_set, self._settings(0))
        assert history.records == []
        for name, p in best.all_params():
            assert np.array_equal(p.data, before[name])

    def test_deterministic_history(self):
        corpus = separable_corpus()
        train_set, dev_set, _ = split(corpus, (0.7, 0.1, 0.2), seed=0)

        def run():
            model = tiny_model(seed=42, input_dim=8, dropout=0.1)
            return train(model, train_set, dev_set, self._settings(3, seed=7))

        best1, h1 = run()
        best2, h2 = run()
        assert h1.records == h2.records
        for (n1, p1), (n2, p2) in zip(best1.all_params(), best2.all_params()):
            assert np.array_equal(p1.data, p2.data)

    def test_learns_separable_data(self):
        corpus = separable_corpus()
        train_set, dev_set, test_set = split(corpus, (0.7, 0.1, 0.2), seed=0)

        # independent oracle: the set is linearly separable for logistic regression
        sklearn = pytest.importorskip("sklearn.linear_model")
        x_tr, _, y_tr = train_set.densify(range(len(train_set)))
        x_dev, _, y_dev = dev_set.densify(range(len(dev_set)))
        clf = sklearn.LogisticRegression(max_iter=2000).fit(x_tr, y_tr)
        assert clf.score(x_dev, y_dev) >= 0.99

        model = tiny_model(seed=43, input_dim=8, hidden=16, dropout=0.1)
        best, history = train(model, train_set, dev_set, self._settings(20, seed=1))
        assert history.best_dev_acc >= 0.95
        assert len(history.records) == 20

    def test_best_checkpoint_is_first_argmax(self):
        corpus = separable_corpus()
        train_set, dev_set, _ = split(corpus, (0.7, 0.1, 0.2), seed=0)
        model = tiny_model(seed=44, input_dim=8, dropout=0.1)
        best, history = train(model, train_set, dev_set, self._settings(5, seed=2))
        accs = [r.dev_acc for r in history.records]
        assert history.best_dev_acc == max(accs)
        assert history.best_epoch == 1 + accs.index(max(accs))
        from rca.metrics import evaluate
        assert evaluate(best, dev_set).average_accuracy == history.best_dev_acc

    def test_empty_dataset_rejected(self):
        from rca.data import Corpus, DataError
        corpus = separable_corpus()
        empty = Corpus([], corpus.feature_dim, 2, 2, ["a", "b"], ["x", "y"])
        model = tiny_model(seed=45, input_dim=8)
        with pytest.raises(DataError):
            train(model, empty, empty, self._settings(1))
