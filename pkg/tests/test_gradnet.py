import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semvqa.embedding import SemanticSpace
from semvqa.gradnet import (
    AdamState,
    DenseNet,
    ModelConfig,
    RubiBranch,
    Tensor,
    ToyVqaModel,
    Vocabulary,
    backward_all,
    grad_check,
    load_checkpoint,
    rubi_forward,
    save_checkpoint,
    step_adam,
)
from semvqa.harness import Batchable, pipeline_grad_check
from semvqa.semantic_loss import LossConfig, sigmoid

TOKENS = ["what", "color", "is", "the", "dog", "breed", "tree"]


def make_model(seed=0, n_classes=6):
    return ToyVqaModel(Vocabulary(TOKENS), n_classes, ModelConfig(), seed=seed)


def inputs(rng, n=4):
    feats = rng.standard_normal((n, 16))
    questions = [tuple(rng.choice(TOKENS, size=rng.integers(2, 6))) for _ in range(n)]
    return feats, questions


def test_zero_parameters_give_zero_logits(rng):
    model = make_model()
    for p in model.parameters():
        p.data = np.zeros_like(p.data)
    feats, qs = inputs(rng)
    assert np.array_equal(model.predict_logits(feats, qs), np.zeros((4, 6)))


def test_forward_is_deterministic(rng):
    feats, qs = inputs(rng)
    a = make_model(3).predict_logits(feats, qs)
    b = make_model(3)
    assert np.array_equal(a, b.predict_logits(feats, qs))
    assert np.array_equal(a, b.predict_logits(feats, qs))


@given(st.lists(st.sampled_from(TOKENS + ["unseen"]), min_size=1, max_size=8), st.randoms())
@settings(max_examples=50, deadline=None)
def test_token_order_does_not_matter(tokens, rnd):
    model = make_model(1)
    feat = np.linspace(-1, 1, 16)[None]
    shuffled = list(tokens)
    rnd.shuffle(shuffled)
    assert np.array_equal(model.predict_logits(feat, [tuple(tokens)]),
                          model.predict_logits(feat, [tuple(shuffled)]))


def test_unknown_tokens_use_reserved_row():
    vocab = Vocabulary(TOKENS)
    assert vocab.ids(["dog", "zzz"]) == [vocab.index["dog"], 0]


def test_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        make_model().forward(rng.standard_normal((2, 5)), [("dog",), ("dog",)])


def test_backward_requires_forward():
    with pytest.raises(RuntimeError):
        make_model().backward(np.ones((1, 6)))


def _fd_grad(loss, params, h=1e-5):
    out = {}
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for c in range(flat.size):
            orig = flat[c]
            flat[c] = orig + h
            fp = loss()
            flat[c] = orig - h
            fm = loss()
            flat[c] = orig
            g.reshape(-1)[c] = (fp - fm) / (2 * h)
        out[p.name] = g
    return out


def test_two_layer_net_matches_finite_differences(rng):
    net = DenseNet([5, 7, 3], rng, prefix="net")
    x = Tensor(rng.standard_normal((4, 5)))
    w = rng.standard_normal((4, 3))

    def loss():
        return float(np.sum(net(x).data * w))

    out = net(x)
    analytic = backward_all(out, w, net.parameters())
    numeric = _fd_grad(loss, net.parameters())
    for name in analytic:
        a, n = analytic[name], numeric[name]
        assert np.max(np.abs(a - n)) / max(np.max(np.abs(a)), 1e-12) < 1e-6


def test_backward_is_linear_in_upstream_gradient(rng):
    model = make_model(2)
    feats, qs = inputs(rng)
    g1, g2, c = rng.standard_normal((4, 6)), rng.standard_normal((4, 6)), 10.0
    model.forward(feats, qs)
    b1 = model.backward(g1)
    model.forward(feats, qs)
    b2 = model.backward(g2)
    model.forward(feats, qs)
    b12 = model.backward(g1 + c * g2)
    for name in b1:
        np.testing.assert_allclose(b12[name], b1[name] + c * b2[name], rtol=1e-10, atol=1e-12)


def test_zero_upstream_gives_zero_gradients(rng):
    model = make_model()
    feats, qs = inputs(rng)
    model.forward(feats, qs)
    grads = model.backward(np.zeros((4, 6)))
    assert all(not g.any() for g in grads.values())


# --- RUBi ---------------------------------------------------------------------------------

def test_rubi_inference_is_plain_forward(rng):
    model, branch = make_model(), RubiBranch(32, 6, seed=5)
    feats, qs = inputs(rng)
    plain = model.predict_logits(feats, qs)
    assert np.array_equal(rubi_forward(model, branch, feats, qs, training=False).data, plain)
    for p in branch.parameters():
        p.data = p.data + rng.standard_normal(p.data.shape)
    assert np.array_equal(rubi_forward(model, branch, feats, qs, training=False).data, plain)


def test_rubi_zero_mask_logits_halve(rng):
    model, branch = make_model(), RubiBranch(32, 6)
    for p in branch.parameters():
        p.data = np.zeros_like(p.data)
    feats, qs = inputs(rng)
    masked = rubi_forward(model, branch, feats, qs, training=True).data
    np.testing.assert_array_equal(masked, 0.5 * model.predict_logits(feats, qs))


def test_rubi_mask_in_unit_interval(rng):
    model, branch = make_model(), RubiBranch(32, 6, seed=1)
    feats, qs = inputs(rng)
    model.forward(feats, qs)
    mask = sigmoid(branch.net(model._hq).data)
    assert np.all((mask > 0) & (mask < 1))


def test_rubi_gradients_reach_branch(rng):
    model, branch = make_model(), RubiBranch(32, 6, seed=1)
    feats, qs = inputs(rng)
    out = rubi_forward(model, branch, feats, qs, training=True)
    grads = backward_all(out, np.ones((4, 6)), model.parameters() + branch.parameters())
    assert any(grads[p.name].any() for p in branch.parameters())


# --- Adam -------------------------------------------------------------------------------

def test_adam_zero_gradient_is_fixed_point(rng):
    p = Tensor(rng.standard_normal((3, 2)), name="w")
    before = p.data.copy()
    state = AdamState()
    for _ in range(3):
        step_adam([p], {"w": np.zeros((3, 2))}, state, lr=0.1)
    assert np.array_equal(p.data, before)


def test_adam_first_step_is_lr():
    p = Tensor(np.array([[2.0]]), name="x")
    step_adam([p], {"x": np.array([[1.0]])}, AdamState(), lr=0.01)
    # bias-corrected moments are exactly g and g^2, so the step is lr * 1 / (1 + eps)
    assert p.data[0, 0] == pytest.approx(2.0 - 0.01, abs=1e-9)


def test_adam_rejects_non_finite():
    p = Tensor(np.zeros((1, 2)), name="fusion.0.weight")
    with pytest.raises(FloatingPointError, match="fusion.0.weight"):
        step_adam([p], {"fusion.0.weight": np.array([[np.nan, 0.0]])}, AdamState(), lr=0.1)


def test_adam_runs_are_reproducible(rng):
    def run():
        model = make_model(7)
        feats, qs = inputs(np.random.default_rng(0), 8)
        state = AdamState()
        for _ in range(5):
            model.forward(feats, qs)
            step_adam(model.parameters(), model.backward(np.ones((8, 6))), state, lr=0.01)
        return model.state_dict()

    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


# --- gradient checker --------------------------------------------------------------------

@pytest.fixture
def check_setup(rng):
    model = make_model(4, n_classes=12)
    feats, qs = inputs(rng, 6)
    targets = rng.choice([0.0, 1 / 3, 2 / 3, 1.0], size=(6, 12))
    space = SemanticSpace(rng.random((12, 12)), "cooc")
    return model, Batchable(feats, qs, targets), space


def test_pipeline_grad_check_passes(check_setup):
    model, batch, space = check_setup
    report = pipeline_grad_check(model, batch, space, LossConfig(lam=10, k=10), tolerance=1e-4)
    assert report.passed, report.summary()
    assert "PASS" in report.summary()


def test_pipeline_grad_check_with_rubi(check_setup):
    model, batch, space = check_setup
    report = pipeline_grad_check(model, batch, space, LossConfig(lam=10, k=10), branch=RubiBranch(32, 12, seed=2))
    assert report.passed, report.summary()


def test_grad_check_detects_corruption(check_setup):
    model, batch, space = check_setup
    cfg = LossConfig()
    from semvqa.semantic_loss import combined_loss

    out = model.forward(batch.feats, batch.questions)
    grads = model.backward(combined_loss(out.data, batch.targets, space, cfg).grad_logits)
    grads["fusion.1.bias"] = grads["fusion.1.bias"].copy()
    grads["fusion.1.bias"][0, 3] += 1.0

    def loss():
        return combined_loss(model.predict_logits(batch.feats, batch.questions), batch.targets, space, cfg).total

    report = grad_check(loss, model.parameters(), grads, tolerance=1e-4, n_samples=None)
    assert not report.passed
    assert report.worst == ("fusion.1.bias", (0, 3))
    assert "FAIL" in report.summary()


# --- checkpoints -------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    model = make_model(9)
    save_checkpoint(model.state_dict(), tmp_path / "a.json", {"n_classes": 6})
    blocks, meta = load_checkpoint(tmp_path / "a.json")
    other = make_model(10)
    other.load_state_dict(blocks)
    assert meta == {"n_classes": 6}
    for k, v in model.state_dict().items():
        assert np.array_equal(other.state_dict()[k], v)
    save_checkpoint(other.state_dict(), tmp_path / "b.json", {"n_classes": 6})
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
