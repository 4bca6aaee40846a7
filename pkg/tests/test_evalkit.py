import numpy as np
import pytest
import torch

from mosaictrain.data import make_synthetic
from mosaictrain.errors import DatasetEmptyError, UnknownKindError, UnknownStageError
from mosaictrain.evalkit import (
    CorruptionSpec,
    PredictionBundle,
    corrupt,
    evaluate,
    evaluate_plain,
    gradcam,
    predict_concat,
    predict_mix,
    robustness_eval,
)
from mosaictrain.model import ModelSpec, build_model


def brute_force_concat(bundle):
    # independent argmax: scan for the first maximal entry
    best, arg = -np.inf, 0
    for i, v in enumerate(bundle.y_hat_concat):
        if v > best:
            best, arg = v, i
    return arg


def brute_force_mix(bundle):
    total = [float(v) for v in bundle.y_hat_concat]
    for n in bundle.y_hat:
        for i, v in enumerate(bundle.y_hat[n]):
            total[i] += float(v)
    best, arg = -np.inf, 0
    for i, v in enumerate(total):
        if v > best:
            best, arg = v, i
    return arg


def random_bundle(rng, K=5, stages=(3, 4, 5), quantize=None):
    def vec():
        v = rng.random(K)
        if quantize:
            v = np.round(v * quantize) / quantize  # force frequent ties
        return v / max(v.sum(), 1e-9)
    return PredictionBundle(y_hat={n: vec() for n in stages}, y_hat_concat=vec())


def make_model(seed=0, **kw):
    spec = ModelSpec(num_classes=4, stage_num=3, c=16,
                     channels=(4, 8, 16, 32, 64), **kw)
    return build_model(spec, seed=seed)


# ---------------------------------------------------------------------------
# predict ops


def test_predict_concat_basic_and_ties():
    b = PredictionBundle(y_hat={}, y_hat_concat=np.array([0.3, 0.7]))
    assert predict_concat(b) == 1
    b2 = PredictionBundle(y_hat={}, y_hat_concat=np.array([0.5, 0.5]))
    assert predict_concat(b2) == 0  # tie breaks to the lowest index
    b3 = PredictionBundle(y_hat={}, y_hat_concat=np.full(7, 1 / 7))
    assert predict_concat(b3) == 0


def test_predict_mix_single_stage_example():
    b = PredictionBundle(y_hat={5: np.array([0.6, 0.4])},
                         y_hat_concat=np.array([0.3, 0.7]))
    # sums to [0.9, 1.1]
    assert predict_mix(b) == 1


def test_predict_mix_equals_concat_when_all_identical():
    v = np.array([0.2, 0.5, 0.3])
    b = PredictionBundle(y_hat={3: v, 4: v, 5: v}, y_hat_concat=v)
    assert predict_mix(b) == predict_concat(b) == 1


def test_predict_permutation_equivariance():
    rng = np.random.default_rng(0)
    b = random_bundle(rng)
    perm = rng.permutation(5)
    bp = PredictionBundle(
        y_hat={n: b.y_hat[n][perm] for n in b.y_hat},
        y_hat_concat=b.y_hat_concat[perm])
    assert predict_mix(bp) == int(np.where(perm == predict_mix(b))[0][0])


def test_predict_positive_scaling_invariance():
    rng = np.random.default_rng(1)
    b = random_bundle(rng)
    scaled = PredictionBundle(
        y_hat={n: 3.5 * b.y_hat[n] for n in b.y_hat},
        y_hat_concat=3.5 * b.y_hat_concat)
    assert predict_mix(scaled) == predict_mix(b)
    assert predict_concat(scaled) == predict_concat(b)


def test_predict_ops_match_brute_force_oracle():
    rng = np.random.default_rng(42)
    for trial in range(100):
        # quantized draws make exact ties common
        b = random_bundle(rng, quantize=4 if trial % 2 else None)
        assert predict_concat(b) == brute_force_concat(b)
        assert predict_mix(b) == brute_force_mix(b)


# ---------------------------------------------------------------------------
# evaluate


@pytest.fixture(scope="module")
def eval_setup():
    ds = make_synthetic(K=4, per_class=4, size=64, seed=0)
    model = make_model(seed=0).eval()
    return model, ds


def test_evaluate_report_fields(eval_setup):
    model, ds = eval_setup
    rep = evaluate(model, ds)
    assert rep.n_samples == 16
    for v in [rep.acc_concat, rep.acc_mix, *rep.per_stage_acc.values()]:
        assert 0.0 <= v <= 1.0
    assert sorted(rep.per_stage_acc) == [3, 4, 5]


def test_evaluate_batch_order_invariance(eval_setup):
    model, ds = eval_setup
    a = evaluate(model, ds, batch_size=3)
    b = evaluate(model, ds, batch_size=16)
    assert a.acc_concat == b.acc_concat
    assert a.acc_mix == b.acc_mix
    assert a.per_stage_acc == b.per_stage_acc


def test_evaluate_concat_only_matches_predict_concat(eval_setup):
    model, ds = eval_setup
    full = evaluate(model, ds)
    concat_only = evaluate(model, ds, heads="concat")
    assert concat_only.acc_concat == full.acc_concat
    assert concat_only.acc_mix == concat_only.acc_concat
    assert concat_only.per_stage_acc == {}


def test_evaluate_per_stage_matches_recount_oracle(eval_setup):
    model, ds = eval_setup
    rep = evaluate(model, ds)
    # brute-force recount: forward one sample at a time, save logits, recount
    correct = {n: 0 for n in model.stage_indices}
    with torch.no_grad():
        for i in range(len(ds)):
            img, label = ds[i]
            out = model(img.unsqueeze(0))
            for n in model.stage_indices:
                probs = out.probs[n][0].double().numpy()
                if int(np.argmax(probs)) == label:
                    correct[n] += 1
    for n in model.stage_indices:
        assert rep.per_stage_acc[n] == correct[n] / len(ds)


def test_evaluate_empty_dataset():
    model = make_model()
    empty = make_synthetic(K=2, per_class=1, size=64, seed=0)
    empty.images = empty.images[:0]
    empty.labels = empty.labels[:0]
    with pytest.raises(DatasetEmptyError):
        evaluate(model, empty)


def test_evaluate_plain():
    spec = ModelSpec(num_classes=4, kind="plain", channels=(4, 8, 16, 32, 64))
    model = build_model(spec, seed=0).eval()
    ds = make_synthetic(K=4, per_class=2, size=64, seed=0)
    rep = evaluate_plain(model, ds)
    assert rep.acc_concat == rep.acc_mix
    assert rep.n_samples == 8


# ---------------------------------------------------------------------------
# corrupt


def test_corrupt_zero_strength_is_identity():
    img = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(0))
    jitter = CorruptionSpec(kind="color_jitter", jitter_coefficient=0.0, seed=1)
    assert torch.allclose(corrupt(img, jitter), img, atol=1e-6)
    noise = CorruptionSpec(kind="gaussian_noise", noise_amplitude=0.0, seed=1)
    assert torch.equal(corrupt(img, noise), img)


def test_corrupt_deterministic_per_seed():
    img = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(0))
    spec = CorruptionSpec(kind="color_jitter", jitter_coefficient=1.0, seed=5)
    assert torch.equal(corrupt(img, spec), corrupt(img, spec))
    other = CorruptionSpec(kind="color_jitter", jitter_coefficient=1.0, seed=6)
    assert not torch.equal(corrupt(img, spec), corrupt(img, other))


def test_corrupt_preserves_shape_and_range():
    img = torch.rand(3, 24, 40, generator=torch.Generator().manual_seed(2))
    for spec in (CorruptionSpec(kind="color_jitter", jitter_coefficient=1.0, seed=0),
                 CorruptionSpec(kind="gaussian_noise", noise_amplitude=50.0, seed=0)):
        out = corrupt(img, spec)
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_corrupt_gaussian_sigma_scale():
    # sigma = amplitude/255 on unit-range images; check the empirical std
    img = torch.full((3, 64, 64), 0.5)
    spec = CorruptionSpec(kind="gaussian_noise", noise_amplitude=5.0, seed=3)
    out = corrupt(img, spec)
    noise = (out - img).flatten()
    assert noise.std().item() == pytest.approx(5.0 / 255.0, rel=0.1)


def test_corrupt_unknown_kind():
    with pytest.raises(UnknownKindError):
        CorruptionSpec(kind="motion_blur")


# ---------------------------------------------------------------------------
# robustness report


def test_robustness_empty_specs_clean_row_only(eval_setup):
    model, ds = eval_setup
    rep = robustness_eval(model, ds, [])
    assert len(rep.rows) == 1
    assert rep.rows[0].label == "Origin"
    assert rep.rows[0].delta_concat == 0.0
    assert rep.rows[0].delta_mix == 0.0


def test_robustness_row_count_and_deltas(eval_setup):
    model, ds = eval_setup
    specs = [CorruptionSpec(kind="color_jitter", jitter_coefficient=0.0, seed=0),
             CorruptionSpec(kind="gaussian_noise", noise_amplitude=0.0, seed=0)]
    rep = robustness_eval(model, ds, specs)
    assert len(rep.rows) == 1 + len(specs)
    clean = rep.rows[0].report
    for row in rep.rows[1:]:
        # zero-strength corruption must reproduce clean numbers exactly
        assert row.report.acc_concat == clean.acc_concat
        assert row.report.acc_mix == clean.acc_mix
        assert row.delta_concat == 0.0 and row.delta_mix == 0.0
    csv = rep.to_csv()
    assert csv.splitlines()[0] == "condition,acc_concat,acc_mix,delta_concat,delta_mix"
    assert len(csv.splitlines()) == 4
    table = rep.to_table()
    assert "Origin" in table and "+Color-Jitter" in table


# ---------------------------------------------------------------------------
# gradcam


def test_gradcam_range_and_size(eval_setup):
    model, ds = eval_setup
    img = ds[0][0]
    for stage in model.stage_indices:
        cam, cls = gradcam(model, img, stage)
        assert cam.shape == (64, 64)
        assert cam.min() >= 0.0 and cam.max() <= 1.0
        assert 0 <= cls < 4


def test_gradcam_unknown_stage(eval_setup):
    model, ds = eval_setup
    with pytest.raises(UnknownStageError):
        gradcam(model, ds[0][0], stage=1)


def test_gradcam_explicit_target_class(eval_setup):
    model, ds = eval_setup
    cam, cls = gradcam(model, ds[0][0], stage=5, target_class=2)
    assert cls == 2


def test_gradcam_single_channel_closed_form():
    # single-channel stage map: cam must equal ReLU(w * A) / max, where w is
    # the mean gradient; recompute with a direct loop oracle
    spec = ModelSpec(num_classes=3, stage_num=2, c=4, channels=(1, 2),
                     input_size=8, norm=False)
    model = build_model(spec, seed=1).eval()
    img = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(0))
    stage = 1  # stage-1 map has a single channel
    x = img.unsqueeze(0)
    maps = model.backbone.forward_stages(x)
    fmap = maps[0]
    fmap.retain_grad()
    xs = {n: model.interaction.smooth_and_pool({1: maps[0], 2: maps[1]}[n], n)
          for n in model.stage_indices}
    x_m = model.interaction.mutual_vector(xs)
    m = {n: xs[n] + torch.sigmoid(x_m * xs[n]) * xs[n] for n in model.stage_indices}
    probs = {n: model.classify_stage(m[n], n) for n in model.stage_indices}
    m_concat = torch.cat([m[n] for n in model.stage_indices], dim=-1)
    mix = model.classify_concat(m_concat) + sum(probs.values())
    target = int(mix[0].argmax())
    mix[0, target].backward()
    grad = fmap.grad[0, 0]
    act = fmap.detach()[0, 0]
    w = grad.mean().item()
    oracle = torch.zeros_like(act)
    for i in range(act.shape[0]):
        for j in range(act.shape[1]):
            oracle[i, j] = max(w * act[i, j].item(), 0.0)
    oracle_up = torch.nn.functional.interpolate(
        oracle[None, None], size=(8, 8), mode="bilinear", align_corners=False)[0, 0]
    if oracle_up.max() > 0:
        oracle_up = oracle_up / oracle_up.max()
    cam, got_target = gradcam(model, img, stage)
    assert got_target == target
    assert np.allclose(cam, oracle_up.numpy(), atol=1e-6)
