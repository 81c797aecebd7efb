from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mspld.data import ProposalConfig, SceneSpec, generate_synthetic_dataset, sample_initial_labels
from mspld.detector import (
    FAMILIES,
    DetectionOutput,
    DetectorModel,
    TrainingError,
    fuse,
    score,
    train,
)
from mspld.features import ProposalBank, box_features
from mspld.geometry import iou_matrix

SCENE = SceneSpec(num_images=90, num_classes=3)


@pytest.fixture(scope="module")
def world():
    d = sample_initial_labels(generate_synthetic_dataset(SCENE, 0), 3, 0)
    bank = ProposalBank(d, ProposalConfig(jitter=0.1, random_fraction=0.3), 0)
    return d, bank


def _model(family, j=0, view=(0, 1, 2, 3)):
    return DetectorModel(j, family, view, SCENE.num_classes, SCENE.feature_dim, seed=11)


def _pool(d, ids):
    return [(d[i], d[i].objects) for i in sorted(ids)]


@pytest.mark.parametrize("family", FAMILIES)
def test_training_is_deterministic(world, family):
    d, bank = world
    a = train(_model(family), _pool(d, d.labeled_ids), bank)
    b = train(_model(family), _pool(d, d.labeled_ids), bank)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


@pytest.mark.parametrize("family", FAMILIES)
def test_scores_in_unit_interval_and_pure(world, family):
    d, bank = world
    m = train(_model(family), _pool(d, d.labeled_ids), bank)
    img = d[min(d.test_ids)]
    props = bank.proposals(img.image_id)
    out = score(m, img, props)
    assert out.scores.shape == (len(props), SCENE.num_classes)
    assert (out.scores >= 0).all() and (out.scores <= 1).all()
    assert np.array_equal(out.scores, score(m, img, props).scores)


def test_prototype_prefers_objects_over_background(world):
    d, bank = world
    m = train(_model("prototype", view=tuple(range(12))), _pool(d, d.labeled_ids), bank)
    wins = total = 0
    rng = np.random.default_rng(0)
    for i in sorted(d.labeled_ids):
        img = d[i]
        props = bank.proposals(i)
        bg = props[iou_matrix(props, img.gt_array()).max(1) < 0.1]
        if len(bg) == 0:
            continue
        s_bg = m.score_features(box_features(img, bg[rng.integers(len(bg))][None]))
        s_gt = m.score_features(box_features(img, img.gt_array()))
        for a, s in zip(img.objects, s_gt):
            total += 1
            wins += s[a.class_id] > s_bg[0, a.class_id]
    assert total and wins / total >= 0.9


def test_missing_class_fails(world):
    d, bank = world
    pool = [(img, [a for a in anns if a.class_id != 2]) for img, anns in _pool(d, d.labeled_ids)]
    with pytest.raises(TrainingError):
        train(_model("linear"), pool, bank)


def test_untrained_model_cannot_score(world):
    d, bank = world
    img = d.images[0]
    with pytest.raises(RuntimeError):
        score(_model("histogram"), img, bank.proposals(img.image_id))


def test_unknown_family_rejected():
    with pytest.raises(ValueError):
        _model("cnn")


def test_model_json_round_trip(world):
    d, bank = world
    m = train(_model("linear"), _pool(d, d.labeled_ids), bank)
    back = DetectorModel.from_dict(m.to_dict())
    feats = bank.features(min(d.test_ids))
    assert np.array_equal(m.score_features(feats), back.score_features(feats))


def test_families_disagree_on_disjoint_views(world):
    d, bank = world
    models = [train(_model(f, j, view=tuple(range(4 * j, 4 * j + 4))), _pool(d, d.labeled_ids), bank)
              for j, f in enumerate(FAMILIES)]
    disagree = 0
    for i in sorted(d.test_ids):
        feats = bank.features(i)
        tops = {int(np.argmax(m.score_features(feats).max(0))) for m in models}
        disagree += len(tops) > 1
    assert disagree > 0


@pytest.mark.parametrize("family,view", [("prototype", (0, 1, 2, 3)), ("histogram", (8, 9, 10, 11))])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_more_correct_labels_help(family, view, seed):
    from mspld.engine import ModelSpec, RunConfig, evaluate_models

    # a larger, noisier world in which a few labeled images leave the model data-limited
    scene = SceneSpec(num_images=120, num_classes=3, height=96, width=96, grid=24, min_object_size=20,
                      max_object_size=40, noise_sigma=1.0, instance_sigma=0.6, signature_scale=0.6)
    props = ProposalConfig(jitter=0.1, random_fraction=0.1)
    d = sample_initial_labels(generate_synthetic_dataset(scene, seed), 3, seed)
    bank = ProposalBank(d, props, 0)
    cfg = RunConfig(models=[ModelSpec(family, list(view))], mode="spl_single", proposals=props, neg_iou=0.5)

    def fit(ids):
        m = DetectorModel(0, family, view, 3, scene.feature_dim, seed=1, neg_iou=0.5)
        return train(m, [(d[i], d[i].objects) for i in sorted(ids)], bank, frozenset(d.labeled_ids))

    small, big = fit(d.labeled_ids), fit(d.trainval_ids)
    assert evaluate_models([big], d, bank, cfg)[0].mean > evaluate_models([small], d, bank, cfg)[0].mean


def _out(scores, image_id=0):
    scores = np.asarray(scores, dtype=float)
    return DetectionOutput(image_id, scores, np.tile([[0.0, 0.0, 1.0, 1.0]], (len(scores), 1)))


def test_fuse_examples():
    x = _out([[0.2, 0.9], [0.5, 0.1]])
    assert fuse([x]) is x
    assert np.array_equal(fuse([x, x, x]).scores, x.scores)
    assert fuse([_out([[0.2]]), _out([[0.6]])]).scores[0, 0] == pytest.approx(0.4)


def test_fuse_rejects_mismatch():
    with pytest.raises(ValueError):
        fuse([_out([[0.2, 0.3]]), _out([[0.2, 0.3], [0.1, 0.1]])])
    with pytest.raises(ValueError):
        fuse([_out([[0.2]], 0), _out([[0.2]], 1)])


@settings(max_examples=50)
@given(st.lists(st.lists(st.floats(0, 1), min_size=6, max_size=6), min_size=1, max_size=5), st.randoms())
def test_fuse_is_order_free(rows, rnd):
    outs = [_out(np.reshape(r, (3, 2))) for r in rows]
    shuffled = list(outs)
    rnd.shuffle(shuffled)
    a, b = fuse(outs).scores, fuse(shuffled).scores
    assert np.array_equal(a, b)
    assert (a >= 0).all() and (a <= 1).all()
    assert np.allclose(a, np.mean([o.scores for o in outs], axis=0))


def test_negatives_restricted_to_given_images(world):
    from mspld.detector import training_matrix

    d, bank = world
    pool = _pool(d, d.labeled_ids)
    x_all, y_all = training_matrix(_model("linear"), pool, bank)
    x_some, y_some = training_matrix(_model("linear"), pool, bank, negatives_from=set())
    bg = SCENE.num_classes
    assert (y_some != bg).all()
    assert (y_all == bg).sum() > 0
    assert (y_some != bg).sum() == (y_all != bg).sum()


def test_negatives_avoid_annotations(world):
    from mspld.detector import _sample_negatives

    rng = np.random.default_rng(0)
    overlap = np.linspace(0, 1, 101)
    idx = _sample_negatives(rng, overlap, 0.3, 40)
    assert (overlap[idx] < 0.3).all()
    assert len(idx) == len(set(idx.tolist()))
    assert replace(_model("linear"), neg_iou=0.5).neg_iou == 0.5
