import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from lmidiff import KMeansSegmenter, LMIDiffusionTranslator, SDEditTranslator
from lmidiff.synth import gen_phantom

TINY = dict(width=4, depth=1, time_dim=8, iterations=3, batch_size=2, steps=3)


@pytest.fixture(scope="module")
def phantoms():
    ph = [gen_phantom(s) for s in range(3)]
    return np.stack([p.modality_b for p in ph]), np.stack([p.modality_a for p in ph])


def test_params_and_clone():
    est = LMIDiffusionTranslator(levels=8, random_state=4)
    params = est.get_params()
    assert params["levels"] == 8 and params["random_state"] == 4
    assert clone(est).get_params() == params


def test_fit_transform_shapes(phantoms):
    target, source = phantoms
    est = LMIDiffusionTranslator(**TINY).fit(target)
    out = est.transform(source)
    assert out.shape == source.shape and out.min() >= 0 and out.max() <= 1
    assert est.transform(source[0]).shape == (32, 32)
    assert len(est.loss_curve_) == 3


def test_transform_deterministic(phantoms):
    target, source = phantoms
    a = LMIDiffusionTranslator(**TINY).fit(target).transform(source[:1])
    b = LMIDiffusionTranslator(**TINY).fit(target).transform(source[:1])
    assert np.array_equal(a, b)


def test_sdedit_shares_model(phantoms):
    target, source = phantoms
    est = LMIDiffusionTranslator(**TINY).fit(target)
    base = SDEditTranslator.from_model(est.model_, est.lmi_config_, steps=3)
    assert base.model_ is est.model_
    assert base.sampler_config().guidance == "perturb"
    assert base.transform(source[:1]).shape == (1, 32, 32)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        LMIDiffusionTranslator().transform(np.zeros((32, 32)))
    with pytest.raises(NotFittedError):
        KMeansSegmenter().predict(np.zeros((4, 4)))


def test_segmenter(phantoms):
    target, _ = phantoms
    seg = KMeansSegmenter(n_clusters=5)
    labels = seg.fit_predict(target)
    assert labels.shape == target.shape and labels.max() == 4
    assert np.all(np.diff(seg.cluster_centers_) > 0)
