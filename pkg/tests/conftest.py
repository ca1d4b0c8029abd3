import numpy as np
import pytest

from relaug.core import LabelDistribution, RelationInstance


@pytest.fixture
def make_instance():
    def _make(idx=0, scene=0, predicate=0, n_p=4, dim=6, seed=0, latent=None,
              subj_class=0, obj_class=1):
        rng = np.random.default_rng(seed + idx)
        observed = (LabelDistribution.background(n_p) if predicate is None
                    else LabelDistribution.one_hot(predicate, n_p))
        return RelationInstance(
            id=idx, scene_id=scene, subj_class=subj_class, obj_class=obj_class,
            subj_feat=rng.normal(size=dim), obj_feat=rng.normal(size=dim),
            union_feat=rng.normal(size=dim), observed=observed, latent=latent)

    return _make
