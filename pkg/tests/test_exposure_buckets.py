"""False-negative structure of the synthetic generator, per item bucket."""

import numpy as np
import pytest

from cnsdiff.config import TrainConfig
from cnsdiff.corpus import SyntheticSpec, build_split, generate_synthetic, popularity_buckets, popularity_exposure
from cnsdiff.evaluation import fhns_flags
from cnsdiff.trainer import TrainData, fit, nearest_items, negative_pass

P = 0.1


def _data(seed, item_bias_scale=1.0):
    phi = popularity_exposure(300, 4, exponent=0.3, floor=0.15, seed=seed)
    spec = SyntheticSpec(M=300, N=300, num_envs=4, exposure_bias=phi, seed=seed, positive_fraction=P,
                         item_bias_scale=item_bias_scale)
    ds, gt = generate_synthetic(spec)
    return phi, ds, gt


def test_hidden_positives_follow_exposure():
    """Exhaustive count of preferred-but-unobserved pairs per true-exposure bucket.

    With preference independent of exposure, a pair is a hidden positive with
    probability p(1 - phi) / (1 - p phi); averaging over items and environments
    gives the closed-form oracle per bucket.
    """
    got, expected = [], []
    for seed in range(5):
        phi, ds, gt = _data(seed, item_bias_scale=0.0)
        groups = popularity_buckets(phi.mean(axis=0), 4)
        observed = np.zeros((300, 300), dtype=bool)
        observed[ds.users, ds.items] = True
        hidden = gt.preference & ~observed
        got.append([hidden[:, groups == b].sum() / (~observed[:, groups == b]).sum() for b in range(4)])
        expected.append([np.mean(P * (1 - phi[:, groups == b])) / np.mean(1 - P * phi[:, groups == b])
                         for b in range(4)])
    got, expected = np.mean(got, axis=0), np.mean(expected, axis=0)
    assert np.all(np.abs(got - expected) < 0.006)
    assert got[3] > got[0]


@pytest.mark.xfail(strict=False, reason="not reproduced: on this generator observed popularity tracks preference "
                                        "mass, so DNS's false hard negatives concentrate in popular buckets")
def test_dns_fhns_larger_in_least_popular_bucket():
    low, high = [], []
    for seed in range(3):
        _, ds, _ = _data(seed)
        split = build_split(ds, "popularity", seed=seed)
        groups = popularity_buckets(ds.subset_popularity(split.train), 4)
        cfg = TrainConfig(epochs=20, batch_size=256, d=32, T=10, eval_every=50, lr=5e-3, init_std=0.1,
                          sampler="dns", seed=seed, save_checkpoints=False)
        _, model = fit(ds, split, cfg)
        data = TrainData.from_split(ds, split)
        vecs, users, _, Z = negative_pass(model, cfg, data, cfg.epochs)
        flags = fhns_flags(vecs, users, data.test_matrix, Z.item_table, cfg.fhns_threshold)
        g = groups[nearest_items(vecs, Z.item_table)]
        high.append(flags[g == 0].mean())
        low.append(flags[g == 3].mean() if np.any(g == 3) else 0.0)
    assert np.mean(low) > np.mean(high)
