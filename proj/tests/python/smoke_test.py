"""Smoke tests for the python bindings; run via ctest with PYTHONPATH set to
the build tree."""

import math
import sys

import aimkp


def test_masks():
    m = aimkp.build_stride_mask_1d(6, 2, "formula-anchor")
    assert m.bits == [1, 0, 1, 0, 1, 0]
    m = aimkp.build_stride_mask_1d(6, 2, "last-in-stride")
    assert m.bits == [0, 1, 0, 1, 0, 1]
    g = aimkp.build_stride_mask_2d(24, 24, 2)
    assert aimkp.retention_ratio(g) == 0.25
    assert g.popcount() == 144


def test_metrics():
    assert aimkp.porter_stem("caresses") == "caress"
    assert aimkp.porter_stem("ponies") == "poni"
    assert aimkp.porter_stem("sky") == "sky"
    assert aimkp.normalize_phrases(["Running Shoes", "running shoe"]) == ["run shoe"]
    assert abs(aimkp.f1_at_k(["a", "b"], ["a", "c"], 3) - 0.4) < 1e-12
    assert aimkp.map_at_k(["b", "a"], ["a"], 5) == 0.5


def test_filtering():
    assert aimkp.cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert aimkp.cosine_similarity([1.0, 2.0, 2.0], [2.0, 1.0, 2.0]) - 8.0 / 9.0 < 1e-12
    assert aimkp.filter_switch(0.4, 0.4) == 1
    assert aimkp.filter_switch(0.09, 0.1) == 0
    assert aimkp.filter_switch(-1.0, -1.0) == 1


def test_data_and_training():
    ds = aimkp.generate_synthetic(40, seed=7)
    assert ds.size == 40
    ds2 = aimkp.generate_synthetic(40, seed=7)
    assert ds.sample(0).grid == ds2.sample(0).grid

    result = aimkp.train(ds, schedule="aimkp", epochs=2, seed=1, embed_dim=16, layers=1, heads=2)
    assert not result.diverged
    assert result.n_decisions > 0
    assert 0.0 <= result.best_score <= 1.0

    params = result.best_params
    s = ds.sample(0)
    nll = aimkp.forward_nll(params, s)
    assert math.isfinite(nll)
    masked = aimkp.masked_nll(params, s, "text", 2)
    assert math.isfinite(masked)

    phrases = aimkp.decode(params, s, ds.vocab, strategy="greedy")
    assert isinstance(phrases, list)

    dropped = aimkp.ablate_modality(s, "drop-text")
    assert dropped.text == []
    assert dropped.grid == s.grid


def main():
    test_masks()
    test_metrics()
    test_filtering()
    test_data_and_training()
    print("python smoke tests passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
