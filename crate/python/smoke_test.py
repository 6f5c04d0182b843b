"""Smoke test for the eend_vib_py extension module.

Build and install it first, e.g.

    maturin build --release -m crates/py/Cargo.toml
    pip install target/wheels/eend_vib_py-*.whl

then run `python python/smoke_test.py` (or under pytest).
"""

import itertools
import math

import numpy as np

import eend_vib_py as ev


def test_simulate_shapes():
    convs = ev.simulate("sc2-4", n=6, seed=3, frames=80, feat_dim=8)
    assert len(convs) == 6
    for c in convs:
        x, y = np.array(c["x"]), np.array(c["y"])
        assert x.shape == (80, 8)
        assert y.shape[1] == 80 and 2 <= y.shape[0] <= 4
        assert set(np.unique(y)) <= {0.0, 1.0}
        assert len(c["speakers"]) == y.shape[0]
    again = ev.simulate("sc2-4", n=6, seed=3, frames=80, feat_dim=8)
    assert again == convs


def test_pit_matches_numpy_brute_force():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, size=(3, 7))
    y = (rng.uniform(size=(3, 7)) > 0.5).astype(float)
    best = min(
        np.mean(-(y[list(perm)] * np.log(p) + (1 - y[list(perm)]) * np.log(1 - p)))
        for perm in itertools.permutations(range(3))
    )
    loss, perm = ev.pit_loss(p.tolist(), y.tolist())
    assert math.isclose(loss, best, rel_tol=1e-12)
    assert sorted(perm) == [0, 1, 2]


def test_kld_closed_form():
    assert ev.kld([[1.0]], [[1.0]]) == 0.5
    assert abs(ev.kld([[0.0, 0.0]], [[1.0, 1.0]])) < 1e-12


def test_score_identity_and_miss():
    ref = [("a", 0.0, 3.0), ("b", 4.0, 8.0)]
    assert ev.score(ref, ref)["der"] == 0.0
    assert ev.score(ref, [])["der"] == 1.0


def test_rttm_round_trip():
    y = [[1, 1, 0, 0, 1], [0, 1, 1, 0, 0]]
    text = ev.write_rttm("rec", y)
    assert text.splitlines()[0] == "SPEAKER rec 1 0.00 0.20 <NA> <NA> spk0 <NA> <NA>"
    segs = ev.read_rttm(text)
    assert [s[1] for s in segs] == ["spk0", "spk0", "spk1"]


def test_inference_contract():
    model = ev.Diarizer.random(feat_dim=8, model_dim=16, ffn_dim=32, seed=1)
    x = ev.simulate("sc2", n=1, seed=0, frames=50, feat_dim=8)[0]["x"]
    out = model.infer(x)
    p = np.array(out["p"])
    assert p.shape[1] == 50
    assert np.all((p > 0) & (p < 1))
    assert ev.count_speakers(out["q"], 0.5, len(out["q"]) - 1) == out["n_speakers"]
    a = model.infer(x, mode="sample-avg", m=20, seed=4)
    b = model.infer(x, mode="sample-avg", m=20, seed=4)
    assert a == b


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_"):
            fn()
            print("ok", name)
