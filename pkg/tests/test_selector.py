import itertools
import math

import numpy as np
import pytest

from flowrecover import selector as sel


def normal_eq_oracle(X, y, lam):
    """Intercept column left unpenalised; solved from the normal equations."""
    A = np.hstack([np.ones((len(X), 1)), X])
    pen = lam * np.eye(A.shape[1])
    pen[0, 0] = 0.0
    w = np.linalg.solve(A.T @ A + pen, A.T @ y)
    return w[1:], w[0]


def test_ridge_exact_linear(rng):
    X = rng.normal(size=(30, 4))
    w = np.array([1.5, -2.0, 0.25, 3.0])
    coef, bias = sel.ridge_fit(X, X @ w + 7.0, lam=0.0)
    assert np.allclose(coef, w, rtol=0, atol=1e-10) and abs(bias - 7.0) < 1e-10


def test_ridge_shrinkage_monotone(rng):
    X = rng.normal(size=(40, 5))
    y = X @ rng.normal(size=5) + rng.normal(size=40)
    norms = [np.linalg.norm(sel.ridge_fit(X, y, lam)[0]) for lam in (0.0, 0.1, 1.0, 10.0, 1e3, 1e6)]
    assert all(b < a for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 1e-3


@pytest.mark.parametrize("seed", range(10))
def test_ridge_matches_oracle(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(8, 51))
    p = int(r.integers(1, min(n - 1, 12)))
    X = r.normal(size=(n, p)) * r.uniform(0.5, 5.0, size=p)
    y = r.normal(size=n)
    lam = float(r.choice([0.0, 0.01, 1.0]))
    coef, bias = sel.ridge_fit(X, y, lam)
    oc, ob = normal_eq_oracle(X, y, lam)
    assert np.max(np.abs(coef - oc)) <= 1e-8 * np.max(np.abs(oc))
    assert abs(bias - ob) <= 1e-8 * max(abs(ob), 1.0)


def test_ridge_recovers_dram_formula():
    grid = list(itertools.product((16, 64, 128), (50, 100, 200), (16, 64, 128), (1, 5, 20)))
    X = np.array(grid, dtype=float)
    w = np.array([4.7316, -194.3639, 39.4598, -2.4789])
    y = X @ w + 503.8408
    coef, bias = sel.ridge_fit(X, y, lam=1e-8)
    assert np.allclose(coef, w, rtol=1e-6, atol=0)
    assert bias == pytest.approx(503.8408, rel=1e-6)


def test_ridge_rank_deficient(rng):
    x = rng.normal(size=(10, 1))
    with pytest.raises(sel.RankDeficientError):
        sel.ridge_fit(np.hstack([x, 2 * x]), rng.normal(size=10), lam=0.0)
    sel.ridge_fit(np.hstack([x, 2 * x]), rng.normal(size=10), lam=1.0)


def test_predict_examples():
    assert sel.dram_formula().predict({"e": 64, "N": 50, "hi": 16, "eps": 5}) == pytest.approx(-8292.57, abs=0.01)
    feats = sel.FeatureSpec()
    pt = {"a": 0, "h": 2, "hi": 32, "e": 64, "N": 100}
    zero = sel.SurrogateModel(feats, np.zeros(len(feats)), 0.0)
    assert zero.predict(pt) == 0.0
    assert sel.SurrogateModel(feats, np.zeros(len(feats)), 3.5).predict(pt) == 3.5


def test_feature_count():
    assert len(sel.FeatureSpec()) == 19 + 6 * 4


def test_candidate_count():
    c = sel.candidates()
    assert len(c) == 288 == len(set(c))


def random_surrogates(r):
    feats = sel.FeatureSpec(degree=2)
    out = {}
    for name in ("error", "time", "energy", "memory"):
        out[name] = sel.SurrogateModel(feats, r.normal(size=len(feats)), float(r.normal()) + 5.0)
    return out


def brute_force(sur, gamma, eps_max, R):
    best, best_key = None, None
    for N in sel.SEQ_LEN:
        for e in sel.EPOCHS:
            for hi in sel.HIDDEN:
                for h in sel.TASKS:
                    for a in sel.PLATFORMS:
                        pt = {"a": a, "h": h, "hi": hi, "e": e, "N": N}
                        err = sur["error"].predict(pt)
                        t = sur["time"].predict(pt)
                        if not (err < eps_max and t < R):
                            continue
                        o = gamma * sur["energy"].predict(pt) + (1 - gamma) * sur["memory"].predict(pt)
                        key = (o, err, t, (a, h, hi, e, N))
                        if best_key is None or key < best_key:
                            best, best_key = (a, h, hi, e, N), key
    return best


@pytest.mark.parametrize("seed", range(100))
def test_enumerate_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    sur = random_surrogates(r)
    gamma = float(r.choice([0.0, 1.0, r.uniform()]))
    eps_max = float(r.uniform(3.0, 7.0))
    R = float(r.uniform(3.0, 7.0))
    want = brute_force(sur, gamma, eps_max, R)
    got = sel.enumerate_select(sur, gamma, eps_max, R)
    if want is None:
        assert not got.feasible
    else:
        assert got.feasible and got.config == want


def test_gamma_invariants():
    r = np.random.default_rng(3)
    sur = random_surrogates(r)
    pts = [dict(zip("a h hi e N".split(), c)) for c in sel.candidates()]
    ok = (sur["error"].predict_many(pts) < 6.0) & (sur["time"].predict_many(pts) < 6.0)
    for gamma, key in ((1.0, "energy"), (0.0, "memory")):
        res = sel.enumerate_select(sur, gamma, 6.0, 6.0)
        assert res.feasible
        assert sur[key].predict(dict(zip("a h hi e N".split(), res.config))) == sur[key].predict_many(pts)[ok].min()


def test_scale_invariance():
    r = np.random.default_rng(4)
    sur = random_surrogates(r)
    base = sel.enumerate_select(sur, 0.3)
    for name in ("energy", "memory"):
        s = sur[name]
        sur[name] = sel.SurrogateModel(s.features, 7.5 * s.coef, 7.5 * s.bias)
    assert sel.enumerate_select(sur, 0.3).config == base.config


def test_infeasible_and_bad_gamma():
    sur = sel.fit_all()
    res = sel.enumerate_select(sur, 1.0, eps_max=-math.inf)
    assert not res.feasible and not res.error_ok
    with pytest.raises(ValueError):
        sel.enumerate_select(sur, 1.5)


def test_refine_continuous():
    assert sel.refine_continuous(lambda x: (x - 3.0) ** 2, 0.0, 10.0) == pytest.approx(3.0, abs=1e-6)
    assert sel.refine_continuous(lambda x: 2.0 * x + 1.0, 0.0, 10.0) == 0.0
    dram = sel.dram_formula()
    f = lambda eps: dram.predict({"e": 64, "N": 50, "hi": 16, "eps": eps})
    assert sel.refine_continuous(f, 0.0, 20.0) == 20.0
    with pytest.raises(ValueError):
        sel.refine_continuous(f, 5.0, 1.0)


def test_bundled_table():
    table = sel.MeasurementTable.load()
    assert len(table) == 24
    i = next(i for i, p in enumerate(table.points()) if (p["platform"], p["task"], p["hi"]) == (0, 2, 16))
    assert table.rows[i, 5:].tolist() == [5.3678, 55.23, 261.79, 211.29]


def test_table_errors(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(sel.TableError):
        sel.MeasurementTable.load(p)
    p.write_text(",".join(sel.COLUMNS) + "\n3,0,16,128,200,1,1,1,1\n")
    with pytest.raises(sel.TableError, match="row 1"):
        sel.MeasurementTable.load(p)


def test_bundled_table_qualitative_selection():
    assert sel.select(goal="energy", gamma=1.0).platform == 0
    res = sel.select(goal="error", gamma=1.0)
    assert (res.platform, res.task) == (1, 2)
