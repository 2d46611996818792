import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from oracles import surface_oracle
from synalign.eval_diag import (MetricsRecord, aggregate, domain_gap_report, evaluate_case, gap_score, kde,
                                overlap_metrics, paired_kde, silverman_bandwidth, surface_metrics,
                                write_gap_report, write_metrics)


def block(h, w, top, left, bh, bw):
    m = np.zeros((h, w), dtype=bool)
    m[top:top + bh, left:left + bw] = True
    return m


# overlap --------------------------------------------------------------------

def test_overlap_examples():
    a = block(6, 6, 1, 1, 2, 2).astype(int)
    b = block(6, 6, 1, 2, 2, 2).astype(int)
    d, j = overlap_metrics(a, a, 2)
    assert (d[0], j[0]) == (100.0, 100.0)
    d, j = overlap_metrics(a, b, 2)
    assert d[0] == 50.0 and j[0] == pytest.approx(100 / 3, abs=1e-12) and round(j[0], 2) == 33.33
    c = block(6, 6, 4, 4, 2, 2).astype(int)
    assert overlap_metrics(a, c, 2)[0][0] == 0.0 and overlap_metrics(a, c, 2)[1][0] == 0.0


def test_overlap_empty_conventions():
    z = np.zeros((4, 4), dtype=int)
    o = block(4, 4, 0, 0, 2, 2).astype(int)
    assert overlap_metrics(z, z, 2)[0][0] == 100.0
    assert overlap_metrics(o, z, 2)[0][0] == 0.0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_dice_jaccard_identity(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.integers(0, 3, (12, 12)), rng.integers(0, 3, (12, 12))
    d, j = overlap_metrics(p, g, 3)
    assert np.all((0 <= d) & (d <= 100)) and np.all((0 <= j) & (j <= 100))
    jf = j / 100
    assert np.allclose(d, 100 * 2 * jf / (1 + jf), atol=1e-9)


# surface --------------------------------------------------------------------

def test_surface_examples():
    a = block(8, 8, 2, 2, 3, 3)
    r = surface_metrics(a, a)
    assert (r.hd95, r.asd, r.defined) == (0.0, 0.0, True)
    p = np.zeros((5, 9), dtype=bool); p[2, 1] = True
    q = np.zeros((5, 9), dtype=bool); q[2, 4] = True
    r = surface_metrics(p, q)
    assert r.hd95 == 3.0 and r.asd == 3.0


def test_surface_empty_conventions():
    z = np.zeros((4, 4), dtype=bool)
    r0 = surface_metrics(z, z)
    assert r0.defined and r0.hd95 == r0.asd == 0.0
    r = surface_metrics(block(4, 4, 0, 0, 2, 2), z)
    assert not r.defined and math.isnan(r.hd95)


def test_surface_matches_all_pairs_oracle():
    rng = np.random.default_rng(11)
    checked = 0
    while checked < 50:
        a = rng.random((16, 16)) < rng.uniform(0.05, 0.6)
        b = rng.random((16, 16)) < rng.uniform(0.05, 0.6)
        want = surface_oracle(a, b)
        got = surface_metrics(a, b)
        if want is None:
            assert not got.defined
            continue
        assert abs(got.hd95 - want[0]) <= 1e-9 and abs(got.asd - want[1]) <= 1e-9
        checked += 1


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), dy=st.integers(-3, 3), dx=st.integers(-3, 3))
def test_symmetry_and_translation_invariance(seed, dy, dx):
    rng = np.random.default_rng(seed)
    small_a = rng.random((10, 10)) < 0.5
    small_b = rng.random((10, 10)) < 0.5
    a = np.zeros((20, 20), dtype=bool); a[5:15, 5:15] = small_a
    b = np.zeros((20, 20), dtype=bool); b[5:15, 5:15] = small_b
    ta, tb = np.roll(a, (dy, dx), (0, 1)), np.roll(b, (dy, dx), (0, 1))
    r, rs, rt = surface_metrics(a, b), surface_metrics(b, a), surface_metrics(ta, tb)
    if r.defined:
        assert r.hd95 == pytest.approx(rs.hd95, abs=1e-12) and r.asd == pytest.approx(rs.asd, abs=1e-12)
        assert r.hd95 == pytest.approx(rt.hd95, abs=1e-12) and r.asd == pytest.approx(rt.asd, abs=1e-12)
    la, lb = a.astype(int), b.astype(int)
    assert np.allclose(overlap_metrics(la, lb, 2), overlap_metrics(np.roll(la, (dy, dx), (0, 1)),
                                                                   np.roll(lb, (dy, dx), (0, 1)), 2))


@settings(max_examples=40, deadline=None)
@given(h=st.integers(2, 8), w=st.integers(2, 8), dy=st.integers(-6, 6), dx=st.integers(-6, 6))
def test_hd95_at_least_asd_for_translated_blocks(h, w, dy, dx):
    a = block(24, 24, 8, 8, h, w)
    b = block(24, 24, 8 + dy, 8 + dx, h, w)
    r = surface_metrics(a, b)
    assert r.hd95 >= r.asd >= 0


def test_hd95_below_asd_counterexample():
    # a lone far pixel contributes one large distance below the 95th percentile cut
    a = block(40, 40, 2, 2, 12, 12)
    b = a.copy()
    b[38, 38] = True
    r = surface_metrics(a, b)
    assert r.hd95 == 0.0 and r.asd > 0.0


def test_aggregate_excludes_undefined():
    z = np.zeros((8, 8), dtype=int)
    g = z.copy(); g[1:4, 1:4] = 1; g[5:7, 5:7] = 2
    p = z.copy(); p[1:4, 1:4] = 1
    rec = evaluate_case(p, g, 3)
    assert rec.valid == [True, False] and rec.n_undefined == 1
    assert rec.mean_hd95 == 0.0 and rec.dice == [100.0, 0.0] and rec.mean_dice == 50.0
    both = aggregate([rec, evaluate_case(g, g, 3)])
    assert both.n_images == 2 and both.dice == [100.0, 50.0]


def test_write_metrics(tmp_path):
    g = np.zeros((8, 8), dtype=int); g[2:5, 2:5] = 1
    write_metrics(evaluate_case(g, g, 3), tmp_path)
    data = json.loads((tmp_path / "metrics.json").read_text())
    assert data["mean_dice"] == 100.0
    assert (tmp_path / "metrics.csv").read_text().startswith("class,dice")


# KDE ------------------------------------------------------------------------

def test_kde_peak():
    c = kde([0.0], np.array([0.0]), bandwidth=1.0)
    assert c.density[0] == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-15)
    assert c.density[0] == pytest.approx(0.39894, abs=1e-5)


def test_kde_symmetric():
    g = np.linspace(-5, 5, 101)
    c = kde([-1.0, 1.0], g, bandwidth=0.7)
    assert np.allclose(c.density, c.density[::-1], atol=1e-15)


def test_kde_recovers_normal():
    x = np.random.default_rng(0).standard_normal(1000)
    c = kde(x)
    assert np.max(np.abs(c.density - stats.norm.pdf(c.grid))) < 0.05


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 200))
def test_kde_integrates_to_one(seed, n):
    x = np.random.default_rng(seed).gamma(2.0, size=n)
    c = kde(x)
    assert np.all(c.density >= 0) and c.bandwidth >= 1e-6
    assert abs(np.trapezoid(c.density, c.grid) - 1.0) <= 0.02


def test_silverman_rule():
    x = np.random.default_rng(1).standard_normal(500)
    sd, iqr = np.std(x, ddof=1), np.subtract(*np.percentile(x, [75, 25]))
    assert silverman_bandwidth(x) == pytest.approx(0.9 * min(sd, iqr / 1.34) * 500 ** -0.2, rel=1e-12)
    assert silverman_bandwidth([3.0, 3.0, 3.0]) == 1e-6
    with pytest.raises(ValueError):
        kde([])


def test_gap_scores():
    x = np.random.default_rng(2).random(40)
    a, b = paired_kde(x, x)
    assert gap_score(a, b) < 1e-3
    a, b = paired_kde(x, x + 100.0)
    assert gap_score(a, b) > 0.99


class AreaModel:
    """Predicts class 1 wherever the image exceeds 0.5."""

    def predict(self, images):
        fg = images[..., 0] > 0.5
        logits = np.zeros((len(images), 3) + images.shape[1:3])
        logits[:, 1] = np.where(fg, 5.0, -5.0)
        return logits


def test_domain_gap_report(tmp_path):
    rng = np.random.default_rng(3)
    pool = rng.random((30, 8, 8, 1)) * rng.random((30, 1, 1, 1))
    same = domain_gap_report(AreaModel(), pool, pool.copy())
    assert same.gap < 0.05
    far = domain_gap_report(AreaModel(), pool * 0.4, 0.6 + 0.4 * pool)
    assert far.gap > 0.95
    with pytest.raises(ValueError):
        domain_gap_report(AreaModel(), pool, pool, class_index=3)
    write_gap_report(same, tmp_path)
    assert (tmp_path / "kde.svg").read_text().lstrip().startswith("<?xml")
    assert (tmp_path / "kde.csv").read_text().splitlines()[0] == "x,labeled,unlabeled"
    first = (tmp_path / "kde.svg").read_bytes()
    write_gap_report(same, tmp_path)
    assert (tmp_path / "kde.svg").read_bytes() == first
