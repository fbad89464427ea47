import filecmp

import numpy as np
import pytest
from scipy.stats import spearmanr

from hrgat.pipeline import city_features, city_proxy, validate_proxy
from hrgat.synth import DOMINANT_FEATURE, SynthConfig, generate_city, load_city, write_city

SMALL = dict(z13_per_side=2, n_cells=150, days=3)


def block_centers(polys):
    return np.array([ring[0][:4].mean(axis=0) for ring in polys])


def source(bundle, name):
    return next(s for s in bundle.sources if s.name == name).data


def test_noise_free_features_follow_their_field():
    cfg = SynthConfig(seed=1, feature_noise=0.0, dominant_noise=0.0, dominant_catchment_km=0.0, **SMALL)
    b = generate_city(cfg)
    dom = source(b, DOMINANT_FEATURE)
    c = block_centers(dom.polygons)
    act = b.fields["activity"](c[:, 0], c[:, 1])
    k = b.fields["district"](c[:, 0], c[:, 1])
    # expected bandwidth density: activity^p cells, each with 1 + 3 q carriers on average
    q = 0.05 + 0.9 * (k - 0.1) / (k.max() - 0.1)
    demand = act**cfg.cell_density_power * (1 + cfg.max_extra_carriers * q)
    assert spearmanr(dom.metrics, demand)[0] == pytest.approx(1.0, abs=1e-12)
    pop = source(b, "population")
    res = b.fields["residential"](c[:, 0], c[:, 1])
    assert spearmanr(pop.metrics, res)[0] == pytest.approx(1.0, abs=1e-12)


def test_same_seed_byte_identical(tmp_path):
    a = write_city(generate_city(SynthConfig(seed=7, **SMALL)), tmp_path / "a")
    b = write_city(generate_city(SynthConfig(seed=7, **SMALL)), tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files and files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    match, mismatch, errors = filecmp.cmpfiles(a, b, [str(f) for f in files], shallow=False)
    assert not mismatch and not errors


def test_written_city_reloads(tmp_path):
    bundle = generate_city(SynthConfig(seed=2, **SMALL))
    back = load_city(write_city(bundle, tmp_path / "c"))
    assert back.cells == bundle.cells
    assert [s.name for s in back.sources] == [s.name for s in bundle.sources]
    assert back.config == bundle.config
    assert len(bundle.sources) == 30


def test_planted_field_survives_the_proxy_pipeline():
    b = generate_city(SynthConfig(seed=3))
    tabs = city_features(b.sources, b.bbox)
    prox = city_proxy(b.cells, b.traffic, {z: tabs[z].tiles for z in tabs})
    latent = np.array([b.latent[t] for t in prox[15].tiles])
    assert spearmanr(latent, prox[15].bandwidth_mhz)[0] > 0.5
    assert validate_proxy(prox[15]).r_squared > 0.5


def test_district_blocks_constant_per_zoom13_tile():
    b = generate_city(SynthConfig(seed=4, **SMALL))
    bb = b.bbox
    lat = np.linspace(bb.min_lat + 1e-6, bb.max_lat - 1e-6, 40)
    lon = np.full(40, bb.min_lon + 1e-4)
    vals = b.fields["district"](lat, lon)
    assert len(np.unique(vals)) == 2  # two zoom-13 rows


@pytest.mark.parametrize("bad", [dict(days=0), dict(hours=25), dict(n_cores=0), dict(z13_per_side=0)])
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        SynthConfig(**bad)


def test_catchment_smoothing_keeps_linear_fields():
    from hrgat.synth import _smoothed

    xy = np.array([[0.0, 0.0], [3.0, -1.5], [10.0, 7.0]])
    lin = lambda s: 2.0 + 0.5 * s[:, 0] - 1.25 * s[:, 1]
    np.testing.assert_allclose(_smoothed(lin, xy, 2.5), lin(xy), rtol=1e-12)
    # a convex bump is lowered at its peak
    bump = lambda s: np.exp(-(s**2).sum(axis=1) / 8.0)
    assert _smoothed(bump, xy[:1], 2.5)[0] < bump(xy[:1])[0]
