from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from kinseg.config import RunConfig
from kinseg.core import ImageField, ModelParams
from kinseg.errors import MissingArtifact, ShapeTooLarge
from kinseg.macrosolver import rho_gtsm_from_mask
from kinseg.microsim import Algorithm1Options
from kinseg.pipeline import (
    FigureTable,
    build_problem,
    combine_channels,
    densities_table,
    dice,
    export_figures,
    generate_shape_image,
    gtsm_features,
    load_mask,
    macro_loss,
    params_to_vector,
    particle_masks,
    save_mask_png,
    segment,
    shape_mask,
    vector_to_params,
    write_result,
)


class TestShapes:
    def test_square_fraction(self):
        assert shape_mask("square").mean() == pytest.approx(0.25)

    def test_circle_area(self):
        m = shape_mask("circle", (40, 40), 20)
        assert abs(m.sum() - np.pi * 100) <= 2

    @pytest.mark.parametrize("shape", ["square", "circle", "triangle", "rhombus"])
    def test_centred_and_inside(self, shape):
        m = shape_mask(shape)
        rows, cols = np.nonzero(m)
        assert cols.min() >= 10 and cols.max() <= 29 and rows.min() >= 10 and rows.max() <= 29
        np.testing.assert_array_equal(m, m[:, ::-1])

    def test_too_large(self):
        with pytest.raises(ShapeTooLarge):
            shape_mask("square", (10, 10), 12)

    def test_rgb_square(self):
        img, mask = generate_shape_image("square", (28, 28), 14, 1.0, 0.0, 3)
        g = gtsm_features(mask, 3)
        assert img.channels == 3 and g.shape == (28, 28, 3)
        np.testing.assert_array_equal(g[:, :, 1], mask)


class TestDice:
    def test_examples(self):
        a = np.zeros((4, 4), bool)
        a[:2] = True
        assert dice(a, a) == 1.0
        assert dice(a, ~a) == 0.0
        b = np.zeros((4, 4), bool)
        b[1:3] = True
        assert dice(a, b) == pytest.approx(0.5)
        assert dice(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice(np.zeros((2, 2)), np.zeros((3, 3)))


class TestCombine:
    def test_exact_and_any(self):
        m = np.zeros((2, 2, 3), bool)
        m[0, 0] = True
        m[0, 1, 0] = True
        np.testing.assert_array_equal(combine_channels(m), [[True, False], [False, False]])
        np.testing.assert_array_equal(combine_channels(m, mode="any"), [[True, True], [False, False]])
        np.testing.assert_array_equal(combine_channels(m, fg_color=[1, 0, 0]), [[False, True], [False, False]])


class TestNoiseFree:
    @pytest.mark.parametrize("channels", [1, 3])
    def test_two_level_image_is_exact(self, channels):
        img, mask = generate_shape_image("square", (16, 16), 8, 1.0, 0.0, channels)
        pb = build_problem(img, mask, 30)
        p = ModelParams(0.3, 0.4, 0.05, (0.5,) * channels)
        assert macro_loss(pb, p, 5.0) == pytest.approx(0.0, abs=1e-12)
        mr = particle_masks(pb, p, 1.0, n_runs=2, options=Algorithm1Options(dt=0.1, spatial_rounds_cap=5))
        assert dice(combine_channels(mr.channel_masks), mask) == 1.0


def test_vector_roundtrip():
    p = ModelParams(0.3, 0.4, 0.05, (0.45, 0.5, 0.55))
    q = vector_to_params(params_to_vector(p), p)
    assert q.c_max == p.c_max and q.delta1 == p.delta1
    r = vector_to_params(np.array([0.2, 0.3, 0.01, 0.6]), p)
    assert r.c_max == (0.6, 0.6, 0.6)


def test_mask_png_roundtrip(tmp_path):
    m = shape_mask("triangle")
    save_mask_png(m, tmp_path / "m.png")
    np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), m)


def _small_config(**kw) -> RunConfig:
    cfg = RunConfig()
    cfg.image.height = cfg.image.width = 16
    cfg.image.size = 8
    cfg.time.t_macro = 2.0
    cfg.time.t_micro = 0.2
    cfg.time.micro_dt = 0.1
    cfg.time.spatial_rounds_cap = 5
    for k, v in kw.items():
        sec, key = k.split("__")
        setattr(getattr(cfg, sec), key, v)
    return cfg


class TestSegment:
    def test_end_to_end(self, tmp_path):
        res = segment(_small_config())
        assert res.mask.shape == (16, 16) and 0 <= res.dice <= 1 and res.loss >= 0
        paths = write_result(res, tmp_path)
        data = json.loads(paths["result"].read_text())
        assert data["error"] is None and data["mask_shape"] == [16, 16]
        assert set(res.runtime) >= {"macro_s", "particles_s", "total_s"}

    def test_cbo_run_records_history(self):
        cfg = _small_config(cbo__enabled=True, cbo__n_particles=4, cbo__n_iterations=2)
        res = segment(cfg)
        assert len(res.cbo_history) == 3
        assert res.cbo_history[-1].best_loss <= res.cbo_history[0].best_loss

    def test_cbo_without_mask_writes_partial(self, tmp_path):
        img, _ = generate_shape_image("square", (16, 16), 8)
        from PIL import Image

        Image.fromarray(img.values[:, :, 0].astype(np.uint8)).save(tmp_path / "in.png")
        cfg = _small_config(image__path=str(tmp_path / "in.png"), cbo__enabled=True)
        with pytest.raises(MissingArtifact):
            segment(cfg, out_dir=tmp_path / "out")
        data = json.loads((tmp_path / "out" / "result.json").read_text())
        assert data["error"].startswith("MissingArtifact")

    def test_unit_scale_noise(self):
        cfg = _small_config(noise__scale="unit", noise__shape_intensity=[0.0], noise__background_intensity=[0.01])
        res = segment(cfg)
        assert np.isfinite(res.loss)


class TestFigures:
    def test_densities_schema_and_manifest(self, tmp_path):
        res = segment(_small_config())
        man = export_figures({"densities": densities_table(res), "skipped": None}, tmp_path)
        manifest = json.loads(man.read_text())
        assert list(manifest) == ["densities"]
        with open(tmp_path / "densities.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["c", "rho_init", "rho_final", "rho_gtsm"]
        assert len(rows) == 31
        gt = rho_gtsm_from_mask(shape_mask("square", (16, 16), 8), res.grid)
        np.testing.assert_allclose([float(r[3]) for r in rows[1:]], gt)

    def test_required_missing(self, tmp_path):
        with pytest.raises(MissingArtifact):
            export_figures({"a": FigureTable(["x"], [[1]]), "b": None}, tmp_path, required=["b"])
