import os

import numpy as np
import pytest

from oracles import (
    kernel_from_bank,
    idft_matrix,
    pca_ratios_by_covariance,
    plant_banks,
    shifted_spectrum,
    window_mass,
)
from niff.analysis import (
    KernelMassCurve,
    NoNiffLayers,
    analyze_checkpoint,
    analyze_model,
    effective_size,
    export_kernels,
    extract_spatial_kernels,
    kernels_from_bank,
    mass_ratio,
    mass_ratio_curve,
    mass_ratio_curves,
    pca,
    read_pgm,
    ring_map,
    tile,
    to_gray,
    write_pgm,
)
from niff.checkpoint import model_tensors, save_checkpoint
from niff.model import build_model, desk_plain, desk_resnet
from niff.synthesis import init_mlp, make_grid, synthesize


# ------------------------------------------------------------- extraction

@pytest.mark.parametrize("h,w", [(5, 5), (6, 8), (7, 4)])
def test_constant_bank_gives_centered_delta(h, w):
    k = kernels_from_bank(np.ones((1, h, w), complex))[0]
    expect = np.zeros((h, w))
    expect[h // 2, w // 2] = 1.0
    np.testing.assert_allclose(k, expect, atol=1e-15)


@pytest.mark.parametrize("h,w", [(8, 8), (7, 9)])
def test_known_kernel_recovered(h, w, rng):
    k = rng.standard_normal((3, h, w))
    bank = np.stack([shifted_spectrum(p) for p in k])
    assert np.max(np.abs(kernels_from_bank(bank) - k)) < 1e-10


def test_extraction_matches_dft_matrix_oracle(rng):
    bank = rng.standard_normal((4, 6, 7)) + 1j * rng.standard_normal((4, 6, 7))
    oracle = np.stack([np.fft.fftshift(kernel_from_bank(b)) for b in bank])
    np.testing.assert_allclose(kernels_from_bank(bank), oracle, atol=1e-12)


def test_residue_matches_complex_inverse(rng):
    h, w = 6, 5
    bank = rng.standard_normal((3, h, w)) + 1j * rng.standard_normal((3, h, w))
    _, residue = kernels_from_bank(bank, return_residue=True)
    for b, r in zip(bank, residue):
        z = idft_matrix(h) @ np.roll(b, (-(h // 2), -(w // 2)), axis=(0, 1)) @ idft_matrix(w).T
        assert r == pytest.approx(np.abs(z.imag).max(), rel=1e-10)
    # a hermitian bank has no residue
    herm = np.stack([shifted_spectrum(rng.standard_normal((h, w))) for _ in range(2)])
    assert np.all(kernels_from_bank(herm, return_residue=True)[1] < 1e-12)


def test_extract_from_mlp_matches_synthesis(rng):
    mlp = init_mlp((2, 16, 8), "relu", rng, dtype=np.float64)
    k = extract_spatial_kernels(mlp, 7, 6)
    bank = synthesize(mlp, make_grid(7, 6)).data
    np.testing.assert_allclose(k, np.stack([np.fft.fftshift(kernel_from_bank(b)) for b in bank]), atol=1e-12)


# ------------------------------------------------------------- mass ratio

def test_full_window_and_delta():
    rng = np.random.default_rng(0)
    k = rng.standard_normal((9, 9))
    assert mass_ratio(k, 9) == 1.0
    d = np.zeros((8, 8))
    d[4, 4] = 2.5
    assert mass_ratio(d, 1) == 1.0


def test_uniform_8x8_window_4():
    assert mass_ratio(np.ones((8, 8)), 4) == pytest.approx(0.25, abs=1e-15)


@pytest.mark.parametrize("shape", [(8, 8), (7, 7), (6, 9), (9, 6), (5, 8)])
def test_curve_matches_window_slicing(shape, rng):
    k = rng.standard_normal(shape)
    curve = mass_ratio_curve(k)
    for s in range(1, min(shape) + 1):
        assert curve[s - 1] == pytest.approx(window_mass(k, s), abs=1e-12)


def test_ring_map_nests_windows():
    r = ring_map(6, 8)
    for s in range(1, 7):
        inside = np.zeros((6, 8), bool)
        inside[3 - s // 2:3 - s // 2 + s, 4 - s // 2:4 - s // 2 + s] = True
        assert np.array_equal(r < s, inside)


def test_monotone_and_terminal_on_random_kernels(rng):
    for shape in [(7, 7), (8, 8), (6, 6), (5, 5)]:
        k = rng.standard_normal((250, *shape)) * rng.exponential(1.0, (250, 1, 1)) ** 3
        curves = mass_ratio_curves(k)
        assert np.all(np.diff(curves, axis=1) >= 0)
        assert np.all(curves[:, -1] == 1.0)
        assert np.all((curves >= 0) & (curves <= 1))


def test_non_square_plane_stops_at_short_side(rng):
    # the largest square window leaves the long side's edges out
    k = rng.standard_normal((50, 6, 10))
    curves = mass_ratio_curves(k)
    assert curves.shape == (50, 6)
    assert np.all(np.diff(curves, axis=1) >= 0) and np.all(curves[:, -1] < 1.0)
    np.testing.assert_allclose(curves[:, -1], [window_mass(p, 6) for p in k], atol=1e-12)


def test_raw_mass_variant(rng):
    k = np.zeros((5, 5))
    k[2, 2], k[0, 0] = 2.0, -1.0
    assert mass_ratio(k, 1, absolute=False) == pytest.approx(2.0)
    assert mass_ratio(k, 1) == pytest.approx(2 / 3)
    assert mass_ratio(k, 5, absolute=False) == 1.0


def test_window_out_of_range():
    with pytest.raises(ValueError, match="outside"):
        mass_ratio(np.ones((4, 4)), 5)
    with pytest.raises(ValueError, match="outside"):
        mass_ratio(np.ones((4, 4)), 0)


def test_zero_kernel_counts_as_fully_contained():
    assert np.all(mass_ratio_curve(np.zeros((4, 4))) == 1.0)


def test_effective_size(rng):
    assert effective_size(np.array([0.2, 0.9, 0.95, 1.0])) == 3
    assert effective_size(np.array([0.2, 0.9, 0.96, 1.0]), threshold=0.99) == 4
    planted = np.zeros((3, 9, 9))
    planted[:, 3:6, 3:6] = rng.uniform(0.5, 1.5, (3, 3, 3))
    assert list(KernelMassCurve.from_kernels(planted).effective_sizes()) == [3, 3, 3]


# --------------------------------------------------------------------- PCA

@pytest.mark.parametrize("n,d", [(20, 9), (50, 49), (6, 25)])
def test_pca_matches_covariance_oracle(n, d, rng):
    x = rng.standard_normal((n, d)) @ rng.standard_normal((d, d))
    rep = pca(x)
    oracle = pca_ratios_by_covariance(x)[:rep.rank]
    assert rep.rank == min(n - 1, d)
    assert np.max(np.abs(rep.explained_variance_ratio - oracle)) < 1e-10
    assert abs(rep.explained_variance_ratio.sum() - 1) < 1e-10
    assert np.all(np.diff(rep.explained_variance_ratio) <= 0)
    # components are orthonormal and each has a positive largest entry
    np.testing.assert_allclose(rep.components @ rep.components.T, np.eye(rep.rank), atol=1e-10)
    assert np.all(rep.components[np.arange(rep.rank), np.abs(rep.components).argmax(axis=1)] > 0)


def test_pca_top_k(rng):
    rep = pca(rng.standard_normal((20, 9)), n_components=3)
    assert rep.components.shape == (3, 9) and len(rep.explained_variance_ratio) == 3
    assert rep.component_images(3, 3).shape == (3, 3, 3)


def test_pca_repeated_kernel_is_rank_zero(rng):
    row = rng.standard_normal(9)
    rep = pca(np.tile(row, (7, 1)))
    assert rep.rank == 0
    assert list(rep.explained_variance_ratio) == [1.0]
    np.testing.assert_allclose(rep.mean, row)
    assert pca(row[None]).rank == 0


def test_pca_plus_minus_unit_vector():
    e1 = np.zeros(9)
    e1[0] = 1
    rep = pca(np.stack([e1, -e1]))
    assert rep.rank == 1
    assert rep.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(rep.components[0], e1, atol=1e-15)


def test_pca_rejects_empty():
    with pytest.raises(ValueError):
        pca(np.zeros((0, 4)))


# ------------------------------------------------------------------ images

def test_pgm_round_trip(tmp_path, rng):
    g = to_gray(rng.standard_normal((5, 7)))
    assert g.dtype == np.uint8 and g.min() == 0 and g.max() == 255
    write_pgm(tmp_path / "a.pgm", g)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), g)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5")


def test_tile_layout(rng):
    grid = tile(rng.standard_normal((5, 3, 4)), ncols=2, gap=1)
    assert grid.shape == (3 * 3 + 2, 2 * 4 + 1)


# ---------------------------------------------------------------- pipeline

def test_planted_kernels_give_effective_size_3(rng):
    model = build_model(desk_resnet("niff", full="full", blocks_per_stage=1), seed=0)
    plant_banks(model, rng)
    report = analyze_model(model)
    assert len(report.layers) == len(model.niff_layers())
    for la in report.layers:
        assert np.all(la.effective_sizes == 3), la.name
        assert la.mean_effective_size == 3.0


def test_fresh_model_report_manifest(tmp_path):
    model = build_model(desk_plain("niff"), seed=0)
    save_checkpoint(tmp_path / "m.niff", model_tensors(model),
                    {"model_spec": desk_plain("niff").to_dict(), "train_config": {"seed": 0}})
    report = analyze_checkpoint(tmp_path / "m.niff", tmp_path / "out", figures=True)
    n = len(report.layers)
    expect = {"mass_ratio.csv", "pca.csv", "effective_size.csv", "mass_ratio.png", "effective_size.png"}
    for i in range(n):
        expect |= {f"layer{i}_{k}.pgm" for k in ("spatial", "freq_re", "freq_im", "pca_spatial",
                                                  "pca_freq_re", "pca_freq_im")}
        expect |= {f"layer{i}_pca_{d}.png" for d in ("spatial", "freq_re", "freq_im")}
    assert set(report.files) == expect
    assert set(os.listdir(tmp_path / "out")) == expect
    head = (tmp_path / "out" / "mass_ratio.csv").read_text().splitlines()[0]
    assert head == "layer,channel,window,ratio"
    assert (tmp_path / "out" / "pca.csv").read_text().splitlines()[0] == "layer,domain,component,explained_variance"


def test_report_is_deterministic(tmp_path):
    model = build_model(desk_plain("niff"), seed=3)
    save_checkpoint(tmp_path / "m.niff", model_tensors(model), {"model_spec": desk_plain("niff").to_dict()})
    for d in ("a", "b"):
        analyze_checkpoint(tmp_path / "m.niff", tmp_path / d, figures=False)
    for f in os.listdir(tmp_path / "a"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_spatial_model_has_nothing_to_analyze(tmp_path):
    with pytest.raises(NoNiffLayers, match="no NIFF layers"):
        analyze_model(build_model(desk_plain("spatial")))


def test_export_kernels(tmp_path, rng):
    model = build_model(desk_plain("niff"), seed=0)
    plant_banks(model, rng)
    save_checkpoint(tmp_path / "m.niff", model_tensors(model), {"model_spec": desk_plain("niff").to_dict()})
    files = export_kernels(tmp_path / "m.niff", "blocks.1.conv", tmp_path / "k")
    assert set(files) == {"layer1_spatial.npy", "layer1_freq.npy", "layer1_spatial.pgm"}
    k = np.load(tmp_path / "k" / "layer1_spatial.npy")
    assert k.shape == (16, 28, 28)
    assert np.abs(k[:, :13]).max() < 1e-5  # planted 3x3 core only
    assert export_kernels(tmp_path / "m.niff", "1", tmp_path / "k2") == files
    with pytest.raises(KeyError, match="available"):
        export_kernels(tmp_path / "m.niff", "blocks.9.conv", tmp_path / "k3")
    with pytest.raises(KeyError, match="out of range"):
        export_kernels(tmp_path / "m.niff", 7, tmp_path / "k3")
