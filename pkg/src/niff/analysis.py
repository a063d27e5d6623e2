"""How big are the learned kernels?  Spatial extraction, mass ratios and PCA.

Mass ratios use a square window of side ``s`` centered on the kernel's DC-aligned
tap ``(H//2, W//2)``: rows ``H//2 - s//2`` through ``H//2 - s//2 + s - 1``
(likewise for columns).  Windows are nested, and the curve is accumulated
ring by ring, so it is monotone and ends at exactly 1.0 whatever the rounding.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .freqconv import NiffDecomposed, NiffDepthwise, NiffFull
from .spectral import fftshift_array, ifft2_array, ifftshift_array

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ kernels

def kernels_from_bank(bank: np.ndarray, return_residue=False):
    """Centered spatial kernels ``(n, H, W)`` from a shifted complex bank.

    The kernel tap at the origin is moved to ``(H//2, W//2)``.  The residue is
    the largest imaginary magnitude dropped per kernel.
    """
    z = ifft2_array(ifftshift_array(bank.astype(np.complex128)))
    k = fftshift_array(z.real)
    if return_residue:
        return k, np.abs(z.imag).reshape(len(z), -1).max(axis=1)
    return k


def bank_from_kernels(kernels: np.ndarray) -> np.ndarray:
    """Inverse of :func:`kernels_from_bank` for centered real kernels."""
    return fftshift_array(np.fft.fft2(ifftshift_array(kernels), axes=(-2, -1)))


def extract_spatial_kernels(mlp, h, w, grid_norm="normalized", return_residue=False):
    from .synthesis import make_grid, synthesize

    bank = synthesize(mlp.astype(np.float64), make_grid(h, w, grid_norm)).data
    return kernels_from_bank(bank, return_residue)


def layer_bank(layer, h, w) -> np.ndarray:
    """All spectral filters of a NIFF layer as a flat ``(n, h, w)`` stack."""
    bank = layer.bank(h, w)
    return bank.reshape(-1, h, w)


# -------------------------------------------------------------- mass ratio

def _axis_ring(n):
    """Smallest window side (about ``n//2``) that covers each index."""
    i = np.arange(n)
    c = n // 2
    return np.where(i >= c, 2 * (i - c) + 1, 2 * (c - i))


def ring_map(h, w) -> np.ndarray:
    """Index of the first centered square window containing each pixel, minus one."""
    return np.maximum(_axis_ring(h)[:, None], _axis_ring(w)[None, :]) - 1


def mass_ratio_curves(kernels: np.ndarray, absolute=True) -> np.ndarray:
    """Ratios ``(n, min(H, W))`` for a stack of kernel planes.

    Every pixel's mass is assigned to the ring of the first window that covers
    it; the cumulative ring sums are then monotone and, for square planes, end
    at the total.  On a non-square plane the last window spans the short side
    only.
    """
    kernels = np.asarray(kernels, dtype=np.float64)
    n, h, w = kernels.shape
    mass = np.abs(kernels) if absolute else kernels
    rings = ring_map(h, w).ravel()
    onehot = np.zeros((h * w, max(h, w)))
    onehot[np.arange(h * w), rings] = 1.0
    cum = np.cumsum(mass.reshape(n, -1) @ onehot, axis=1)
    total = cum[:, -1:]
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(total != 0, cum / np.where(total != 0, total, 1), 1.0)
    return out[:, :min(h, w)]


def mass_ratio_curve(k: np.ndarray, absolute=True) -> np.ndarray:
    """Ratio for every window side ``1 .. min(H, W)`` of one kernel plane."""
    return mass_ratio_curves(np.asarray(k)[None], absolute)[0]


def mass_ratio(k: np.ndarray, window: int, absolute=True) -> float:
    """Share of the kernel's mass inside the centered ``window x window`` square."""
    if not 1 <= window <= min(k.shape):
        raise ValueError(f"window {window} outside 1..{min(k.shape)}")
    return float(mass_ratio_curve(k, absolute)[window - 1])


def effective_size(curve: np.ndarray, threshold=0.95) -> int:
    """Smallest window side whose ratio reaches ``threshold``."""
    hit = np.flatnonzero(curve >= threshold)
    return int(hit[0]) + 1 if hit.size else len(curve)


@dataclass
class KernelMassCurve:
    sizes: np.ndarray
    ratios: np.ndarray
    per_kernel: np.ndarray = None

    @classmethod
    def from_kernels(cls, kernels, absolute=True):
        per = mass_ratio_curves(kernels, absolute)
        return cls(np.arange(1, per.shape[1] + 1), per.mean(axis=0), per)

    def effective_sizes(self, threshold=0.95):
        return np.array([effective_size(c, threshold) for c in self.per_kernel])


# --------------------------------------------------------------------- PCA

@dataclass
class PcaReport:
    components: np.ndarray
    explained_variance_ratio: np.ndarray
    singular_values: np.ndarray
    mean: np.ndarray
    rank: int

    def component_images(self, h, w):
        return self.components.reshape(-1, h, w)


def pca(bank: np.ndarray, n_components=None) -> PcaReport:
    """Mean-centered SVD of an ``(n, d)`` matrix of flattened kernels.

    Only components with non-negligible variance are kept.  A bank whose rows
    are all identical has rank 0 and yields one zero component with ratio 1.
    """
    x = np.asarray(bank, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"need an (n, d) matrix with n >= 1, got {x.shape}")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    # centering leaves roundoff on the scale of the raw data, not of xc
    tol = max(np.linalg.norm(x), s[0] if s.size else 0.0) * max(x.shape) * np.finfo(float).eps
    rank = int(np.sum(s > tol))
    if rank == 0:
        return PcaReport(np.zeros((1, x.shape[1])), np.ones(1), np.zeros(1), mean, 0)
    var = s[:rank] ** 2
    ratio = var / var.sum()
    k = rank if n_components is None else min(n_components, rank)
    # sign convention: largest-magnitude entry of each component is positive
    comps = vt[:k].copy()
    flip = np.sign(comps[np.arange(k), np.abs(comps).argmax(axis=1)])
    comps *= flip[:, None]
    return PcaReport(comps, ratio[:k], s[:k], mean, rank)


# ------------------------------------------------------------------ images

def to_gray(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.full(img.shape, 128, np.uint8)
    return np.round((img - lo) / (hi - lo) * 255).astype(np.uint8)


def tile(images: np.ndarray, ncols=None, gap=1) -> np.ndarray:
    """Montage of ``(n, h, w)`` tiles, each normalized to its own range."""
    n, h, w = images.shape
    ncols = ncols or int(np.ceil(np.sqrt(n)))
    nrows = -(-n // ncols)
    out = np.full((nrows * (h + gap) - gap, ncols * (w + gap) - gap), 255, np.uint8)
    for i, im in enumerate(images):
        r, c = divmod(i, ncols)
        out[r * (h + gap):r * (h + gap) + h, c * (w + gap):c * (w + gap) + w] = to_gray(im)
    return out


def write_pgm(path, gray: np.ndarray):
    gray = np.asarray(gray, np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (gray.shape[1], gray.shape[0]))
        f.write(gray.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(maxsplit=3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    # exactly one whitespace byte separates maxval from the pixels
    start = len(raw) - len(parts[3]) + len(parts[3].split(maxsplit=1)[0]) + 1
    return np.frombuffer(raw[start:start + w * h], np.uint8).reshape(h, w)


# ---------------------------------------------------------------- pipeline

@dataclass
class LayerAnalysis:
    index: int
    name: str
    kind: str
    size: tuple
    kernels: np.ndarray
    bank: np.ndarray
    mass: KernelMassCurve
    effective_sizes: np.ndarray
    pca: dict = field(default_factory=dict)
    residue: float = 0.0

    @property
    def mean_effective_size(self):
        return float(self.effective_sizes.mean())

    @property
    def fraction_below_side(self):
        return float(np.mean(self.effective_sizes < min(self.size)))


@dataclass
class KernelAnalysisReport:
    layers: list
    threshold: float
    files: list = field(default_factory=list)


KIND_NAMES = {NiffDepthwise: "niff_depthwise", NiffFull: "niff_full", NiffDecomposed: "niff_decomposed"}


class NoNiffLayers(ValueError):
    pass


def analyze_model(model, threshold=0.95, absolute=True) -> KernelAnalysisReport:
    layers = []
    niff = model.niff_layers()
    if not niff:
        raise NoNiffLayers("model has no NIFF layers to analyze (all convolutions are spatial)")
    for i, (name, layer, (h, w)) in enumerate(niff):
        bank = layer_bank(layer, h, w).astype(np.complex128)
        kernels, residue = kernels_from_bank(bank, return_residue=True)
        mass = KernelMassCurve.from_kernels(kernels, absolute)
        flat = lambda a: a.reshape(len(a), -1)
        layers.append(LayerAnalysis(
            index=i, name=name, kind=KIND_NAMES[type(layer)], size=(h, w), kernels=kernels, bank=bank,
            mass=mass, effective_sizes=mass.effective_sizes(threshold),
            pca={"spatial": pca(flat(kernels)), "freq_re": pca(flat(bank.real)), "freq_im": pca(flat(bank.imag))},
            residue=float(residue.max()),
        ))
    return KernelAnalysisReport(layers, threshold)


def write_report(report: KernelAnalysisReport, out_dir, figures=True, max_components=16):
    os.makedirs(out_dir, exist_ok=True)
    files = []

    def path(name):
        files.append(name)
        return os.path.join(out_dir, name)

    with open(path("mass_ratio.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer", "channel", "window", "ratio"])
        for la in report.layers:
            for ch, curve in enumerate(la.mass.per_kernel):
                for s, r in enumerate(curve, start=1):
                    w.writerow([la.index, ch, s, repr(float(r))])
    with open(path("pca.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer", "domain", "component", "explained_variance"])
        for la in report.layers:
            for domain, rep in la.pca.items():
                for c, r in enumerate(rep.explained_variance_ratio):
                    w.writerow([la.index, domain, c, repr(float(r))])
    with open(path("effective_size.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer", "name", "kind", "height", "width", "n_kernels", "threshold",
                    "mean_effective_size", "fraction_below_side", "max_imag_residue"])
        for la in report.layers:
            w.writerow([la.index, la.name, la.kind, la.size[0], la.size[1], len(la.kernels), report.threshold,
                        repr(la.mean_effective_size), repr(la.fraction_below_side), repr(la.residue)])
    for la in report.layers:
        h, wd = la.size
        write_pgm(path(f"layer{la.index}_spatial.pgm"), tile(la.kernels))
        write_pgm(path(f"layer{la.index}_freq_re.pgm"), tile(la.bank.real))
        write_pgm(path(f"layer{la.index}_freq_im.pgm"), tile(la.bank.imag))
        for domain, rep in la.pca.items():
            imgs = rep.component_images(h, wd)[:max_components]
            write_pgm(path(f"layer{la.index}_pca_{domain}.pgm"), tile(imgs))
    if figures:
        from . import plots

        files += plots.render_report(report, out_dir, max_components)
    report.files = files
    return files


def analyze_checkpoint(ckpt_path, out_dir, threshold=0.95, figures=True, absolute=True):
    from .train import load_trained

    model, _ = load_trained(ckpt_path)
    report = analyze_model(model, threshold, absolute)
    write_report(report, out_dir, figures)
    for la in report.layers:
        log.info("layer %d %s %dx%d: mean effective size %.2f (%.0f%% below side)", la.index, la.name,
                 la.size[0], la.size[1], la.mean_effective_size, 100 * la.fraction_below_side)
    return report


def export_kernels(ckpt_path, layer, out_dir):
    """Write one NIFF layer's spatial kernels and spectra (``.npy`` + ``.pgm``)."""
    from .train import load_trained

    model, _ = load_trained(ckpt_path)
    niff = model.niff_layers()
    if not niff:
        raise NoNiffLayers("checkpoint has no NIFF layers")
    names = [n for n, _, _ in niff]
    if isinstance(layer, str) and not layer.isdigit():
        if layer not in names:
            raise KeyError(f"no NIFF layer named {layer!r}; available: {names}")
        idx = names.index(layer)
    else:
        idx = int(layer)
        if not 0 <= idx < len(niff):
            raise KeyError(f"NIFF layer index {idx} out of range 0..{len(niff) - 1}")
    _, lay, (h, w) = niff[idx]
    bank = layer_bank(lay, h, w).astype(np.complex128)
    kernels = kernels_from_bank(bank)
    os.makedirs(out_dir, exist_ok=True)
    out = {
        f"layer{idx}_spatial.npy": kernels,
        f"layer{idx}_freq.npy": bank,
    }
    for name, arr in out.items():
        np.save(os.path.join(out_dir, name), arr)
    write_pgm(os.path.join(out_dir, f"layer{idx}_spatial.pgm"), tile(kernels))
    return sorted(out) + [f"layer{idx}_spatial.pgm"]
