"""Signal, transform-matrix, and measurement generation for phase retrieval.

Everything here is deterministic given a seed.  Datasets are described by a
small JSON manifest (seed + scenario ranges) and regenerated on demand; each
sample owns an independent RNG stream derived from (manifest seed, index), so
generation is order-independent and parallel-safe.

Conventions: the noise is standard circularly-symmetric complex Gaussian with
unit variance per component, and the SNR is absorbed into the transform matrix
scale, tr(A A^H) / M = SNR.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

MATRIX_CLASSES = ("gaussian", "geometric", "binary")


class ManifestError(ValueError):
    """Raised when a dataset manifest is inconsistent or malformed."""


def complex_normal(rng: np.random.Generator, *shape: int) -> np.ndarray:
    """Standard circularly-symmetric complex Gaussian draws (unit variance)."""
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return (re + 1j * im) * np.sqrt(0.5)


@dataclass(frozen=True)
class SignalPrior:
    """Bernoulli-Gaussian signal prior with unit per-component second moment.

    Each component is zero with probability 1 - rho and otherwise drawn from a
    circular complex Gaussian with variance 1/rho, so E|x_i|^2 = 1 for any rho.
    """

    rho: float

    def __post_init__(self) -> None:
        if not (0.0 < self.rho <= 1.0):
            raise ValueError(f"sparsity rate must be in (0, 1], got {self.rho}")

    @property
    def slab_variance(self) -> float:
        return 1.0 / self.rho


def sample_signal(prior: SignalPrior, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a length-n signal from the Bernoulli-Gaussian prior."""
    if n < 1:
        raise ValueError(f"signal length must be >= 1, got {n}")
    support = rng.random(n) < prior.rho
    values = complex_normal(rng, n) * np.sqrt(prior.slab_variance)
    return np.where(support, values, 0.0 + 0.0j)


def sample_haar_unitary(k: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a k x k unitary matrix uniformly from the Haar measure.

    Uses the QR decomposition of an i.i.d. complex Gaussian matrix with the
    phases of R's diagonal folded back into Q, which makes the factorization
    unique and the resulting Q exactly Haar-distributed.
    """
    if k < 1:
        raise ValueError(f"dimension must be >= 1, got {k}")
    q, r = np.linalg.qr(complex_normal(rng, k, k))
    d = np.diagonal(r)
    return q * (d / np.abs(d))


def gaussian_class_singulars(m: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Singular values of an m x n i.i.d. standard complex Gaussian matrix."""
    if not (m >= n >= 1):
        raise ValueError(f"need m >= n >= 1, got ({m}, {n})")
    s = np.linalg.svd(complex_normal(rng, m, n), compute_uv=False)
    return np.sort(s)[::-1]


def geometric_singulars(n: int, gamma: float) -> np.ndarray:
    """Geometric spectrum sigma_{k+1}/sigma_k = gamma, unnormalized."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if not (0.0 < gamma <= 1.0):
        raise ValueError(f"spectrum decay must be in (0, 1], got {gamma}")
    return gamma ** np.arange(n, dtype=float)


def scale_to_snr(singulars: np.ndarray, m: int, snr_linear: float) -> np.ndarray:
    """Rescale a spectrum so that tr(A A^H) / M equals the target SNR."""
    if snr_linear <= 0:
        raise ValueError(f"SNR must be positive, got {snr_linear}")
    energy = float(np.sum(np.square(singulars)))
    if energy == 0.0:
        raise ValueError("cannot scale an all-zero spectrum")
    return singulars * np.sqrt(m * snr_linear / energy)


@dataclass
class TransformMatrix:
    """Linear operator in SVD form, A = U diag(s) V^H.

    left_unitary is M x M for generated matrices; an M x K isometry
    (orthonormal columns, K >= len(singulars)) is also accepted so that
    large image-scale instances can carry an economy factorization.
    Singular values are non-negative and sorted in descending order.
    """

    left_unitary: np.ndarray
    right_unitary: np.ndarray
    singulars: np.ndarray
    dense: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if np.any(self.singulars < 0):
            raise ValueError("singular values must be non-negative")
        if np.any(np.diff(self.singulars) > 0):
            raise ValueError("singular values must be sorted descending")

    @property
    def m(self) -> int:
        return self.left_unitary.shape[0]

    @property
    def n(self) -> int:
        return self.right_unitary.shape[0]

    @property
    def snr(self) -> float:
        """tr(A A^H) / M under the unit-noise convention."""
        return float(np.sum(np.square(self.singulars))) / self.m

    @property
    def sigma_tilde(self) -> np.ndarray:
        """Spectrum normalized to unit L2 norm (the matrix 'shape')."""
        norm = float(np.linalg.norm(self.singulars))
        if norm == 0.0:
            return np.zeros_like(self.singulars)
        return self.singulars / norm

    def _factors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        # Contiguous column block / adjoints cached for the hot path.
        cached = getattr(self, "_cache", None)
        if cached is None:
            k = len(self.singulars)
            un = np.ascontiguousarray(self.left_unitary[:, :k])
            cached = (un, np.ascontiguousarray(un.conj().T),
                      np.ascontiguousarray(self.right_unitary),
                      np.ascontiguousarray(self.right_unitary.conj().T))
            object.__setattr__(self, "_cache", cached)
        return cached

    def apply(self, x: np.ndarray) -> np.ndarray:
        """A @ x via the SVD factors."""
        un, _, _, vh = self._factors()
        return un @ (self.singulars * (vh @ x))

    def adjoint(self, z: np.ndarray) -> np.ndarray:
        """A^H @ z via the SVD factors."""
        _, unh, v, _ = self._factors()
        return v @ (self.singulars * (unh @ z))

    def to_dense(self) -> np.ndarray:
        if self.dense is not None:
            return self.dense
        un, _, _, vh = self._factors()
        return (un * self.singulars) @ vh


def gaussian_matrix(m: int, n: int, snr_linear: float,
                    rng: np.random.Generator) -> TransformMatrix:
    """Gaussian-class transform: Haar factors, i.i.d.-Gaussian spectrum."""
    u = sample_haar_unitary(m, rng)
    v = sample_haar_unitary(n, rng)
    s = scale_to_snr(gaussian_class_singulars(m, n, rng), m, snr_linear)
    return TransformMatrix(u, v, s)


def geometric_matrix(m: int, n: int, snr_linear: float, gamma: float,
                     rng: np.random.Generator) -> TransformMatrix:
    """Geometric-class transform: Haar factors, geometric spectrum."""
    u = sample_haar_unitary(m, rng)
    v = sample_haar_unitary(n, rng)
    s = scale_to_snr(geometric_singulars(n, gamma), m, snr_linear)
    return TransformMatrix(u, v, s)


def binary_matrix(m: int, n: int, snr_linear: float,
                  rng: np.random.Generator) -> TransformMatrix:
    """Transform with i.i.d. entries in {0, c}, scaled to the target SNR.

    Entries are one with probability 1/2 and the single global scale c is
    chosen so tr(A A^H) / M = snr_linear for the realized draw.  The SVD is
    computed numerically and the dense matrix retained.
    """
    mask = rng.random((m, n)) < 0.5
    while not mask.any():
        mask = rng.random((m, n)) < 0.5
    c = np.sqrt(m * snr_linear / mask.sum())
    dense = np.where(mask, c, 0.0).astype(complex)
    u, s, vh = np.linalg.svd(dense, full_matrices=True)
    return TransformMatrix(u, vh.conj().T, s, dense=dense)


def dense_gaussian_matrix(m: int, n: int, snr_linear: float,
                          rng: np.random.Generator) -> TransformMatrix:
    """Gaussian-class transform built from a dense i.i.d. draw (economy SVD).

    Distributionally equivalent to gaussian_matrix but avoids forming the
    M x M unitary; used for large image-reconstruction instances.
    """
    g = complex_normal(rng, m, n)
    u, s, vh = np.linalg.svd(g, full_matrices=False)
    s = scale_to_snr(s, m, snr_linear)
    return TransformMatrix(u, vh.conj().T, s)


def forward_measure(matrix: TransformMatrix, x: np.ndarray,
                    rng: np.random.Generator, noiseless: bool = False) -> np.ndarray:
    """Phase-less measurement y = |A x + n| with unit-variance complex noise."""
    if x.shape != (matrix.n,):
        raise ValueError(f"signal shape {x.shape} does not match N={matrix.n}")
    z = matrix.apply(x)
    if not noiseless:
        z = z + complex_normal(rng, matrix.m)
    return np.abs(z)


@dataclass
class Sample:
    """One phase-retrieval instance: signal, measurements, and scenario."""

    x: np.ndarray
    y: np.ndarray
    matrix: TransformMatrix
    snr: float
    rho: float


@dataclass(frozen=True)
class DatasetManifest:
    """Reproducible dataset description (seed + scenario ranges).

    matrix_class may list several classes; samples cycle through them with
    equal counts.  Geometric-class samples cycle through the listed gammas,
    also with equal counts.  SNR is drawn uniformly in dB over snr_db_range
    and the sparsity rate uniformly over rho_range.
    """

    seed: int
    count: int
    m: int
    n: int
    matrix_class: tuple[str, ...] = ("gaussian",)
    gammas: tuple[float, ...] = (1.0, 0.97)
    snr_db_range: tuple[float, float] = (15.0, 25.0)
    rho_range: tuple[float, float] = (0.3, 0.8)

    def __post_init__(self) -> None:
        if self.count < 0:
            raise ManifestError(f"count must be >= 0, got {self.count}")
        if not (self.m >= self.n >= 1):
            raise ManifestError(f"need M >= N >= 1, got ({self.m}, {self.n})")
        if not self.matrix_class:
            raise ManifestError("matrix_class must name at least one class")
        for cls in self.matrix_class:
            if cls not in MATRIX_CLASSES:
                raise ManifestError(f"unknown matrix class {cls!r}")
        if "geometric" in self.matrix_class:
            if not self.gammas:
                raise ManifestError("geometric class requires at least one gamma")
            for g in self.gammas:
                if not (0.0 < g <= 1.0):
                    raise ManifestError(f"gamma must be in (0, 1], got {g}")
        for name, (lo, hi) in (("snr_db_range", self.snr_db_range),
                               ("rho_range", self.rho_range)):
            if lo > hi:
                raise ManifestError(f"{name} has lo > hi: [{lo}, {hi}]")
        if not (0.0 < self.rho_range[0] and self.rho_range[1] <= 1.0):
            raise ManifestError(f"rho_range must lie in (0, 1], got {self.rho_range}")

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "count": self.count,
            "m": self.m,
            "n": self.n,
            "matrix_class": list(self.matrix_class),
            "gammas": list(self.gammas),
            "snr_db_range": list(self.snr_db_range),
            "rho_range": list(self.rho_range),
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "DatasetManifest":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ManifestError("manifest must be a JSON object")
        required = {"seed", "count", "m", "n"}
        missing = required - raw.keys()
        if missing:
            raise ManifestError(f"manifest missing fields: {sorted(missing)}")
        classes = raw.get("matrix_class", "gaussian")
        if isinstance(classes, str):
            classes = (classes,)
        else:
            classes = tuple(classes)
        try:
            return DatasetManifest(
                seed=int(raw["seed"]),
                count=int(raw["count"]),
                m=int(raw["m"]),
                n=int(raw["n"]),
                matrix_class=classes,
                gammas=tuple(float(g) for g in raw.get("gammas", (1.0, 0.97))),
                snr_db_range=tuple(float(v) for v in raw.get("snr_db_range", (15.0, 25.0))),
                rho_range=tuple(float(v) for v in raw.get("rho_range", (0.3, 0.8))),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ManifestError):
                raise
            raise ManifestError(f"manifest field has wrong type: {exc}") from exc

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def load_manifest(path: str) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        return DatasetManifest.from_json(fh.read())


def scenario_at(manifest: DatasetManifest, index: int) -> tuple[str, Optional[float]]:
    """Matrix class (and gamma, for geometric) assigned to a sample index."""
    classes = manifest.matrix_class
    cls = classes[index % len(classes)]
    gamma = None
    if cls == "geometric":
        gamma = manifest.gammas[(index // len(classes)) % len(manifest.gammas)]
    return cls, gamma


def sample_at(manifest: DatasetManifest, index: int) -> Sample:
    """Generate the index-th sample of a manifest (order-independent).

    An all-zero signal draw (possible for sparse priors at small N) would
    make the instance degenerate, so the signal is redrawn from the same
    stream until at least one component is active.
    """
    if not (0 <= index < manifest.count):
        raise IndexError(f"sample index {index} out of range [0, {manifest.count})")
    rng = np.random.default_rng([manifest.seed, index])
    snr_db = rng.uniform(*manifest.snr_db_range)
    snr = 10.0 ** (snr_db / 10.0)
    rho = rng.uniform(*manifest.rho_range)
    prior = SignalPrior(rho)
    x = sample_signal(prior, manifest.n, rng)
    while not np.any(x):
        x = sample_signal(prior, manifest.n, rng)
    cls, gamma = scenario_at(manifest, index)
    if cls == "gaussian":
        matrix = gaussian_matrix(manifest.m, manifest.n, snr, rng)
    elif cls == "geometric":
        matrix = geometric_matrix(manifest.m, manifest.n, snr, gamma, rng)
    else:
        matrix = binary_matrix(manifest.m, manifest.n, snr, rng)
    y = forward_measure(matrix, x, rng)
    return Sample(x=x, y=y, matrix=matrix, snr=snr, rho=rho)


def generate_dataset(manifest: DatasetManifest) -> Iterator[Sample]:
    """Stream every sample of a manifest in index order."""
    for index in range(manifest.count):
        yield sample_at(manifest, index)


def read_pgm(path: str) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM image as floats in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError("only binary PGM (P5) images are supported")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        try:
            fields.append(int(data[start:pos]))
        except ValueError as exc:
            raise ValueError("malformed PGM header") from exc
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"only 8-bit PGM supported (maxval 255), got {maxval}")
    pos += 1
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    if pixels.size != width * height:
        raise ValueError("truncated PGM pixel data")
    return pixels.reshape(height, width).astype(float) / 255.0


def write_pgm(path: str, image: np.ndarray) -> None:
    """Write floats in [0, 1] as a binary (P5) 8-bit PGM image."""
    if image.ndim != 2:
        raise ValueError("image must be 2-D")
    clipped = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header + clipped.tobytes())
