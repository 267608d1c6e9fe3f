"""Uniform periodic meshes and the discrete calculus used everywhere else.

The computational domain is the periodic box ``[-pi, pi)^dim`` with
``dim`` in {1, 2}.  Each axis carries ``n`` equispaced nodes
``x_j = -pi + j * h`` with ``h = 2*pi/n``; the ``+pi`` node is the same
point as ``-pi`` and is therefore not stored.  All spatial operators in
this module act on that node set:

* first derivatives are centered differences,
* integrals are the periodic rectangle rule (== trapezoid on this mesh),
* antiderivatives are cumulative trapezoids anchored at ``x = -pi``,
* circular convolution and the Poisson solve go through the FFT.

Fields live in :class:`GridFunction`, a frozen value type whose array is
made read-only on construction so instances can be shared freely between
threads and processes.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PeriodicMesh",
    "GridFunction",
    "wrap_displacement",
    "derivative",
    "laplacian",
    "integral",
    "l2_norm",
    "sup_norm",
    "antiderivative",
    "circular_convolve",
    "interpolate",
    "spectral_solve_poisson",
]

TWO_PI = 2.0 * np.pi


def wrap_displacement(x, y=0.0):
    """Displacement from ``y`` to ``x`` wrapped into ``[-pi, pi)``.

    Implements ``(x - y + pi) mod 2*pi - pi`` elementwise; in 2D the wrap
    acts per component.  ``wrap_displacement(x)`` wraps a bare coordinate
    or displacement.

    Parameters
    ----------
    x, y : array_like
        Points (or ``y`` may be omitted to wrap a raw difference).

    Returns
    -------
    ndarray or float
        Wrapped displacement(s), each component in ``[-pi, pi)``.
    """
    return np.mod(np.asarray(x, dtype=float) - np.asarray(y, dtype=float) + np.pi, TWO_PI) - np.pi


@dataclass(frozen=True)
class PeriodicMesh:
    """Uniform node set on ``[-pi, pi)^dim``.

    Parameters
    ----------
    dim : int
        Spatial dimension, 1 or 2.
    n : int
        Nodes per axis, even and at least 8.  Even so the node set contains
        x = 0; kernel samples can then be reindexed exactly from axis order
        to displacement order inside the convolution.
    """

    dim: int
    n: int

    def __post_init__(self) -> None:
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.n < 8:
            raise ValueError(f"need at least 8 nodes per axis, got n={self.n}")
        if self.n % 2 != 0:
            raise ValueError(f"n must be even, got n={self.n}")

    @property
    def spacing(self) -> float:
        """Node spacing ``h = 2*pi/n``."""
        return TWO_PI / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def cell_volume(self) -> float:
        """Quadrature weight per node, ``h**dim``."""
        return self.spacing**self.dim

    @property
    def axis(self) -> np.ndarray:
        """1D node coordinates ``-pi + j*h`` (shared by both axes in 2D)."""
        return -np.pi + self.spacing * np.arange(self.n)

    def coords(self) -> tuple[np.ndarray, ...]:
        """Node coordinate arrays, one per axis, each of shape ``self.shape``."""
        return tuple(np.meshgrid(*([self.axis] * self.dim), indexing="ij"))

    def wavenumbers(self, axis: int) -> np.ndarray:
        """Integer Fourier wavenumbers along ``axis``, in FFT order."""
        k = np.fft.fftfreq(self.n, d=1.0 / self.n)
        if self.dim == 1:
            return k
        shape = [1, 1]
        shape[axis] = self.n
        return k.reshape(shape)


@dataclass(frozen=True)
class GridFunction:
    """Scalar or vector field sampled on a :class:`PeriodicMesh`.

    ``values`` has shape ``mesh.shape`` for a scalar field or
    ``mesh.shape + (c,)`` for a ``c``-component field.  The array is
    copied and frozen on construction.
    """

    mesh: PeriodicMesh
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float)
        shp = self.mesh.shape
        if v.shape != shp and not (v.ndim == len(shp) + 1 and v.shape[: len(shp)] == shp):
            raise ValueError(f"values shape {v.shape} incompatible with mesh shape {shp}")
        if not np.all(np.isfinite(v)):
            raise ValueError("values must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def components(self) -> int:
        extra = self.values.ndim - self.mesh.dim
        return 1 if extra == 0 else self.values.shape[-1]

    @property
    def is_vector(self) -> bool:
        return self.values.ndim > self.mesh.dim

    def component(self, c: int) -> "GridFunction":
        """Extract component ``c`` as a scalar field."""
        if not self.is_vector:
            if c == 0:
                return self
            raise IndexError("scalar field has only component 0")
        return GridFunction(self.mesh, self.values[..., c])

    def __add__(self, other: "GridFunction") -> "GridFunction":
        _same_mesh(self, other)
        return GridFunction(self.mesh, self.values + other.values)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        _same_mesh(self, other)
        return GridFunction(self.mesh, self.values - other.values)

    def __mul__(self, factor: float) -> "GridFunction":
        return GridFunction(self.mesh, self.values * float(factor))

    __rmul__ = __mul__

    # -- serialization ------------------------------------------------------

    def to_csv(self, path, header_lines: tuple[str, ...] = ()) -> None:
        """Write the field as CSV.

        Format: a ``# dim=<d> n=<n> components=<c>`` header (plus any
        extra comment lines), then one row per node in row-major order,
        columns = node coordinates followed by component values, all at
        17 significant digits.
        """
        buf = io.StringIO()
        buf.write(f"# dim={self.mesh.dim} n={self.mesh.n} components={self.components}\n")
        for line in header_lines:
            buf.write(f"# {line}\n")
        coords = [c.ravel() for c in self.mesh.coords()]
        vals = self.values.reshape(-1, self.components)
        for i in range(vals.shape[0]):
            row = [f"{c[i]:.17g}" for c in coords] + [f"{v:.17g}" for v in vals[i]]
            buf.write(",".join(row) + "\n")
        with open(path, "w") as fh:
            fh.write(buf.getvalue())

    @staticmethod
    def from_csv(path) -> "GridFunction":
        """Inverse of :meth:`to_csv`; extra comment lines are ignored."""
        dim = n = comp = None
        rows = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    body = line.lstrip("#").strip()
                    if body.startswith("dim="):
                        parts = dict(p.split("=", 1) for p in body.split())
                        dim, n, comp = int(parts["dim"]), int(parts["n"]), int(parts["components"])
                    continue
                rows.append([float(tok) for tok in line.split(",")])
        if dim is None:
            raise ValueError(f"{path}: missing '# dim=... n=... components=...' header")
        mesh = PeriodicMesh(dim, n)
        data = np.asarray(rows, dtype=float)
        if data.shape != (n**dim, dim + comp):
            raise ValueError(f"{path}: expected {n**dim} rows of {dim + comp} columns, got {data.shape}")
        vals = data[:, dim:]
        shape = mesh.shape if comp == 1 else mesh.shape + (comp,)
        return GridFunction(mesh, vals.reshape(shape))


def _same_mesh(a: GridFunction, b: GridFunction) -> None:
    if a.mesh != b.mesh:
        raise ValueError("fields live on different meshes")


# -- differential / integral operators -------------------------------------


def derivative(f: GridFunction, axis: int = 0) -> GridFunction:
    """Centered first difference along ``axis``: ``(f[j+1] - f[j-1]) / (2h)``."""
    v = f.values
    d = (np.roll(v, -1, axis=axis) - np.roll(v, 1, axis=axis)) / (2.0 * f.mesh.spacing)
    return GridFunction(f.mesh, d)


def laplacian(f: GridFunction) -> GridFunction:
    """Compact second difference, summed over axes.

    Per axis ``(f[j+1] - 2 f[j] + f[j-1]) / h**2``; equals the divergence
    of one-sided face gradients, so its mesh integral telescopes to zero.
    """
    v = f.values
    out = np.zeros_like(v)
    for ax in range(f.mesh.dim):
        out += np.roll(v, -1, axis=ax) - 2.0 * v + np.roll(v, 1, axis=ax)
    return GridFunction(f.mesh, out / f.mesh.spacing**2)


def integral(f: GridFunction):
    """Mesh integral (periodic rectangle rule). Scalar fields return a float,
    vector fields a per-component array."""
    axes = tuple(range(f.mesh.dim))
    s = f.values.sum(axis=axes) * f.mesh.cell_volume
    return float(s) if np.ndim(s) == 0 else s


def l2_norm(f: GridFunction) -> float:
    """Discrete L2 norm ``sqrt(sum |f|^2 * h^dim)`` (vector fields use the
    Euclidean norm of the components)."""
    return float(np.sqrt(np.sum(f.values**2) * f.mesh.cell_volume))


def sup_norm(f: GridFunction) -> float:
    return float(np.max(np.abs(f.values)))


def antiderivative(f: GridFunction) -> GridFunction:
    """Cumulative trapezoid of a 1D scalar field, anchored to 0 at ``x = -pi``.

    If the field has nonzero mesh integral the result is not periodic
    (the seam mismatch equals that integral); callers that rely on
    periodicity must pass a zero-mean field.
    """
    if f.mesh.dim != 1 or f.is_vector:
        raise ValueError("antiderivative is defined for 1D scalar fields")
    v = f.values
    h = f.mesh.spacing
    steps = 0.5 * h * (v[:-1] + v[1:])
    out = np.empty_like(v)
    out[0] = 0.0
    np.cumsum(steps, out=out[1:])
    return GridFunction(f.mesh, out)


def circular_convolve(kernel: GridFunction, density: GridFunction) -> GridFunction:
    """Periodic convolution ``(kernel * density)(x) = sum_y kernel(wrap(x-y)) density(y) h^dim``.

    Both inputs are sampled on the mesh axis (first node at -pi), so the
    kernel is reindexed to displacement order before the spectral product;
    with even n that reindexing is exact.  Agrees with the direct wrapped
    sum to rounding.  ``kernel`` may be vector-valued (each component
    convolved with the scalar ``density``).
    """
    _same_mesh(kernel, density)
    if density.is_vector:
        raise ValueError("density must be scalar")
    mesh = kernel.mesh
    axes = tuple(range(mesh.dim))
    d_hat = np.fft.rfftn(density.values, axes=axes)
    kv = np.fft.ifftshift(kernel.values, axes=axes)
    if kernel.is_vector:
        k_hat = np.fft.rfftn(kv, axes=axes)
        prod = k_hat * d_hat[..., None]
    else:
        k_hat = np.fft.rfftn(kv, axes=axes)
        prod = k_hat * d_hat
    out = np.fft.irfftn(prod, s=mesh.shape, axes=axes)
    return GridFunction(mesh, out * mesh.cell_volume)


def interpolate(f: GridFunction, points) -> np.ndarray:
    """Periodic linear (1D) / bilinear (2D) interpolation of ``f`` at ``points``.

    Parameters
    ----------
    f : GridFunction
    points : array_like
        Shape ``(m,)`` or scalar in 1D, ``(m, 2)`` in 2D.  Coordinates are
        wrapped into the domain first.

    Returns
    -------
    ndarray
        Shape ``(m,)`` for scalar fields, ``(m, c)`` for vector fields.
    """
    mesh = f.mesh
    h = mesh.spacing
    pts = np.atleast_1d(np.asarray(points, dtype=float))
    if mesh.dim == 1:
        pts = pts.reshape(-1, 1)
    elif pts.ndim == 1:
        pts = pts.reshape(1, -1)
    if pts.shape[1] != mesh.dim:
        raise ValueError(f"points must have {mesh.dim} coordinates per row")
    s = (wrap_displacement(pts) + np.pi) / h  # fractional node index in [0, n)
    i0 = np.floor(s).astype(int) % mesh.n
    frac = s - np.floor(s)
    i1 = (i0 + 1) % mesh.n
    v = f.values if f.is_vector else f.values[..., None]
    if mesh.dim == 1:
        w0, w1 = (1.0 - frac[:, 0])[:, None], frac[:, 0][:, None]
        out = w0 * v[i0[:, 0]] + w1 * v[i1[:, 0]]
    else:
        fx, fy = frac[:, 0][:, None], frac[:, 1][:, None]
        out = (
            (1 - fx) * (1 - fy) * v[i0[:, 0], i0[:, 1]]
            + fx * (1 - fy) * v[i1[:, 0], i0[:, 1]]
            + (1 - fx) * fy * v[i0[:, 0], i1[:, 1]]
            + fx * fy * v[i1[:, 0], i1[:, 1]]
        )
    return out if f.is_vector else out[:, 0]


def spectral_solve_poisson(rhs: GridFunction) -> GridFunction:
    """Solve ``laplacian(phi) = rhs`` spectrally, returning the mean-zero solution.

    The Laplacian here is the spectral one (symbol ``-|k|^2`` on integer
    wavenumbers); applying it to the result reproduces ``rhs`` to rounding.
    Solvability requires a mean-free right-hand side:
    ``|integral(rhs)| <= 1e-8 * l2_norm(rhs)`` is enforced.
    """
    if rhs.is_vector:
        raise ValueError("rhs must be scalar")
    mesh = rhs.mesh
    imbalance = abs(integral(rhs))
    if imbalance > 1e-8 * max(l2_norm(rhs), 1e-300):
        raise ValueError(
            f"Poisson right-hand side must have zero mean: |integral| = {imbalance:.3e}"
        )
    axes = tuple(range(mesh.dim))
    r_hat = np.fft.fftn(rhs.values, axes=axes)
    k2 = sum(mesh.wavenumbers(ax) ** 2 for ax in range(mesh.dim))
    k2 = np.broadcast_to(np.asarray(k2, dtype=float), mesh.shape).copy()
    k2[(0,) * mesh.dim] = 1.0  # zero mode handled separately
    phi_hat = -r_hat / k2
    phi_hat[(0,) * mesh.dim] = 0.0
    phi = np.fft.ifftn(phi_hat, axes=axes).real
    return GridFunction(mesh, phi)
