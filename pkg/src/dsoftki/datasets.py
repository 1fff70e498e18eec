"""Synthetic derivative-labeled benchmarks, normalization and file I/O.

Each synthetic function returns its closed-form value and analytic
gradient over its conventional domain; the gradients are verified against
finite differences in the tests. Data files are plain CSV with a
``# d=<d> n=<n>`` header line and one ``x..., y, dy...`` row per point.
"""

import warnings

import numpy as np


class UnknownFunction(Exception):
    """No synthetic function registered under that name."""


class DomainViolation(Exception):
    """Input lies outside the function's standard domain."""


class Malformed(Exception):
    """Dataset file violates the format; carries the offending line number."""

    def __init__(self, line, message):
        self.line = int(line)
        super().__init__(f"line {line}: {message}")


class DegenerateDimension(UserWarning):
    """An input dimension is constant on the training split."""


class LabeledDerivDataset:
    """Inputs with value and gradient labels; shapes (n, d), (n,), (n, d)."""

    def __init__(self, x, y, dy):
        self.x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        self.y = np.asarray(y, dtype=np.float64).reshape(-1)
        self.dy = np.asarray(dy, dtype=np.float64).reshape(self.x.shape)
        if self.y.shape[0] != self.x.shape[0]:
            raise ValueError("label count does not match input count")

    def __len__(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]

    def labels(self, value_only=False):
        """Flat interleaved [y_i, dy_i] label vector (or just y)."""
        if value_only:
            return self.y.copy()
        return np.concatenate([self.y[:, None], self.dy], axis=1).ravel()


def _branin(x):
    a, b, c, r, s, t = 1.0, 5.1 / (4 * np.pi**2), 5.0 / np.pi, 6.0, 10.0, 1.0 / (8 * np.pi)
    x1, x2 = x[:, 0], x[:, 1]
    inner = x2 - b * x1**2 + c * x1 - r
    y = a * inner**2 + s * (1 - t) * np.cos(x1) + s
    dy = np.stack(
        [2 * a * inner * (-2 * b * x1 + c) - s * (1 - t) * np.sin(x1),
         2 * a * inner],
        axis=1,
    )
    return y, dy


def _six_hump_camel(x):
    x1, x2 = x[:, 0], x[:, 1]
    y = (4 - 2.1 * x1**2 + x1**4 / 3) * x1**2 + x1 * x2 + (-4 + 4 * x2**2) * x2**2
    dy = np.stack(
        [8 * x1 - 8.4 * x1**3 + 2 * x1**5 + x2,
         x1 - 8 * x2 + 16 * x2**3],
        axis=1,
    )
    return y, dy


def _styblinski_tang(x):
    y = 0.5 * np.sum(x**4 - 16 * x**2 + 5 * x, axis=1)
    dy = 0.5 * (4 * x**3 - 32 * x + 5)
    return y, dy


_HARTMANN_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
_HARTMANN_A = np.array(
    [
        [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
        [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
        [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
        [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
    ]
)
_HARTMANN_P = 1e-4 * np.array(
    [
        [1312.0, 1696.0, 5569.0, 124.0, 8283.0, 5886.0],
        [2329.0, 4135.0, 8307.0, 3736.0, 1004.0, 9991.0],
        [2348.0, 1451.0, 3522.0, 2883.0, 3047.0, 6650.0],
        [4047.0, 8828.0, 8732.0, 5743.0, 1091.0, 381.0],
    ]
)


def _hartmann6(x):
    diff = x[:, None, :] - _HARTMANN_P[None, :, :]  # (n, 4, 6)
    expo = np.exp(-np.sum(_HARTMANN_A[None] * diff**2, axis=2))  # (n, 4)
    y = -expo @ _HARTMANN_ALPHA
    dy = np.einsum("ni,i,ij,nij->nj", expo, _HARTMANN_ALPHA, _HARTMANN_A, 2 * diff)
    return y, dy


# nonzero linear coefficients of the 20-d screening function, 0-indexed
_WELCH_LINEAR = {
    1: 0.05, 2: 0.08, 4: 1.0, 5: -0.03, 6: 0.03,
    8: -0.09, 9: -0.01, 10: -0.07, 13: -0.04, 14: 0.06, 16: -0.01, 17: -0.03,
}


def _welch20(x):
    x1, x4, x12, x13, x19, x20 = x[:, 0], x[:, 3], x[:, 11], x[:, 12], x[:, 18], x[:, 19]
    y = (
        5.0 * x12 / (1.0 + x1)
        + 5.0 * (x4 - x20) ** 2
        + 40.0 * x19**3
        - 5.0 * x19
        + 0.25 * x13**2
    )
    dy = np.zeros_like(x)
    for idx, coef in _WELCH_LINEAR.items():
        y = y + coef * x[:, idx]
        dy[:, idx] += coef
    dy[:, 0] += -5.0 * x12 / (1.0 + x1) ** 2
    dy[:, 11] += 5.0 / (1.0 + x1)
    dy[:, 3] += 10.0 * (x4 - x20)
    dy[:, 19] += -10.0 * (x4 - x20)
    dy[:, 18] += 120.0 * x19**2 - 5.0
    dy[:, 12] += 0.5 * x13
    return y, dy


# name -> (evaluator, domain lows, domain highs)
FUNCTIONS = {
    "branin": (_branin, np.array([-5.0, 0.0]), np.array([10.0, 15.0])),
    "six_hump_camel": (_six_hump_camel, np.array([-3.0, -2.0]), np.array([3.0, 2.0])),
    "styblinski_tang": (_styblinski_tang, np.full(2, -5.0), np.full(2, 5.0)),
    "hartmann6": (_hartmann6, np.zeros(6), np.ones(6)),
    "welch20": (_welch20, np.full(20, -0.5), np.full(20, 0.5)),
}


def synth_eval(name, x):
    """Evaluate a named benchmark: (values, gradients) at points x."""
    if name not in FUNCTIONS:
        raise UnknownFunction(
            f"unknown function {name!r}; choose from {sorted(FUNCTIONS)}"
        )
    fn, lo, hi = FUNCTIONS[name]
    single = np.asarray(x).ndim == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != lo.shape[0]:
        raise DomainViolation(f"{name} expects d={lo.shape[0]}, got {x.shape[1]}")
    tol = 1e-9 * np.maximum(np.abs(lo), np.abs(hi)).max()
    if np.any(x < lo - tol) or np.any(x > hi + tol):
        raise DomainViolation(f"input outside the standard {name} domain")
    y, dy = fn(x)
    return (y[0], dy[0]) if single else (y, dy)


def generate(name, n, seed):
    """Sample n points uniformly over the standard domain, with labels."""
    if name not in FUNCTIONS:
        raise UnknownFunction(
            f"unknown function {name!r}; choose from {sorted(FUNCTIONS)}"
        )
    _, lo, hi = FUNCTIONS[name]
    rng = np.random.default_rng(seed)
    x = rng.uniform(lo, hi, size=(int(n), lo.shape[0]))
    if n == 0:
        return LabeledDerivDataset(
            x.reshape(0, lo.shape[0]), np.zeros(0), x.reshape(0, lo.shape[0])
        )
    y, dy = synth_eval(name, x)
    return LabeledDerivDataset(x, y, dy)


def split(ds, n_train, seed):
    """Split by a seeded permutation into (train, test)."""
    n = len(ds)
    if not 0 <= n_train <= n:
        raise ValueError(f"n_train={n_train} out of range for n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    tr, te = perm[:n_train], perm[n_train:]
    return (
        LabeledDerivDataset(ds.x[tr], ds.y[tr], ds.dy[tr]),
        LabeledDerivDataset(ds.x[te], ds.y[te], ds.dy[te]),
    )


class NormTransform:
    """Affine input map plus value standardization, with gradient chain rule.

    Inputs map as x_norm = (x - offset) / width (the unit hypercube when
    fitted to data, a pure coordinate rescale in molecular mode). Values
    map as (y - mu) / sigma with a single sigma pooled over centered
    values and width-scaled gradient components so that both channels
    share units. Normalized gradients are the true gradients of the
    normalized values with respect to the normalized inputs:
    dy_norm = width * dy / sigma.
    """

    def __init__(self, offset, width, mu, sigma):
        self.offset = np.asarray(offset, dtype=np.float64)
        self.width = np.asarray(width, dtype=np.float64)
        self.mu = float(mu)
        self.sigma = float(sigma)

    @classmethod
    def identity(cls, d):
        return cls(np.zeros(d), np.ones(d), 0.0, 1.0)

    def transform_inputs(self, x):
        return (np.asarray(x, dtype=np.float64) - self.offset) / self.width

    def inverse_inputs(self, x_norm):
        return np.asarray(x_norm, dtype=np.float64) * self.width + self.offset

    def transform_values(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mu) / self.sigma

    def inverse_values(self, y_norm):
        return np.asarray(y_norm, dtype=np.float64) * self.sigma + self.mu

    def transform_gradients(self, dy):
        return np.asarray(dy, dtype=np.float64) * self.width / self.sigma

    def inverse_gradients(self, dy_norm):
        return np.asarray(dy_norm, dtype=np.float64) * self.sigma / self.width

    def output_scales(self, n):
        """Interleaved per-output de-normalization factors for n points."""
        block = np.concatenate(([self.sigma], self.sigma / self.width))
        return np.tile(block, n)

    def apply(self, ds):
        return LabeledDerivDataset(
            self.transform_inputs(ds.x),
            self.transform_values(ds.y),
            self.transform_gradients(ds.dy),
        )

    def to_arrays(self):
        return {
            "norm_offset": self.offset,
            "norm_width": self.width,
            "norm_mu": np.array(self.mu),
            "norm_sigma": np.array(self.sigma),
        }

    @classmethod
    def from_arrays(cls, data):
        if "norm_offset" not in data:
            return None
        return cls(
            data["norm_offset"],
            data["norm_width"],
            float(data["norm_mu"]),
            float(data["norm_sigma"]),
        )


def normalize(train, others=(), input_transform="hypercube", coordinate_scale=3.0):
    """Fit the normalization on the training split and apply it everywhere.

    ``input_transform`` is "hypercube" (per-dimension min/max fitted on the
    training inputs) or "scale" (divide coordinates by a constant, the
    molecular-coordinates convention). The pooled sigma is the standard
    deviation of the centered values together with all gradient components
    expressed in normalized-input units (chain-ruled through the input
    map), so both label channels end up on one shared scale.

    Returns (transform, normalized_train, [normalized_others...]).
    """
    if len(train) == 0:
        raise ValueError("cannot fit a normalization on an empty training split")
    if input_transform == "hypercube":
        lo = train.x.min(axis=0)
        hi = train.x.max(axis=0)
        width = hi - lo
        degenerate = width <= 0
        if np.any(degenerate):
            warnings.warn(
                f"constant input dimensions {np.where(degenerate)[0].tolist()}; "
                "applying a unit scale floor",
                DegenerateDimension,
            )
            width = np.where(degenerate, 1.0, width)
        offset = lo
    elif input_transform == "scale":
        offset = np.zeros(train.dim)
        width = np.full(train.dim, float(coordinate_scale))
    else:
        raise ValueError(f"unknown input transform {input_transform!r}")
    mu = float(train.y.mean())
    pooled = np.concatenate([train.y - mu, (train.dy * width).ravel()])
    sigma = float(pooled.std())
    if sigma <= 0:
        sigma = 1.0
    transform = NormTransform(offset, width, mu, sigma)
    out = [transform.apply(train)] + [transform.apply(ds) for ds in others]
    return (transform, *out)


def save(path, ds):
    """Write the CSV dataset format with full float round-trip precision."""
    n, d = ds.x.shape
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# d={d} n={n}\n")
        for i in range(n):
            row = np.concatenate([ds.x[i], [ds.y[i]], ds.dy[i]])
            fh.write(",".join(np.format_float_scientific(v, unique=True) for v in row))
            fh.write("\n")


def load(path):
    """Read the CSV dataset format, validating shapes line by line."""
    with open(path, encoding="ascii") as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise Malformed(1, "missing '# d=.. n=..' header")
        try:
            fields = dict(part.split("=") for part in header[1:].split())
            d, n = int(fields["d"]), int(fields["n"])
        except (ValueError, KeyError) as exc:
            raise Malformed(1, f"bad header: {header.strip()!r}") from exc
        x = np.empty((n, d))
        y = np.empty(n)
        dy = np.empty((n, d))
        for i in range(n):
            line = fh.readline()
            if not line:
                raise Malformed(i + 2, "unexpected end of file")
            parts = line.strip().split(",")
            if len(parts) != 2 * d + 1:
                raise Malformed(
                    i + 2, f"expected {2 * d + 1} columns, found {len(parts)}"
                )
            try:
                row = np.array([float(p) for p in parts])
            except ValueError as exc:
                raise Malformed(i + 2, f"unparsable float: {exc}") from exc
            x[i] = row[:d]
            y[i] = row[d]
            dy[i] = row[d + 1 :]
    return LabeledDerivDataset(x, y, dy)
