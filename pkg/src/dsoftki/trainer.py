"""Hyperparameter optimization: minibatched Adam over the batch objective.

One training run shuffles the data each epoch, ascends the stabilized
log-likelihood objective with Adam at the effective learning rate, and
finishes with the streaming posterior solve at the frozen hyperparameters.
Runs are bit-deterministic given (dataset, config, seed) on the factored
path; pseudoloss probe draws are reseeded per (seed, epoch, batch).
"""

import time
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import reparam
from .exact import GpwdNoise
from .interp import InterpField
from .kernels import KernelParams
from .model import (
    DEFAULT_NUM_PROBES,
    DsoftkiParams,
    fit,
    objective_value,
    stabilized_objective,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    """Knobs for one training run."""

    epochs: int = 20
    batch_size: int = 1024
    base_lr: float = 0.01
    m: int = 512
    seed: int = 0
    noise_ratio: float = 1.0  # grad_var / (d * value_var) at initialization
    num_probes: int = DEFAULT_NUM_PROBES
    shared_temperature: bool = False
    value_only: bool = False
    method_dims: float | None = None  # override for the effective-lr factor
    init_value_var: float = 0.01

    def resolved_method_dims(self):
        if self.method_dims is not None:
            return float(self.method_dims)
        if self.value_only:
            return 1.0
        return self.noise_ratio + 1.0


def effective_lr(method_dims, base_lr):
    """Learning rate scaled by the per-point observation multiplicity."""
    if method_dims < 1:
        raise ValueError("method_dims must be at least 1")
    return float(method_dims) * float(base_lr)


# canonical parameter-group order used for packing and reporting
PARAM_KEYS = (
    "raw_lengthscales",
    "raw_scale",
    "z",
    "raw_t",
    "raw_value_var",
    "raw_grad_var",
)


def params_to_dict(params):
    """Unconstrained view of all trainable parameters (copies)."""
    return {
        "raw_lengthscales": params.kparams.raw_lengthscales.copy(),
        "raw_scale": np.float64(params.kparams.raw_scale),
        "z": params.field.z.copy(),
        "raw_t": params.field.raw_t.copy(),
        "raw_value_var": np.float64(params.noise.raw_value_var),
        "raw_grad_var": np.float64(params.noise.raw_grad_var),
    }


def params_from_dict(values, eps, shared_temperature, value_only):
    return DsoftkiParams(
        KernelParams(values["raw_lengthscales"], float(values["raw_scale"])),
        InterpField(
            values["z"],
            values["raw_t"],
            eps=eps,
            shared_temperature=shared_temperature,
        ),
        GpwdNoise(float(values["raw_value_var"]), float(values["raw_grad_var"])),
        value_only=value_only,
    )


def trainable_keys(params):
    keys = list(PARAM_KEYS)
    if params.value_only:
        keys.remove("raw_grad_var")
    return keys


@dataclass
class OptState:
    """Adam moment accumulators, keyed like the parameter dict."""

    m: dict = dataclass_field(default_factory=dict)
    v: dict = dataclass_field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, values, keys):
        state = cls()
        for key in keys:
            state.m[key] = np.zeros_like(np.asarray(values[key], dtype=np.float64))
            state.v[key] = np.zeros_like(state.m[key])
        return state


def adam_step(values, grads, state, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2,
              eps=ADAM_EPS):
    """One bias-corrected Adam ascent step on the given parameter dict."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    out = dict(values)
    for key in state.m:
        g = np.asarray(grads[key], dtype=np.float64)
        state.m[key] = beta1 * state.m[key] + (1.0 - beta1) * g
        state.v[key] = beta2 * state.v[key] + (1.0 - beta2) * g**2
        mhat = state.m[key] / bc1
        vhat = state.v[key] / bc2
        out[key] = values[key] + lr * mhat / (np.sqrt(vhat) + eps)
    return out, state


def objective_gradient(xb, ytil_b, params, num_probes=DEFAULT_NUM_PROBES,
                       probe_seed=0):
    """Gradient of the stabilized objective over all unconstrained groups."""
    _, grads, info = stabilized_objective(
        xb, ytil_b, params, num_probes=num_probes, probe_seed=probe_seed
    )
    return grads, info


def grad_check(params, xb, ytil_b, h=1e-4):
    """Worst per-group relative error of the analytic gradient versus
    central finite differences of the factored objective.

    Differences are taken coordinate-by-coordinate on the unconstrained
    parametrization with the objective evaluated in extended precision.
    Only the factored path is checked; the pseudoloss is stochastic by
    construction.
    """
    xb = np.atleast_2d(np.asarray(xb, dtype=np.float64))
    _, grads, info = stabilized_objective(xb, ytil_b, params)
    if info["fallback"]:
        raise ValueError("gradient check requires the factored objective path")
    values = params_to_dict(params)
    eps_field = params.field.eps
    shared = params.field.shared_temperature
    report = {}
    for key in trainable_keys(params):
        base = np.asarray(values[key], dtype=np.float64)
        fd = np.zeros_like(base)
        flat_fd = fd.reshape(-1)
        flat_base = base.reshape(-1)
        for idx in range(flat_base.size):
            sides = []
            for sign in (+1.0, -1.0):
                shifted = dict(values)
                arr = base.copy().reshape(-1)
                arr[idx] += sign * h
                shifted[key] = arr.reshape(base.shape)
                ptry = params_from_dict(shifted, eps_field, shared, params.value_only)
                sides.append(objective_value(xb, ytil_b, ptry, dtype=np.longdouble))
            # subtract before leaving extended precision
            flat_fd[idx] = float((sides[0] - sides[1]) / np.longdouble(2.0 * h))
        diff = np.max(np.abs(np.asarray(grads[key], dtype=np.float64) - fd))
        scale = max(float(np.max(np.abs(fd))), 1e-300)
        report[key] = float(diff / scale)
    return report


@dataclass
class EpochStats:
    epoch: int
    mean_objective: float
    fallback_count: int
    max_jitter: float
    seconds: float
    test_rmse: float = float("nan")
    test_grad_rmse: float = float("nan")
    test_nll: float = float("nan")


def initial_params(train_x, config):
    """Seeded initialization: interpolation points from the data, unit
    temperatures and kernel, configured noise ratio."""
    train_x = np.atleast_2d(np.asarray(train_x, dtype=np.float64))
    n, d = train_x.shape
    rng = np.random.default_rng(config.seed)
    replace = config.m > n
    subset = rng.choice(n, size=config.m, replace=replace)
    z = train_x[subset].copy()
    t_shape = (d,) if config.shared_temperature else (config.m, d)
    raw_t = np.full(t_shape, float(reparam.from_positive(1.0, reparam.TEMPERATURE_FLOOR)))
    kparams = KernelParams.from_positive(np.ones(d), 1.0)
    value_var = config.init_value_var
    grad_var = config.noise_ratio * d * value_var
    noise = GpwdNoise.from_positive(value_var, grad_var)
    field = InterpField(z, raw_t, shared_temperature=config.shared_temperature)
    return DsoftkiParams(kparams, field, noise, value_only=config.value_only)


def train(train_ds, config, norm=None, test_ds=None):
    """Run the optimization loop and the final posterior solve.

    ``train_ds`` must already be normalized; ``norm`` is stored on the
    model so predictions map back to raw units. When ``test_ds`` is given
    (also normalized), per-epoch test metrics are recorded in telemetry.

    Returns (FittedModel, list[EpochStats]).
    """
    x = train_ds.x
    ytil = train_ds.labels(value_only=config.value_only)
    n, d = x.shape
    params = initial_params(x, config)
    values = params_to_dict(params)
    keys = trainable_keys(params)
    state = OptState.for_params(values, keys)
    lr = effective_lr(config.resolved_method_dims(), config.base_lr)
    rng = np.random.default_rng(config.seed)
    rows_per_point = params.block_rows()
    telemetry = []
    for epoch in range(config.epochs):
        tic = time.perf_counter()
        perm = rng.permutation(n)
        objectives = []
        fallbacks = 0
        max_jitter = 0.0
        for bidx, lo in enumerate(range(0, n, config.batch_size)):
            batch = perm[lo : lo + config.batch_size]
            rows = (
                (batch[:, None] * rows_per_point + np.arange(rows_per_point)).ravel()
            )
            probe_seed = np.random.SeedSequence(
                entropy=(config.seed, epoch, bidx)
            ).generate_state(1)[0]
            params = params_from_dict(
                values, params.field.eps, config.shared_temperature, config.value_only
            )
            value, grads, info = stabilized_objective(
                x[batch],
                ytil[rows],
                params,
                num_probes=config.num_probes,
                probe_seed=int(probe_seed),
            )
            values, state = adam_step(values, grads, state, lr)
            objectives.append(float(value))
            fallbacks += int(info["fallback"])
            max_jitter = max(max_jitter, info["jitter"])
        stats = EpochStats(
            epoch=epoch,
            mean_objective=float(np.mean(objectives)) if objectives else float("nan"),
            fallback_count=fallbacks,
            max_jitter=max_jitter,
            seconds=time.perf_counter() - tic,
        )
        if test_ds is not None:
            _epoch_test_metrics(stats, values, params, config, x, ytil, test_ds)
        telemetry.append(stats)
    params = params_from_dict(
        values, params.field.eps, config.shared_temperature, config.value_only
    )
    model = fit(x, ytil, params, norm=norm, block_size=config.batch_size)
    return model, telemetry


def _epoch_test_metrics(stats, values, params, config, x, ytil, test_ds):
    from . import metrics
    from .model import predict

    snapshot = params_from_dict(
        values, params.field.eps, config.shared_temperature, config.value_only
    )
    model = fit(x, ytil, snapshot, block_size=config.batch_size)
    pred_y, pred_dy, var = predict(test_ds.x, model, want_variance=True,
                                   include_noise=True)
    stats.test_rmse = metrics.value_rmse(pred_y, test_ds.y)
    stats.test_grad_rmse = metrics.gradient_rmse(pred_dy, test_ds.dy)
    vals_var = var.reshape(len(test_ds), -1)[:, 0]
    stats.test_nll = metrics.gaussian_nll(pred_y, vals_var, test_ds.y)
