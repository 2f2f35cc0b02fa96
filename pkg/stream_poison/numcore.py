"""Deterministic float64 core for a fully connected rectifier network.

Parameters live in one flat tensor; every layer contributes its (in_dim, out_dim)
weight block followed by its bias. Gradients are written out by hand (no autograd),
second-order terms are central differences of those gradients.
"""
import logging
import math
from dataclasses import dataclass, field

import torch
from timm.models.layers import trunc_normal_ as __call_trunc_normal_

from .errors import ContractViolation, GradcheckFailure, NumericalError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
PROB_FLOOR = 1e-12
DOMAIN_SLACK = 1e-12

FIRST_ORDER_TOL = 1e-5
SECOND_ORDER_TOL = 1e-3
FD_STEP = 1e-5
# guards the relative error against 0/0 only
GRAD_FLOOR = 1e-12


def trunc_normal_(tensor, mean=0., std=1.):
    __call_trunc_normal_(tensor, mean=mean, std=std, a=-std, b=std)


@dataclass(frozen=True)
class ModelShape:
    layer_dims: tuple
    activation: str = 'relu'

    def __post_init__(self):
        dims = tuple((int(fan_in), int(fan_out)) for fan_in, fan_out in self.layer_dims)
        object.__setattr__(self, 'layer_dims', dims)
        if not dims:
            raise ContractViolation('layer_dims must contain at least one layer')
        for idx, ((_, out_a), (in_b, _)) in enumerate(zip(dims, dims[1:])):
            if out_a != in_b:
                raise ContractViolation(
                    'layer {} out_dim {} does not chain into layer {} in_dim {}'.format(idx, out_a, idx + 1, in_b))
        if dims[0][0] < 1:
            raise ContractViolation('feature dimension must be >= 1, got {}'.format(dims[0][0]))
        if dims[-1][1] < 2:
            raise ContractViolation('class count must be >= 2, got {}'.format(dims[-1][1]))
        if self.activation != 'relu':
            raise ContractViolation('unsupported activation {!r}'.format(self.activation))

    @classmethod
    def from_widths(cls, widths):
        """[8, 32, 32, 4] -> layers (8, 32), (32, 32), (32, 4)."""
        widths = [int(w) for w in widths]
        return cls(tuple(zip(widths[:-1], widths[1:])))

    @property
    def in_dim(self):
        return self.layer_dims[0][0]

    @property
    def n_classes(self):
        return self.layer_dims[-1][1]

    @property
    def n_params(self):
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.layer_dims)


@dataclass(frozen=True)
class ParamState:
    values: torch.Tensor
    shape: ModelShape

    def __post_init__(self):
        values = torch.as_tensor(self.values, dtype=DTYPE)
        object.__setattr__(self, 'values', values)
        if values.dim() != 1 or values.numel() != self.shape.n_params:
            raise ContractViolation('parameter length {} does not match shape ({} expected)'.format(
                values.numel(), self.shape.n_params))
        if not torch.isfinite(values).all():
            raise NumericalError('parameter state contains non-finite entries')

    def copy(self):
        return ParamState(self.values.clone(), self.shape)


@dataclass(frozen=True)
class Batch:
    features: torch.Tensor
    labels: torch.Tensor = field(repr=False)

    def __post_init__(self):
        features = torch.as_tensor(self.features, dtype=DTYPE)
        labels = torch.as_tensor(self.labels, dtype=torch.long)
        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'labels', labels)
        if features.dim() != 2 or features.shape[0] < 1:
            raise ContractViolation('features must be a non-empty n x d matrix, got shape {}'.format(
                tuple(features.shape)))
        if labels.shape != (features.shape[0],):
            raise ContractViolation('expected {} labels, got shape {}'.format(features.shape[0], tuple(labels.shape)))
        if features.min() < -DOMAIN_SLACK or features.max() > 1 + DOMAIN_SLACK:
            raise ContractViolation('feature entries must lie in [0, 1]')
        if labels.min() < 0:
            raise ContractViolation('labels must be non-negative')

    def __len__(self):
        return self.features.shape[0]

    def with_features(self, features):
        return Batch(features, self.labels)


def _values(shape, params):
    if isinstance(params, ParamState):
        if params.shape != shape:
            raise ContractViolation('parameter state was built for a different shape')
        return params.values
    values = torch.as_tensor(params, dtype=DTYPE)
    if values.dim() != 1 or values.numel() != shape.n_params:
        raise ContractViolation('parameter length {} does not match shape ({} expected)'.format(
            values.numel(), shape.n_params))
    return values


def _check_inputs(shape, features, labels=None):
    if features.dim() != 2:
        raise ContractViolation('features must be 2-dimensional, got {} dims'.format(features.dim()))
    if features.shape[1] != shape.in_dim:
        raise ContractViolation('feature dimension {} does not match model input dimension {}'.format(
            features.shape[1], shape.in_dim))
    if labels is not None and labels.numel() and int(labels.max()) >= shape.n_classes:
        raise ContractViolation('label {} out of range for {} classes'.format(int(labels.max()), shape.n_classes))


def unflatten(shape, params):
    """Per-layer (weight, bias) views into the flat parameter tensor."""
    values = _values(shape, params)
    layers = []
    offset = 0
    for fan_in, fan_out in shape.layer_dims:
        weight = values[offset:offset + fan_in * fan_out].view(fan_in, fan_out)
        offset += fan_in * fan_out
        bias = values[offset:offset + fan_out]
        offset += fan_out
        layers.append((weight, bias))
    return layers


def init_params(shape, seed):
    values = torch.zeros(shape.n_params, dtype=DTYPE)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        for weight, bias in unflatten(shape, values):
            trunc_normal_(weight, std=math.sqrt(2.0 / weight.shape[0]))
            bias.zero_()
    return ParamState(values, shape)


def _forward(shape, values, features):
    layers = unflatten(shape, values)
    inputs, pre_acts = [], []
    hidden = features
    for idx, (weight, bias) in enumerate(layers):
        inputs.append(hidden)
        z = hidden @ weight + bias
        if idx < len(layers) - 1:
            pre_acts.append(z)
            hidden = torch.relu(z)
        else:
            hidden = z
    return hidden, inputs, pre_acts


def _backward(shape, values, inputs, pre_acts, dlogits):
    layers = unflatten(shape, values)
    grads = []
    delta = dlogits
    for idx in reversed(range(len(layers))):
        weight, _ = layers[idx]
        grads.append((inputs[idx].T @ delta, delta.sum(dim=0)))
        delta = delta @ weight.T
        if idx > 0:
            delta = delta * (pre_acts[idx - 1] > 0)
    flat = torch.cat([t.reshape(-1) for pair in reversed(grads) for t in pair])
    return flat, delta


def _loss_dlogits(probs, labels):
    """d(-log max(p_y, floor)) / d logits, per sample; zero where the floor is active."""
    n_classes = probs.shape[1]
    onehot = torch.nn.functional.one_hot(labels, n_classes).to(DTYPE)
    picked = probs.gather(1, labels[:, None])
    live = (picked > PROB_FLOOR).to(DTYPE)
    return (probs - onehot) * live


def forward_logits(shape, params, features):
    features = torch.as_tensor(features, dtype=DTYPE)
    _check_inputs(shape, features)
    logits, _, _ = _forward(shape, _values(shape, params), features)
    return logits


def forward_probs(shape, params, features):
    return torch.softmax(forward_logits(shape, params, features), dim=1)


def per_sample_loss(shape, params, batch):
    _check_inputs(shape, batch.features, batch.labels)
    probs = forward_probs(shape, params, batch.features)
    picked = probs.gather(1, batch.labels[:, None]).squeeze(1)
    return -torch.log(picked.clamp_min(PROB_FLOOR))


def cross_entropy_loss(shape, params, batch):
    return per_sample_loss(shape, params, batch).mean().item()


def grad_params(shape, params, batch):
    _check_inputs(shape, batch.features, batch.labels)
    values = _values(shape, params)
    logits, inputs, pre_acts = _forward(shape, values, batch.features)
    dlogits = _loss_dlogits(torch.softmax(logits, dim=1), batch.labels) / len(batch)
    grad, _ = _backward(shape, values, inputs, pre_acts, dlogits)
    return grad


def backprop_input(shape, params, features, dlogits):
    """Input gradient for an arbitrary upstream gradient on the logits."""
    features = torch.as_tensor(features, dtype=DTYPE)
    _check_inputs(shape, features)
    values = _values(shape, params)
    _, inputs, pre_acts = _forward(shape, values, features)
    _, dx = _backward(shape, values, inputs, pre_acts, dlogits)
    return dx


def grad_input(shape, params, features, labels):
    features = torch.as_tensor(features, dtype=DTYPE)
    labels = torch.as_tensor(labels, dtype=torch.long)
    _check_inputs(shape, features, labels)
    values = _values(shape, params)
    logits, inputs, pre_acts = _forward(shape, values, features)
    dlogits = _loss_dlogits(torch.softmax(logits, dim=1), labels)
    _, dx = _backward(shape, values, inputs, pre_acts, dlogits)
    return dx


def activation_pattern(shape, params, features):
    features = torch.as_tensor(features, dtype=DTYPE)
    _, _, pre_acts = _forward(shape, _values(shape, params), features)
    if not pre_acts:
        return torch.zeros(features.shape[0], 0, dtype=torch.bool)
    return torch.cat([z > 0 for z in pre_acts], dim=1)


def sgd_step(params, grad, lr, momentum_buffer, momentum=0.0, weight_decay=0.0):
    is_state = isinstance(params, ParamState)
    values = params.values if is_state else torch.as_tensor(params, dtype=DTYPE)
    if grad.shape != values.shape or momentum_buffer.shape != values.shape:
        raise ContractViolation('grad/buffer lengths {}/{} do not match params {}'.format(
            grad.numel(), momentum_buffer.numel(), values.numel()))
    if not torch.isfinite(grad).all():
        raise NumericalError('refusing SGD update with non-finite gradient')
    buffer = momentum * momentum_buffer + grad + weight_decay * values
    updated = values - lr * buffer
    if is_state:
        updated = ParamState(updated, params.shape)
    return updated, buffer


def kl_rows(p, q):
    return torch.xlogy(p, p / q.clamp_min(PROB_FLOOR)).sum(dim=-1)


def js_rows(p, q):
    m = (p + q) / 2
    return 0.5 * kl_rows(p, m) + 0.5 * kl_rows(q, m)


def kl_div(p, q):
    return kl_rows(torch.as_tensor(p, dtype=DTYPE), torch.as_tensor(q, dtype=DTYPE)).item()


def js_div(p, q):
    return js_rows(torch.as_tensor(p, dtype=DTYPE), torch.as_tensor(q, dtype=DTYPE)).item()


def _default_eps(direction):
    return 1e-4 / max(1.0, torch.linalg.vector_norm(direction).item())


def fd_hvp(shape, params, batch, v, eps_fd=None):
    """Central-difference Hessian-vector product of the batch loss."""
    values = _values(shape, params)
    v = torch.as_tensor(v, dtype=DTYPE)
    if v.shape != values.shape:
        raise ContractViolation('direction length {} does not match params {}'.format(v.numel(), values.numel()))
    if torch.linalg.vector_norm(v).item() < 1e-15:
        raise ContractViolation('fd_hvp needs a non-zero direction')
    if eps_fd is None:
        eps_fd = _default_eps(v)
    if eps_fd <= 0:
        raise ContractViolation('eps_fd must be positive, got {}'.format(eps_fd))
    plus = grad_params(shape, values + eps_fd * v, batch)
    minus = grad_params(shape, values - eps_fd * v, batch)
    hv = (plus - minus) / (2 * eps_fd)
    if not torch.isfinite(hv).all():
        raise NumericalError('fd_hvp produced non-finite values with eps_fd={}; try a smaller eps_fd'.format(eps_fd))
    return hv


def fd_mixed_grad_input(shape, params, features, labels, u, eps_fd=None):
    """Per-sample input gradient of grad_theta(loss_i)^T u, by central differences along u."""
    values = _values(shape, params)
    u = torch.as_tensor(u, dtype=DTYPE)
    if u.shape != values.shape:
        raise ContractViolation('direction length {} does not match params {}'.format(u.numel(), values.numel()))
    if eps_fd is None:
        eps_fd = _default_eps(u)
    if eps_fd <= 0:
        raise ContractViolation('eps_fd must be positive, got {}'.format(eps_fd))
    plus = grad_input(shape, values + eps_fd * u, features, labels)
    minus = grad_input(shape, values - eps_fd * u, features, labels)
    mixed = (plus - minus) / (2 * eps_fd)
    if not torch.isfinite(mixed).all():
        raise NumericalError(
            'fd_mixed_grad_input produced non-finite values with eps_fd={}; try a smaller eps_fd'.format(eps_fd))
    return mixed


# ---------------------------------------------------------------------------
# finite-difference oracles
# ---------------------------------------------------------------------------

def relative_error(actual, expected, mask=None, floor=GRAD_FLOOR):
    """Worst elementwise |a - e| / max(|a|, |e|, floor) over the masked entries."""
    actual, expected = actual.reshape(-1), expected.reshape(-1)
    if mask is None:
        mask = torch.ones_like(expected, dtype=torch.bool)
    mask = mask.reshape(-1)
    if not mask.any():
        return 0.0
    denom = torch.maximum(torch.maximum(actual.abs(), expected.abs()), torch.full_like(expected, floor))
    return ((actual - expected).abs() / denom)[mask].max().item()


def vector_relative_error(actual, expected, floor=1e-8):
    diff = torch.linalg.vector_norm((actual - expected).reshape(-1)).item()
    return diff / max(torch.linalg.vector_norm(expected.reshape(-1)).item(), floor)


def _stable(shape, values, features, shifts):
    base = activation_pattern(shape, values, features)
    return all(torch.equal(activation_pattern(shape, values + s, features), base) for s in shifts)


def fd_grad_params_oracle(shape, params, batch, h=FD_STEP):
    """Returns (gradient, valid) where valid marks stencils that stay in one linear region."""
    values = _values(shape, params)
    grad = torch.zeros_like(values)
    valid = torch.ones_like(values, dtype=torch.bool)
    for j in range(values.numel()):
        step = torch.zeros_like(values)
        step[j] = h
        valid[j] = _stable(shape, values, batch.features, (step, -step))
        up = per_sample_loss(shape, values + step, batch).mean()
        down = per_sample_loss(shape, values - step, batch).mean()
        grad[j] = (up - down) / (2 * h)
    return grad, valid


def fd_grad_input_oracle(shape, params, features, labels, h=FD_STEP):
    values = _values(shape, params)
    features = torch.as_tensor(features, dtype=DTYPE)
    grad = torch.zeros_like(features)
    valid = torch.ones_like(features, dtype=torch.bool)
    base = activation_pattern(shape, values, features)
    for j in range(features.shape[1]):
        step = torch.zeros_like(features)
        step[:, j] = h
        up_pattern = activation_pattern(shape, values, features + step)
        down_pattern = activation_pattern(shape, values, features - step)
        valid[:, j] = (up_pattern == base).all(dim=1) & (down_pattern == base).all(dim=1)
        up = _unchecked_sample_loss(shape, values, features + step, labels)
        down = _unchecked_sample_loss(shape, values, features - step, labels)
        grad[:, j] = (up - down) / (2 * h)
    return grad, valid


def _unchecked_sample_loss(shape, values, features, labels):
    # the stencil may leave [0, 1] by h, so no Batch validation here
    logits, _, _ = _forward(shape, values, features)
    picked = torch.softmax(logits, dim=1).gather(1, labels[:, None]).squeeze(1)
    return -torch.log(picked.clamp_min(PROB_FLOOR))


def dense_hessian_oracle(shape, params, batch, h=FD_STEP):
    """Full Hessian from central differences of the analytic gradient, plus a stability flag."""
    values = _values(shape, params)
    n = values.numel()
    hessian = torch.zeros(n, n, dtype=DTYPE)
    stable = True
    for j in range(n):
        step = torch.zeros_like(values)
        step[j] = h
        stable = stable and _stable(shape, values, batch.features, (step, -step))
        hessian[:, j] = (grad_params(shape, values + step, batch) - grad_params(shape, values - step, batch)) / (2 * h)
    return hessian, stable


def dense_mixed_oracle(shape, params, features, labels, h=FD_STEP):
    """d^2 loss_i / (dx_i dtheta_k) for every k, shape (n, d, n_params)."""
    values = _values(shape, params)
    n = values.numel()
    features = torch.as_tensor(features, dtype=DTYPE)
    mixed = torch.zeros(features.shape[0], features.shape[1], n, dtype=DTYPE)
    stable = True
    for k in range(n):
        step = torch.zeros_like(values)
        step[k] = h
        stable = stable and _stable(shape, values, features, (step, -step))
        mixed[:, :, k] = (grad_input(shape, values + step, features, labels)
                          - grad_input(shape, values - step, features, labels)) / (2 * h)
    return mixed, stable


@dataclass
class GradcheckReport:
    seed: int
    grad_params: float = 0.0
    grad_input: float = 0.0
    fd_hvp: float = 0.0
    fd_mixed_grad_input: float = 0.0
    skipped_stencils: int = 0
    first_order_tol: float = FIRST_ORDER_TOL
    second_order_tol: float = SECOND_ORDER_TOL

    @property
    def failures(self):
        limits = {
            'grad_params': self.first_order_tol,
            'grad_input': self.first_order_tol,
            'fd_hvp': self.second_order_tol,
            'fd_mixed_grad_input': self.second_order_tol,
        }
        return [name for name, tol in limits.items() if not getattr(self, name) <= tol]

    @property
    def passed(self):
        return not self.failures

    def raise_for_failure(self):
        if self.failures:
            raise GradcheckFailure('gradcheck seed {}: {} exceeded tolerance ({})'.format(
                self.seed, ', '.join(self.failures),
                ', '.join('{}={:.3e}'.format(name, getattr(self, name)) for name in self.failures)))


DEFAULT_CHECK_SHAPE = ModelShape(((3, 5), (5, 3)))


def _draw(shape, generator, n_samples):
    values = torch.randn(shape.n_params, generator=generator, dtype=DTYPE) * 0.5
    features = torch.rand(n_samples, shape.in_dim, generator=generator, dtype=DTYPE)
    labels = torch.randint(0, shape.n_classes, (n_samples,), generator=generator)
    return values, Batch(features, labels)


def gradcheck(shape=DEFAULT_CHECK_SHAPE, seed=0, n_samples=4, inject_fault=False, max_draws=10,
              first_order_tol=FIRST_ORDER_TOL, second_order_tol=SECOND_ORDER_TOL):
    """Compare every analytic and finite-difference operator with its oracle on seeded tiny models.

    Stencils that straddle a rectifier kink are excluded from the first-order comparison;
    second-order draws that straddle one are redrawn (counted in skipped_stencils). When no
    kink-free draw turns up within max_draws the second-order errors are NaN and the report fails.
    """
    generator = torch.Generator().manual_seed(int(seed))
    report = GradcheckReport(seed=int(seed), first_order_tol=first_order_tol, second_order_tol=second_order_tol)

    values, batch = _draw(shape, generator, n_samples)
    expected, valid = fd_grad_params_oracle(shape, values, batch)
    analytic = grad_params(shape, values, batch)
    report.skipped_stencils += int((~valid).sum())
    if inject_fault:
        live = torch.nonzero(valid & (expected.abs() > 1e-6)).flatten()
        analytic = analytic.clone()
        analytic[int(live[0]) if live.numel() else 0] += 1e-2
    report.grad_params = relative_error(analytic, expected, valid & (expected.abs() > 1e-6))

    expected_x, valid_x = fd_grad_input_oracle(shape, values, batch.features, batch.labels)
    analytic_x = grad_input(shape, values, batch.features, batch.labels)
    report.skipped_stencils += int((~valid_x).sum())
    report.grad_input = relative_error(analytic_x, expected_x, valid_x & (expected_x.abs() > 1e-6))

    for _ in range(max_draws):
        values, batch = _draw(shape, generator, n_samples)
        v = torch.randn(shape.n_params, generator=generator, dtype=DTYPE)
        u = torch.randn(shape.n_params, generator=generator, dtype=DTYPE)
        eps_v, eps_u = _default_eps(v), _default_eps(u)
        hessian, stable_h = dense_hessian_oracle(shape, values, batch)
        mixed, stable_m = dense_mixed_oracle(shape, values, batch.features, batch.labels)
        stable_ops = _stable(shape, values, batch.features, (eps_v * v, -eps_v * v, eps_u * u, -eps_u * u))
        if stable_h and stable_m and stable_ops:
            report.fd_hvp = vector_relative_error(fd_hvp(shape, values, batch, v), hessian @ v)
            report.fd_mixed_grad_input = vector_relative_error(
                fd_mixed_grad_input(shape, values, batch.features, batch.labels, u), mixed @ u)
            break
        report.skipped_stencils += 1
    else:
        report.fd_hvp = report.fd_mixed_grad_input = float('nan')
        logger.warning('gradcheck seed %d: no kink-free draw in %d, second-order operators unchecked', seed, max_draws)

    return report
