#!/usr/bin/env python3
# CDAE engine - encoder / decoder / classifier on PyTorch

"""
Convolutional denoising autoencoder with a joint classifier.

The encoder output h feeds two branches: the decoder reconstructs the clean
preamble z_tilde in [0, 1]^d and the classifier predicts the device label.
Removing the decoder (`degenerate_to_cnn`) leaves the plain CNN baseline.
Every convolution is stride 1 with same-padding, so the decoder restores the
input length exactly.
"""
import logging
import pickle
import sys
from dataclasses import dataclass, asdict, replace
from pathlib import Path
from typing import Dict, NamedTuple, Optional, Union

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import DataError, NumericalError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pscdae-checkpoint"
CHECKPOINT_VERSION = 1
LOG_CLAMP = 1e-12
GRAD_CHECK_FLOOR = 1e-5
INPUT_CENTRE = 0.5
DENSE_BIAS = 0.01

_SECTIONS = {"encoder": 1, "decoder": 2, "classifier": 3, "dropout": 4}


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 63-bit seed for (seed, keys...)."""
    state = np.random.SeedSequence([int(seed), *[int(k) for k in keys]]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


@dataclass(frozen=True)
class NetworkSpec:
    input_length: int = 480
    n_classes: int = 27
    pool: int = 0
    filters: int = 128
    long_kernel: int = 10
    short_kernel: int = 3
    dense_units: int = 1024
    dropout: float = 0.5
    with_decoder: bool = True

    def __post_init__(self):
        if self.pool == 0:
            object.__setattr__(self, "pool", 4 if self.input_length >= 960 else 2)
        if self.input_length <= 0 or self.input_length % (self.pool ** 2):
            raise DataError(f"input length {self.input_length} is not divisible by pool^2 = {self.pool ** 2}")
        if self.n_classes < 2:
            raise DataError("need at least two classes")
        if not 0.0 <= self.dropout < 1.0:
            raise DataError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def encoded_length(self) -> int:
        return self.input_length // self.pool ** 2

    @property
    def flat_features(self) -> int:
        return self.filters * self.encoded_length * 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        return cls(**data)


def degenerate_to_cnn(spec: NetworkSpec) -> NetworkSpec:
    """Encoder + classifier only (the lambda1 = 0 model)."""
    return replace(spec, with_decoder=False)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 10.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise DataError("loss weights must be nonnegative")


class SeededDropout(nn.Module):
    """Inverted dropout drawing its mask from a dedicated generator."""

    def __init__(self, p: float, generator: torch.Generator):
        super().__init__()
        self.p = p
        self.generator = generator

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = torch.empty_like(x).bernoulli_(1.0 - self.p, generator=self.generator)
        return x * keep / (1.0 - self.p)


class CDAE(nn.Module):
    """Encoder, optional decoder and classifier from a NetworkSpec."""

    def __init__(self, spec: NetworkSpec, dropout_rng: torch.Generator):
        super().__init__()
        self.spec = spec
        f, p = spec.filters, spec.pool
        self.encoder = nn.Sequential(
            nn.Conv2d(1, f, (spec.long_kernel, 1), padding="same"),
            nn.ReLU(),
            nn.MaxPool2d((p, 1)),
            nn.Conv2d(f, f, (spec.short_kernel, 2), padding="same"),
            nn.ReLU(),
            nn.MaxPool2d((p, 1)),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(f, f, (spec.short_kernel, 2), padding="same"),
            nn.ReLU(),
            nn.Upsample(scale_factor=(p, 1), mode="nearest"),
            nn.Conv2d(f, f, (spec.long_kernel, 1), padding="same"),
            nn.ReLU(),
            nn.Upsample(scale_factor=(p, 1), mode="nearest"),
            nn.Conv2d(f, 1, (spec.short_kernel, 1), padding="same"),
            nn.Sigmoid(),
        ) if spec.with_decoder else None
        self.classifier = nn.Sequential(
            nn.Flatten(),
            nn.Linear(spec.flat_features, spec.dense_units),
            nn.ReLU(),
            SeededDropout(spec.dropout, dropout_rng),
            nn.Linear(spec.dense_units, spec.n_classes),
        )

    @property
    def dense(self) -> nn.Linear:
        return self.classifier[1]

    def forward(self, z):
        # the encoder sees inputs centred on zero; the decoder target stays in [0, 1]
        h = self.encoder(z.unsqueeze(1) - INPUT_CENTRE)
        z_tilde = self.decoder(h).squeeze(1) if self.decoder is not None else None
        logits = self.classifier(h)
        return h, z_tilde, logits


def _init_section(section: nn.Module, generator: torch.Generator, has_output_layer: bool) -> None:
    # He-uniform for ReLU convolutions. The wide ReLU dense layer gets the LeCun bound and a
    # small positive bias so its units start alive; the sigmoid conv and softmax dense stay small.
    layers = [m for m in section.modules() if isinstance(m, (nn.Conv2d, nn.Linear))]
    for k, layer in enumerate(layers):
        fan_in = layer.weight[0].numel()
        last = has_output_layer and k == len(layers) - 1
        bias = 0.0
        if last and isinstance(layer, nn.Linear):
            bound = np.sqrt(6.0 / (fan_in + layer.out_features))
        elif last or isinstance(layer, nn.Linear):
            bound = np.sqrt(3.0 / fan_in)
            bias = DENSE_BIAS if isinstance(layer, nn.Linear) else 0.0
        else:
            bound = np.sqrt(6.0 / fan_in)
        with torch.no_grad():
            layer.weight.uniform_(-bound, bound, generator=generator)
            layer.bias.fill_(bias)


class ForwardPass(NamedTuple):
    h: torch.Tensor
    z_tilde: Optional[torch.Tensor]
    y_hat: torch.Tensor
    logits: torch.Tensor


class LossTerms(NamedTuple):
    total: torch.Tensor
    mse: torch.Tensor
    cce: torch.Tensor


class ModelState:
    """Parameters, Adam moments and dropout RNG of one CDAE/CNN."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype: torch.dtype = torch.float32,
                 lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.spec = spec
        self.seed = seed
        self.dtype = dtype
        self.dropout_rng = torch.Generator().manual_seed(derive_seed(seed, _SECTIONS["dropout"]))
        self.model = CDAE(spec, self.dropout_rng)
        for name in ("encoder", "decoder", "classifier"):
            section = getattr(self.model, name)
            if section is not None:
                _init_section(section, torch.Generator().manual_seed(derive_seed(seed, _SECTIONS[name])),
                              has_output_layer=name != "encoder")
        self.model.to(dtype)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=lr, betas=betas, eps=eps)

    def named_parameters(self) -> Dict[str, torch.nn.Parameter]:
        return dict(self.model.named_parameters())

    def parameter_groups(self) -> Dict[str, Dict[str, torch.nn.Parameter]]:
        """theta (encoder), theta_prime (decoder), theta_c (classifier)."""
        groups = {"theta": {}, "theta_prime": {}, "theta_c": {}}
        prefix = {"encoder": "theta", "decoder": "theta_prime", "classifier": "theta_c"}
        for name, p in self.model.named_parameters():
            groups[prefix[name.split(".", 1)[0]]][name] = p
        return groups

    def as_tensor(self, x) -> torch.Tensor:
        return torch.as_tensor(x, dtype=self.dtype)

    def snapshot(self) -> Dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.model.state_dict().items()}

    def restore(self, snapshot: Dict[str, torch.Tensor]) -> None:
        self.model.load_state_dict(snapshot)


def forward(state: ModelState, z, train_mode: bool = False) -> ForwardPass:
    """h = f_theta(z), z_tilde = f_theta'(h), y_hat = softmax(f_theta_C(h))."""
    z = state.as_tensor(z)
    spec = state.spec
    if z.ndim != 3 or z.shape[1:] != (spec.input_length, 2):
        raise DataError(f"input shape {tuple(z.shape)} does not match (N, {spec.input_length}, 2)")
    state.model.train(train_mode)
    h, z_tilde, logits = state.model(z)
    return ForwardPass(h, z_tilde, torch.softmax(logits, dim=1), logits)


def _mse(z_tilde, z_hat) -> torch.Tensor:
    if z_tilde is None:
        return torch.zeros((), dtype=z_hat.dtype)
    return ((z_tilde - z_hat) ** 2).flatten(1).sum(dim=1).mean()


def joint_loss(z_tilde, z_hat, y_hat, y, weights: LossWeights) -> LossTerms:
    """lambda1 * MSE + lambda2 * CCE with log(y_hat) clamped at 1e-12."""
    z_hat = torch.as_tensor(z_hat, dtype=y_hat.dtype)
    y = torch.as_tensor(y, dtype=y_hat.dtype)
    mse = _mse(z_tilde, z_hat)
    cce = -(y * torch.log(y_hat.clamp_min(LOG_CLAMP))).sum(dim=1).mean()
    return LossTerms(weights.lambda1 * mse + weights.lambda2 * cce, mse, cce)


def joint_loss_from_logits(fp: ForwardPass, z_hat, y, weights: LossWeights) -> LossTerms:
    """Training form of `joint_loss`: CCE through log-softmax of the logits."""
    dtype = fp.logits.dtype
    z_hat = torch.as_tensor(z_hat, dtype=dtype)
    y = torch.as_tensor(y, dtype=dtype)
    mse = _mse(fp.z_tilde, z_hat)
    cce = -(y * F.log_softmax(fp.logits, dim=1)).sum(dim=1).mean()
    return LossTerms(weights.lambda1 * mse + weights.lambda2 * cce, mse, cce)


def l2_penalty(state: ModelState, coef: float) -> torch.Tensor:
    """coef * ||W||^2 on the Dense(1024) weights."""
    return coef * (state.model.dense.weight ** 2).sum()


def backward(state: ModelState, total: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of `total` for every parameter, keyed by name."""
    if not torch.is_tensor(total) or total.grad_fn is None:
        raise DataError("no recorded forward pass to differentiate")
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    grads = {}
    for name, p in state.model.named_parameters():
        grads[name] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
    return grads


def adam_step(state: ModelState, gradients: Dict[str, torch.Tensor], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update with the given gradients."""
    params = state.named_parameters()
    for name, g in gradients.items():
        if name not in params:
            raise DataError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise DataError(f"gradient shape {tuple(g.shape)} does not match {name}")
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in {name}")
    for name, p in params.items():
        p.grad = gradients[name].to(p.dtype) if name in gradients else torch.zeros_like(p)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
        group["betas"] = (beta1, beta2)
        group["eps"] = eps
    state.optimizer.step()


def train_step(state: ModelState, z, z_hat, y, weights: LossWeights, lr: float,
               l2: float = 0.001, batch_index: Optional[int] = None) -> LossTerms:
    fp = forward(state, z, train_mode=True)
    terms = joint_loss_from_logits(fp, z_hat, y, weights)
    total = terms.total + l2_penalty(state, l2)
    if not torch.isfinite(total):
        raise NumericalError("loss diverged", batch_index)
    grads = backward(state, total)
    try:
        adam_step(state, grads, lr)
    except NumericalError as e:
        raise NumericalError(str(e), batch_index) from e
    return LossTerms(total.detach(), terms.mse.detach(), terms.cce.detach())


def warmup_lr(lr: float, step: int, warmup_steps: int) -> float:
    """Linear ramp to `lr` over the first `warmup_steps` updates (step counts from 0)."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return lr
    return lr * (step + 1) / warmup_steps


@torch.no_grad()
def predict(state: ModelState, z, batch_size: int = 256) -> np.ndarray:
    """Class probabilities in eval mode, batched."""
    z = np.asarray(z)
    out = []
    for start in range(0, len(z), batch_size):
        out.append(forward(state, z[start:start + batch_size], train_mode=False).y_hat.cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0, state.spec.n_classes))


def check_gradients(state: ModelState, z, z_hat, y, weights: LossWeights, l2: float = 0.001,
                    coords: int = 20, step: float = 1e-5, seed: int = 0) -> Dict[str, float]:
    """
    Max relative error between autograd and central differences over
    `coords` random coordinates of every parameter tensor (dropout off).
    """
    if state.dtype != torch.float64:
        raise DataError("gradient checks need a float64 model")

    def objective() -> torch.Tensor:
        fp = forward(state, z, train_mode=False)
        return joint_loss_from_logits(fp, z_hat, y, weights).total + l2_penalty(state, l2)

    analytic = backward(state, objective())
    rng = np.random.default_rng(seed)
    errors = {}
    with torch.no_grad():
        for name, p in state.named_parameters().items():
            flat = p.view(-1)
            picks = rng.choice(flat.numel(), size=min(coords, flat.numel()), replace=False)
            worst = 0.0
            for idx in picks:
                original = flat[idx].item()
                flat[idx] = original + step
                plus = objective().item()
                flat[idx] = original - step
                minus = objective().item()
                flat[idx] = original
                numeric = (plus - minus) / (2.0 * step)
                exact = analytic[name].view(-1)[idx].item()
                scale = max(abs(exact), abs(numeric), GRAD_CHECK_FLOOR)
                worst = max(worst, abs(exact - numeric) / scale)
            errors[name] = worst
    return errors


def save_checkpoint(state: ModelState, path: Union[str, Path], extra: Optional[dict] = None) -> None:
    """Versioned torch container: spec, float32 parameters, Adam moments, RNG."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "byteorder": sys.byteorder,
        "seed": state.seed,
        "spec": state.spec.to_dict(),
        "parameters": {k: v.detach().to(torch.float32).contiguous() for k, v in state.model.state_dict().items()},
        "optimizer": state.optimizer.state_dict(),
        "dropout_rng": state.dropout_rng.get_state(),
        "extra": extra or {},
    }
    torch.save(payload, str(path))


def load_checkpoint(path: Union[str, Path], expect: Optional[NetworkSpec] = None,
                    dtype: torch.dtype = torch.float32):
    """Rebuild a ModelState from `save_checkpoint`; returns (state, extra)."""
    try:
        payload = torch.load(str(path), map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {payload.get('version')}")
    spec = NetworkSpec.from_dict(payload["spec"])
    if expect is not None and expect != spec:
        raise DataError(f"checkpoint spec {spec} does not match expected {expect}")
    state = ModelState(spec, seed=payload.get("seed", 0), dtype=dtype)
    state.model.load_state_dict({k: v.to(dtype) for k, v in payload["parameters"].items()})
    state.optimizer.load_state_dict(payload["optimizer"])
    state.dropout_rng.set_state(payload["dropout_rng"])
    return state, payload.get("extra", {})
