"""Feature extractor, classifier, discriminator and gradient reversal."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Any, Optional, Union

import torch
from torch import nn

CHECKPOINT_FORMAT = "ila-da-checkpoint"
CHECKPOINT_VERSION = 1


class _ReverseGradient(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coeff):
        ctx.coeff = coeff
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.coeff, None


def reverse_gradient(x: torch.Tensor, coeff: float = 1.0) -> torch.Tensor:
    """Identity on the way forward, ``-coeff`` times the gradient on the way back."""
    return _ReverseGradient.apply(x, float(coeff))


def _init_fan_in_uniform(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.uniform_(m.bias, -bound, bound)


class LeNet(nn.Module):
    """Digits feature extractor: two 5x5 conv/max-pool stages then a 100-d layer."""

    def __init__(self, in_channels: int = 1, image_size: int = 28, feature_dim: int = 100):
        super().__init__()
        self.in_channels = in_channels
        self.image_size = image_size
        self.feature_dim = feature_dim
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, 32, kernel_size=5),
            nn.MaxPool2d(2),
            nn.ReLU(),
            nn.Conv2d(32, 48, kernel_size=5),
            nn.Dropout2d(0.5),
            nn.MaxPool2d(2),
            nn.ReLU(),
        )
        side = ((image_size - 4) // 2 - 4) // 2
        self.fc = nn.Sequential(nn.Linear(48 * side * side, feature_dim), nn.ReLU())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1:] != (self.in_channels, self.image_size, self.image_size):
            raise ValueError(
                f"expected images of shape (n, {self.in_channels}, {self.image_size}, {self.image_size}), "
                f"got {tuple(x.shape)}")
        return self.fc(self.conv(x).flatten(1))


class Classifier(nn.Module):
    def __init__(self, feature_dim: int = 100, num_classes: int = 10):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(feature_dim, 100), nn.ReLU(), nn.Linear(100, num_classes))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.net(f)


class Discriminator(nn.Module):
    """Two hidden layers of width 500 with dropout; outputs P(source)."""

    def __init__(self, in_dim: int, hidden: int = 500, dropout: float = 0.5):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ReLU(), nn.Dropout(dropout),
            nn.Linear(hidden, hidden), nn.ReLU(), nn.Dropout(dropout),
            nn.Linear(hidden, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(x)).squeeze(1)


class DigitModel(nn.Module):
    """Bundle of G, C and D (plus the CDAN join when used)."""

    def __init__(self, in_channels: int, image_size: int, num_classes: int = 10,
                 feature_dim: int = 100, method: str = "dann", seed: int = 0):
        super().__init__()
        from .losses import ConditionalJoin

        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.G = LeNet(in_channels, image_size, feature_dim)
            self.C = Classifier(feature_dim, num_classes)
            self.join = ConditionalJoin(feature_dim, num_classes, seed=seed) if method == "cdan" else None
            self.D = Discriminator(self.join.out_dim if self.join is not None else feature_dim)
            _init_fan_in_uniform(self)
        finally:
            torch.random.set_rng_state(gen_state)
        self.method = method

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.C(self.G(x))

    @torch.no_grad()
    def predict(self, images: torch.Tensor, batch_size: int = 1000) -> torch.Tensor:
        was_training = self.training
        self.eval()
        try:
            preds = [self(images[i:i + batch_size]).argmax(dim=1) for i in range(0, len(images), batch_size)]
        finally:
            self.train(was_training)
        return torch.cat(preds) if preds else torch.zeros(0, dtype=torch.long)

    @torch.no_grad()
    def features(self, images: torch.Tensor, batch_size: int = 1000) -> torch.Tensor:
        was_training = self.training
        self.eval()
        try:
            out = [self.G(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
        finally:
            self.train(was_training)
        return torch.cat(out) if out else torch.zeros(0, self.G.feature_dim)


def save_checkpoint(path: Union[str, Path], model: nn.Module, *, config: dict, fingerprint: str,
                    iteration: int, extra: Optional[dict[str, Any]] = None) -> None:
    """Write the versioned checkpoint container.

    Layout: ``format``, ``version``, ``iteration``, ``config_fingerprint``,
    ``config`` and ``params`` (name -> tensor), plus free-form ``extra``
    (optimizer and RNG state for resumption).
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "iteration": int(iteration),
        "config_fingerprint": fingerprint,
        "config": config,
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: Union[str, Path]) -> dict[str, Any]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an ila-da checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    return payload
