"""Encoder with the RSG block before its last stage, SCL projection head and cosine classifier."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .rsg import RareFreqPartition, RSGAux, RSGBlock


@dataclass(frozen=True)
class NetworkConfig:
    backbone: str = "mlp"  # "mlp" | "resnet"
    num_classes: int = 10
    input_dim: int = 8  # mlp input width
    in_channels: int = 3  # resnet input channels
    image_size: int = 32  # resnet input height/width
    hidden_dim: int = 64
    feature_dim: int = 64  # mlp only; resnet features are 4 * base_width
    projection_dim: int = 32
    classifier: str = "cosine"  # "cosine" | "linear" (plain softmax baseline)
    resnet_blocks: int = 5  # blocks per stage; 5 gives ResNet-32
    base_width: int = 16
    rsg_enabled: bool = True
    rsg_k: int = 3
    rsg_center_hw: tuple[int, int] | None = None  # None: same as the feature map
    rsg_pair_hidden: int = 64
    rsg_temperature: float = 1.0

    def __post_init__(self):
        if self.backbone not in ("mlp", "resnet"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.classifier not in ("cosine", "linear"):
            raise ValueError(f"unknown classifier {self.classifier!r}")
        for name in ("num_classes", "input_dim", "hidden_dim", "feature_dim", "projection_dim",
                     "resnet_blocks", "base_width", "rsg_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def _stage(cin: int, cout: int, n: int, stride: int) -> nn.Sequential:
    layers = [BasicBlock(cin, cout, stride)] + [BasicBlock(cout, cout) for _ in range(n - 1)]
    return nn.Sequential(*layers)


def build_backbone(cfg: NetworkConfig) -> tuple[nn.Module, nn.Module, int, tuple[int, int], int]:
    """Return (trunk, last stage, mid channels, mid spatial size, feature dim)."""
    if cfg.backbone == "mlp":
        trunk = nn.Sequential(
            nn.Linear(cfg.input_dim, cfg.hidden_dim), nn.ReLU(),
            nn.Linear(cfg.hidden_dim, cfg.hidden_dim), nn.ReLU(),
        )
        last = nn.Sequential(nn.Linear(cfg.hidden_dim, cfg.feature_dim))
        return trunk, last, cfg.hidden_dim, (1, 1), cfg.feature_dim
    w = cfg.base_width
    trunk = nn.Sequential(
        nn.Conv2d(cfg.in_channels, w, 3, 1, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU(),
        _stage(w, w, cfg.resnet_blocks, 1),
        _stage(w, 2 * w, cfg.resnet_blocks, 2),
    )
    last = _stage(2 * w, 4 * w, cfg.resnet_blocks, 2)
    mid = (cfg.image_size + 1) // 2
    return trunk, last, 2 * w, (mid, mid), 4 * w


@dataclass
class ForwardOutput:
    mid_features: torch.Tensor
    features: torch.Tensor  # post-GAP, pre-classifier
    embeddings: torch.Tensor  # unit-norm projection
    logits: torch.Tensor  # cosine similarities (or raw scores for the linear head)
    labels: torch.Tensor  # labels of the (possibly enlarged) batch
    n_generated: int = 0
    aux: RSGAux | None = None


def _check_finite(t: torch.Tensor, where: str) -> None:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite activations after {where}")


class LongTailNet(nn.Module):
    def __init__(self, cfg: NetworkConfig, partition: RareFreqPartition | None = None):
        super().__init__()
        self.cfg = cfg
        self.trunk, self.last_stage, mid_c, mid_hw, feat = build_backbone(cfg)
        self.mid_hw = mid_hw
        self.projection = nn.Sequential(nn.Linear(feat, feat), nn.ReLU(), nn.Linear(feat, cfg.projection_dim))
        self.class_weight = nn.Parameter(torch.empty(cfg.num_classes, feat))
        nn.init.kaiming_uniform_(self.class_weight, a=5 ** 0.5)
        self.class_bias = nn.Parameter(torch.zeros(cfg.num_classes)) if cfg.classifier == "linear" else None
        self.rsg = None
        if cfg.rsg_enabled:
            if partition is None:
                raise ValueError("an RSG-enabled network needs a rare/frequent partition")
            self.rsg = RSGBlock(cfg.num_classes, mid_c, partition, cfg.rsg_k,
                                cfg.rsg_center_hw or mid_hw, cfg.rsg_pair_hidden, cfg.rsg_temperature)

    def mid(self, x: torch.Tensor) -> torch.Tensor:
        h = self.trunk(x)
        _check_finite(h, "trunk")
        return h.reshape(h.shape[0], -1, 1, 1) if self.cfg.backbone == "mlp" else h

    def head(self, mid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if self.cfg.backbone == "mlp":
            feats = self.last_stage(mid.flatten(1))
        else:
            feats = self.last_stage(mid).mean(dim=(2, 3))
        _check_finite(feats, "last stage")
        emb = F.normalize(self.projection(feats), dim=1)
        return feats, emb, self.classify(feats)

    def classify(self, feats: torch.Tensor) -> torch.Tensor:
        if self.class_bias is not None:
            return F.linear(feats, self.class_weight, self.class_bias)
        return (F.normalize(feats, dim=1) @ F.normalize(self.class_weight, dim=1).T).clamp(-1.0, 1.0)

    def forward_train(self, x: torch.Tensor, labels: torch.Tensor, epoch: int, t_th: int,
                      generator: torch.Generator | None = None) -> ForwardOutput:
        if x.shape[0] < 2:
            raise ValueError("training batches need at least 2 samples")
        mid = self.mid(x)
        aux = None
        n_gen = 0
        if self.rsg is not None:
            mid_aug, labels, aux = self.rsg(mid, labels, epoch, t_th, generator)
            n_gen = aux.n_generated
        else:
            mid_aug = mid
        feats, emb, logits = self.head(mid_aug)
        return ForwardOutput(mid, feats, emb, logits, labels, n_gen, aux)

    @torch.no_grad()
    def forward_eval(self, x: torch.Tensor) -> torch.Tensor:
        return self.evaluate(x)[1]

    @torch.no_grad()
    def evaluate(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Generation-free pass in eval mode; returns (features, logits)."""
        was_training = self.training
        self.eval()
        try:
            feats, _, logits = self.head(self.mid(x))
        finally:
            self.train(was_training)
        return feats, logits
