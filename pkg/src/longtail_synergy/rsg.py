"""Rare-class sample generator: class centers, pair head, displacement transfer."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.cluster.vq import kmeans2
from torch import nn

PAIR_PROB_CLAMP = 1e-6


@dataclass(frozen=True)
class RareFreqPartition:
    rare: frozenset
    frequent: frozenset
    rule: str

    def rare_mask(self, num_classes: int) -> torch.Tensor:
        mask = torch.zeros(num_classes, dtype=torch.bool)
        if self.rare:
            mask[list(self.rare)] = True
        return mask


def partition_classes(counts: Sequence[int], rule: str = "geometric_mean", rare_fraction: float = 0.5) -> RareFreqPartition:
    """Split classes into rare and frequent.

    ``geometric_mean``: rare classes have fewer samples than the geometric mean
    of all counts. ``fraction``: the ``ceil(rare_fraction * K)`` smallest classes.
    """
    counts = np.asarray(counts, dtype=np.float64)
    k = len(counts)
    if rule == "geometric_mean":
        thr = math.exp(np.mean(np.log(counts)))
        rare = {j for j in range(k) if counts[j] < thr}
    elif rule == "fraction":
        if not 0 <= rare_fraction <= 1:
            raise ValueError("rare_fraction must be in [0, 1]")
        n_rare = math.ceil(rare_fraction * k)
        order = sorted(range(k), key=lambda j: (counts[j], -j))
        rare = set(order[:n_rare])
    else:
        raise ValueError(f"unknown partition rule {rule!r}")
    return RareFreqPartition(frozenset(rare), frozenset(set(range(k)) - rare), rule)


def upsample(centers: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbour upsampling of the trailing (h, w) axes by integer factors."""
    h, w = centers.shape[-2:]
    if size[0] % h or size[1] % w:
        raise ValueError(f"cannot upsample centers {h}x{w} to feature map {size[0]}x{size[1]}")
    fh, fw = size[0] // h, size[1] // w
    if fh == 1 and fw == 1:
        return centers
    return centers.repeat_interleave(fh, dim=-2).repeat_interleave(fw, dim=-1)


class ClassCenters(nn.Module):
    """``K`` learnable centers per class, stored as (classes, K, C, h, w)."""

    def __init__(self, num_classes: int, k: int, channels: int, hw: tuple[int, int] = (1, 1)):
        super().__init__()
        if k < 1:
            raise ValueError("K must be >= 1")
        self.num_classes = num_classes
        self.k = k
        self.centers = nn.Parameter(torch.zeros(num_classes, k, channels, *hw))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    def upsampled(self, size: tuple[int, int]) -> torch.Tensor:
        return upsample(self.centers, size)

    @torch.no_grad()
    def init_from_features(self, features: torch.Tensor, labels: torch.Tensor, seed: int = 0) -> None:
        """k-means++ initialisation per class from (N, C, H, W) features."""
        c, h, w = self.centers.shape[2:]
        fh, fw = features.shape[-2] // h, features.shape[-1] // w
        pooled = features.reshape(len(features), c, h, fh, w, fw).mean(dim=(3, 5))
        data = pooled.reshape(len(features), -1).double().cpu().numpy()
        labels = labels.cpu().numpy()
        rng = np.random.default_rng(seed)
        out = np.zeros((self.num_classes, self.k, data.shape[1]))
        for cls in range(self.num_classes):
            members = data[labels == cls]
            if len(members) == 0:
                continue
            if len(members) <= self.k:
                out[cls] = members[np.arange(self.k) % len(members)]
                continue
            cent, _ = kmeans2(members, self.k, minit="++", seed=rng)
            out[cls] = cent
        self.centers.copy_(torch.as_tensor(out, dtype=self.centers.dtype).reshape(self.centers.shape))
        self.initialized.fill_(True)


@dataclass
class CenterAssignment:
    gamma: torch.Tensor  # (B, K), rows sum to 1
    nearest_index: torch.Tensor  # (B,)
    distances: torch.Tensor  # (B, K)


def assign_centers(feature_map: torch.Tensor, labels: torch.Tensor, centers: ClassCenters,
                   temperature: float = 1.0) -> CenterAssignment:
    """Softmax over negative squared distances to the sample's own class centers.

    The nearest index is the smallest-distance center, lowest index on ties.
    """
    up = centers.upsampled(feature_map.shape[-2:])[labels]
    dist = ((feature_map.unsqueeze(1) - up) ** 2).flatten(2).sum(-1)
    gamma = torch.softmax(-dist / temperature, dim=1)
    return CenterAssignment(gamma, torch.argmin(dist.detach(), dim=1), dist)


class PairHead(nn.Module):
    """Same-class probability for a pair of pooled features.

    Input is ``[a + b, |a - b|]`` so the output is exactly symmetric.
    """

    def __init__(self, channels: int, hidden: int = 64, zero_init: bool = True):
        super().__init__()
        self.fc1 = nn.Linear(2 * channels, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        if zero_init:
            nn.init.zeros_(self.fc2.weight)
            nn.init.zeros_(self.fc2.bias)

    def forward(self, a: torch.Tensor, b: torch.Tensor, frozen: bool = False) -> torch.Tensor:
        if a.dim() > 2:
            a = a.flatten(2).mean(-1)
            b = b.flatten(2).mean(-1)
        z = torch.cat([a + b, (a - b).abs()], dim=1)
        if frozen:
            h = F.relu(F.linear(z, self.fc1.weight.detach(), self.fc1.bias.detach()))
            logit = F.linear(h, self.fc2.weight.detach(), self.fc2.bias.detach())
        else:
            logit = self.fc2(F.relu(self.fc1(z)))
        return torch.sigmoid(logit.squeeze(1)).clamp(PAIR_PROB_CLAMP, 1 - PAIR_PROB_CLAMP)


def pair_prob(feature_a: torch.Tensor, feature_b: torch.Tensor, head: PairHead) -> torch.Tensor:
    return head(feature_a, feature_b)


class VectorTransform(nn.Module):
    """Shape-preserving 1x1 convolution, initialised to the identity."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=1, bias=False)
        with torch.no_grad():
            self.conv.weight.copy_(torch.eye(channels).reshape(channels, channels, 1, 1))

    def forward(self, z: torch.Tensor, detach_params: bool = False) -> torch.Tensor:
        w = self.conv.weight.detach() if detach_params else self.conv.weight
        return F.conv2d(z, w)


@dataclass
class Displacement:
    fd: torch.Tensor
    center: torch.Tensor  # up(C_K) that was subtracted


def feature_displacement(feature_map: torch.Tensor, labels: torch.Tensor, centers: ClassCenters,
                         assignment: CenterAssignment) -> Displacement:
    up = centers.upsampled(feature_map.shape[-2:])
    if up.shape[2:] != feature_map.shape[1:]:
        raise ValueError(f"upsampled centers {tuple(up.shape[2:])} do not match features {tuple(feature_map.shape[1:])}")
    nearest = up[labels, assignment.nearest_index]
    return Displacement(feature_map - nearest, nearest)


@dataclass
class MVInputs:
    transformed: torch.Tensor  # T(fd_freq), gradients reach T
    rare_fd: torch.Tensor
    freq_fd: torch.Tensor
    new_for_pair: torch.Tensor  # T(fd_freq) + x_rare with gradients reaching T
    rare_features: torch.Tensor


@dataclass
class GenerationResult:
    features: torch.Tensor
    labels: torch.Tensor
    n_generated: int
    mv_inputs: MVInputs | None
    rare_index: torch.Tensor
    partner_index: torch.Tensor


def generate_rare_samples(batch_features: torch.Tensor, batch_labels: torch.Tensor, centers: ClassCenters,
                          transform: VectorTransform, partition: RareFreqPartition, epoch: int, t_th: int,
                          generator: torch.Generator | None = None,
                          assignment: CenterAssignment | None = None) -> GenerationResult:
    """Append one generated sample per rare-class sample once ``epoch > t_th``.

    Each rare sample draws a frequent partner uniformly from the batch; the
    partner's displacement from its nearest center, passed through the
    transform, is added to the rare sample. The appended copy uses the
    transform with detached parameters so only the MV terms train it.
    """
    empty = torch.zeros(0, dtype=torch.long)
    unchanged = GenerationResult(batch_features, batch_labels, 0, None, empty, empty)
    if epoch <= t_th:
        return unchanged
    rare_mask = partition.rare_mask(centers.num_classes).to(batch_labels.device)[batch_labels]
    rare_idx = torch.nonzero(rare_mask).flatten()
    freq_idx = torch.nonzero(~rare_mask).flatten()
    if len(rare_idx) == 0 or len(freq_idx) == 0:
        return unchanged
    if assignment is None:
        assignment = assign_centers(batch_features, batch_labels, centers)
    pick = torch.randint(len(freq_idx), (len(rare_idx),), generator=generator)
    partner_idx = freq_idx[pick]

    disp = feature_displacement(batch_features, batch_labels, centers, assignment)
    fd_freq = disp.fd[partner_idx]
    rare_fd = disp.fd[rare_idx]
    x_rare = batch_features[rare_idx]
    transformed = transform(fd_freq)
    new = transform(fd_freq, detach_params=True) + x_rare
    mv = MVInputs(transformed, rare_fd, fd_freq, transformed + x_rare, x_rare)
    return GenerationResult(
        torch.cat([batch_features, new]),
        torch.cat([batch_labels, batch_labels[rare_idx]]),
        len(rare_idx),
        mv,
        rare_idx,
        partner_idx,
    )


@dataclass
class RSGAux:
    features: torch.Tensor  # features fed to CESC (generated samples included)
    labels: torch.Tensor
    assignment: CenterAssignment
    pair_probs: torch.Tensor
    pair_targets: torch.Tensor
    n_generated: int
    mv_inputs: MVInputs | None
    mv_pair_probs: torch.Tensor | None


class RSGBlock(nn.Module):
    """Center estimation, contrastive pair head and vector transform in one block."""

    def __init__(self, num_classes: int, channels: int, partition: RareFreqPartition, k: int = 3,
                 center_hw: tuple[int, int] = (1, 1), pair_hidden: int = 64, temperature: float = 1.0):
        super().__init__()
        self.centers = ClassCenters(num_classes, k, channels, center_hw)
        self.pair_head = PairHead(channels, pair_hidden)
        self.transform = VectorTransform(channels)
        self.partition = partition
        self.temperature = temperature

    def forward(self, x: torch.Tensor, labels: torch.Tensor, epoch: int, t_th: int,
                generator: torch.Generator | None = None):
        assignment = assign_centers(x, labels, self.centers, self.temperature)
        generating = epoch > t_th

        b = x.shape[0]
        perm = torch.randperm(b, generator=generator)
        n_pairs = b // 2
        a_idx, b_idx = perm[:n_pairs], perm[n_pairs : 2 * n_pairs]
        pair_probs = self.pair_head(x[a_idx], x[b_idx], frozen=generating)
        pair_targets = (labels[a_idx] == labels[b_idx]).to(x.dtype)

        gen = generate_rare_samples(x, labels, self.centers, self.transform, self.partition,
                                    epoch, t_th, generator, assignment)
        mv_pair = None
        cesc_x, cesc_labels, cesc_assign = x, labels, assignment
        if gen.mv_inputs is not None:
            mv_pair = self.pair_head(gen.mv_inputs.new_for_pair, gen.mv_inputs.rare_features, frozen=True)
            # generated samples join the center term like real ones
            cesc_x, cesc_labels = gen.features, gen.labels
            cesc_assign = assign_centers(cesc_x, cesc_labels, self.centers, self.temperature)
        aux = RSGAux(cesc_x, cesc_labels, cesc_assign, pair_probs, pair_targets, gen.n_generated,
                     gen.mv_inputs, mv_pair)
        return gen.features, gen.labels, aux
