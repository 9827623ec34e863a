"""Executable stereo network: feature cells, concatenation cost volume, 3D
matching cells and soft-argmax disparity regression, plus the supervised and
photometric losses.

Tensors follow the torch layout: images N x 3 x H x W, disparities N x H x W.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .arch import EDGES, CellGenotype, NetworkTopology, OperationKind

NEG_SLOPE = 0.1
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PHOTO_ALPHA = 0.85
SMOOTH_WEIGHT = 0.1


def conv_block(dim: int, c_in: int, c_out: int, kernel: int = 3, stride: int = 1) -> nn.Sequential:
    Conv = nn.Conv2d if dim == 2 else nn.Conv3d
    Norm = nn.BatchNorm2d if dim == 2 else nn.BatchNorm3d
    return nn.Sequential(
        Conv(c_in, c_out, kernel, stride=stride, padding=kernel // 2),
        Norm(c_out),
        nn.LeakyReLU(NEG_SLOPE),
    )


def _edge_name(i: int, j: int) -> str:
    return f"e{i}{j}"


class FreezableModule(nn.Module):
    """A module that can be frozen: no gradients, normalisation stats fixed."""

    frozen = False

    def freeze(self):
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        return super().train(mode and not self.frozen)


class Cell(FreezableModule):
    """A fixed cell: intermediate nodes sum their incoming edges, the output
    concatenates the intermediates and projects back to ``channels``."""

    def __init__(self, genotype: CellGenotype, channels: int):
        super().__init__()
        self.genotype = genotype
        self.dim = 2 if genotype.family == "feature" else 3
        self.ops = nn.ModuleDict()
        for (i, j), op in genotype.ordered_edges():
            if op != OperationKind.SKIP:
                self.ops[_edge_name(i, j)] = conv_block(self.dim, channels, channels)
        self.project = conv_block(self.dim, 3 * channels, channels, kernel=1)

    def edge(self, i, j, x):
        name = _edge_name(i, j)
        return self.ops[name](x) if name in self.ops else x

    def forward(self, s0, s1):
        nodes = [s0, s1]
        for j in (2, 3, 4):
            nodes.append(sum(self.edge(i, j, nodes[i]) for i in range(j)))
        return self.project(torch.cat(nodes[2:], dim=1))


class SuperCell(nn.Module):
    """Weight-sharing cell holding a convolution on every edge; a selection
    decides per forward call which edges use it and which are skips."""

    def __init__(self, family: str, channels: int):
        super().__init__()
        self.family = family
        self.dim = 2 if family == "feature" else 3
        self.ops = nn.ModuleDict({_edge_name(i, j): conv_block(self.dim, channels, channels)
                                  for i, j in EDGES})
        self.project = conv_block(self.dim, 3 * channels, channels, kernel=1)
        self.choices = (0,) * len(EDGES)

    def forward(self, s0, s1):
        nodes = [s0, s1]
        use = dict(zip(EDGES, self.choices))
        for j in (2, 3, 4):
            acc = 0
            for i in range(j):
                x = nodes[i]
                acc = acc + (self.ops[_edge_name(i, j)](x) if use[(i, j)] == 0 else x)
            nodes.append(acc)
        return self.project(torch.cat(nodes[2:], dim=1))

    def extract(self, genotype: CellGenotype, channels: int) -> Cell:
        """A fixed cell for ``genotype`` initialised from the shared weights."""
        cell = Cell(genotype, channels)
        for name, op in cell.ops.items():
            op.load_state_dict(self.ops[name].state_dict())
        cell.project.load_state_dict(self.project.state_dict())
        return cell


class TaskHead(FreezableModule):
    """Per-task stems and final cost projection."""

    def __init__(self, topology: NetworkTopology):
        super().__init__()
        cf, cm = topology.feature_channels, topology.matching_channels
        stems, c_in = [], 3
        for k, s in topology.feature_stems:
            stems.append(conv_block(2, c_in, cf, kernel=k, stride=s))
            c_in = cf
        self.feature_stems = nn.ModuleList(stems)
        stems, c_in = [], 2 * cf
        for k, s in topology.matching_stems:
            stems.append(conv_block(3, c_in, cm, kernel=k, stride=s))
            c_in = cm
        self.matching_stems = nn.ModuleList(stems)
        self.cost = nn.Conv3d(cm, 1, 3, padding=1)


def pad_to_multiple(x: torch.Tensor, m: int = 3) -> torch.Tensor:
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x


def build_cost_volume(f_left: torch.Tensor, f_right: torch.Tensor, max_disp_feat: int) -> torch.Tensor:
    """N x 2C x D x h x w volume with V[:, :, d, y, x] = [f_left(y, x), f_right(y, x - d)]."""
    if max_disp_feat <= 0:
        raise ValueError(f"max_disp_feat must be positive, got {max_disp_feat}")
    if f_left.shape != f_right.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_left.shape)} vs {tuple(f_right.shape)}")
    n, c, h, w = f_left.shape
    vol = f_left.new_zeros(n, 2 * c, max_disp_feat, h, w)
    for d in range(max_disp_feat):
        if d == 0:
            vol[:, :c, 0] = f_left
            vol[:, c:, 0] = f_right
        elif d < w:
            vol[:, :c, d] = f_left
            vol[:, c:, d, :, d:] = f_right[:, :, :, :-d]
        else:
            vol[:, :c, d] = f_left
    return vol


def soft_argmin(cost: torch.Tensor) -> torch.Tensor:
    """Expected disparity index under softmax(-cost) along dim 1."""
    if not torch.isfinite(cost).all():
        raise ValueError("cost volume contains non-finite values")
    prob = F.softmax(-cost, dim=1)
    d = torch.arange(cost.shape[1], dtype=cost.dtype, device=cost.device)
    return (prob * d.view(1, -1, 1, 1)).sum(dim=1)


def regress_disparity(cost: torch.Tensor, scale: int = 3, out_size=None) -> torch.Tensor:
    """Soft-argmax at feature resolution, then bilinear x``scale`` upsampling
    with disparities multiplied by ``scale``. ``cost`` is N x D x h x w."""
    disp = soft_argmin(cost)
    size = out_size or (disp.shape[-2] * scale, disp.shape[-1] * scale)
    up = F.interpolate(disp.unsqueeze(1), size=size, mode="bilinear", align_corners=False)
    return up.squeeze(1) * scale


class StereoModel(nn.Module):
    """Shared forward pass; subclasses decide what sits in each layer slot."""

    def __init__(self, topology: NetworkTopology, head: TaskHead):
        super().__init__()
        self.topology = topology
        self.head = head

    def layers(self):
        raise NotImplementedError

    def extract_features(self, image: torch.Tensor) -> torch.Tensor:
        layers = self.layers()[: self.topology.feature_layers]
        x = pad_to_multiple(image, self.topology.stem_stride)
        outs = []
        for stem in self.head.feature_stems:
            x = stem(x)
            outs.append(x)
        s0, s1 = outs[-2], outs[-1]
        for cell in layers:
            s0, s1 = s1, cell(s0, s1)
        return s1

    def match(self, volume: torch.Tensor) -> torch.Tensor:
        layers = self.layers()[self.topology.feature_layers:]
        x, outs = volume, []
        for stem in self.head.matching_stems:
            x = stem(x)
            outs.append(x)
        s0, s1 = outs[-2], outs[-1]
        for cell in layers:
            s0, s1 = s1, cell(s0, s1)
        return self.head.cost(s1).squeeze(1)

    def forward(self, left: torch.Tensor, right: torch.Tensor) -> torch.Tensor:
        h, w = left.shape[-2:]
        n = left.shape[0]
        # one pass over both views keeps batch statistics shared between them
        feats = self.extract_features(torch.cat([left, right], dim=0))
        vol = build_cost_volume(feats[:n], feats[n:], self.topology.max_disp_feat)
        cost = self.match(vol)
        disp = regress_disparity(cost, self.topology.stem_stride)
        return disp[:, :h, :w]


class TaskModel(StereoModel):
    """The network of one task: its head plus one (possibly shared) cell per layer."""

    def __init__(self, topology: NetworkTopology, head: TaskHead, cells, owner_task: int,
                 cell_ids=None):
        super().__init__(topology, head)
        if len(cells) != topology.num_layers:
            raise ValueError(f"path has {len(cells)} cells, topology needs {topology.num_layers}")
        self.cells = nn.ModuleList(cells)
        self.owner_task = owner_task
        self.cell_ids = list(cell_ids) if cell_ids is not None else None

    def layers(self):
        return list(self.cells)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


class SuperNet(StereoModel):
    """One-shot network used during cell search."""

    def __init__(self, topology: NetworkTopology, head: TaskHead | None = None):
        super().__init__(topology, head or TaskHead(topology))
        self.cells = nn.ModuleList(
            SuperCell(topology.family_of(j), topology.width_of(j)) for j in range(topology.num_layers)
        )

    def layers(self):
        return list(self.cells)

    def select(self, feature_choices, matching_choices):
        for j, cell in enumerate(self.cells):
            cell.choices = tuple(feature_choices if cell.family == "feature" else matching_choices)
        return self

    def extract(self, feature: CellGenotype, matching: CellGenotype) -> list[Cell]:
        out = []
        for j, sc in enumerate(self.cells):
            g = feature if sc.family == "feature" else matching
            out.append(sc.extract(g, self.topology.width_of(j)))
        return out


# -- losses ----------------------------------------------------------------------------

def supervision_mask(gt: torch.Tensor, max_disparity: float, valid=None) -> torch.Tensor:
    mask = (gt > 0) & (gt < max_disparity)
    if valid is not None:
        mask = mask & valid.bool()
    return mask


def smooth_l1_loss(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    mask = mask.bool()
    if not mask.any():
        raise ValueError("smooth L1 loss needs at least one valid pixel")
    e = (pred - gt)[mask]
    a = e.abs()
    return torch.where(a < 1, 0.5 * e * e, a - 0.5).mean()


def warp_right_to_left(right: torch.Tensor, disparity: torch.Tensor):
    """Reconstruct the left view by sampling ``right`` at x - d with linear
    interpolation along rows. Returns (image, valid) where ``valid`` marks
    pixels whose source position lies inside the right image."""
    n, c, h, w = right.shape
    xs = torch.arange(w, dtype=disparity.dtype, device=disparity.device).view(1, 1, w)
    src = xs - disparity
    x0 = torch.floor(src)
    frac = src - x0
    x0 = x0.long()
    x1 = x0 + 1
    valid = (src >= 0) & (src <= w - 1)
    # at the right border frac is 0, so the x1 tap never contributes
    x0c = x0.clamp(0, w - 1)
    x1c = x1.clamp(0, w - 1)
    idx0 = x0c.unsqueeze(1).expand(n, c, h, w)
    idx1 = x1c.unsqueeze(1).expand(n, c, h, w)
    v0 = torch.gather(right, 3, idx0)
    v1 = torch.gather(right, 3, idx1)
    f = frac.unsqueeze(1)
    out = (1 - f) * v0 + f * v1
    out = out * valid.unsqueeze(1).to(out.dtype)
    return out, valid


def ssim(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM over 3x3 windows (reflection padded), N x C x H x W."""
    pad = lambda t: F.pad(t, (1, 1, 1, 1), mode="reflect")
    pool = lambda t: F.avg_pool2d(pad(t), 3, 1)
    mu_x, mu_y = pool(x), pool(y)
    sigma_x = pool(x * x) - mu_x ** 2
    sigma_y = pool(y * y) - mu_y ** 2
    sigma_xy = pool(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    return num / den


def photometric_terms(left, right, disparity, alpha=PHOTO_ALPHA):
    """Per-pixel SSIM and L1 terms (N x H x W) and the warp validity mask."""
    recon, valid = warp_right_to_left(right, disparity)
    ssim_term = ((1 - ssim(left, recon)) / 2).mean(dim=1)
    l1_term = (left - recon).abs().mean(dim=1)
    return alpha * ssim_term, (1 - alpha) * l1_term, valid


def smoothness_loss(disparity: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Edge-aware first-order smoothness: |grad d| * exp(-|grad I|)."""
    dx = (disparity[:, :, 1:] - disparity[:, :, :-1]).abs()
    dy = (disparity[:, 1:, :] - disparity[:, :-1, :]).abs()
    ix = (image[:, :, :, 1:] - image[:, :, :, :-1]).abs().mean(dim=1)
    iy = (image[:, :, 1:, :] - image[:, :, :-1, :]).abs().mean(dim=1)
    return (dx * torch.exp(-ix)).mean() + (dy * torch.exp(-iy)).mean()


def self_supervised_loss(left, right, disparity, alpha=PHOTO_ALPHA, smooth_weight=SMOOTH_WEIGHT):
    ssim_term, l1_term, valid = photometric_terms(left, right, disparity, alpha)
    if valid.any():
        photo = (ssim_term + l1_term)[valid].mean()
    else:
        photo = disparity.sum() * 0
    return photo + smooth_weight * smoothness_loss(disparity, left)
