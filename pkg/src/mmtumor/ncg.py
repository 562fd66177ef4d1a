"""Normal CT generator: slice-wise tumor removal by inpainting.

The learned inpainter is a fully convolutional 2D network whose core blocks
combine a local convolution branch with a global spectral branch (real-FFT
domain convolution), giving every output pixel an image-wide receptive field.
A median-filter inpainter is provided as an ablation baseline.
"""

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F
from scipy import ndimage

from . import checkpoint
from .errors import EmptyDatasetError, ShapeMismatchError, UntrainedModelError
from .maskops import dilate_annotation
from .volumes import BinaryMask3D, MultimodalCase, Volume3D, preprocess_case


@dataclass
class FfcInpainterConfig:
    base_channels: int = 32
    n_ffc_blocks: int = 4
    global_branch_ratio: float = 0.5
    downsample_stages: int = 2

    def __post_init__(self):
        if self.base_channels <= 0 or self.n_ffc_blocks <= 0 or self.downsample_stages <= 0:
            raise ValueError("channel/block/stage counts must be positive")
        if not 0.0 < self.global_branch_ratio < 1.0:
            raise ValueError("global_branch_ratio must lie in (0, 1)")


class FourierUnit(nn.Module):
    """Pointwise convolution in the real-FFT domain (global receptive field)."""

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels * 2, channels * 2, kernel_size=1)

    def forward(self, x):
        b, c, h, w = x.shape
        spec = torch.fft.rfft2(x, norm="ortho")
        stacked = torch.cat([spec.real, spec.imag], dim=1)
        stacked = F.relu(self.conv(stacked))
        spec = torch.complex(stacked[:, :c], stacked[:, c:])
        return torch.fft.irfft2(spec, s=(h, w), norm="ortho")


class SpectralTransform(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv_in = nn.Conv2d(channels, channels, kernel_size=1)
        self.fu = FourierUnit(channels)
        self.conv_out = nn.Conv2d(channels, channels, kernel_size=1)

    def forward(self, x):
        y = F.relu(self.conv_in(x))
        return self.conv_out(self.fu(y) + y)


class FfcBlock(nn.Module):
    """Two parallel branches (local conv / global spectral) with cross fusion."""

    def __init__(self, channels, ratio):
        super().__init__()
        self.cg = max(1, int(round(channels * ratio)))
        self.cl = channels - self.cg
        self.l2l = nn.Conv2d(self.cl, self.cl, 3, padding=1)
        self.l2g = nn.Conv2d(self.cl, self.cg, 3, padding=1)
        self.g2l = nn.Conv2d(self.cg, self.cl, 3, padding=1)
        self.g2g = SpectralTransform(self.cg)

    def forward(self, x):
        xl, xg = x[:, :self.cl], x[:, self.cl:]
        out_l = F.relu(self.l2l(xl) + self.g2l(xg))
        out_g = F.relu(self.l2g(xl) + self.g2g(xg))
        return torch.cat([out_l, out_g], dim=1)


class FfcResBlock(nn.Module):
    def __init__(self, channels, ratio):
        super().__init__()
        self.ffc = FfcBlock(channels, ratio)

    def forward(self, x):
        return x + self.ffc(x)


class FfcInpainter(nn.Module):
    """Inpainting network over stacked [masked image, mask] input."""

    def __init__(self, config=None):
        super().__init__()
        self.config = config or FfcInpainterConfig()
        cfg = self.config
        self.trained = False
        self.loss_history = []

        chans = [cfg.base_channels * (2 ** i) for i in range(cfg.downsample_stages + 1)]
        self.stem = nn.Conv2d(2, chans[0], 3, padding=1)
        self.downs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1)
            for i in range(cfg.downsample_stages))
        self.blocks = nn.Sequential(*[
            FfcResBlock(chans[-1], cfg.global_branch_ratio) for _ in range(cfg.n_ffc_blocks)])
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(chans[i + 1], chans[i], 4, stride=2, padding=1)
            for i in reversed(range(cfg.downsample_stages)))
        self.head = nn.Conv2d(chans[0], 1, 3, padding=1)

    def forward(self, x):
        # pad so strided stages divide evenly, crop back at the end
        h, w = x.shape[-2:]
        mult = 2 ** self.config.downsample_stages
        ph, pw = (-h) % mult, (-w) % mult
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect")
        y = F.relu(self.stem(x))
        for d in self.downs:
            y = F.relu(d(y))
        y = self.blocks(y)
        for u in self.ups:
            y = F.relu(u(y))
        y = self.head(y)
        return y[..., :h, :w]


def inpaint_slice(net, x, m):
    """Fill the m=1 region of x with the network prediction.

    Composited as x*(1-m) + prediction*m, so pixels outside the mask are
    returned bit-exact.
    """
    x = np.asarray(x, dtype=np.float32)
    m = np.asarray(m)
    if x.shape != m.shape:
        raise ShapeMismatchError(f"slice {x.shape} vs mask {m.shape}")
    if not np.all(np.isin(np.unique(m), (0, 1))):
        raise ValueError("mask must be binary")
    if not getattr(net, "trained", False):
        raise UntrainedModelError("inpainter has not been trained")
    mf = m.astype(np.float32)
    if not m.any():
        return x.copy()
    with torch.no_grad():
        inp = torch.from_numpy(np.stack([x * (1.0 - mf), mf])[None])
        pred = net(inp)[0, 0].numpy()
    out = x.copy()
    fill = m > 0
    out[fill] = pred[fill]
    return out


def generate_normal_case(net, case):
    """Remove tumor foreground from all 4 phases under the shared dilated PVP mask."""
    dilated = dilate_annotation(case.tumor_mask)
    phases = []
    for p in case.phases:
        data = p.data.copy()
        for z in range(data.shape[0]):
            msl = dilated.data[z]
            if msl.any():
                data[z] = inpaint_slice(net, data[z], msl)
        phases.append(Volume3D(data, p.spacing))
    return MultimodalCase(
        case_id=case.case_id,
        phases=phases,
        tumor_mask=BinaryMask3D(np.zeros(case.shape, dtype=np.uint8)),
        liver_mask=case.liver_mask)


def random_blob_mask(shape, rng):
    """Union of 1-3 dilated random walks; irregular training-time inpaint masks."""
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        y, x = int(rng.integers(0, h)), int(rng.integers(0, w))
        steps = int(rng.integers(h, 3 * h))
        for _ in range(steps):
            mask[y, x] = True
            dy, dx = rng.integers(-1, 2), rng.integers(-1, 2)
            y = int(np.clip(y + dy, 0, h - 1))
            x = int(np.clip(x + dx, 0, w - 1))
        mask = ndimage.binary_dilation(mask, iterations=int(rng.integers(1, 3)))
    if not mask.any():
        mask[h // 2, w // 2] = True
    return mask.astype(np.float32)


def _tumor_free_slices(dataset):
    pool = []
    for case in dataset:
        pcase = preprocess_case(case)
        dilated = dilate_annotation(case.tumor_mask)
        for z in range(case.shape[0]):
            if dilated.data[z].any():
                continue
            for p in pcase.phases:
                pool.append(p.data[z])
    return pool


def train_inpainter(dataset, config, epochs, seed, steps_per_epoch=50, batch_size=8, lr=1e-3):
    """Self-supervised training: punch random blob masks into tumor-free slices
    and regress the hidden content with a masked L1 loss."""
    if not dataset:
        raise EmptyDatasetError("no cases to train the inpainter on")
    torch.manual_seed(seed)
    net = FfcInpainter(config)
    if epochs <= 0:
        return net

    pool = _tumor_free_slices(dataset)
    if not pool:
        raise EmptyDatasetError("no tumor-free slices available")
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    shape = pool[0].shape

    for _ in range(epochs):
        losses = []
        for _ in range(steps_per_epoch):
            idx = rng.integers(0, len(pool), size=batch_size)
            xs = np.stack([pool[i] for i in idx])
            ms = np.stack([random_blob_mask(shape, rng) for _ in range(batch_size)])
            x = torch.from_numpy(xs[:, None].astype(np.float32))
            m = torch.from_numpy(ms[:, None])
            pred = net(torch.cat([x * (1 - m), m], dim=1))
            loss = (torch.abs(pred - x) * m).sum() / m.sum().clamp(min=1.0)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        net.loss_history.append(float(np.mean(losses)))
    net.trained = True
    return net


def median_inpaint_slice(x, m, kernel=3):
    """Baseline: fill masked pixels with the median of known neighbors,
    iterating inward until the mask is exhausted."""
    if kernel < 3 or kernel % 2 == 0:
        raise ValueError("kernel must be an odd integer >= 3")
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m)
    if x.shape != m.shape:
        raise ShapeMismatchError(f"slice {x.shape} vs mask {m.shape}")
    out = x.copy()
    unknown = m > 0
    r = kernel // 2
    h, w = x.shape
    while unknown.any():
        fills = {}
        for y0, x0 in np.argwhere(unknown):
            ys = slice(max(0, y0 - r), min(h, y0 + r + 1))
            xs = slice(max(0, x0 - r), min(w, x0 + r + 1))
            known = ~unknown[ys, xs]
            if known.any():
                fills[(y0, x0)] = float(np.median(out[ys, xs][known]))
        if not fills:
            break  # mask covers the whole slice and nothing is known
        for (y0, x0), v in fills.items():
            out[y0, x0] = v
            unknown[y0, x0] = False
    return out.astype(np.float32)


# --- checkpointing ---

CKPT_KIND = "ffc_inpainter"


def save_inpainter(net, path):
    checkpoint.save_checkpoint(
        path, CKPT_KIND, asdict(net.config), net.state_dict(),
        trained=net.trained, extra={"loss_history": net.loss_history})


def load_inpainter(path):
    payload = checkpoint.load_checkpoint(path, CKPT_KIND)
    net = FfcInpainter(FfcInpainterConfig(**payload["config"]))
    net.load_state_dict(payload["state_dict"])
    net.trained = payload["trained"]
    net.loss_history = payload["extra"].get("loss_history", [])
    return net
