"""Multimodal segmenter: 4-channel U-shaped network, hybrid real+synthetic
training stream, combined Dice/cross-entropy loss and sliding-window inference."""

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import checkpoint
from .errors import (BadRangeError, EmptyInputError, NoDataError, ShapeMismatchError,
                     UntrainedModelError, WrongChannelCountError)
from .maskops import ElasticParams, postprocess_prediction
from .mcs import synthesize_case
from .volumes import (DEFAULT_WINDOW, MultimodalCase, Volume3D, augment, crop_around,
                      preprocess_case, random_crop)

N_CHANNELS = 4
N_CLASSES = 2


@dataclass
class SegLossConfig:
    gamma: float = 0.5
    dice_smooth: float = 1e-5

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be > 0")


@dataclass
class SegBatchItem:
    input: np.ndarray      # (4, D, H, W)
    target: np.ndarray     # (D, H, W) in {0,1}
    provenance: str        # "real" | "synthetic"


class _ConvBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.norm = nn.InstanceNorm3d(cout, affine=True)

    def forward(self, x):
        x = F.leaky_relu(self.conv1(x), 0.01)
        return F.leaky_relu(self.norm(self.conv2(x)), 0.01)


class UNet3D(nn.Module):
    """Compact 3D U-shaped segmentation backbone, 4 channels in, 2 classes out."""

    def __init__(self, base_channels=16):
        super().__init__()
        self.base_channels = base_channels
        self.trained = False
        b = base_channels
        self.enc1 = _ConvBlock(N_CHANNELS, b)
        self.enc2 = _ConvBlock(b, b * 2)
        self.bott = _ConvBlock(b * 2, b * 4)
        self.pool = nn.MaxPool3d(2)
        self.up2 = nn.ConvTranspose3d(b * 4, b * 2, 2, stride=2)
        self.dec2 = _ConvBlock(b * 4, b * 2)
        self.up1 = nn.ConvTranspose3d(b * 2, b, 2, stride=2)
        self.dec1 = _ConvBlock(b * 2, b)
        self.head = nn.Conv3d(b, N_CLASSES, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        bo = self.bott(self.pool(e2))
        d2 = self.dec2(torch.cat([self.up2(bo), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return self.head(d1)


def seg_forward(net, input_patch):
    """Per-voxel class probabilities for one 4-channel patch."""
    arr = np.asarray(input_patch, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[0] != N_CHANNELS:
        raise WrongChannelCountError(
            f"expected ({N_CHANNELS}, D, H, W) input, got {arr.shape}")
    with torch.no_grad():
        logits = net(torch.from_numpy(arr[None]))
        probs = torch.softmax(logits, dim=1)
    return probs[0].numpy()


def seg_loss(probs, target, cfg):
    """Dice loss on the foreground channel plus gamma-weighted cross-entropy.

    `probs` must already be normalized per voxel ((2, ...) or (B, 2, ...)).
    """
    p = probs if torch.is_tensor(probs) else torch.from_numpy(np.asarray(probs, dtype=np.float32))
    g = target if torch.is_tensor(target) else torch.from_numpy(np.asarray(target, dtype=np.float32))
    g = g.float()
    if p.dim() == g.dim():  # channel axis present on probs only
        raise ShapeMismatchError(f"probs {tuple(p.shape)} need a class axis over target {tuple(g.shape)}")
    ch_axis = 0 if p.dim() == 4 else 1
    if p.shape[ch_axis] != N_CLASSES:
        raise ShapeMismatchError(f"expected {N_CLASSES} class channels, got {p.shape[ch_axis]}")
    fg = p.select(ch_axis, 1)
    bg = p.select(ch_axis, 0)
    if fg.shape != g.shape:
        raise ShapeMismatchError(f"probs spatial {tuple(fg.shape)} vs target {tuple(g.shape)}")
    s = cfg.dice_smooth
    dice = 1.0 - (2.0 * (fg * g).sum() + s) / (fg.sum() + g.sum() + s)
    eps = 1e-12
    ce = -(g * torch.log(fg.clamp(min=eps)) + (1.0 - g) * torch.log(bg.clamp(min=eps))).mean()
    return dice + cfg.gamma * ce


def prepare_input(phases):
    """Stack 1-4 phases into a 4-channel input, duplicating per the fixed
    replication patterns: [a]*4, [a,a,b,b], [a,a,b,c], or identity."""
    if len(phases) == 0:
        raise EmptyInputError("need at least one phase")
    if len(phases) > N_CHANNELS:
        raise WrongChannelCountError(f"at most {N_CHANNELS} phases, got {len(phases)}")
    arrs = [p.data if isinstance(p, Volume3D) else np.asarray(p, dtype=np.float32)
            for p in phases]
    shape = arrs[0].shape
    for a in arrs:
        if a.shape != shape:
            raise ShapeMismatchError("all phases must share one shape")
    if len(arrs) == 1:
        order = [0, 0, 0, 0]
    elif len(arrs) == 2:
        order = [0, 0, 1, 1]
    elif len(arrs) == 3:
        order = [0, 0, 1, 2]
    else:
        order = [0, 1, 2, 3]
    return np.stack([arrs[i] for i in order]).astype(np.float32)


def hybrid_stream(reals, normals, ae, eps_net, sched, p_synth, seed,
                  patch=32, axes_range=(3.0, 8.0), elastic=None, window=DEFAULT_WINDOW):
    """Endless stream of training items; each is synthetic with probability
    p_synth (tumor grown on a random inpainted normal), else a real case.
    Preprocessing, cropping and augmentation are applied either way."""
    if not 0.0 <= p_synth <= 1.0:
        raise BadRangeError(f"p_synth must be in [0,1], got {p_synth}")
    if p_synth < 1.0 and not reals:
        raise NoDataError("p_synth < 1 requires real cases")
    if p_synth > 0.0 and not normals:
        raise NoDataError("p_synth > 0 requires normal cases and MCS models")
    elastic = elastic or ElasticParams()
    rng = np.random.default_rng(seed)

    def gen():
        i = 0
        while True:
            i += 1
            synthetic = rng.random() < p_synth
            if synthetic:
                case = normals[rng.integers(0, len(normals))]
                pre = preprocess_case(case, *window)
                liver_voxels = np.argwhere(pre.liver_mask.data > 0)
                center = liver_voxels[rng.integers(0, len(liver_voxels))]
                crop = crop_around(pre, tuple(center), (patch,) * 3)
                syn_seed = int(rng.integers(0, 2**31 - 1))
                crop = synthesize_case(ae, eps_net, crop, sched, axes_range, elastic, syn_seed)
                crop = augment(crop, int(rng.integers(0, 2**31 - 1)))
            else:
                case = reals[rng.integers(0, len(reals))]
                pre = preprocess_case(case, *window)
                pre = augment(pre, int(rng.integers(0, 2**31 - 1)))
                crop = random_crop(pre, (patch,) * 3, int(rng.integers(0, 2**31 - 1)))
            yield SegBatchItem(
                input=prepare_input(crop.phases),
                target=crop.tumor_mask.data,
                provenance="synthetic" if synthetic else "real")

    return gen()


def dice_score(pred, gt):
    p = np.asarray(pred) > 0
    g = np.asarray(gt) > 0
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return 2.0 * float((p & g).sum()) / float(denom)


def _validate(net, val_cases, patch, overlap):
    scores = []
    for case in val_cases:
        pre = preprocess_case(case)
        pred = infer_volume(net, pre, patch=(patch,) * 3, overlap=overlap)
        scores.append(dice_score(pred.data, case.tumor_mask.data))
    return float(np.mean(scores))


def train_segmenter(stream, net, cfg, steps, seed, batch_size=2, lr=1e-3,
                    epoch_steps=50, val_cases=None, val_patch=32,
                    ckpt_path=None, log_path=None):
    """Optimize the segmenter over the hybrid stream.

    Checkpoints (best validation DSC) and a line-delimited metrics log are
    written when paths are given. steps == 0 returns the net untouched.
    """
    if steps <= 0:
        return net
    torch.manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    log_lines = []
    best_dsc = -1.0
    best_state = None
    epoch_losses = []
    net.loss_history = getattr(net, "loss_history", [])

    for step in range(1, steps + 1):
        items = [next(stream) for _ in range(batch_size)]
        x = torch.from_numpy(np.stack([it.input for it in items]))
        g = torch.from_numpy(np.stack([it.target for it in items]).astype(np.float32))
        probs = torch.softmax(net(x), dim=1)
        loss = seg_loss(probs, g, cfg)
        opt.zero_grad()
        loss.backward()
        opt.step()
        epoch_losses.append(loss.item())

        if step % epoch_steps == 0 or step == steps:
            epoch = (step + epoch_steps - 1) // epoch_steps
            mean_loss = float(np.mean(epoch_losses))
            net.loss_history.append(mean_loss)
            epoch_losses = []
            record = {"epoch": epoch, "step": step, "loss": round(mean_loss, 6)}
            net.trained = True
            if val_cases:
                dsc = _validate(net, val_cases, val_patch, overlap=0.25)
                record["val_dsc"] = round(dsc, 6)
                if dsc > best_dsc:
                    best_dsc = dsc
                    best_state = {k: v.clone() for k, v in net.state_dict().items()}
                if ckpt_path:
                    save_segmenter(net, ckpt_path)
            log_lines.append(json.dumps(record))

    if best_state is not None:
        net.load_state_dict(best_state)
    net.trained = True
    if ckpt_path:
        save_segmenter(net, ckpt_path)
    if log_path:
        with open(log_path, "w") as f:
            f.write("\n".join(log_lines) + "\n")
    return net


def _gaussian_weight(patch):
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in patch], indexing="ij")
    w = np.ones(patch, dtype=np.float64)
    for g, s in zip(grids, patch):
        sigma = max(s / 8.0, 1.0)
        w *= np.exp(-((g - (s - 1) / 2.0) ** 2) / (2.0 * sigma ** 2))
    return np.maximum(w, w.max() * 1e-6)


def _window_starts(dim, patch, stride):
    if dim <= patch:
        return [0]
    starts = list(range(0, dim - patch + 1, stride))
    if starts[-1] != dim - patch:
        starts.append(dim - patch)
    return starts


def infer_volume(net, case_or_phases, patch=(96, 96, 96), overlap=0.25, liver_mask=None):
    """Full-volume prediction: Gaussian-blended sliding windows, argmax, then
    liver-region postprocessing when a liver mask is available."""
    if not 0.0 <= overlap <= 0.9:
        raise BadRangeError(f"overlap must be in [0, 0.9], got {overlap}")
    if not getattr(net, "trained", False):
        raise UntrainedModelError("segmenter has not been trained")
    if isinstance(case_or_phases, MultimodalCase):
        phases = case_or_phases.phases
        liver_mask = liver_mask if liver_mask is not None else case_or_phases.liver_mask
    else:
        phases = list(case_or_phases)
    x = prepare_input(phases)
    orig_shape = x.shape[1:]

    patch = tuple(int(p) for p in patch)
    pads = [(0, max(0, patch[i] - orig_shape[i])) for i in range(3)]
    if any(p[1] for p in pads):
        mins = x.reshape(N_CHANNELS, -1).min(axis=1)
        x = np.stack([np.pad(x[c], pads, mode="constant", constant_values=mins[c])
                      for c in range(N_CHANNELS)])
    shape = x.shape[1:]

    weight = _gaussian_weight(patch)
    strides = [max(1, int(round(patch[i] * (1.0 - overlap)))) for i in range(3)]
    acc = np.zeros((N_CLASSES,) + shape, dtype=np.float64)
    norm = np.zeros(shape, dtype=np.float64)
    with torch.no_grad():
        for z0 in _window_starts(shape[0], patch[0], strides[0]):
            for y0 in _window_starts(shape[1], patch[1], strides[1]):
                for x0 in _window_starts(shape[2], patch[2], strides[2]):
                    sl = (slice(z0, z0 + patch[0]), slice(y0, y0 + patch[1]),
                          slice(x0, x0 + patch[2]))
                    win = x[(slice(None),) + sl]
                    probs = torch.softmax(net(torch.from_numpy(win[None])), dim=1)[0].numpy()
                    acc[(slice(None),) + sl] += probs * weight
                    norm[sl] += weight
    probs = acc / norm
    pred = (probs[1] > probs[0]).astype(np.uint8)
    pred = pred[tuple(slice(0, s) for s in orig_shape)]
    from .volumes import BinaryMask3D
    result = BinaryMask3D(pred)
    if liver_mask is not None:
        result = postprocess_prediction(result, liver_mask)
    return result


# --- checkpointing ---

CKPT_KIND = "segmenter_unet3d"


def save_segmenter(net, path):
    checkpoint.save_checkpoint(
        path, CKPT_KIND, {"base_channels": net.base_channels}, net.state_dict(),
        trained=net.trained, extra={"loss_history": getattr(net, "loss_history", [])})


def load_segmenter(path):
    payload = checkpoint.load_checkpoint(path, CKPT_KIND)
    net = UNet3D(payload["config"]["base_channels"])
    net.load_state_dict(payload["state_dict"])
    net.trained = payload["trained"]
    net.loss_history = payload["extra"].get("loss_history", [])
    return net
