"""Multimodal CT synthesizer: 3D vector-quantized autoencoder plus a
mask-conditioned latent diffusion model.

All four phases of a case are encoded into one joint latent (one channel
group per phase) and denoised together under a single shared tumor mask, so
the synthesized tumor is aligned across phases by construction.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F
from scipy import ndimage

from . import checkpoint
from .errors import (BadRangeError, EmptyDatasetError, IndivisibleShapeError,
                     NonNormalInputError, ShapeMismatchError, StepOutOfRangeError,
                     UntrainedModelError)
from .maskops import ElasticParams, dilate_annotation, sample_tumor_mask
from .volumes import BinaryMask3D, MultimodalCase, Volume3D, preprocess_case

N_PHASES = 4


@dataclass
class CodebookConfig:
    codebook_size: int = 512
    embedding_dim: int = 4
    commitment_weight: float = 0.25

    def __post_init__(self):
        if self.codebook_size <= 0 or self.embedding_dim <= 0 or self.commitment_weight <= 0:
            raise ValueError("codebook parameters must be positive")


@dataclass
class McsConfig:
    f: int = 4                     # spatial downsample factor (power of two)
    base_channels: int = 16
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    T: int = 100
    # beta range chosen so alpha_bar at t=T is ~2e-5: the forward process
    # actually reaches the N(0, I) prior the sampler starts from.  The common
    # (1e-4, 0.02) range targets T=1000 and leaves alpha_bar_T ~ 0.37 at T=100.
    beta_start: float = 1e-3
    beta_end: float = 0.2
    patch: int = 32
    denoiser_channels: int = 32
    ae_steps: int = 2000
    ldm_steps: int = 20000
    batch_size: int = 4        # autoencoder training batch (image patches)
    ldm_batch_size: int = 8    # denoiser training batch (latent crops)
    lr: float = 1e-3

    def __post_init__(self):
        if isinstance(self.codebook, dict):
            self.codebook = CodebookConfig(**self.codebook)
        if self.f < 2 or (self.f & (self.f - 1)) != 0:
            raise ValueError("downsample factor f must be a power of two >= 2")

    def to_dict(self):
        return asdict(self)


@dataclass
class LatentGrid:
    """Latent representation (C, d, h, w) at 1/f of the pixel resolution."""

    data: np.ndarray
    downsample_factor: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ShapeMismatchError(f"LatentGrid needs (C,d,h,w), got {self.data.ndim}D")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("latent values must be finite")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class DiffusionSchedule:
    T: int
    betas: np.ndarray
    alpha_bar: np.ndarray


def make_schedule(T, beta_start=1e-4, beta_end=0.02):
    """Linear beta schedule with cumulative-product signal retention."""
    if T < 1:
        raise BadRangeError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise BadRangeError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    return DiffusionSchedule(T=T, betas=betas, alpha_bar=alpha_bar)


def q_sample(z0, t, eps, sched):
    """Forward diffusion marginal: z_t = sqrt(a_bar_t) z0 + sqrt(1 - a_bar_t) eps."""
    if not 1 <= t <= sched.T:
        raise StepOutOfRangeError(f"t={t} outside [1, {sched.T}]")
    z0_data = z0.data if isinstance(z0, LatentGrid) else np.asarray(z0)
    eps_data = eps.data if isinstance(eps, LatentGrid) else np.asarray(eps)
    if z0_data.shape != eps_data.shape:
        raise ShapeMismatchError(f"z0 {z0_data.shape} vs eps {eps_data.shape}")
    ab = sched.alpha_bar[t - 1]
    zt = np.sqrt(ab) * z0_data + np.sqrt(1.0 - ab) * eps_data
    if isinstance(z0, LatentGrid):
        return LatentGrid(zt.astype(np.float32), z0.downsample_factor)
    return zt


# --- autoencoder ---

class VectorQuantizer(nn.Module):
    def __init__(self, codebook_size, embedding_dim, commitment_weight):
        super().__init__()
        self.embedding = nn.Embedding(codebook_size, embedding_dim)
        self.embedding.weight.data.uniform_(-1.0 / codebook_size, 1.0 / codebook_size)
        self.commitment_weight = commitment_weight

    def forward(self, z):
        # z: (B, D, d, h, w) continuous encoder output
        b, c, *spatial = z.shape
        flat = z.permute(0, 2, 3, 4, 1).reshape(-1, c)
        dist = (flat.pow(2).sum(1, keepdim=True)
                - 2 * flat @ self.embedding.weight.t()
                + self.embedding.weight.pow(2).sum(1))
        indices = dist.argmin(1)
        quantized = self.embedding(indices).view(b, *spatial, c).permute(0, 4, 1, 2, 3)
        codebook_loss = F.mse_loss(quantized, z.detach())
        commit_loss = F.mse_loss(z, quantized.detach())
        vq_loss = codebook_loss + self.commitment_weight * commit_loss
        quantized = z + (quantized - z).detach()  # straight-through
        return quantized, vq_loss, indices.view(b, *spatial)


class ResidualBlock3D(nn.Module):
    def __init__(self, channels):
        super().__init__()
        groups = min(4, channels)
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class Autoencoder3D(nn.Module):
    """Single-channel volumetric autoencoder with a quantized latent bottleneck."""

    def __init__(self, config=None):
        super().__init__()
        self.config = config or McsConfig()
        cfg = self.config
        self.trained = False
        self.loss_history = []
        stages = int(math.log2(cfg.f))
        b = cfg.base_channels
        enc = [nn.Conv3d(1, b, 3, padding=1)]
        ch = b
        for _ in range(stages):
            enc += [ResidualBlock3D(ch), nn.Conv3d(ch, ch * 2, 4, stride=2, padding=1)]
            ch *= 2
        enc += [ResidualBlock3D(ch), nn.Conv3d(ch, cfg.codebook.embedding_dim, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)
        self.quantizer = VectorQuantizer(
            cfg.codebook.codebook_size, cfg.codebook.embedding_dim, cfg.codebook.commitment_weight)
        dec = [nn.Conv3d(cfg.codebook.embedding_dim, ch, 3, padding=1), ResidualBlock3D(ch)]
        for _ in range(stages):
            dec += [nn.ConvTranspose3d(ch, ch // 2, 4, stride=2, padding=1),
                    ResidualBlock3D(ch // 2)]
            ch //= 2
        dec += [nn.Conv3d(ch, 1, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    def forward(self, x):
        z = self.encoder(x)
        q, vq_loss, indices = self.quantizer(z)
        return self.decoder(q), vq_loss, indices


def encode(ae, x):
    """Encode one phase patch to its quantized latent grid (deterministic)."""
    if not getattr(ae, "trained", False):
        raise UntrainedModelError("autoencoder has not been trained")
    data = x.data if isinstance(x, Volume3D) else np.asarray(x, dtype=np.float32)
    f = ae.config.f
    if any(s % f for s in data.shape):
        raise IndivisibleShapeError(f"patch shape {data.shape} not divisible by f={f}")
    with torch.no_grad():
        z = ae.encoder(torch.from_numpy(data[None, None].astype(np.float32)))
        q, _, _ = ae.quantizer(z)
    return LatentGrid(q[0].numpy(), downsample_factor=f)


def encode_indices(ae, x):
    """Codebook index grid for one phase patch."""
    if not getattr(ae, "trained", False):
        raise UntrainedModelError("autoencoder has not been trained")
    data = x.data if isinstance(x, Volume3D) else np.asarray(x, dtype=np.float32)
    with torch.no_grad():
        z = ae.encoder(torch.from_numpy(data[None, None].astype(np.float32)))
        _, _, indices = ae.quantizer(z)
    return indices[0].numpy()


def decode(ae, z):
    """Decode a latent grid back to a pixel-space patch of shape f*(d,h,w)."""
    if not getattr(ae, "trained", False):
        raise UntrainedModelError("autoencoder has not been trained")
    data = z.data if isinstance(z, LatentGrid) else np.asarray(z, dtype=np.float32)
    with torch.no_grad():
        out = ae.decoder(torch.from_numpy(data[None].astype(np.float32)))
    return out[0, 0].numpy()


def psnr(ref, rec):
    ref = np.asarray(ref, dtype=np.float64)
    rec = np.asarray(rec, dtype=np.float64)
    peak = float(ref.max() - ref.min())
    if peak == 0:
        peak = 1.0
    mse = float(np.mean((ref - rec) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(peak ** 2 / mse)


# --- denoiser ---

def sinusoidal_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    ang = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class _TimedConvBlock(nn.Module):
    def __init__(self, cin, cout, t_dim):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, cout)

    def forward(self, x, temb):
        h = F.silu(self.conv1(x))
        h = h + self.t_proj(temb)[:, :, None, None, None]
        return F.silu(self.conv2(h))


class DenoiserUNet3D(nn.Module):
    """Small 3D U-shaped noise predictor over [latent, mask] channels."""

    T_DIM = 32

    def __init__(self, latent_channels, base_channels=24):
        super().__init__()
        self.latent_channels = latent_channels
        self.base_channels = base_channels
        self.trained = False
        self.loss_history = []
        # latent normalization fitted during training (diffusion runs on
        # (z - shift) / scale so its prior matches N(0, I))
        self.latent_shift = 0.0
        self.latent_scale = 1.0
        b = base_channels
        self.t_mlp = nn.Sequential(nn.Linear(self.T_DIM, self.T_DIM), nn.SiLU())
        self.enc1 = _TimedConvBlock(latent_channels + 1, b, self.T_DIM)
        self.down = nn.Conv3d(b, b * 2, 4, stride=2, padding=1)
        self.mid = _TimedConvBlock(b * 2, b * 2, self.T_DIM)
        self.up = nn.ConvTranspose3d(b * 2, b, 4, stride=2, padding=1)
        self.dec1 = _TimedConvBlock(b * 2, b, self.T_DIM)
        self.head = nn.Conv3d(b, latent_channels, 3, padding=1)

    def forward(self, z, y, t):
        if torch.is_tensor(t):
            tt = t.reshape(-1)
        else:
            tt = torch.tensor([int(t)])
        temb = self.t_mlp(sinusoidal_embedding(tt, self.T_DIM))
        if temb.shape[0] == 1 and z.shape[0] > 1:
            temb = temb.expand(z.shape[0], -1)
        x = torch.cat([z, y], dim=1)
        e1 = self.enc1(x, temb)
        m = self.mid(self.down(e1), temb)
        u = self.up(m)
        d = self.dec1(torch.cat([u, e1], dim=1), temb)
        return self.head(d)


def ldm_loss(eps_net, z0, y, t, eps, sched):
    """Noise-regression objective: E ||eps - eps_net(z_t, y, t)||^2."""
    z0_t = z0 if torch.is_tensor(z0) else torch.from_numpy(
        np.asarray(z0.data if isinstance(z0, LatentGrid) else z0, dtype=np.float32))
    eps_t = eps if torch.is_tensor(eps) else torch.from_numpy(
        np.asarray(eps.data if isinstance(eps, LatentGrid) else eps, dtype=np.float32))
    y_t = y if torch.is_tensor(y) else torch.from_numpy(np.asarray(y, dtype=np.float32))
    if z0_t.shape != eps_t.shape:
        raise ShapeMismatchError(f"z0 {tuple(z0_t.shape)} vs eps {tuple(eps_t.shape)}")
    if not 1 <= int(t) <= sched.T:
        raise StepOutOfRangeError(f"t={t} outside [1, {sched.T}]")
    if z0_t.dim() == 4:
        z0_t, eps_t = z0_t[None], eps_t[None]
    if y_t.dim() == 3:
        y_t = y_t[None, None]
    elif y_t.dim() == 4:
        y_t = y_t[None]
    if y_t.shape[-3:] != z0_t.shape[-3:]:
        raise ShapeMismatchError(f"mask grid {tuple(y_t.shape)} vs latent {tuple(z0_t.shape)}")
    ab = float(sched.alpha_bar[int(t) - 1])
    zt = math.sqrt(ab) * z0_t + math.sqrt(1.0 - ab) * eps_t
    pred = eps_net(zt, y_t, torch.tensor([int(t)]))
    return ((eps_t - pred) ** 2).mean()


def p_sample_loop(eps_net, y, shape, sched, seed, z_known=None, known_mask=None,
                  clip_z0=3.0):
    """Ancestral sampling from pure noise down to z_0, conditioned on mask y.

    Each step converts the noise prediction to an implied clean latent,
    clamps it to +-clip_z0 (latents are normalized to unit scale during
    training, so values far outside that range are sampler error, and
    unclamped chains can blow up), and takes the posterior step from there.

    If (z_known, known_mask) are given, the region where known_mask == 0 is
    pinned to the appropriately re-noised known latent at every step, so only
    the masked region is generated.
    """
    if not getattr(eps_net, "trained", True):
        raise UntrainedModelError("denoiser has not been trained")
    gen = torch.Generator().manual_seed(int(seed))
    y_t = y if torch.is_tensor(y) else torch.from_numpy(np.asarray(y, dtype=np.float32))
    if y_t.dim() == 3:
        y_t = y_t[None, None]
    elif y_t.dim() == 4:
        y_t = y_t[None]
    z = torch.randn((1,) + tuple(shape), generator=gen)
    zk = None
    gen_region = None
    if z_known is not None:
        zk_data = z_known.data if isinstance(z_known, LatentGrid) else np.asarray(z_known)
        zk = torch.from_numpy(zk_data.astype(np.float32))[None]
        gen_region = known_mask if torch.is_tensor(known_mask) else torch.from_numpy(
            np.asarray(known_mask, dtype=np.float32))
        if gen_region.dim() == 3:
            gen_region = gen_region[None, None]
        elif gen_region.dim() == 4:
            gen_region = gen_region[None]

    with torch.no_grad():
        for t in range(sched.T, 0, -1):
            ab_t = float(sched.alpha_bar[t - 1])
            ab_prev = float(sched.alpha_bar[t - 2]) if t > 1 else 1.0
            beta_t = float(sched.betas[t - 1])
            alpha_t = 1.0 - beta_t
            pred = eps_net(z, y_t, torch.tensor([t]))
            z0_hat = (z - math.sqrt(1.0 - ab_t) * pred) / math.sqrt(ab_t)
            if clip_z0 is not None:
                z0_hat = z0_hat.clamp(-clip_z0, clip_z0)
            mean = (math.sqrt(ab_prev) * beta_t / (1.0 - ab_t)) * z0_hat \
                + (math.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)) * z
            var = beta_t * (1.0 - ab_prev) / (1.0 - ab_t)
            if t > 1:
                noise = torch.randn(z.shape, generator=gen)
                z = mean + math.sqrt(var) * noise
            else:
                z = mean
            if zk is not None:
                if t > 1:
                    eps_k = torch.randn(z.shape, generator=gen)
                    zk_noised = math.sqrt(ab_prev) * zk + math.sqrt(1.0 - ab_prev) * eps_k
                else:
                    zk_noised = zk
                z = z * gen_region + zk_noised * (1.0 - gen_region)
    out = z[0].numpy().astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise ValueError("sampling produced non-finite values")
    f = z_known.downsample_factor if isinstance(z_known, LatentGrid) else 1
    return LatentGrid(out, downsample_factor=f)


# --- mask downsampling ---

def downsample_mask(mask_data, f):
    """Reduce a binary mask to latent resolution; a latent cell is foreground
    if any covered voxel is (keeps thin tumors from vanishing)."""
    d, h, w = mask_data.shape
    if d % f or h % f or w % f:
        raise IndivisibleShapeError(f"mask shape {mask_data.shape} not divisible by f={f}")
    blocks = mask_data.reshape(d // f, f, h // f, f, w // f, f)
    return (blocks.max(axis=(1, 3, 5)) > 0).astype(np.float32)


# --- synthesis ---

def synthesize_case(ae, eps_net, normal, sched, axes_range=(3.0, 8.0),
                    elastic=None, seed=0):
    """Grow a synthetic tumor at a random liver location of a normal case.

    One tumor mask conditions all four phases; phases are denoised jointly
    in one latent, decoded per phase group, then composited so the input is
    preserved outside a small dilation of the mask.
    """
    if not normal.tumor_mask.is_empty():
        raise NonNormalInputError(f"case {normal.case_id} already has tumor foreground")
    elastic = elastic or ElasticParams()
    y = sample_tumor_mask(normal.liver_mask, axes_range, elastic, seed)
    f = ae.config.f

    shift = getattr(eps_net, "latent_shift", 0.0)
    scale = getattr(eps_net, "latent_scale", 1.0)
    z_bg = np.concatenate([encode(ae, p).data for p in normal.phases], axis=0)
    z_bg = (z_bg - shift) / scale
    # condition on the dilated annotation, matching the mask the denoiser saw
    # during training (small tumors otherwise vanish at latent resolution)
    y_lat = downsample_mask(dilate_annotation(y).data, f)
    gen_region = ndimage.binary_dilation(y_lat > 0, iterations=1).astype(np.float32)

    z = p_sample_loop(
        eps_net, y_lat, z_bg.shape, sched, seed + 1,
        z_known=LatentGrid(z_bg, f), known_mask=gen_region)

    c = ae.config.codebook.embedding_dim
    composite_mask = ndimage.binary_dilation(y.data > 0, iterations=2)
    phases = []
    for i, p in enumerate(normal.phases):
        dec = decode(ae, LatentGrid(z.data[i * c:(i + 1) * c] * scale + shift, f))
        out = p.data.copy()
        out[composite_mask] = dec[composite_mask]
        phases.append(Volume3D(out, p.spacing))
    return MultimodalCase(
        case_id=f"{normal.case_id}_syn{seed}",
        phases=phases, tumor_mask=y, liver_mask=normal.liver_mask)


# --- training ---

def _sample_patch(cases, patch, rng):
    case = cases[rng.integers(0, len(cases))]
    shape = case.shape
    off = [int(rng.integers(0, max(1, shape[i] - patch + 1))) for i in range(3)]
    sl = tuple(slice(o, o + patch) for o in off)
    phase = case.phases[rng.integers(0, N_PHASES)]
    return phase.data[sl]


def _flat_encodings(ae, x):
    z = ae.encoder(x)
    return z.permute(0, 2, 3, 4, 1).reshape(-1, z.shape[1])


def train_autoencoder(cases, cfg, seed):
    """Stage 1: reconstruction + quantization losses on random phase patches.

    The codebook is initialized from encoder outputs of the first batch and
    entries that go unused for a window of steps are re-seeded from current
    encodings; both measures keep the codebook utilized, which the
    reconstruction quality depends on. The learning rate follows a cosine
    decay over the configured step budget.
    """
    if not cases:
        raise EmptyDatasetError("no cases to train the autoencoder on")
    torch.manual_seed(seed)
    ae = Autoencoder3D(cfg)
    if cfg.ae_steps <= 0:
        return ae
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(ae.parameters(), lr=cfg.lr)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.ae_steps)
    n_codes = cfg.codebook.codebook_size
    usage = torch.zeros(n_codes)
    for step in range(cfg.ae_steps):
        batch = np.stack([_sample_patch(cases, cfg.patch, rng) for _ in range(cfg.batch_size)])
        x = torch.from_numpy(batch[:, None].astype(np.float32))
        if step == 0:
            with torch.no_grad():
                flat = _flat_encodings(ae, x)
                pick = torch.randint(0, flat.shape[0], (n_codes,), generator=gen)
                jitter = 0.01 * torch.randn(n_codes, flat.shape[1], generator=gen)
                ae.quantizer.embedding.weight.copy_(flat[pick] + jitter)
        recon, vq_loss, indices = ae(x)
        usage += torch.bincount(indices.reshape(-1), minlength=n_codes)
        loss = F.l1_loss(recon, x) + vq_loss
        opt.zero_grad()
        loss.backward()
        opt.step()
        lr_sched.step()
        ae.loss_history.append(loss.item())
        if (step + 1) % 50 == 0 and step + 1 < cfg.ae_steps:
            with torch.no_grad():
                dead = usage == 0
                if dead.any():
                    flat = _flat_encodings(ae, x)
                    pick = torch.randint(0, flat.shape[0], (int(dead.sum()),), generator=gen)
                    ae.quantizer.embedding.weight[dead] = flat[pick]
            usage.zero_()
    ae.trained = True
    return ae


def _latent_tumor_crop(z_full, y_full, cells, crop, rng):
    center = cells[rng.integers(0, len(cells))]
    jitter = rng.integers(-max(1, crop // 4), max(1, crop // 4) + 1, size=3)
    off = [int(np.clip(center[i] + jitter[i] - crop // 2, 0, y_full.shape[i] - crop))
           for i in range(3)]
    sl = tuple(slice(o, o + crop) for o in off)
    return z_full[(slice(None),) + sl], y_full[sl]


def train_denoiser(ae, reals, cfg, seed):
    """Stage 2: freeze the autoencoder, train the noise predictor on
    tumor-bearing patches conditioned on dilated real annotation masks.

    Each case is encoded once up front; training crops are taken directly in
    latent space around tumor cells, which makes a step cheap enough to run
    thousands of them.
    """
    tumor_cases = [c for c in reals if not c.tumor_mask.is_empty()]
    if not tumor_cases:
        raise EmptyDatasetError("stage 2 needs tumor-bearing cases")
    torch.manual_seed(seed + 1)
    latent_channels = N_PHASES * cfg.codebook.embedding_dim
    net = DenoiserUNet3D(latent_channels, cfg.denoiser_channels)
    if cfg.ldm_steps <= 0:
        return net

    for p in ae.parameters():
        p.requires_grad_(False)
    sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    rng = np.random.default_rng(seed + 1)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.ldm_steps)

    crop = max(2, cfg.patch // cfg.f)
    prepared = []
    for c in tumor_cases:
        pre = preprocess_case(c)
        z_full = np.concatenate([encode(ae, p).data for p in pre.phases], axis=0)
        y_full = downsample_mask(dilate_annotation(c.tumor_mask).data, cfg.f)
        cells = np.argwhere(y_full > 0)
        if len(cells):
            prepared.append((z_full, y_full, cells))
    if not prepared:
        raise EmptyDatasetError("stage 2 found no tumor cells at latent resolution")
    # normalize latents to zero mean / unit variance so the diffusion prior
    # N(0, I) matches the marginal the sampler starts from
    all_z = np.concatenate([z.ravel() for z, _, _ in prepared])
    shift = float(all_z.mean())
    scale = float(all_z.std()) or 1.0
    net.latent_shift = shift
    net.latent_scale = scale
    prepared = [((z - shift) / scale, y, cells) for z, y, cells in prepared]
    for step in range(cfg.ldm_steps):
        z0s, ys = [], []
        for _ in range(cfg.ldm_batch_size):
            z_full, y_full, cells = prepared[rng.integers(0, len(prepared))]
            zc, yc = _latent_tumor_crop(z_full, y_full, cells, crop, rng)
            z0s.append(zc)
            ys.append(yc)
        z0 = torch.from_numpy(np.stack(z0s))
        y = torch.from_numpy(np.stack(ys))[:, None]
        t = int(rng.integers(1, cfg.T + 1))
        eps = torch.randn(z0.shape, generator=torch.Generator().manual_seed(seed + 2 + step))
        loss = ldm_loss(net, z0, y, t, eps, sched)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(net.parameters(), 1.0)
        opt.step()
        lr_sched.step()
        net.loss_history.append(loss.item())
    net.trained = True
    return net


def train_mcs(reals, normals, cfg, seed):
    """Two-stage training: autoencoder first, then the frozen-autoencoder
    latent diffusion denoiser. Returns (ae, eps_net)."""
    pool = list(reals) + list(normals)
    if not pool:
        raise EmptyDatasetError("no cases to train MCS on")
    pre = [preprocess_case(c) for c in pool]
    ae = train_autoencoder(pre, cfg, seed)
    if not ae.trained:
        raise EmptyDatasetError("autoencoder stage was configured with 0 steps")
    eps_net = train_denoiser(ae, reals, cfg, seed)
    return ae, eps_net


# --- checkpointing ---

AE_KIND = "vq_autoencoder3d"
DENOISER_KIND = "latent_denoiser3d"


def save_autoencoder(ae, path):
    checkpoint.save_checkpoint(
        path, AE_KIND, ae.config.to_dict(), ae.state_dict(),
        trained=ae.trained, extra={"loss_history": ae.loss_history})


def load_autoencoder(path):
    payload = checkpoint.load_checkpoint(path, AE_KIND)
    ae = Autoencoder3D(McsConfig(**payload["config"]))
    ae.load_state_dict(payload["state_dict"])
    ae.trained = payload["trained"]
    ae.loss_history = payload["extra"].get("loss_history", [])
    return ae


def save_denoiser(net, path):
    checkpoint.save_checkpoint(
        path, DENOISER_KIND,
        {"latent_channels": net.latent_channels, "base_channels": net.base_channels},
        net.state_dict(), trained=net.trained,
        extra={"loss_history": net.loss_history,
               "latent_shift": net.latent_shift,
               "latent_scale": net.latent_scale})


def load_denoiser(path):
    payload = checkpoint.load_checkpoint(path, DENOISER_KIND)
    net = DenoiserUNet3D(payload["config"]["latent_channels"], payload["config"]["base_channels"])
    net.load_state_dict(payload["state_dict"])
    net.trained = payload["trained"]
    net.loss_history = payload["extra"].get("loss_history", [])
    net.latent_shift = payload["extra"].get("latent_shift", 0.0)
    net.latent_scale = payload["extra"].get("latent_scale", 1.0)
    return net
