"""Translator networks and losses.

Generator: 8 encoder stages (4x4 stride-2 conv, batch norm, leaky ReLU 0.2)
with filter counts (64,128,256,512,512,512,512,512), mirrored by 8 decoder
stages (4x4 stride-2 transposed conv, batch norm, ReLU) whose concatenated
input widths are (512,1024,1024,1024,1024,512,256,128); skip connections
join each encoder stage to its mirror decoder input, and a tanh head maps
to the output channels. Dropout (p=0.5) on the first three decoder stages
doubles as the model's noise source when kept active at inference.

Discriminator: patch classifier of four 4x4 conv-BatchNorm-leakyReLU stages
with filters (64,128,256,512) and strides (2,2,2,1), then a single-filter
4x4 stride-1 conv and an elementwise sigmoid. Each output unit judges a
70x70 input patch; a 256x256 pair yields a 30x30 probability grid.

All filter counts scale by a width multiplier so desk-scale runs stay fast;
the multiplier defaults to 1, which preserves the widths above.

Notes on normalization: with batch size 1, batch normalization acts as
instance normalization. Generator norms always use per-image statistics
(no running averages). The discriminator tracks running statistics so it
can also be evaluated with frozen normalization, under which its patch
locality (the 70x70 receptive field) holds exactly.
"""

import enum
import math

import torch
from torch import nn

from .errors import ContractError

ENCODER_FILTERS = (64, 128, 256, 512, 512, 512, 512, 512)
DECODER_OUTPUT_FILTERS = (512, 512, 512, 512, 256, 128, 64)
DISCRIMINATOR_FILTERS = (64, 128, 256, 512)
DISCRIMINATOR_STRIDES = (2, 2, 2, 1)
DROPOUT_STAGES = 3
DROPOUT_RATE = 0.5
LEAKY_SLOPE = 0.2
INIT_STD = 0.02
# near-constant slices make some channel activations extremely quiet; a large
# eps would then visibly deflate the normalized variance (eps / sigma^2), so
# keep it at a pure division guard
BN_EPS = 1e-12
EPS_PROB = 1e-7
SIZE_DIVISOR = 2 ** 8


class LossMode(enum.Enum):
    L1 = "l1"
    CGAN = "cgan"
    CGAN_L1 = "cgan+l1"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        for mode in cls:
            if mode.value == str(value).lower():
                return mode
        raise ContractError(
            f"unknown loss mode {value!r}; expected one of "
            + ", ".join(m.value for m in cls)
        )

    @property
    def adversarial(self):
        return self in (LossMode.CGAN, LossMode.CGAN_L1)

    @property
    def pixelwise(self):
        return self in (LossMode.L1, LossMode.CGAN_L1)


def _scale(filters, width_multiplier):
    if width_multiplier <= 0:
        raise ContractError(f"width multiplier must be positive, got {width_multiplier}")
    return tuple(max(1, round(f * width_multiplier)) for f in filters)


class Generator(nn.Module):
    """U-shaped encoder-decoder with skip connections and a tanh head."""

    def __init__(self, in_channels=1, out_channels=1, width_multiplier=1.0):
        super().__init__()
        enc = _scale(ENCODER_FILTERS, width_multiplier)
        dec = _scale(DECODER_OUTPUT_FILTERS, width_multiplier)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.width_multiplier = width_multiplier

        self.enc_convs = nn.ModuleList()
        self.enc_norms = nn.ModuleList()
        prev = in_channels
        for i, width in enumerate(enc):
            self.enc_convs.append(nn.Conv2d(prev, width, 4, stride=2, padding=1))
            # the bottleneck activation is 1x1 spatially; normalizing a single
            # value per channel is degenerate, so the last stage carries none
            last = i == len(enc) - 1
            self.enc_norms.append(None if last else nn.BatchNorm2d(width, eps=BN_EPS, track_running_stats=False))
            prev = width

        self.dec_convs = nn.ModuleList()
        self.dec_norms = nn.ModuleList()
        self.decoder_input_widths = []
        prev = enc[-1]
        outputs = list(dec) + [out_channels]
        for d, width in enumerate(outputs):
            in_width = prev if d == 0 else prev + enc[len(enc) - 1 - d]
            self.decoder_input_widths.append(in_width)
            self.dec_convs.append(nn.ConvTranspose2d(in_width, width, 4, stride=2, padding=1))
            last = d == len(outputs) - 1
            self.dec_norms.append(None if last else nn.BatchNorm2d(width, eps=BN_EPS, track_running_stats=False))
            prev = width

    def forward(self, x, return_encoder=False):
        if x.shape[-1] % SIZE_DIVISOR or x.shape[-2] % SIZE_DIVISOR:
            raise ContractError(
                f"generator input spatial size {tuple(x.shape[-2:])} must be divisible by {SIZE_DIVISOR}"
            )
        skips = []
        for conv, norm in zip(self.enc_convs, self.enc_norms):
            x = conv(x)
            if norm is not None:
                x = norm(x)
            x = nn.functional.leaky_relu(x, LEAKY_SLOPE)
            skips.append(x)
        out = skips[-1]
        n = len(self.dec_convs)
        for d, (conv, norm) in enumerate(zip(self.dec_convs, self.dec_norms)):
            if d > 0:
                out = torch.cat([out, skips[n - 1 - d]], dim=1)
            out = conv(out)
            if norm is not None:
                out = norm(out)
            if d < n - 1:
                out = nn.functional.relu(out)
                if d < DROPOUT_STAGES:
                    out = nn.functional.dropout(out, DROPOUT_RATE, training=self.training)
            else:
                out = torch.tanh(out)
        if return_encoder:
            return out, skips
        return out


class Discriminator(nn.Module):
    """Patch classifier over the channel-concatenation of condition and candidate."""

    def __init__(self, in_channels=2, width_multiplier=1.0):
        super().__init__()
        filters = _scale(DISCRIMINATOR_FILTERS, width_multiplier)
        self.in_channels = in_channels
        self.width_multiplier = width_multiplier
        layers = []
        prev = in_channels
        for width, stride in zip(filters, DISCRIMINATOR_STRIDES):
            layers += [
                nn.Conv2d(prev, width, 4, stride=stride, padding=1),
                nn.BatchNorm2d(width, eps=BN_EPS),
                nn.LeakyReLU(LEAKY_SLOPE),
            ]
            prev = width
        layers.append(nn.Conv2d(prev, 1, 4, stride=1, padding=1))
        self.stages = nn.Sequential(*layers)

    def forward(self, x, y):
        if x.shape[-2:] != y.shape[-2:]:
            raise ContractError(
                f"condition and candidate sizes differ: {tuple(x.shape[-2:])} vs {tuple(y.shape[-2:])}"
            )
        return torch.sigmoid(self.stages(torch.cat([x, y], dim=1)))


def init_models(seed, width_multiplier=1.0, in_channels=1, out_channels=1):
    """Deterministically initialized (generator, discriminator) pair.

    Conv weights ~ N(0, 0.02), norm scales ~ N(1, 0.02), all biases zero.
    """
    gen = Generator(in_channels, out_channels, width_multiplier)
    disc = Discriminator(in_channels + out_channels, width_multiplier)
    g = torch.Generator().manual_seed(int(seed))
    for module in list(gen.modules()) + list(disc.modules()):
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
            module.weight.data.normal_(0.0, INIT_STD, generator=g)
            module.bias.data.zero_()
        elif isinstance(module, nn.BatchNorm2d):
            module.weight.data.normal_(1.0, INIT_STD, generator=g)
            module.bias.data.zero_()
    return gen, disc


def generator_forward(gen: Generator, x, stochastic=False, seed=0):
    """Run the generator on one HxWxC image tensor (numpy, values in [-1,1]).

    stochastic=True keeps dropout active (the model's noise source) with a
    deterministic mask per seed; stochastic=False disables dropout.
    """
    was_training = gen.training
    gen.train(bool(stochastic))
    try:
        with torch.no_grad():
            t = to_torch(x)
            if stochastic:
                torch.manual_seed(int(seed))
            out = gen(t)
    finally:
        gen.train(was_training)
    return from_torch(out)


def discriminator_forward(disc: Discriminator, x, y, batch_stats=False):
    """Patch probability map for a (condition, candidate) pair of HxWxC images.

    With batch_stats=False (default) normalization uses frozen running
    statistics, under which each output unit depends on exactly its 70x70
    input patch. batch_stats=True normalizes over the image itself (the
    training-time behavior), which ties in global statistics.
    """
    was_training = disc.training
    disc.train(bool(batch_stats))
    try:
        with torch.no_grad():
            out = disc(to_torch(x), to_torch(y))
    finally:
        disc.train(was_training)
    return from_torch(out)[:, :, 0]


def to_torch(image_hwc):
    """HxWxC numpy image (or 2D) to a 1xCxHxW float32 tensor."""
    t = torch.as_tensor(image_hwc, dtype=torch.float32)
    if t.ndim == 2:
        t = t[:, :, None]
    if t.ndim != 3:
        raise ContractError(f"expected HxW or HxWxC, got shape {tuple(t.shape)}")
    return t.permute(2, 0, 1)[None]


def from_torch(tensor):
    """1xCxHxW tensor back to an HxWxC numpy array."""
    return tensor.detach()[0].permute(1, 2, 0).cpu().numpy()


def _clamp(p):
    return torch.clamp(torch.as_tensor(p), EPS_PROB, 1.0 - EPS_PROB)


def loss_cgan(d_real, d_fake):
    """Discriminator payoff: mean log D(x,y) + mean log(1 - D(x,G(x,z)))."""
    return torch.mean(torch.log(_clamp(d_real))) + torch.mean(torch.log(1.0 - _clamp(d_fake)))


def generator_adversarial(d_fake, saturating=False):
    """Generator's adversarial term.

    Defaults to the non-saturating mean(-log D(x,G(x,z))); the saturating
    mean(log(1 - D)) variant is available for completeness (same optimum,
    different gradients).
    """
    p = _clamp(d_fake)
    if saturating:
        return torch.mean(torch.log(1.0 - p))
    return torch.mean(-torch.log(p))


def loss_l1(y, y_hat):
    """Mean absolute difference."""
    return torch.mean(torch.abs(torch.as_tensor(y) - torch.as_tensor(y_hat)))


def loss_combined(mode, adversarial=None, l1=None, lambda_l1=100.0):
    """Combine loss parts per mode: cgan+l1 -> adv + lambda*l1; single-term
    modes return that term alone."""
    mode = LossMode.parse(mode)
    if lambda_l1 <= 0:
        raise ContractError(f"lambda must be positive, got {lambda_l1}")
    if mode is LossMode.L1:
        if l1 is None:
            raise ContractError("L1 mode needs the l1 part")
        return torch.as_tensor(l1)
    if mode is LossMode.CGAN:
        if adversarial is None:
            raise ContractError("cGAN mode needs the adversarial part")
        return torch.as_tensor(adversarial)
    if adversarial is None or l1 is None:
        raise ContractError("cgan+l1 mode needs both parts")
    return torch.as_tensor(adversarial) + lambda_l1 * torch.as_tensor(l1)


def patch_grid_side(size=256):
    """Output grid side for a given input side under strides (2,2,2,1,1)."""
    side = size
    for stride in DISCRIMINATOR_STRIDES:
        side = (side + 2 - 4) // stride + 1
    return (side + 2 - 4) // 1 + 1


def receptive_field_bounds(i, size=256):
    """Inclusive input-pixel interval a patch unit at index i depends on (1D)."""
    lo, hi = i, i
    strides = list(DISCRIMINATOR_STRIDES) + [1]
    for stride in reversed(strides):
        lo = lo * stride - 1
        hi = hi * stride + 2
    return max(lo, 0), min(hi, size - 1)


def receptive_field_size():
    """Theoretical receptive field side of one patch unit."""
    rf = 1
    for stride in reversed(list(DISCRIMINATOR_STRIDES) + [1]):
        rf = rf * stride + (4 - stride)
    return rf


def dependency_trace(pixels, size=256):
    """Brute-force dependency oracle: propagate an indicator image through
    the discriminator's conv geometry (kernel 4, pad 1, declared strides)
    and return the boolean grid of output units that can see any of the
    given (row, col) input pixels."""
    grid = torch.zeros(1, 1, size, size)
    for r, c in pixels:
        grid[0, 0, r, c] = 1.0
    kernel = torch.ones(1, 1, 4, 4)
    for stride in list(DISCRIMINATOR_STRIDES) + [1]:
        grid = nn.functional.conv2d(grid, kernel, stride=stride, padding=1)
        grid = (grid > 0).float()
    return grid[0, 0].bool().numpy()


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def untrained_output_band(gen, size=256, seed=0):
    """Sanity check value: mean |G(x)| on random input, strictly in (0,1)."""
    g = torch.Generator().manual_seed(seed)
    x = torch.rand((1, gen.in_channels, size, size), generator=g) * 2 - 1
    was_training = gen.training
    gen.eval()
    try:
        with torch.no_grad():
            out = gen(x)
    finally:
        gen.train(was_training)
    return float(out.abs().mean())
