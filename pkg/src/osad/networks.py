"""Encoder, decoder, heads, peer learner and black-box substitute architectures."""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .dadl import DualAttentiveDenoise, MeanFilterDenoise
from .errors import ConfigError, ShapeError

DENOISERS = ("dual_attentive", "mean_filter", "none")

PROFILES = {
    "micro": dict(widths=(2, 2, 4, 4), blocks=(1, 1, 1, 1), peer_widths=(2, 2, 4, 4)),
    "toy": dict(widths=(16, 16, 32, 32), blocks=(1, 1, 1, 1), peer_widths=(8, 16, 16, 32)),
    "full": dict(widths=(64, 128, 256, 512), blocks=(2, 2, 2, 2), peer_widths=(64, 128, 256, 512)),
}


@dataclass
class ModelConfig:
    num_classes: int = 2
    in_channels: int = 1
    image_size: int = 16
    profile: str = "toy"
    widths: tuple[int, ...] | None = None
    blocks: tuple[int, ...] | None = None
    peer_widths: tuple[int, ...] | None = None
    dec: bool = True
    dadl: bool = True
    ssd: bool = True
    caml: bool = True
    denoiser: str | None = None
    reduction_ratio: int = 16
    spatial_kernel: int = 7
    pixel_range: tuple[float, float] = (0.0, 1.0)
    norm_mean: float = 0.5
    norm_std: float = 0.25

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown model profile {self.profile!r}; valid options: {', '.join(PROFILES)}")
        prof = PROFILES[self.profile]
        self.widths = tuple(self.widths or prof["widths"])
        self.blocks = tuple(self.blocks or prof["blocks"])
        self.peer_widths = tuple(self.peer_widths or prof["peer_widths"])
        if len(self.widths) != 4 or len(self.blocks) != 4:
            raise ConfigError("the encoder has exactly four main blocks")
        if self.denoiser is None:
            self.denoiser = "dual_attentive" if self.dadl else "none"
        if self.denoiser not in DENOISERS:
            raise ConfigError(f"unknown denoiser {self.denoiser!r}; valid options: {', '.join(DENOISERS)}")
        if self.dadl != (self.denoiser == "dual_attentive"):
            raise ConfigError("dadl toggle and denoiser variant disagree")

    @property
    def toggles(self) -> dict[str, bool]:
        return {"dec": self.dec, "dadl": self.dadl, "ssd": self.ssd, "caml": self.caml}

    def to_dict(self) -> dict:
        return asdict(self)


class Standardize(nn.Module):
    def __init__(self, mean: float, std: float):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean))
        self.register_buffer("std", torch.tensor(std))

    def forward(self, x):
        return (x - self.mean) / self.std


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
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


def _stage(cin: int, cout: int, n: int, stride: int) -> nn.Sequential:
    layers = [BasicBlock(cin, cout, stride)]
    layers += [BasicBlock(cout, cout) for _ in range(n - 1)]
    return nn.Sequential(*layers)


def _make_denoiser(kind: str, channels: int, reduction: int, kernel: int) -> nn.Module:
    if kind == "dual_attentive":
        return DualAttentiveDenoise(channels, reduction, kernel)
    if kind == "mean_filter":
        return MeanFilterDenoise(channels)
    return nn.Identity()


class ResidualEncoder(nn.Module):
    """Residual feature extractor; each main block is followed by a denoising layer."""

    def __init__(self, in_channels: int, widths, blocks, denoiser: str = "none",
                 reduction: int = 16, kernel: int = 7, norm=(0.5, 0.25)):
        super().__init__()
        self.norm = Standardize(*norm)
        self.stem = nn.Sequential(nn.Conv2d(in_channels, widths[0], 3, 1, 1, bias=False),
                                  nn.BatchNorm2d(widths[0]), nn.ReLU())
        strides = [1] + [2] * (len(widths) - 1)
        cin = widths[0]
        self.stages = nn.ModuleList()
        self.denoisers = nn.ModuleList()
        for w, n, s in zip(widths, blocks, strides):
            self.stages.append(_stage(cin, w, n, s))
            self.denoisers.append(_make_denoiser(denoiser, w, reduction, kernel))
            cin = w
        self.out_dim = cin

    def forward(self, x, return_maps: bool = False):
        h = self.stem(self.norm(x))
        maps = []
        for stage, den in zip(self.stages, self.denoisers):
            h = stage(h)
            if return_maps:
                maps.append(h)
            h = den(h)
            if return_maps:
                maps.append(h)
        z = h.mean(dim=(2, 3))
        return (z, maps) if return_maps else z


class Decoder(nn.Module):
    """Transpose-convolution stack from a 1x1 latent map to an image."""

    def __init__(self, latent_dim: int, out_channels: int, image_size: int,
                 pixel_range=(0.0, 1.0), n_layers: int | None = None):
        super().__init__()
        n_layers = n_layers or (4 if image_size >= 64 else 3)
        first = image_size // 2 ** (n_layers - 1)
        if first < 1 or first * 2 ** (n_layers - 1) != image_size:
            raise ConfigError(f"image size {image_size} incompatible with {n_layers} decoder layers")
        chans = [max(latent_dim, 8) // 2 ** i for i in range(n_layers)]
        chans = [max(c, 4) for c in chans]
        layers: list[nn.Module] = [nn.ConvTranspose2d(latent_dim, chans[0], first, 1, 0),
                                   nn.BatchNorm2d(chans[0]), nn.ReLU()]
        for i in range(1, n_layers):
            cout = out_channels if i == n_layers - 1 else chans[i]
            layers.append(nn.ConvTranspose2d(chans[i - 1], cout, 4, 2, 1))
            if i < n_layers - 1:
                layers += [nn.BatchNorm2d(cout), nn.ReLU()]
        self.net = nn.Sequential(*layers)
        self.n_layers = n_layers
        self.lo, self.hi = pixel_range

    def forward(self, z):
        out = self.net(z[:, :, None, None])
        return self.lo + (self.hi - self.lo) * torch.sigmoid(out)


class Classifier(nn.Module):
    """Plain residual (or VGG-style) image classifier: peer learner and substitutes."""

    def __init__(self, features: nn.Module, feat_dim: int, num_classes: int):
        super().__init__()
        self.features = features
        self.fc = nn.Linear(feat_dim, num_classes)

    def forward(self, x):
        return self.fc(self.features(x))


class OsdnModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ResidualEncoder(cfg.in_channels, cfg.widths, cfg.blocks, cfg.denoiser,
                                       cfg.reduction_ratio, cfg.spatial_kernel, (cfg.norm_mean, cfg.norm_std))
        d = self.encoder.out_dim
        self.latent_dim = d
        self.open_set_head = nn.Linear(d, cfg.num_classes)
        self.decoder = Decoder(d, cfg.in_channels, cfg.image_size, cfg.pixel_range) if cfg.dec else None
        self.transform_head = nn.Linear(d, 4) if cfg.ssd else None
        self.peer = None
        if cfg.caml:
            peer_enc = ResidualEncoder(cfg.in_channels, cfg.peer_widths, cfg.blocks, "none",
                                       norm=(cfg.norm_mean, cfg.norm_std))
            self.peer = Classifier(peer_enc, peer_enc.out_dim, cfg.num_classes)

    @property
    def num_classes(self) -> int:
        return self.cfg.num_classes

    def _check_input(self, x):
        c, s = self.cfg.in_channels, self.cfg.image_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (c, s, s):
            raise ShapeError(f"expected images of shape (n, {c}, {s}, {s}), got {tuple(x.shape)}")

    def encode(self, x):
        self._check_input(x)
        return self.encoder(x)

    def classify_known(self, z):
        return self.open_set_head(z)

    def logits(self, x):
        return self.classify_known(self.encode(x))

    def forward(self, x):
        return self.logits(x)

    def decode(self, z):
        if self.decoder is None:
            raise ConfigError("decoder is disabled (model.dec = false)")
        return self.decoder(z)

    def classify_rotation(self, z):
        if self.transform_head is None:
            raise ConfigError("transformation classifier is disabled (model.ssd = false)")
        return self.transform_head(z)

    def rotation_logits(self, x):
        return self.classify_rotation(self.encode(x))

    def peer_forward(self, x):
        if self.peer is None:
            raise ConfigError("peer learner is disabled (model.caml = false)")
        self._check_input(x)
        return self.peer(x)

    def main_parameters(self) -> list[nn.Parameter]:
        mods = [self.encoder, self.open_set_head, self.decoder, self.transform_head]
        return [p for m in mods if m is not None for p in m.parameters()]

    def peer_parameters(self) -> list[nn.Parameter]:
        return list(self.peer.parameters()) if self.peer is not None else []


@contextlib.contextmanager
def frozen_batchnorm(module: nn.Module):
    """Keep BatchNorm running statistics unchanged (e.g. while crafting attacks)."""
    bns = [m for m in module.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.momentum = 0.0
    try:
        yield module
    finally:
        for m, mom in zip(bns, saved):
            m.momentum = mom


@contextlib.contextmanager
def eval_mode(module: nn.Module):
    was = module.training
    module.eval()
    try:
        yield module
    finally:
        module.train(was)


# -- substitutes ---------------------------------------------------------------

SUBSTITUTES = ("resnet34_like", "vgg13_like", "toy_alt")


@dataclass(frozen=True)
class SubstituteSpec:
    arch_id: str
    num_classes: int = 2
    in_channels: int = 1
    image_size: int = 16
    width: int = 16
    extra: dict = field(default_factory=dict)


class _VggFeatures(nn.Module):
    def __init__(self, in_channels, cfg, norm):
        super().__init__()
        self.norm = Standardize(*norm)
        layers, cin = [], in_channels
        for v in cfg:
            if v == "M":
                layers.append(nn.MaxPool2d(2))
            else:
                layers += [nn.Conv2d(cin, v, 3, padding=1), nn.BatchNorm2d(v), nn.ReLU()]
                cin = v
        self.body = nn.Sequential(*layers)
        self.out_dim = cin

    def forward(self, x):
        return self.body(self.norm(x)).mean(dim=(2, 3))


def build_substitute(spec: SubstituteSpec, target: OsdnModel | None = None) -> Classifier:
    """A classifier structurally distinct from the target encoder."""
    w = spec.width
    norm = (0.5, 0.25)
    if spec.arch_id == "resnet34_like":
        feats = ResidualEncoder(spec.in_channels, (w, 2 * w, 2 * w, 4 * w), (3, 4, 6, 3), norm=norm)
    elif spec.arch_id == "vgg13_like":
        n_pool = 4 if spec.image_size >= 16 else 2
        plan: list = []
        for i, c in enumerate((w, 2 * w, 4 * w, 4 * w, 8 * w)):
            plan += [c, c]
            if i < n_pool:
                plan.append("M")
        feats = _VggFeatures(spec.in_channels, plan, norm)
    elif spec.arch_id == "toy_alt":
        feats = ResidualEncoder(spec.in_channels, (w // 2 or 1, w, w, 2 * w), (1, 2, 1, 1), norm=norm)
    else:
        raise ConfigError(f"unknown substitute {spec.arch_id!r}; valid options: {', '.join(SUBSTITUTES)}")
    model = Classifier(feats, feats.out_dim, spec.num_classes)
    if target is not None:
        tgt = {id(p) for p in target.parameters()}
        assert not any(id(p) in tgt for p in model.parameters())
    return model


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def encoder_block_count(module: nn.Module) -> int:
    return sum(isinstance(m, BasicBlock) for m in module.modules())
