"""Refiner, discriminator and gaze backbone networks plus checkpoint IO.

Networks take NCHW float tensors in [-1, 1]. Images coming from
:func:`eyesynth.data.load_image` are HWC and are converted with
:func:`to_batch`.
"""

from __future__ import annotations

import os
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as nnf


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    input_size: int = 128
    residual_blocks: int = 6
    refiner_channels: int = 32
    disc_channels: int = 64
    backbone_channels: int = 32
    norm_epsilon: float = 1e-5

    def __post_init__(self):
        if self.input_size <= 0 or self.input_size % 4:
            raise ConfigError(f"input_size must be a positive multiple of 4, got {self.input_size}")
        for name in ("refiner_channels", "disc_channels", "backbone_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.residual_blocks < 0:
            raise ConfigError("residual_blocks must be >= 0")

    @classmethod
    def reduced(cls, width: int = 8, **kw) -> NetConfig:
        """Same topology with every channel count scaled down by a common factor."""
        return cls(refiner_channels=width, disc_channels=2 * width, backbone_channels=width, **kw)


def to_batch(images) -> torch.Tensor:
    """Stack HWC images (or one image) into an NCHW float32 tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def load_stack(m, size: int) -> torch.Tensor:
    """Load every image of manifest ``m`` into one NCHW batch."""
    from .data import load_image

    return to_batch(np.stack([load_image(m.path_of(r), size) for r in m.records]))


def to_images(batch: torch.Tensor) -> np.ndarray:
    return batch.detach().cpu().numpy().transpose(0, 2, 3, 1)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, eps: float):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3, bias=False),
            nn.InstanceNorm2d(channels, affine=True, eps=eps),
            nn.ReLU(),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3, bias=False),
            nn.InstanceNorm2d(channels, affine=True, eps=eps),
        )

    def forward(self, x):
        return x + self.body(x)


class Refiner(nn.Module):
    """Image-to-image mapper: 7x7 stem, two stride-2 stages, residual trunk,
    two transposed-conv upsamplers and a 7x7 tanh output layer."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c, eps = cfg.refiner_channels, cfg.norm_epsilon
        self.input_spec = (3, cfg.input_size, cfg.input_size)
        self.output_spec = (3, cfg.input_size, cfg.input_size)

        def norm_relu(ch):
            return [nn.InstanceNorm2d(ch, affine=True, eps=eps), nn.ReLU()]

        self.encoder = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(3, c, 7, bias=False), *norm_relu(c),
            nn.ReflectionPad2d(1), nn.Conv2d(c, 2 * c, 3, stride=2, bias=False), *norm_relu(2 * c),
            nn.ReflectionPad2d(1), nn.Conv2d(2 * c, 4 * c, 3, stride=2, bias=False), *norm_relu(4 * c),
        )
        self.trunk = nn.Sequential(*[ResidualBlock(4 * c, eps) for _ in range(cfg.residual_blocks)])
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(4 * c, 2 * c, 3, stride=2, padding=1, output_padding=1, bias=False),
            *norm_relu(2 * c),
            nn.ConvTranspose2d(2 * c, c, 3, stride=2, padding=1, output_padding=1, bias=False),
            *norm_relu(c),
            nn.ReflectionPad2d(3), nn.Conv2d(c, 3, 7),
            nn.Tanh(),
        )

    def forward(self, x):
        return self.decoder(self.trunk(self.encoder(x)))


def build_refiner(cfg: NetConfig = NetConfig()) -> Refiner:
    return Refiner(cfg)


def _halve(n: int) -> int:
    # spatial size after a 4x4 stride-2 conv with padding 1
    return (n + 2 - 4) // 2 + 1


class Discriminator(nn.Module):
    """Four 4x4 stride-2 convs and a final conv covering the remaining extent,
    giving one score per image."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        # the last instance norm needs more than one spatial element
        if cfg.input_size < 32:
            raise ConfigError(f"discriminator needs input_size >= 32, got {cfg.input_size}")
        c, eps = cfg.disc_channels, cfg.norm_epsilon
        self.input_spec = (3, cfg.input_size, cfg.input_size)
        self.output_spec = (1,)
        layers: list[nn.Module] = [nn.Conv2d(3, c, 4, 2, 1), nn.LeakyReLU(0.2)]
        ch, size = c, _halve(cfg.input_size)
        for _ in range(3):
            layers += [
                nn.Conv2d(ch, 2 * ch, 4, 2, 1, bias=False),
                nn.InstanceNorm2d(2 * ch, affine=True, eps=eps),
                nn.LeakyReLU(0.2),
            ]
            ch, size = 2 * ch, _halve(size)
        self.final_kernel = size
        layers.append(nn.Conv2d(ch, 1, size))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x).reshape(x.shape[0], 1)


def build_discriminator(cfg: NetConfig = NetConfig()) -> Discriminator:
    return Discriminator(cfg)


# (out_channels at width 32, stride) for each depthwise-separable pair
_MOBILENET_ROWS = (
    (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
    (512, 1), (512, 1), (512, 1), (512, 1), (512, 1),
    (1024, 2), (1024, 2),
)


def _conv_bn(cin, cout, k, stride, groups=1):
    return [
        nn.Conv2d(cin, cout, k, stride, padding=k // 2, groups=groups, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(),
    ]


class GazeBackbone(nn.Module):
    """MobileNet-style depthwise-separable stack with global average pooling.

    With ``out_dim == 3`` the output is a unit gaze direction; with
    ``out_dim`` equal to the pooled width the pooled features are returned
    unchanged; otherwise a linear head of width ``out_dim`` is applied.
    """

    def __init__(self, cfg: NetConfig, out_dim: int = 3):
        super().__init__()
        scale = cfg.backbone_channels / 32
        width = lambda ch: max(1, int(round(ch * scale)))  # noqa: E731
        layers = _conv_bn(3, width(32), 3, 2)
        ch = width(32)
        for out, stride in _MOBILENET_ROWS:
            layers += _conv_bn(ch, ch, 3, stride, groups=ch)
            layers += _conv_bn(ch, width(out), 1, 1)
            ch = width(out)
        self.features = nn.Sequential(*layers)
        self.feature_width = ch
        self.out_dim = out_dim
        self.normalize = out_dim == 3
        self.head = nn.Identity() if out_dim == ch else nn.Linear(ch, out_dim)
        self.input_spec = (3, cfg.input_size, cfg.input_size)
        self.output_spec = (out_dim,)

    def forward(self, x):
        f = self.features(x).mean(dim=(2, 3))
        y = self.head(f)
        if self.normalize:
            # rescale first: an untrained deep stack can emit values far below eps
            y = y / y.detach().abs().amax(dim=1, keepdim=True).clamp_min(1e-30)
            y = nnf.normalize(y, dim=1, eps=1e-12)
        return y


def build_gaze_backbone(cfg: NetConfig = NetConfig(), out_dim: int = 3) -> GazeBackbone:
    if out_dim < 1:
        raise ConfigError("out_dim must be positive")
    return GazeBackbone(cfg, out_dim)


_NORMS = (nn.InstanceNorm2d, nn.BatchNorm2d)


def init_parameters(net: nn.Module, seed: int) -> nn.Module:
    """Weights ~ N(0, 0.02), norm scales 1, biases 0; deterministic per seed."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for mod in net.modules():
            if isinstance(mod, _NORMS):
                if mod.weight is not None:
                    mod.weight.fill_(1.0)
                    mod.bias.zero_()
            elif isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                w = torch.empty(mod.weight.shape, dtype=torch.float64).normal_(0.0, 0.02, generator=gen)
                mod.weight.copy_(w)
                if mod.bias is not None:
                    mod.bias.zero_()
    return net


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def freeze(net: nn.Module) -> nn.Module:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def save_arrays(arrays: dict[str, np.ndarray], path) -> None:
    """Write named arrays as little-endian float32 blobs plus a text shape index.

    The write goes to a temporary file that is renamed into place.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = []
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            if "\t" in name or "\n" in name:
                raise CheckpointError(f"invalid array name {name!r}")
            a = np.asarray(arr, dtype="<f4")
            index.append(f"{name}\t{','.join(map(str, a.shape))}")
            info = zipfile.ZipInfo(f"data/{name}.bin", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, a.tobytes(order="C"))
        info = zipfile.ZipInfo("index.txt", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, "\n".join(index) + "\n")
    os.replace(tmp, path)


def load_arrays(path) -> dict[str, np.ndarray]:
    out = {}
    try:
        with zipfile.ZipFile(path) as zf:
            for line in zf.read("index.txt").decode("utf-8").splitlines():
                if not line:
                    continue
                name, shape_txt = line.split("\t")
                shape = tuple(int(s) for s in shape_txt.split(",")) if shape_txt else ()
                raw = zf.read(f"data/{name}.bin")
                out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return out


def state_arrays(nets: dict[str, nn.Module]) -> dict[str, np.ndarray]:
    out = {}
    for prefix, net in nets.items():
        for name, t in net.state_dict().items():
            out[f"{prefix}.{name}"] = t.detach().cpu().numpy()
    return out


def load_state_arrays(nets: dict[str, nn.Module], arrays: dict[str, np.ndarray], strict_extra: bool = False) -> None:
    """Copy arrays into ``nets``; any missing name or shape mismatch raises."""
    expected = set()
    for prefix, net in nets.items():
        sd = net.state_dict()
        for name, t in sd.items():
            key = f"{prefix}.{name}"
            expected.add(key)
            if key not in arrays:
                raise CheckpointError(f"checkpoint is missing {key}")
            arr = arrays[key]
            if tuple(arr.shape) != tuple(t.shape):
                raise CheckpointError(f"shape mismatch for {key}: checkpoint {arr.shape}, model {tuple(t.shape)}")
            with torch.no_grad():
                t.copy_(torch.from_numpy(arr).to(t.dtype))
    if strict_extra:
        owned = {k for k in arrays if k.split(".", 1)[0] in nets}
        extra = owned - expected
        if extra:
            raise CheckpointError(f"checkpoint has unexpected entries: {sorted(extra)[:5]}")


def save_checkpoint(path, nets: dict[str, nn.Module], extra: dict[str, np.ndarray] | None = None) -> None:
    arrays = state_arrays(nets)
    if extra:
        arrays.update(extra)
    save_arrays(arrays, path)


def load_checkpoint(path, nets: dict[str, nn.Module]) -> dict[str, np.ndarray]:
    """Load ``nets`` in place and return the raw array map (for extra state)."""
    arrays = load_arrays(path)
    load_state_arrays(nets, arrays, strict_extra=True)
    return arrays


def optimizer_arrays(opt: torch.optim.Optimizer, names: dict[int, str], prefix: str) -> dict[str, np.ndarray]:
    """Flatten Adam moment buffers keyed by parameter name."""
    out = {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            key = f"{prefix}.{names[id(p)]}"
            out[f"{key}.exp_avg"] = st["exp_avg"].detach().numpy()
            out[f"{key}.exp_avg_sq"] = st["exp_avg_sq"].detach().numpy()
            out[f"{key}.step"] = np.array([float(st["step"])])
    return out


def restore_optimizer(opt: torch.optim.Optimizer, names: dict[int, str], prefix: str, arrays) -> None:
    for group in opt.param_groups:
        for p in group["params"]:
            key = f"{prefix}.{names[id(p)]}"
            if f"{key}.exp_avg" not in arrays:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(arrays[f"{key}.step"][0])),
                "exp_avg": torch.from_numpy(arrays[f"{key}.exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"{key}.exp_avg_sq"].copy()),
            }
