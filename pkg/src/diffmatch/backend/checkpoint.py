"""Latent-diffusion checkpoint adapter (Stable Diffusion v1.4 layout) built on ``diffusers``.

Expected artifact: the ``CompVis/stable-diffusion-v1-4`` repository in diffusers
directory layout (``unet/``, ``vae/``, ``scheduler/`` subfolders).  The adapter
logs the SHA-256 of the U-Net weight file it loads so runs can be tied to the
exact weights used.

Cross-attention probabilities are captured by replacing the processor of every
``attn2`` module.  The 16 modules are indexed 0-15 in contracting -> bottleneck
-> expansive order.  The noise prediction is never used, so the forward pass stops
as soon as the deepest requested layer has been recorded.
"""
from __future__ import annotations

import hashlib
import logging
import math
from pathlib import Path

import torch

from .base import AttentionStack, Backend, BackendDescriptor, BackendError, LatentCode, LayerGeometry

log = logging.getLogger(__name__)

# (h, w, d) per layer for a 512x512 input.
SD14_LAYERS = (
    (64, 64, 40), (64, 64, 40), (32, 32, 80), (32, 32, 80), (16, 16, 160), (16, 16, 160),
    (8, 8, 160),
    (16, 16, 160), (16, 16, 160), (16, 16, 160), (32, 32, 80), (32, 32, 80), (32, 32, 80),
    (64, 64, 40), (64, 64, 40), (64, 64, 40),
)


class _Stop(Exception):
    pass


class _CaptureProcessor:
    """Standard attention that also records the softmax probabilities."""

    def __init__(self, index: int, sink: "CheckpointBackend"):
        self.index = index
        self.sink = sink

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None,
                 temb=None, *args, **kwargs):
        batch, seq, _ = hidden_states.shape
        query = attn.to_q(hidden_states)
        context = encoder_hidden_states if encoder_hidden_states is not None else hidden_states
        if encoder_hidden_states is not None and attn.norm_cross:
            context = attn.norm_encoder_hidden_states(context)
        key = attn.to_k(context)
        value = attn.to_v(context)
        query, key, value = (attn.head_to_batch_dim(t) for t in (query, key, value))
        probs = attn.get_attention_scores(query, key, None)          # (batch*heads, seq, P)
        if self.index in self.sink._wanted:
            self.sink._captured[self.index] = probs.reshape(batch, attn.heads, seq, -1)[0]
            if self.index == self.sink._last:
                raise _Stop
        out = attn.batch_to_head_dim(torch.bmm(probs, value))
        return attn.to_out[1](attn.to_out[0](out))


def cross_attention_modules(unet) -> list:
    mods = []
    blocks = list(unet.down_blocks) + [unet.mid_block] + list(unet.up_blocks)
    for block in blocks:
        for t in getattr(block, "attentions", None) or []:
            for tb in t.transformer_blocks:
                mods.append(tb.attn2)
    return mods


def _layer_resolutions(unet, latent_hw: tuple[int, int]) -> list[tuple[int, int]]:
    h, w = latent_hw
    res = []
    n_down = len(unet.down_blocks)
    for i, block in enumerate(unet.down_blocks):
        f = 2 ** i
        for t in getattr(block, "attentions", None) or []:
            res += [(h // f, w // f)] * len(t.transformer_blocks)
    f = 2 ** (n_down - 1)
    for t in getattr(unet.mid_block, "attentions", None) or []:
        res += [(h // f, w // f)] * len(t.transformer_blocks)
    for j, block in enumerate(unet.up_blocks):
        f = 2 ** (n_down - 1 - j)
        for t in getattr(block, "attentions", None) or []:
            res += [(h // f, w // f)] * len(t.transformer_blocks)
    return res


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class CheckpointBackend(Backend):
    def __init__(self, unet, vae, alphas_cumprod, input_size: int = 512, total_steps: int = 50,
                 n_tokens: int = 77, strict_geometry: bool = True, device=None,
                 dtype: torch.dtype = torch.float32, name: str = "checkpoint"):
        self.device = torch.device(device or ("cuda" if torch.cuda.is_available() else "cpu"))
        self.dtype = dtype
        self.unet = unet.to(self.device, dtype).eval().requires_grad_(False)
        self.vae = vae.to(self.device, dtype).eval().requires_grad_(False)
        self.alphas_cumprod = torch.as_tensor(alphas_cumprod, dtype=torch.float64).cpu()
        self.total_steps = total_steps
        self.vae_scale = float(getattr(vae.config, "scaling_factor", 0.18215))
        factor = 2 ** (len(vae.config.block_out_channels) - 1)
        lat = input_size // factor
        self._modules = cross_attention_modules(unet)
        res = _layer_resolutions(unet, (lat, lat))
        geometry = {}
        for i, (m, (h, w)) in enumerate(zip(self._modules, res)):
            geometry[i] = LayerGeometry(h, w, m.to_q.out_features // m.heads, m.heads)
            m.set_processor(_CaptureProcessor(i, self))
        embed_dim = self._modules[0].to_k.in_features if self._modules else 0
        self.descriptor = BackendDescriptor(
            name=name, latent_geometry=(unet.config.in_channels, lat, lat), layer_geometry=geometry,
            n_tokens=n_tokens, embed_dim=embed_dim, supports_gradients=True, input_size=input_size)
        if strict_geometry:
            check_sd14_geometry(self.descriptor)
        self._wanted: set[int] = set()
        self._captured: dict[int, torch.Tensor] = {}
        self._last = -1

    @classmethod
    def from_pretrained(cls, path: str | Path, **kwargs) -> "CheckpointBackend":
        try:
            from diffusers import AutoencoderKL, DDPMScheduler, UNet2DConditionModel
        except ImportError as err:
            raise BackendError("the checkpoint backend needs the 'diffusers' package "
                               "(pip install 'diffmatch[checkpoint]')") from err
        root = Path(path)
        if not (root / "unet").is_dir():
            raise BackendError(f"checkpoint not found: expected diffusers layout with unet/ under {root}")
        unet = UNet2DConditionModel.from_pretrained(root, subfolder="unet")
        vae = AutoencoderKL.from_pretrained(root, subfolder="vae")
        sched = DDPMScheduler.from_pretrained(root, subfolder="scheduler")
        for f in sorted((root / "unet").glob("diffusion_pytorch_model*")):
            log.info("unet weights %s sha256=%s", f.name, file_sha256(f))
        return cls(unet, vae, sched.alphas_cumprod, **kwargs)

    # -- Backend contract -------------------------------------------------
    def encode_tensor(self, pixels: torch.Tensor) -> torch.Tensor:
        self._check_input(pixels)
        x = (pixels.to(self.device, self.dtype) * 2.0 - 1.0)[None]
        with torch.no_grad():
            z = self.vae.encode(x).latent_dist.mean * self.vae_scale
        return z[0]

    def train_timestep(self, t: int) -> int:
        """Inference step ``t`` of ``total_steps`` -> index into the training schedule."""
        self.check_timestep(t)
        return t * (len(self.alphas_cumprod) // self.total_steps)

    def alpha_bar(self, t: int) -> float:
        return float(self.alphas_cumprod[self.train_timestep(t)])

    def sample_noise(self, seed: int) -> torch.Tensor:
        return super().sample_noise(seed).to(self.device)

    def attention_forward(self, latent: LatentCode, e: torch.Tensor, layers) -> AttentionStack:
        layers = self.check_layers(layers)
        self.check_embedding(e)
        self._wanted, self._captured, self._last = set(layers), {}, max(layers)
        z = latent.z.to(self.device, self.dtype)[None]
        ctx = e.to(self.device, self.dtype)[None]
        t = torch.tensor([self.train_timestep(latent.timestep)], device=self.device)
        try:
            self.unet(z, t, encoder_hidden_states=ctx)
        except _Stop:
            pass
        finally:
            self._wanted = set()
        missing = set(layers) - set(self._captured)
        if missing:
            raise BackendError(f"layers {sorted(missing)} were not reached in the forward pass")
        maps = {l: self._captured[l] for l in layers}
        self._captured = {}
        return AttentionStack(maps, {l: self.descriptor.layer_geometry[l] for l in layers})


def check_sd14_geometry(desc: BackendDescriptor) -> None:
    """Assert the 16-layer table of Stable Diffusion v1.4 at 512x512 input."""
    if desc.n_layers != len(SD14_LAYERS):
        raise BackendError(f"expected {len(SD14_LAYERS)} cross-attention layers, found {desc.n_layers}")
    scale = desc.input_size / 512
    for l, (h, w, d) in enumerate(SD14_LAYERS):
        g = desc.layer_geometry[l]
        want = (int(h * scale), int(w * scale), d)
        if (g.h, g.w, g.d) != want:
            raise BackendError(f"layer {l}: geometry {(g.h, g.w, g.d)} != expected {want}")
    if desc.latent_geometry[0] != 4:
        raise BackendError(f"expected 4 latent channels, got {desc.latent_geometry[0]}")


def tiny_unet_and_vae(embed_dim: int = 32, seed: int = 0):
    """Randomly initialized miniature of the SD v1.4 block layout, for tests and smoke runs."""
    from diffusers import AutoencoderKL, UNet2DConditionModel

    torch.manual_seed(seed)
    unet = UNet2DConditionModel(
        sample_size=8, in_channels=4, out_channels=4, layers_per_block=2,
        block_out_channels=(32, 32, 64, 64), norm_num_groups=8,
        down_block_types=("CrossAttnDownBlock2D",) * 3 + ("DownBlock2D",),
        up_block_types=("UpBlock2D",) + ("CrossAttnUpBlock2D",) * 3,
        cross_attention_dim=embed_dim, attention_head_dim=8)
    vae = AutoencoderKL(
        in_channels=3, out_channels=3, latent_channels=4, block_out_channels=(8, 8, 16, 16),
        down_block_types=("DownEncoderBlock2D",) * 4, up_block_types=("UpDecoderBlock2D",) * 4,
        norm_num_groups=4, layers_per_block=1, sample_size=64)
    return unet, vae


def sd_alphas_cumprod(num_train_timesteps: int = 1000) -> torch.Tensor:
    """Scaled-linear schedule used by SD v1.x (beta 0.00085 -> 0.012)."""
    betas = torch.linspace(math.sqrt(0.00085), math.sqrt(0.012), num_train_timesteps,
                           dtype=torch.float64) ** 2
    return torch.cumprod(1.0 - betas, dim=0)
