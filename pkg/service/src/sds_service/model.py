"""Diffusion backend: noise an image at level t, predict the noise, and
return the weighted residual decoded to image space.

The heavy dependencies load lazily; --mock deployments never import them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .protocol import KIND_NORMAL, GradRequest

log = logging.getLogger(__name__)

NORMAL_PROMPT_PREFIX = "normal map of "


class ModelError(RuntimeError):
    pass


@dataclass
class ServiceConfig:
    model: str = ""
    device: str = "cpu"
    guidance_scale: float = 7.5
    port: int = 8040
    mock: bool = False
    max_side: int = 1024

    def __post_init__(self):
        if self.max_side < 64:
            raise ValueError("max image side must be >= 64")
        if not 0 < self.port < 65536:
            raise ValueError("invalid port")


class DiffusionBackend:
    """Latent-space SDS residual from a pretrained text-to-image pipeline."""

    def __init__(self, config: ServiceConfig):
        try:
            import torch
            from diffusers import StableDiffusionPipeline
        except ImportError as exc:  # pragma: no cover - model mode needs extras
            raise ModelError(
                "model mode requires the [model] extra (torch, diffusers, transformers)"
            ) from exc
        self.torch = torch
        self.config = config
        log.info("loading %s on %s", config.model, config.device)
        self.pipe = StableDiffusionPipeline.from_pretrained(config.model)
        self.pipe.to(config.device)
        self.alphas_cumprod = self.pipe.scheduler.alphas_cumprod

    def gradient(self, req: GradRequest) -> np.ndarray:
        torch = self.torch
        device = self.config.device
        prompt = req.prompt
        if req.kind == KIND_NORMAL:
            prompt = NORMAL_PROMPT_PREFIX + prompt
        gen = torch.Generator(device).manual_seed(req.seed)
        image = torch.from_numpy(req.image.copy()).permute(2, 0, 1).unsqueeze(0).to(device)
        image = image * 2 - 1

        with torch.no_grad():
            latents = self.pipe.vae.encode(image).latent_dist.sample(gen)
            latents = latents * self.pipe.vae.config.scaling_factor
            n_train = self.pipe.scheduler.config.num_train_timesteps
            t_frac = req.t_min + (req.t_max - req.t_min) * torch.rand(1, generator=gen, device=device)
            t = (t_frac * (n_train - 1)).long()
            noise = torch.randn(latents.shape, generator=gen, device=device)
            noisy = self.pipe.scheduler.add_noise(latents, noise, t)

            emb = self.pipe._encode_prompt(prompt, device, 1, True, "")
            latent_in = torch.cat([noisy] * 2)
            eps = self.pipe.unet(latent_in, t, encoder_hidden_states=emb).sample
            eps_uncond, eps_text = eps.chunk(2)
            eps_hat = eps_uncond + self.config.guidance_scale * (eps_text - eps_uncond)

            weight = 1 - self.alphas_cumprod[t].to(device)
            grad_latent = weight * (eps_hat - noise)
            decoded = self.pipe.vae.decode(grad_latent / self.pipe.vae.config.scaling_factor).sample
            decoded = torch.nn.functional.interpolate(
                decoded, size=req.image.shape[:2], mode="bilinear", align_corners=False
            )
        out = decoded[0].permute(1, 2, 0).cpu().numpy().astype(np.float32)
        return out
