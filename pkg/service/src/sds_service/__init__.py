"""SDS gradient service: wraps a text-to-image diffusion model behind the
binary wire protocol used by the avatar trainer."""

__version__ = "0.1.0"
