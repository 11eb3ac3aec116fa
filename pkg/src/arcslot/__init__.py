"""Context-slot injection with selective LoRA and gated recursive refinement, in numpy."""

__version__ = "0.1.0"
