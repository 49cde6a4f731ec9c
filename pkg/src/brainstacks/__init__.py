"""Continual learning with frozen, stacked MoE-LoRA deltas on a tiny transformer.

Submodules: ``autodiff`` (numpy reverse mode), ``model`` (base transformer),
``moe_lora`` and ``stacked`` (deltas and their composition), ``nullspace``,
``training`` (inner and outer loops), ``router``, ``store``, ``data``,
``pipeline`` and ``reports`` (experiments), ``cli``.
"""

__version__ = "0.1.0"
