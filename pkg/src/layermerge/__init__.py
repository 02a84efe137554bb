"""Layer-selective merging of a multimodal model with its text-only backbone.

Per-layer binary gates decide which parent dominates each attention layer; a
shared interpolation weight sets how strongly. Gates are searched with CMA-ES
against a reward-minus-penalty objective computed by pluggable evaluators.
"""

from .recipe import DiscreteRecipe, RecipeRecord, apply_recipe, load_recipe, save_recipe
from .tensor_store import Checkpoint, read_checkpoint, write_checkpoint

__all__ = [
    "Checkpoint",
    "DiscreteRecipe",
    "RecipeRecord",
    "apply_recipe",
    "load_recipe",
    "read_checkpoint",
    "save_recipe",
    "write_checkpoint",
]
__version__ = "0.1.0"
