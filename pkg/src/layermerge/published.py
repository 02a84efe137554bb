"""Published layer-selective recipes, kept as regression fixtures.

Layer indices are 0-based and name the N-dominated (gate 0) layers.
"""

from __future__ import annotations

from .recipe import DiscreteRecipe

BACKBONE_LAYERS = {
    "LongVA-7B": 28,
    "InternVL3-8B": 28,
    "Qwen3-VL-4B-Instruct": 36,
}

# (alpha, layer indices)
SEARCHED_RECIPES = {
    "LongVA-7B": (1.0, (1, 5, 7, 8, 11, 13, 14, 16, 19, 20, 23)),
    "InternVL3-8B": (0.9, (4, 7, 12, 14, 16, 17, 18, 24, 26)),
    "Qwen3-VL-4B-Instruct": (1.0, (0, 4, 8, 10, 13, 17, 18, 21, 23, 26, 28, 29, 30, 31, 32, 35)),
}

RANDOM_K_RECIPES = {
    "LongVA-7B": (
        1.0,
        (
            (5, 7, 8, 10, 11, 17, 20, 21, 22, 26, 27),
            (0, 3, 4, 5, 6, 8, 9, 14, 15, 19, 27),
            (1, 4, 7, 11, 12, 15, 20, 21, 23, 26, 27),
            (1, 6, 7, 15, 17, 18, 20, 21, 22, 25, 27),
            (5, 8, 9, 12, 13, 14, 15, 21, 24, 25, 27),
        ),
    ),
    "InternVL3-8B": (
        0.9,
        (
            (5, 8, 10, 12, 13, 16, 23, 24, 27),
            (0, 1, 3, 4, 6, 10, 12, 16, 23),
            (0, 2, 3, 9, 13, 15, 16, 18, 26),
            (0, 1, 4, 12, 16, 19, 24, 26, 27),
            (1, 6, 8, 10, 18, 19, 22, 26, 27),
        ),
    ),
    "Qwen3-VL-4B-Instruct": (
        1.0,
        (
            (2, 3, 6, 7, 12, 14, 21, 22, 23, 24, 25, 28, 29, 30, 31, 33),
            (0, 3, 4, 5, 6, 7, 9, 10, 11, 15, 17, 22, 24, 30, 33, 35),
            (1, 2, 3, 4, 7, 8, 10, 14, 15, 17, 18, 20, 21, 22, 23, 25),
            (0, 1, 2, 7, 11, 14, 15, 18, 19, 21, 25, 26, 27, 28, 32, 35),
            (0, 3, 4, 6, 8, 9, 10, 14, 17, 18, 20, 21, 24, 30, 31, 35),
        ),
    ),
}

# Video-MME search-subset accuracies (fractions): base, all-layer, searched recipe.
# Random-k entries are run means.
VIDEO_MME_ACCURACIES = {
    "LongVA-7B": {
        "base": {"TP": 0.600, "TR": 0.401},
        "all-layer": {"TP": 0.618, "TR": 0.395},
        "random-k": {"TP": 0.589, "TR": 0.384},
        "searched": {"TP": 0.618, "TR": 0.497},
    },
    "InternVL3-8B": {
        "base": {"TP": 0.745, "TR": 0.520},
        "all-layer": {"TP": 0.764, "TR": 0.542},
        "random-k": {"TP": 0.782, "TR": 0.516},
        "searched": {"TP": 0.818, "TR": 0.576},
    },
    "Qwen3-VL-4B-Instruct": {
        "base": {"TP": 0.691, "TR": 0.452},
        "all-layer": {"TP": 0.673, "TR": 0.441},
        "random-k": {"TP": 0.633, "TR": 0.415},
        "searched": {"TP": 0.691, "TR": 0.469},
    },
}


def searched_recipe(model: str) -> DiscreteRecipe:
    alpha, layers = SEARCHED_RECIPES[model]
    return DiscreteRecipe.from_n_dominated(layers, BACKBONE_LAYERS[model], alpha)


def random_k_recipes(model: str) -> list[DiscreteRecipe]:
    alpha, runs = RANDOM_K_RECIPES[model]
    return [DiscreteRecipe.from_n_dominated(layers, BACKBONE_LAYERS[model], alpha) for layers in runs]
