"""In-memory phantom -> synthetic pair -> patch dataset construction.

The CLI writes every intermediate to disk; this module runs the same chain
without files so experiments and tests can build datasets in one call.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .patches import PatchSet, augment_rotations, extract_patches
from .phantoms import FAMILIES, PhantomSpec, generate_sequence
from .synth import NoiseSpec, SynthPair, synthesize_pair
from .volume import FlowSample, VolumeGrid

DEFAULT_SNR = (10.0, 20.0)

# source-model ids are family_index * MODEL_ID_STRIDE + model index
MODEL_ID_STRIDE = 1000


def derive_seed(root: int, *path: int) -> int:
    """Child seed for a position in the experiment tree (``SeedSequence`` keyed by path)."""
    return int(np.random.SeedSequence([int(root), *map(int, path)]).generate_state(1)[0])


def model_id(family: str, index: int) -> int:
    return FAMILIES.index(family) * MODEL_ID_STRIDE + index


def draw_snr(rng: np.random.Generator, snr_range: Tuple[float, float]) -> float:
    lo, hi = snr_range
    if not 0 < lo <= hi:
        raise ValueError(f"bad SNR range {snr_range}")
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


@dataclass(frozen=True)
class DatasetRecipe:
    """Everything that determines a pooled patch dataset."""

    families: Tuple[str, ...] = ("tube-jet", "branch-slow", "cavity-vortex")
    n_models: int = 5
    n_frames: int = 3
    grid_n: int = 48
    dx: float = 1.5
    snr: Tuple[float, float] = DEFAULT_SNR
    stride: int = 6
    min_fluid: float = 0.05
    rotations: int = 0
    seed: int = 0

    def __post_init__(self):
        for f in self.families:
            if f not in FAMILIES:
                raise ValueError(f"unknown phantom family {f!r}")
        if self.n_models < 1 or self.n_frames < 1:
            raise ValueError("n_models and n_frames must be >= 1")
        if self.grid_n % 4:
            raise ValueError("grid_n must be divisible by 4")


def phantom_spec(recipe: DatasetRecipe, family: str, index: int) -> PhantomSpec:
    grid = VolumeGrid(recipe.grid_n, recipe.grid_n, recipe.grid_n, recipe.dx)
    return PhantomSpec(family, grid=grid, seed=derive_seed(recipe.seed, FAMILIES.index(family), index))


def model_frames(recipe: DatasetRecipe, family: str, index: int) -> List[FlowSample]:
    return generate_sequence(phantom_spec(recipe, family, index), recipe.n_frames)


def synth_frames(recipe: DatasetRecipe, family: str, index: int) -> List[SynthPair]:
    """Noisy LR twins of one phantom's frames, SNR drawn per frame."""
    fam = FAMILIES.index(family)
    rng = np.random.default_rng(derive_seed(recipe.seed, fam, index, 1))
    pairs = []
    for frame in model_frames(recipe, family, index):
        snr = draw_snr(rng, recipe.snr)
        noise = NoiseSpec(snr, derive_seed(recipe.seed, fam, index, 2, frame.frame))
        pairs.append(synthesize_pair(frame, noise))
    return pairs


def build_patches(recipe: DatasetRecipe, return_counts: bool = False):
    """Pooled patch set over ``recipe.families`` with per-model source ids."""
    sets = []
    kept = rejected = 0
    for family in recipe.families:
        for i in range(recipe.n_models):
            mid = model_id(family, i)
            for pair in synth_frames(recipe, family, i):
                ps, k, r = extract_patches(pair, stride=recipe.stride, min_fluid_frac=recipe.min_fluid,
                                           source_model=mid, return_counts=True)
                sets.append(ps)
                kept += k
                rejected += r
    out = PatchSet.concatenate(sets)
    if recipe.rotations:
        out = augment_rotations(out, recipe.rotations, derive_seed(recipe.seed, 99))
    return (out, kept, rejected) if return_counts else out


def family_counts(ps: PatchSet) -> Dict[str, int]:
    from .patches import COMPARTMENT_NAMES
    codes, counts = np.unique(ps.compartment, return_counts=True)
    return {COMPARTMENT_NAMES[int(c)]: int(n) for c, n in zip(codes, counts)}
