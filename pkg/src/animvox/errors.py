"""Exception hierarchy. Every error carries a short machine-parsable category
used by the CLI for its one-line diagnostics."""


class AnimvoxError(Exception):
    category = "internal"


class ContractViolation(AnimvoxError):
    """A caller broke a documented precondition (non-unit direction, bad range...)."""

    category = "contract"


class CarvedEmptyError(AnimvoxError):
    """Volume carving removed every cell. Carries per-view survival counts."""

    category = "carve-empty"

    def __init__(self, survival_counts):
        self.survival_counts = list(survival_counts)
        counts = ", ".join(f"view {i}: {n}" for i, n in enumerate(self.survival_counts))
        super().__init__(f"carving produced an empty voxel set ({counts})")


class DuplicateMortonError(AnimvoxError):
    """Octree build received colliding cells; resolve collisions first."""

    category = "duplicate-morton"


class EmptyWarpError(AnimvoxError):
    """A pose moved every voxel outside the canonical grid bounds."""

    category = "warp-empty"

    def __init__(self, dropped: int):
        self.dropped = dropped
        super().__init__(f"all {dropped} voxels warped out of bounds")


class AssetFormatError(AnimvoxError):
    category = "asset-format"


class TruncatedAssetError(AssetFormatError):
    category = "asset-truncated"


class MagicMismatchError(AssetFormatError):
    category = "asset-magic"


class CountMismatchError(AssetFormatError):
    category = "asset-count"


class FitDivergenceError(AnimvoxError):
    """NaN appeared in the training loss."""

    category = "fit-diverged"

    def __init__(self, iteration, ray_id):
        self.iteration = iteration
        self.ray_id = ray_id
        super().__init__(f"NaN loss at iteration {iteration} (ray {ray_id})")
