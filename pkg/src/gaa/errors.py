class GaatFormatError(ValueError):
    """Malformed GAAT tensor file."""


class DegenerateEnhancementError(ValueError):
    """Mask enhancement produced an empty mask."""


class InfeasiblePlacementError(RuntimeError):
    """No anchor satisfies the containment constraint."""

    def __init__(self, message, attempts=0, mask_area=0, region_area=0):
        super().__init__(
            f"{message} (attempts={attempts}, mask_area={mask_area}, region_area={region_area})"
        )
        self.attempts = attempts
        self.mask_area = mask_area
        self.region_area = region_area


class ConfigError(ValueError):
    """Pipeline configuration failed validation."""


class StageError(RuntimeError):
    """A pipeline stage failed."""

    def __init__(self, stage, item, cause):
        super().__init__(f"stage '{stage}' failed on {item}: {cause}")
        self.stage = stage
        self.item = item
        self.cause = cause
