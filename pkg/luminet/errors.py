class LuminetError(Exception):
    """Base class for every error the package raises on purpose"""

    exit_code = 1


class UsageError(LuminetError):
    exit_code = 2


class ShapeError(LuminetError, ValueError):
    """Tensor shapes disagree with a model config or with each other"""

    exit_code = 2


class DataError(LuminetError):
    exit_code = 3


class ManifestError(DataError):
    pass


class DatasetWithoutPairsError(DataError):
    pass


class InsufficientLightingError(DataError):
    pass


class CheckpointError(LuminetError):
    exit_code = 4


class ModelNotLoadedError(LuminetError):
    exit_code = 4


class InvalidRankingError(DataError):
    def __init__(self, participant_id: str, message: str):
        super().__init__(f"participant {participant_id}: {message}")
        self.participant_id = participant_id


class FrozenPartitionError(AssertionError):
    """A frozen parameter was handed to an optimizer or changed during training"""


class GeneratorMutationError(AssertionError):
    """The frozen generator changed while training the variational encoder"""
