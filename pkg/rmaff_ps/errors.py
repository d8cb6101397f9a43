"""Exception types raised by the toolkit"""


class PhotometricStereoError(Exception):
    """Base class for every toolkit error"""


class InputError(PhotometricStereoError):
    """Invalid user input: bad shapes, files, lights or parameters"""


class ConfigError(InputError):
    """Configuration document could not be read or validated"""


class ShapeError(InputError):
    """Tensor shapes do not fit the layer they are fed to"""


class GraphError(PhotometricStereoError):
    """Reverse-mode differentiation was asked for something it cannot do"""


class TrainingError(PhotometricStereoError):
    """Training diverged; carries the id of the offending batch"""

    def __init__(self, message, batch_id=None):
        super().__init__(message)
        self.batch_id = batch_id
