"""Exception hierarchy shared by every stage of the deblurring pipeline."""


class DeblurError(Exception):
    """Base class for all toolkit failures."""


class ImageFormatError(DeblurError):
    """Unreadable image/kernel file or unsupported bit depth."""


class KernelError(DeblurError):
    """Invalid blur kernel, or kernel synthesis gave up after its retries."""


class ShapeMismatchError(DeblurError):
    """Array sizes do not match what an operation expects."""


class SymmetryError(DeblurError):
    """A spectrum that should be conjugate-symmetric is not."""


class InsufficientSamplesError(DeblurError):
    """Too few samples to fit a statistic reliably."""


class InsufficientTextureError(DeblurError):
    """The sharp estimate carries no usable gradients for kernel estimation."""


class TrainingDivergedError(DeblurError):
    """Non-finite loss or gradient during training."""

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message)
        self.layer = layer


class WeightsFileError(DeblurError):
    """Weights file has a bad magic, truncated payload or checksum mismatch."""


class ImageTooSmallError(DeblurError):
    """Image cannot accommodate the requested boundary exclusion."""


class PipelineError(DeblurError):
    """A pipeline stage failed; `stage` names it for the CLI."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
