class CobiasError(RuntimeError):
    """Base class for failures reported by cobiaslab."""


class ConfigError(CobiasError):
    """Invalid user input: config files, CLI arguments, dataset files."""


class DatasetFormatError(ConfigError):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(CobiasError):
    """Non-finite values or a diverging estimate."""


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, checkpoint: dict | None = None) -> None:
        super().__init__(message)
        self.checkpoint = checkpoint


class ShapeError(ValueError):
    pass
