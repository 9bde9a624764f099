"""Exception types shared across the package.

The CLI maps these to process exit codes: ConfigError -> 2,
DataError -> 3, DivergenceError -> 4.
"""


class VtlmError(Exception):
    pass


class ConfigError(VtlmError):
    """Invalid or inconsistent configuration."""


class DataError(VtlmError):
    """Corpus files missing, malformed, or incompatible."""


class DivergenceError(VtlmError):
    """Training produced non-finite losses and was aborted."""


class NumericError(VtlmError):
    """Numeric-domain violation (e.g. non-finite softmax input)."""


class TransferError(ConfigError):
    """Pretrained weights incompatible with the target model."""
