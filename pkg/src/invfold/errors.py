"""Exception hierarchy shared across the package."""


class InvfoldError(Exception):
    """Base class for all package errors."""


class ParseError(InvfoldError):
    """Input text could not be parsed as PDB content."""


class ChainNotFound(InvfoldError):
    """Requested chain identifier has no ATOM records in the file."""


class EmptyBackbone(InvfoldError):
    """No residues survived filtering."""


class InvalidRotation(InvfoldError):
    """Matrix is not a proper rotation (orthonormal, det +1)."""


class InvalidParameter(InvfoldError):
    """Parameter outside its documented range."""


class DegenerateFrame(InvfoldError):
    """Residue atoms are collinear; no local frame exists."""

    def __init__(self, residue_index, message=None):
        self.residue_index = residue_index
        super().__init__(message or f"degenerate local frame at residue {residue_index}")


class GraphTooSmall(InvfoldError):
    """Fewer than two residues; no neighbor graph can be built."""


class NumericError(InvfoldError):
    """Non-finite value encountered in a numeric operation."""


class InvalidBackward(InvfoldError):
    """backward() called on a non-scalar or already-consumed graph."""


class ShapeError(InvfoldError):
    """Tensor or embedding dimensions are incompatible."""


class IsolatedNode(InvfoldError):
    """A node with no neighbors reached the attention layer."""


class TrainingDiverged(InvfoldError):
    """Loss became non-finite during training."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")


class EmptyLoss(InvfoldError):
    """Every residue is masked; the loss is undefined."""


class InvalidAttention(InvfoldError):
    """Attention rows are not stochastic."""


class InfiniteResistance(InvfoldError):
    """Effective resistance requested on a disconnected graph."""


class ConfigError(InvfoldError):
    """Configuration file violates the schema."""


class CheckpointMismatch(InvfoldError):
    """Checkpoint parameters do not match the model configuration."""
