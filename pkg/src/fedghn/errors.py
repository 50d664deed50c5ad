"""Exception and warning types shared across the package."""

from __future__ import annotations


class FedGhnError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FedGhnError):
    """An array or graph shape is inconsistent with what an operation needs."""


class CycleError(FedGhnError):
    """A graph that must be acyclic contains a cycle."""


class UnknownType(FedGhnError):
    """A node references a layer type id that is not in the vocabulary."""


class UnknownPreset(FedGhnError):
    """A preset name does not match any built-in architecture."""


class ParseError(FedGhnError):
    """Serialized input (JSON graph, config file) could not be parsed."""


class SchemaError(FedGhnError):
    """A parsed config is structurally valid JSON but violates the schema."""


class NonFiniteError(FedGhnError):
    """A computation produced NaN or Inf where finite values are required."""


class LabelOutOfRange(FedGhnError):
    """A class label lies outside [0, num_classes)."""


class NotScalar(FedGhnError):
    """Backpropagation was requested from a non-scalar node."""


class StepOutOfRange(FedGhnError):
    """A schedule was queried outside [0, total_steps]."""


class MissingHead(FedGhnError):
    """A parametric node's type has no decoder head in the hypernetwork."""


class BadDims(FedGhnError):
    """Hypernetwork dimensions are invalid for the requested mode."""


class DimMismatch(FedGhnError):
    """Two parameter sets that must share structure do not."""


class BadParams(FedGhnError):
    """A checkpoint or parameter blob is malformed or corrupt."""


class VocabMismatch(FedGhnError):
    """Clients in one federation do not share a layer vocabulary."""


class ArchMismatch(FedGhnError):
    """An operation requiring structurally identical architectures got different ones."""


class EmptyShard(FedGhnError):
    """A client was given an empty training shard."""


class NonDivisible(FedGhnError):
    """A step budget does not divide evenly across the requested rounds."""


class FileSizeError(FedGhnError):
    """A binary dataset file is not a whole number of records."""


class LabelError(FedGhnError):
    """A binary dataset record contains an invalid label byte."""


class TooFewSamples(FedGhnError):
    """A split would leave some client with no samples."""


class DegenerateSplit(FedGhnError):
    """A split request is inconsistent (for example more clients than samples)."""


class DegenerateLabel(FedGhnError):
    """Every label column is single-class, so no ranking metric is defined."""


class EmptyRecords(FedGhnError):
    """Plot data was requested from an empty metrics stream."""


class DegenerateLabelWarning(UserWarning):
    """A single-class label column was skipped when averaging ranking metrics."""
