#pragma once

#include <stdexcept>
#include <string>

namespace osar {

/// Operand shapes disagree with what an operation requires.
class DimensionError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// An image, ROI, or region is too small for the requested operation.
class SizeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// A class label or similar index is outside its valid range.
class IndexError : public std::out_of_range {
public:
  using std::out_of_range::out_of_range;
};

/// A caller violated a documented precondition.
class ContractError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

/// Malformed or truncated file content.
class FormatError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Filesystem-level failure (missing file, unwritable directory).
class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A pipeline stage cannot proceed on the given inputs.
class PipelineError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Raised when the classifier finds no A-type patch to harvest patterns from.
class NoArtifactPatchesError : public PipelineError {
public:
  NoArtifactPatchesError()
      : PipelineError("no artifact patches detected: add more A-type ROIs placed on "
                      "artifacts over a uniform background") {}
};

}  // namespace osar
