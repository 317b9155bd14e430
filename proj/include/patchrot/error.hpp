#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace patchrot {

enum class ErrorKind {
  // imaging
  OutOfBounds,
  ChannelMismatch,
  MalformedHeader,
  TruncatedPayload,
  UnsupportedMaxval,
  // pretext
  PatchTooLarge,
  EmptyDataset,
  // tensors
  ShapeMismatch,
  NonFiniteValue,
  NotScalar,
  TapeConsumed,
  // models / training
  InvalidClass,
  CheckpointMismatch,
  NonFiniteLoss,
  EmptyTestSet,
  IOFailure,
  // datasets / cli
  TruncatedRecord,
  LabelOutOfRange,
  InvalidConfig,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Every failure raised by the library carries a machine-readable kind so the
/// CLI can map it onto an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::OutOfBounds: return "OutOfBounds";
    case ErrorKind::ChannelMismatch: return "ChannelMismatch";
    case ErrorKind::MalformedHeader: return "MalformedHeader";
    case ErrorKind::TruncatedPayload: return "TruncatedPayload";
    case ErrorKind::UnsupportedMaxval: return "UnsupportedMaxval";
    case ErrorKind::PatchTooLarge: return "PatchTooLarge";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonFiniteValue: return "NonFiniteValue";
    case ErrorKind::NotScalar: return "NotScalar";
    case ErrorKind::TapeConsumed: return "TapeConsumed";
    case ErrorKind::InvalidClass: return "InvalidClass";
    case ErrorKind::CheckpointMismatch: return "CheckpointMismatch";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::EmptyTestSet: return "EmptyTestSet";
    case ErrorKind::IOFailure: return "IOFailure";
    case ErrorKind::TruncatedRecord: return "TruncatedRecord";
    case ErrorKind::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

}  // namespace patchrot
