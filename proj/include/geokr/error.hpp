#pragma once

#include <stdexcept>
#include <string>

namespace geokr {

enum class Errc {
  // raster container
  MalformedHeader,
  SizeMismatch,
  UnsupportedSampleType,
  SampleOutOfRange,
  // geoknow
  NoHostingArea,
  WindowOutOfBounds,
  NotLandCover,
  NoSupportedClasses,
  // ingest
  SceneTooSmall,
  WrongBandCount,
  // nnet
  ShapeMismatch,
  GraphNotEvaluated,
  MissingGradients,
  ArchitectureMismatch,
  NonSquareTile,
  // trainer
  SourceUnreadable,
  NonFiniteLoss,
  // analyze
  DivisionByZeroProportion,
  KeyMismatch,
  // config / io
  InvalidConfig,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::MalformedHeader: return "MalformedHeader";
    case Errc::SizeMismatch: return "SizeMismatch";
    case Errc::UnsupportedSampleType: return "UnsupportedSampleType";
    case Errc::SampleOutOfRange: return "SampleOutOfRange";
    case Errc::NoHostingArea: return "NoHostingArea";
    case Errc::WindowOutOfBounds: return "WindowOutOfBounds";
    case Errc::NotLandCover: return "NotLandCover";
    case Errc::NoSupportedClasses: return "NoSupportedClasses";
    case Errc::SceneTooSmall: return "SceneTooSmall";
    case Errc::WrongBandCount: return "WrongBandCount";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::GraphNotEvaluated: return "GraphNotEvaluated";
    case Errc::MissingGradients: return "MissingGradients";
    case Errc::ArchitectureMismatch: return "ArchitectureMismatch";
    case Errc::NonSquareTile: return "NonSquareTile";
    case Errc::SourceUnreadable: return "SourceUnreadable";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::DivisionByZeroProportion: return "DivisionByZeroProportion";
    case Errc::KeyMismatch: return "KeyMismatch";
    case Errc::InvalidConfig: return "InvalidConfig";
  }
  return "UnknownError";
}

// Domain error. Preconditions violated by the caller throw std::invalid_argument
// instead; Error is reserved for conditions the spec names.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace geokr
