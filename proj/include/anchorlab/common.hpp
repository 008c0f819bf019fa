#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <stdexcept>
#include <string>

namespace anchorlab {

// Row-major everywhere so serialized buffers match in-memory layout.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct AnchorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : AnchorError { using AnchorError::AnchorError; };
struct ShapeError : AnchorError { using AnchorError::AnchorError; };
struct LabelError : AnchorError { using AnchorError::AnchorError; };
struct CountError : AnchorError { using AnchorError::AnchorError; };
struct RateError : AnchorError { using AnchorError::AnchorError; };
struct MapError : AnchorError { using AnchorError::AnchorError; };
struct EmptyClassError : AnchorError { using AnchorError::AnchorError; };
struct FormatError : AnchorError { using AnchorError::AnchorError; };
struct NormalizationError : AnchorError { using AnchorError::AnchorError; };
struct AnchoringError : AnchorError { using AnchorError::AnchorError; };
struct ProbabilityError : AnchorError { using AnchorError::AnchorError; };
struct DomainError : AnchorError { using AnchorError::AnchorError; };
struct ZeroVectorError : AnchorError { using AnchorError::AnchorError; };
struct ConfigError : AnchorError { using AnchorError::AnchorError; };
struct DimMismatchError : AnchorError { using AnchorError::AnchorError; };
struct IncompatibleSpecError : AnchorError { using AnchorError::AnchorError; };
struct IoError : AnchorError { using AnchorError::AnchorError; };

struct ConvergenceError : AnchorError {
  double achieved_deviation;
  ConvergenceError(const std::string& msg, double achieved)
      : AnchorError(msg), achieved_deviation(achieved) {}
};

// Norms below this are treated as zero when normalizing.
inline constexpr double kZeroNormEps = 1e-12;

namespace detail {

inline void write_doubles(const std::string& path, const double* data, std::size_t count) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(double)));
  if (!f) throw IoError("short write to " + path);
}

inline void read_doubles(const std::string& path, double* data, std::size_t count) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  f.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(double)));
  if (static_cast<std::size_t>(f.gcount()) != count * sizeof(double))
    throw FormatError(path + ": expected " + std::to_string(count * sizeof(double)) + " bytes");
}

}  // namespace detail

// Upper bound on worker threads; ANCHORLAB_THREADS overrides, default 1
// so every run is bit-deterministic unless the user opts into sharding.
inline int thread_cap() {
  const char* env = std::getenv("ANCHORLAB_THREADS");
  if (!env) return 1;
  char* end = nullptr;
  long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1) return 1;
  return static_cast<int>(v > 64 ? 64 : v);
}

}  // namespace anchorlab
