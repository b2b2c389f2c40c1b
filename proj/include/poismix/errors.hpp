#pragma once

// Shared exception types.

#include <stdexcept>
#include <string>

namespace poismix {

// A statistic whose defining ratio has a zero denominator (e.g. all
// within-group distances are zero, or a projection absorbs the whole Gram
// trace).  Callers running batches catch this and flag the row instead of
// aborting the batch.
class degenerate_error : public std::runtime_error {
 public:
  explicit degenerate_error(const std::string& what) : std::runtime_error(what) {}
};

// Malformed input data (tables, covariate files, CLI payloads).
class parse_error : public std::runtime_error {
 public:
  explicit parse_error(const std::string& what) : std::runtime_error(what) {}
};

// Inconsistent run configuration (flags, bounds, column references).
class config_error : public std::runtime_error {
 public:
  explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

// An unusable regression design (rank-deficient covariate matrix, bad
// diagnosis column).
class design_error : public std::runtime_error {
 public:
  explicit design_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace poismix
