#pragma once

#include <stdexcept>
#include <string>

namespace qdetr {

// Shape/extent disagreement between tensors.
struct dim_error : std::runtime_error {
  explicit dim_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated precondition (non-scalar backward, bad bounds, ...).
struct contract_error : std::runtime_error {
  explicit contract_error(const std::string& msg) : std::runtime_error(msg) {}
};

// File format / serialization problems.
struct io_error : std::runtime_error {
  explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace qdetr
