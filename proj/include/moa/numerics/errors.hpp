// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace moa {

/// Shapes of operands do not agree.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A softmax row has no visible entry, or a renormalization hits A = 1.
class DegenerateRowError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Caller violated a precondition (non-scalar loss, empty supervision, ...).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// An op produced NaN or Inf.
class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad user input: token ids, lengths, config values.
class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A plan does not belong to the model it is applied to.
class PlanError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

}  // namespace moa
