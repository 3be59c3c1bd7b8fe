// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace samt {

/// Bad user input: malformed files, out-of-range values, unknown options.
/// The CLI maps this to exit code 1.
class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// An internal precondition or numerical contract was broken (fully masked
/// attention row, non-finite activations, missing forward state).
/// The CLI maps this to exit code 2.
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

inline void require_input(bool ok, const std::string& what) {
    if (!ok) throw InputError(what);
}

inline void require_contract(bool ok, const std::string& what) {
    if (!ok) throw ContractViolation(what);
}

} // namespace samt
