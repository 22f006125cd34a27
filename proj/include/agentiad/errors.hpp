// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace agentiad {

/// Raised when a caller breaks a documented precondition.
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Raised by the visual tools; the message is surfaced to the agent as a tool-error turn.
class ToolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Manifest, config or image files that cannot be loaded.
class LoadError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class EndpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace agentiad
