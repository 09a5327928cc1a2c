// Copyright 2026 The dery Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dery {

// Error classes surface on the command line as a single machine-parseable
// token, so the set is closed.
enum class ErrorKind {
  kParse,          // malformed input file
  kConsistency,    // well-formed input violating a zoo invariant
  kInvalidArgument,
  kDegenerate,     // degenerate similarity input or empty equivalence set
  kInfeasible,     // no partition / candidate satisfies the constraints
  kTooLarge,       // oracle enumeration guard
  kIo,
  kInternal,
};

std::string_view error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace dery
