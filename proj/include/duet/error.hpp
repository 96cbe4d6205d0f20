/* Copyright 2026 The Duet Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace duet {

enum class ErrorCode {
  kInvalidArgument,  // caller supplied an out-of-domain value
  kParse,            // malformed input file
  kData,             // well-formed input that cannot support the operation
  kRuntime,          // I/O, sockets, upstream failures
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

// Raised by the trace / profile / config readers. `line` is 1-based, 0 when
// the error is not tied to a specific line.
class ParseError : public Error {
 public:
  ParseError(int64_t line, const std::string& what)
      : Error(ErrorCode::kParse,
              line > 0 ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}

  int64_t line() const { return line_; }

 private:
  int64_t line_;
};

inline Error invalid_argument(const std::string& what) {
  return Error(ErrorCode::kInvalidArgument, what);
}

inline Error data_error(const std::string& what) {
  return Error(ErrorCode::kData, what);
}

}  // namespace duet
