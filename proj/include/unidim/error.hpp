/*
 * SPDX-License-Identifier: Apache-2.0
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <stdexcept>
#include <string>

namespace unidim {

enum class ErrorKind {
  format,       // malformed file contents (NPY magic/header, CSV, JSON)
  data,         // non-finite or otherwise invalid values
  consistency,  // shapes or ids that disagree across inputs
  version,      // schema-version mismatch on reload
  io,           // filesystem failures
  input,        // violated precondition on an argument
  config,       // config-schema violation
  missing_stage,
  degenerate,   // zero bandwidth, constant vectors, all-degenerate grids
  undefined,    // score undefined for the given input (zero vector, zero variance)
  numerical,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::format: return "format";
    case ErrorKind::data: return "data";
    case ErrorKind::consistency: return "consistency";
    case ErrorKind::version: return "version";
    case ErrorKind::io: return "io";
    case ErrorKind::input: return "input";
    case ErrorKind::config: return "config";
    case ErrorKind::missing_stage: return "missing-stage";
    case ErrorKind::degenerate: return "degenerate";
    case ErrorKind::undefined: return "undefined";
    case ErrorKind::numerical: return "numerical";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  /// True for failures caused by bad inputs rather than by the numerics.
  bool is_validation() const noexcept {
    switch (kind_) {
      case ErrorKind::degenerate:
      case ErrorKind::undefined:
      case ErrorKind::numerical:
        return false;
      default:
        return true;
    }
  }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace unidim
