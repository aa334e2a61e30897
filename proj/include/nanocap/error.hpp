/*
 * SPDX-License-Identifier: Apache-2.0
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
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
#include <string_view>

namespace nanocap {

enum class ErrorCode {
  kSequenceTooLong,
  kSequenceTooShort,
  kContextOverflow,
  kEmptySpan,
  kIoFailure,
  kVersionMismatch,
  kDimensionMismatch,
  kEmptyQuestionSample,
  kInsufficientData,
  kSchemaViolation,
  kMissingSlot,
  kUnparseableStructure,
  kZeroLengthOriginal,
  kUnknownProvider,
  kEmptyDataset,
  kConfigInvalid,
  kFrozenParams,
  kInvalidArgument,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kSequenceTooLong: return "sequence-too-long";
    case ErrorCode::kSequenceTooShort: return "sequence-too-short";
    case ErrorCode::kContextOverflow: return "context-overflow";
    case ErrorCode::kEmptySpan: return "empty-span";
    case ErrorCode::kIoFailure: return "io-failure";
    case ErrorCode::kVersionMismatch: return "version-mismatch";
    case ErrorCode::kDimensionMismatch: return "dimension-mismatch";
    case ErrorCode::kEmptyQuestionSample: return "empty-question-sample";
    case ErrorCode::kInsufficientData: return "insufficient-data";
    case ErrorCode::kSchemaViolation: return "schema-violation";
    case ErrorCode::kMissingSlot: return "missing-slot";
    case ErrorCode::kUnparseableStructure: return "unparseable-structure";
    case ErrorCode::kZeroLengthOriginal: return "zero-length-original";
    case ErrorCode::kUnknownProvider: return "unknown-provider";
    case ErrorCode::kEmptyDataset: return "empty-dataset";
    case ErrorCode::kConfigInvalid: return "config-invalid";
    case ErrorCode::kFrozenParams: return "frozen-params";
    case ErrorCode::kInvalidArgument: return "invalid-argument";
  }
  return "unknown";
}

/// Every failure the library reports carries one of the codes above; the
/// message holds the human-readable detail.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace nanocap
