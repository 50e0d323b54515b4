// Copyright 2026 The Linkstage Authors.
//
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

#include "linkstage/log.hpp"

#include <cstdlib>

namespace linkstage {

bool ConfigureLoggingFromEnv() {
  const char* raw = std::getenv("LINKSTAGE_LOG");
  const std::string value = raw == nullptr ? "info" : raw;
  if (value == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (value == "info") {
    spdlog::set_level(spdlog::level::info);
  } else if (value == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    return false;
  }
  return true;
}

}  // namespace linkstage
