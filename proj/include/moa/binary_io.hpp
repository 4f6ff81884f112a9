// SPDX-License-Identifier: Apache-2.0
//
// Header-plus-payload files: one line of JSON, '\n', then little-endian doubles.

#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace moa {

void write_json_payload(const std::string& path, const nlohmann::json& header, const std::vector<double>& payload);

struct JsonPayload {
    nlohmann::json header;
    std::vector<double> payload;
};

/// Throws InputError if the file is missing, truncated or has trailing bytes.
JsonPayload read_json_payload(const std::string& path);

}  // namespace moa
