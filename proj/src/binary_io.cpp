// SPDX-License-Identifier: Apache-2.0

#include "moa/binary_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include "moa/numerics/errors.hpp"

namespace moa {

namespace {

std::uint64_t to_le(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        std::uint64_t r = 0;
        for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
        return r;
    }
}

}  // namespace

void write_json_payload(const std::string& path, const nlohmann::json& header, const std::vector<double>& payload) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + path);
    nlohmann::json h = header;
    h["payload_doubles"] = payload.size();
    const std::string line = h.dump();
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    out.put('\n');
    for (double d : payload) {
        std::uint64_t bits = to_le(std::bit_cast<std::uint64_t>(d));
        char buf[8];
        std::memcpy(buf, &bits, 8);
        out.write(buf, 8);
    }
    if (!out) throw InputError("write failed: " + path);
}

JsonPayload read_json_payload(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot read " + path);
    std::string line;
    if (!std::getline(in, line)) throw InputError("missing header in " + path);
    JsonPayload r;
    try {
        r.header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw InputError("bad header in " + path + ": " + e.what());
    }
    const auto count = r.header.value("payload_doubles", std::size_t{0});
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() != count * 8) {
        throw InputError("payload size mismatch in " + path + ": expected " + std::to_string(count * 8) +
                         " bytes, got " + std::to_string(bytes.size()));
    }
    r.payload.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, bytes.data() + 8 * i, 8);
        r.payload[i] = std::bit_cast<double>(to_le(bits));
    }
    return r;
}

}  // namespace moa
