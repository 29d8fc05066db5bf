#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "tracer/tensor.hpp"

namespace tracer {

using ordered_json = nlohmann::ordered_json;

std::string base64_encode(const std::uint8_t* data, std::size_t len);
std::vector<std::uint8_t> base64_decode(const std::string& text);

std::uint32_t crc32(const std::uint8_t* data, std::size_t len);

// Little-endian float64 blob <-> doubles.
std::vector<std::uint8_t> pack_f64le(const std::vector<double>& values);
std::vector<double> unpack_f64le(const std::vector<std::uint8_t>& bytes);

// Tensor embedded in JSON as {"shape": [...], "data_b64": "...", "crc32": N}.
// The checksum covers the raw little-endian float64 bytes.
ordered_json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const ordered_json& j);

// FNV-1a 64 over a byte string, hex-encoded; used for config digests.
std::string fnv1a_hex(const std::string& bytes);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);
std::vector<std::uint8_t> read_binary_file(const std::string& path);
void write_binary_file(const std::string& path, const std::vector<std::uint8_t>& bytes);

// P5 grayscale image, maxval 255.
void write_pgm(const std::string& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& pixels);

}  // namespace tracer
