#pragma once

// Versioned container used by model files:
//
//   8 bytes   magic (format tag)
//   u32 LE    container version
//   u64 LE    header length H
//   H bytes   UTF-8 JSON header; "tensors": [{"name", "shape", "offset", "count"}]
//   ...       float32 LE payload, offsets counted in floats
//
// nlohmann::json serializes objects with sorted keys and doubles in
// round-trip form, so encode(decode(bytes)) == bytes.

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "embgen/binary_io.hpp"
#include "embgen/common.hpp"

namespace embgen::io {

inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> data;
};

struct Container {
  nlohmann::json header;  // excludes the "tensors" table
  std::vector<NamedTensor> tensors;

  const NamedTensor& tensor(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw ValidationError("container has no tensor named " + std::string(name));
  }
};

inline std::string encode_container(std::string_view magic, const Container& c) {
  if (magic.size() != 8) throw ValidationError("container magic must be 8 bytes");
  nlohmann::json header = c.header;
  nlohmann::json table = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : c.tensors) {
    table.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"count", t.data.size()}});
    offset += t.data.size();
  }
  header["tensors"] = std::move(table);
  const std::string text = header.dump();

  std::string out(magic);
  put_u32(out, kContainerVersion);
  put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset * 4);
  for (const auto& t : c.tensors)
    for (float v : t.data) put_f32(out, v);
  return out;
}

inline Container decode_container(std::string_view bytes, std::string_view magic) {
  if (bytes.size() < 20) throw ParseError("truncated container header", bytes.size(), "byte");
  if (bytes.substr(0, 8) != magic)
    throw ParseError("bad container magic, expected " + std::string(magic), 0, "byte");
  const std::uint32_t version = get_u32(bytes, 8);
  if (version != kContainerVersion)
    throw ParseError("unsupported container version " + std::to_string(version), 8, "byte");
  const std::uint64_t hlen = get_u64(bytes, 12);
  if (20 + hlen > bytes.size()) throw ParseError("header length exceeds file size", 12, "byte");
  Container c;
  try {
    c.header = nlohmann::json::parse(bytes.substr(20, hlen));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("invalid container header JSON: ") + e.what(), 20 + e.byte, "byte");
  }
  const std::size_t payload = 20 + hlen;
  const std::size_t payload_floats = (bytes.size() - payload) / 4;
  if ((bytes.size() - payload) % 4 != 0) throw ParseError("payload is not a whole number of floats", payload, "byte");
  if (!c.header.contains("tensors") || !c.header["tensors"].is_array())
    throw ParseError("container header lacks a tensor table", 20, "byte");
  std::size_t expected = 0;
  for (const auto& entry : c.header["tensors"]) {
    NamedTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<std::vector<std::size_t>>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto count = entry.at("count").get<std::size_t>();
    if (offset + count > payload_floats)
      throw ParseError("tensor " + t.name + " extends past end of payload", payload + offset * 4, "byte");
    t.data.resize(count);
    for (std::size_t i = 0; i < count; ++i) t.data[i] = get_f32(bytes, payload + 4 * (offset + i));
    expected += count;
    c.tensors.push_back(std::move(t));
  }
  if (expected != payload_floats)
    throw ParseError("payload size does not match tensor table", payload + expected * 4, "byte");
  c.header.erase("tensors");
  return c;
}

}  // namespace embgen::io
