#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   "TTDCKPT\0"                      8 bytes magic
//   u32 version                      currently 1
//   u32 length, bytes                JSON header {"model": config, "vocabulary": vocab text}
//   per tensor, in parameter_layout() order:
//     u32 length, bytes              tensor name
//     u8 rank, rank x u32            dimensions
//     numel x fp32                   row-major data
//   u32 crc32                        CRC-32 of every preceding byte

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttd/errors.hpp"
#include "ttd/io.hpp"
#include "ttd/model.hpp"
#include "ttd/tokenizer.hpp"

namespace ttd {

inline constexpr std::array<char, 8> kCheckpointMagic = {'T', 'T', 'D', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::string_view s) { buf_.append(s); }
  void string(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  [[nodiscard]] const std::string& buffer() const { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string_view data, std::size_t end) : data_(data), end_(end) {}

  [[nodiscard]] std::size_t position() const { return pos_; }
  [[nodiscard]] bool done() const { return pos_ >= end_; }

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string string() { return std::string(bytes(u32())); }

 private:
  void need(std::size_t n) const {
    if (n > end_ || pos_ > end_ - n) throw LoadError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::string_view data_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Serializes a detector to the checkpoint byte format.
inline std::string serialize_checkpoint(const Detector& det) {
  detail::ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic.data(), kCheckpointMagic.size()));
  w.u32(kCheckpointVersion);
  const nlohmann::json header = {{"model", config_to_json(det.config)}, {"vocabulary", det.vocab.serialize()}};
  w.string(header.dump());
  for (const auto& [name, t] : det.weights.parameters()) {
    w.string(name);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.data()) w.f32(v);
  }
  auto bytes = w.take();
  detail::ByteWriter tail;
  tail.u32(crc32_of(bytes));
  bytes += tail.buffer();
  return bytes;
}

inline Detector parse_checkpoint(std::string_view bytes) {
  if (bytes.size() < kCheckpointMagic.size() + 12) throw LoadError("checkpoint too small");
  const auto body = bytes.substr(0, bytes.size() - 4);
  detail::ByteReader crc_reader(bytes.substr(bytes.size() - 4), 4);
  if (crc_reader.u32() != crc32_of(body)) throw LoadError("checkpoint CRC mismatch (file corrupted)");

  detail::ByteReader r(body, body.size());
  if (r.bytes(kCheckpointMagic.size()) != std::string_view(kCheckpointMagic.data(), kCheckpointMagic.size())) {
    throw LoadError("not a checkpoint (bad magic)");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw LoadError("unsupported checkpoint version " + std::to_string(version));

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.string());
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (!header.contains("model") || !header.contains("vocabulary")) throw LoadError("checkpoint header incomplete");
  Detector det;
  det.config = config_from_json(header["model"]);
  det.vocab = Vocabulary::parse(header["vocabulary"].get<std::string>());
  if (det.vocab.size() != det.config.vocab_size) {
    throw LoadError("vocabulary has " + std::to_string(det.vocab.size()) + " tokens but config says " +
                    std::to_string(det.config.vocab_size));
  }

  const auto layout = parameter_layout(det.config);
  std::vector<Tensor<float>> tensors;
  while (!r.done()) {
    const auto name = r.string();
    if (tensors.size() >= layout.size()) throw LoadError("unexpected extra tensor '" + name + "'");
    if (name != layout[tensors.size()].first) {
      throw LoadError("tensor '" + name + "' out of order, expected '" + layout[tensors.size()].first + "'");
    }
    Shape shape(r.u8());
    for (auto& d : shape) d = r.u32();
    if (shape != layout[tensors.size()].second) {
      throw LoadError("tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                      shape_str(layout[tensors.size()].second));
    }
    std::vector<float> data(shape_numel(shape));
    for (auto& v : data) v = r.f32();
    tensors.emplace_back(std::move(shape), std::move(data));
  }
  det.weights = assemble_weights<float>(det.config, std::move(tensors));
  return det;
}

inline void save_checkpoint(const Detector& det, const std::string& path) {
  write_file_bytes(path, serialize_checkpoint(det));
}

inline Detector load_checkpoint(const std::string& path) { return parse_checkpoint(read_file_bytes(path)); }

}  // namespace ttd
