#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "calora/tensor.hpp"
#include "json.hpp"

namespace calora {

// Little-endian container shared by checkpoints and adapter files:
//   [0,8)    magic
//   [8,12)   u32 format version
//   [12,16)  u32 header length L
//   [16,16+L) UTF-8 JSON header; "arrays" maps name -> {shape, offset},
//            "payload_doubles" is the payload length
//   zero padding to a multiple of 8, then the f64 payload. Offsets are in
//   doubles from the start of the payload.

class BinaryWriter {
 public:
  BinaryWriter(std::string magic, std::uint32_t version);

  nlohmann::json& header() { return header_; }
  /// Registers an array and returns its name.
  std::string add_array(const std::string& name, const Tensor& t);
  void write(const std::filesystem::path& path) const;

 private:
  std::string magic_;
  std::uint32_t version_;
  nlohmann::json header_;
  std::vector<double> payload_;
};

class BinaryReader {
 public:
  BinaryReader(const std::filesystem::path& path, const std::string& magic, std::uint32_t version);

  const nlohmann::json& header() const { return header_; }
  bool has_array(const std::string& name) const;
  Tensor array(const std::string& name, bool requires_grad = false) const;

 private:
  std::filesystem::path path_;
  nlohmann::json header_;
  std::vector<double> payload_;
};

}  // namespace calora
