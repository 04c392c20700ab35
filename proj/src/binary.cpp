#include "calora/binary.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "calora/error.hpp"

namespace calora {

static_assert(std::endian::native == std::endian::little, "only little-endian hosts are supported");

using nlohmann::json;

BinaryWriter::BinaryWriter(std::string magic, std::uint32_t version)
    : magic_(std::move(magic)), version_(version), header_(json::object()) {
  require(magic_.size() == 8, "binary magic must be 8 bytes");
  header_["arrays"] = json::object();
}

std::string BinaryWriter::add_array(const std::string& name, const Tensor& t) {
  require(!header_["arrays"].contains(name), "duplicate array '" + name + "'");
  header_["arrays"][name] = {{"shape", t.shape()}, {"offset", payload_.size()}};
  payload_.insert(payload_.end(), t.data().begin(), t.data().end());
  return name;
}

void BinaryWriter::write(const std::filesystem::path& path) const {
  nlohmann::json h = header_;
  h["payload_doubles"] = payload_.size();
  const std::string text = h.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::uint32_t len = static_cast<std::uint32_t>(text.size());
  out.write(magic_.data(), 8);
  out.write(reinterpret_cast<const char*>(&version_), 4);
  out.write(reinterpret_cast<const char*>(&len), 4);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const std::size_t pad = (8 - (16 + text.size()) % 8) % 8;
  const char zeros[8] = {};
  out.write(zeros, static_cast<std::streamsize>(pad));
  out.write(reinterpret_cast<const char*>(payload_.data()),
            static_cast<std::streamsize>(payload_.size() * sizeof(double)));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

BinaryReader::BinaryReader(const std::filesystem::path& path, const std::string& magic, std::uint32_t version)
    : path_(path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), magic.data(), 8) != 0)
    throw ContractError(path.string() + ": not a " + magic + " file");
  std::uint32_t ver = 0, len = 0;
  std::memcpy(&ver, bytes.data() + 8, 4);
  std::memcpy(&len, bytes.data() + 12, 4);
  if (ver != version)
    throw ContractError(path.string() + ": unsupported version " + std::to_string(ver));
  if (16 + static_cast<std::size_t>(len) > bytes.size()) throw ContractError(path.string() + ": truncated header");
  header_ = json::parse(std::string(bytes.data() + 16, len));
  const std::size_t start = 16 + len + (8 - (16 + len) % 8) % 8;
  require(start <= bytes.size() && (bytes.size() - start) % sizeof(double) == 0, path.string() + ": truncated payload");
  payload_.resize((bytes.size() - start) / sizeof(double));
  if (!header_.contains("payload_doubles") || header_["payload_doubles"].get<std::size_t>() != payload_.size())
    throw ContractError(path.string() + ": payload holds " + std::to_string(payload_.size()) + " values, header declares " +
                        header_["payload_doubles"].dump());
  std::memcpy(payload_.data(), bytes.data() + start, payload_.size() * sizeof(double));
}

bool BinaryReader::has_array(const std::string& name) const {
  return header_.contains("arrays") && header_["arrays"].contains(name);
}

Tensor BinaryReader::array(const std::string& name, bool requires_grad) const {
  if (!has_array(name)) throw ContractError(path_.string() + ": missing array '" + name + "'");
  const auto& e = header_["arrays"][name];
  const Shape shape = e.at("shape").get<Shape>();
  const std::size_t off = e.at("offset").get<std::size_t>();
  const std::size_t n = numel_of(shape);
  if (off + n > payload_.size()) throw ContractError(path_.string() + ": array '" + name + "' out of bounds");
  return Tensor(shape, std::vector<double>(payload_.begin() + off, payload_.begin() + off + n), requires_grad);
}

}  // namespace calora
