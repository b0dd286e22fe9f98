#include "wnet/checkpoint.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>

namespace wnet {
namespace {

constexpr std::array<char, 8> kMagic = {'W', 'N', 'E', 'T', 'C', 'K', 'P', 'T'};

template <class T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class T>
T get_le(std::span<const std::uint8_t> in, std::size_t pos) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(in[pos + i]) << (8 * i);
  return v;
}

}  // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw CheckpointError("SHA-256 computation failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xf]);
  }
  return out;
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string format_number(float v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void Checkpoint::put(const std::string& name, const Tensor& t) {
  for (auto& [n, v] : tensors_) {
    if (n == name) {
      v = t;
      return;
    }
  }
  tensors_.emplace_back(name, t);
}

bool Checkpoint::contains(const std::string& name) const {
  return std::any_of(tensors_.begin(), tensors_.end(), [&](const auto& p) { return p.first == name; });
}

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, v] : tensors_) {
    if (n == name) return v;
  }
  throw CheckpointError("checkpoint has no tensor named '" + name + "'");
}

const std::string& Checkpoint::meta(const std::string& key) const {
  auto it = metadata.find(key);
  if (it == metadata.end()) throw CheckpointError("checkpoint metadata lacks key '" + key + "'");
  return it->second;
}

namespace {

std::vector<std::uint8_t> build_payload(const std::vector<std::pair<std::string, Tensor>>& tensors,
                                        nlohmann::json* records) {
  std::vector<std::uint8_t> payload;
  for (const auto& [name, t] : tensors) {
    const Shape s = t.shape();
    const std::uint64_t offset = payload.size();
    for (float v : t.data()) put_le(payload, std::bit_cast<std::uint32_t>(v));
    if (records) {
      records->push_back({{"name", name},
                          {"dtype", "f32"},
                          {"shape", {s.n, s.c, s.h, s.w}},
                          {"offset", offset},
                          {"nbytes", payload.size() - offset}});
    }
  }
  return payload;
}

}  // namespace

std::string Checkpoint::digest() const { return sha256_hex(build_payload(tensors_, nullptr)); }

std::vector<std::uint8_t> Checkpoint::serialize() const {
  nlohmann::json records = nlohmann::json::array();
  const std::vector<std::uint8_t> payload = build_payload(tensors_, &records);
  nlohmann::json header;
  header["digest"] = sha256_hex(payload);
  header["metadata"] = metadata;
  header["tensors"] = std::move(records);
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  put_le(out, kFormatVersion);
  put_le(out, static_cast<std::uint64_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

namespace {

struct Parsed {
  nlohmann::json header;
  std::span<const std::uint8_t> payload;
};

Parsed parse_container(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t fixed = kMagic.size() + 4 + 8;
  if (bytes.size() < fixed || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw CheckpointError("not a checkpoint container (bad magic)");
  }
  const auto version = get_le<std::uint32_t>(bytes, kMagic.size());
  if (version != Checkpoint::kFormatVersion) {
    throw CheckpointError("unsupported checkpoint format version " + std::to_string(version) + " (expected " +
                          std::to_string(Checkpoint::kFormatVersion) + ")");
  }
  const auto header_len = get_le<std::uint64_t>(bytes, kMagic.size() + 4);
  if (header_len > bytes.size() - fixed) throw CheckpointError("truncated checkpoint header");
  Parsed p;
  try {
    p.header = nlohmann::json::parse(bytes.begin() + fixed, bytes.begin() + fixed + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  }
  p.payload = bytes.subspan(fixed + header_len);
  return p;
}

std::vector<TensorRecord> records_of(const nlohmann::json& header, std::size_t payload_size) {
  std::vector<TensorRecord> out;
  try {
    for (const auto& r : header.at("tensors")) {
      TensorRecord rec;
      rec.name = r.at("name").get<std::string>();
      rec.dtype = r.at("dtype").get<std::string>();
      rec.shape = r.at("shape").get<std::vector<std::int64_t>>();
      rec.offset = r.at("offset").get<std::uint64_t>();
      rec.nbytes = r.at("nbytes").get<std::uint64_t>();
      out.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed tensor manifest: ") + e.what());
  }
  std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
  for (const auto& rec : out) {
    if (rec.dtype != "f32")
      throw CheckpointError("tensor '" + rec.name + "' has unsupported dtype " + rec.dtype);
    if (rec.shape.size() != 4) {
      throw CheckpointError("tensor '" + rec.name + "' has rank " + std::to_string(rec.shape.size()) +
                            "; the container stores (N, C, H, W) tensors only");
    }
    std::uint64_t count = 1;
    for (auto d : rec.shape) {
      if (d < 0) throw CheckpointError("tensor '" + rec.name + "' has a negative extent");
      count *= static_cast<std::uint64_t>(d);
    }
    if (count * 4 != rec.nbytes)
      throw CheckpointError("tensor '" + rec.name + "' byte count does not match its shape");
    if (rec.offset > payload_size || rec.nbytes > payload_size - rec.offset) {
      throw CheckpointError("tensor '" + rec.name + "' extends past the payload");
    }
    spans.emplace_back(rec.offset, rec.offset + rec.nbytes);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].first < spans[i - 1].second) throw CheckpointError("overlapping tensor records in manifest");
  }
  return out;
}

}  // namespace

std::vector<TensorRecord> Checkpoint::manifest(std::span<const std::uint8_t> bytes) {
  Parsed p = parse_container(bytes);
  return records_of(p.header, p.payload.size());
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
  Parsed p = parse_container(bytes);
  const auto records = records_of(p.header, p.payload.size());
  std::string stored;
  try {
    stored = p.header.at("digest").get<std::string>();
  } catch (const nlohmann::json::exception&) {
    throw CheckpointError("checkpoint header lacks a digest");
  }
  const std::string actual = sha256_hex(p.payload);
  if (stored != actual) {
    throw CheckpointError("checkpoint digest mismatch: header says " + stored + ", payload hashes to " +
                          actual);
  }
  Checkpoint ck;
  if (p.header.contains("metadata")) {
    try {
      ck.metadata = p.header.at("metadata").get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("malformed checkpoint metadata: ") + e.what());
    }
  }
  for (const auto& rec : records) {
    if (ck.contains(rec.name)) throw CheckpointError("duplicate tensor name '" + rec.name + "' in manifest");
    std::array<int, 4> dims{};
    std::copy(rec.shape.begin(), rec.shape.end(), dims.begin());
    std::vector<float> values(rec.nbytes / 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
      values[i] = std::bit_cast<float>(get_le<std::uint32_t>(p.payload, rec.offset + 4 * i));
    }
    ck.put(rec.name, Tensor(Shape{dims[0], dims[1], dims[2], dims[3]}, std::move(values)));
  }
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return deserialize(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace wnet
