#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

#include "stuffnet/model.hpp"

namespace stuffnet {

inline constexpr uint32_t kCheckpointVersion = 1;

// Malformed or unreadable checkpoint file.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Well-formed checkpoint whose contents do not fit the requested spec.
class SpecMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& b) : buf_(b) {}

  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string bytes(size_t n, const char* what) {
    need(n, what);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  float f32(const char* what) {
    const uint32_t bits = u32(what);
    return std::bit_cast<float>(bits);
  }

  bool done() const { return pos_ == buf_.size(); }
  size_t pos() const { return pos_; }

 private:
  void need(size_t n, const char* what) {
    if (buf_.size() - pos_ < n)
      throw CheckpointError(std::string("truncated checkpoint: ") + what + " at byte " + std::to_string(pos_));
  }

  const std::string& buf_;
  size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Model& m) {
  std::string out = "SNCK";
  detail::put_u32(out, kCheckpointVersion);
  const std::string spec = m.spec().canonical_text();
  detail::put_u32(out, static_cast<uint32_t>(spec.size()));
  out += spec;
  detail::put_u32(out, static_cast<uint32_t>(m.params().size()));
  for (const auto& [name, t] : m.params()) {
    detail::put_u32(out, static_cast<uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<uint32_t>(t.rank()));
    for (int d : t.dims()) detail::put_u32(out, static_cast<uint32_t>(d));
    for (double v : t.data()) detail::put_u32(out, std::bit_cast<uint32_t>(static_cast<float>(v)));
  }
  return out;
}

struct RawCheckpoint {
  ModelSpec spec;
  std::vector<NamedTensor> tensors;
};

inline RawCheckpoint parse_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < 4 || bytes.compare(0, 4, "SNCK") != 0) throw CheckpointError("bad magic");
  r.bytes(4, "magic");
  const uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  const uint32_t spec_len = r.u32("spec length");
  RawCheckpoint ck;
  try {
    ck.spec = ModelSpec::parse(r.bytes(spec_len, "spec text"));
  } catch (const InvalidArgument& e) {
    throw CheckpointError(std::string("bad spec in checkpoint: ") + e.what());
  }
  const uint32_t count = r.u32("tensor count");
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = r.u32("tensor name length");
    std::string name = r.bytes(name_len, "tensor name");
    const uint32_t rank = r.u32("tensor rank");
    if (rank < 1 || rank > 4) throw CheckpointError("tensor " + name + " has unsupported rank " + std::to_string(rank));
    Shape dims;
    size_t numel = 1;
    for (uint32_t k = 0; k < rank; ++k) {
      const uint32_t d = r.u32("tensor dims");
      if (d == 0 || d > (1u << 24)) throw CheckpointError("tensor " + name + " has bad dimension " + std::to_string(d));
      dims.push_back(static_cast<int>(d));
      numel *= d;
    }
    if (numel > bytes.size()) throw CheckpointError("truncated checkpoint: tensor " + name + " payload");
    std::vector<double> values(numel);
    for (double& v : values) v = static_cast<double>(r.f32("tensor payload"));
    ck.tensors.push_back({std::move(name), Tensor(std::move(dims), std::move(values))});
  }
  if (!r.done()) throw CheckpointError("trailing bytes after last tensor at byte " + std::to_string(r.pos()));
  return ck;
}

/// Rebuilds a model of the given spec from parsed tensors; names and dims must
/// match the spec's parameter set exactly.
inline Model assemble_model(const ModelSpec& spec, const std::vector<NamedTensor>& tensors) {
  const Model shape = build(spec, 0);
  std::set<std::string> have;
  for (const auto& t : tensors) have.insert(t.name);
  std::string missing, unexpected;
  for (const auto& p : shape.params())
    if (!have.count(p.name)) missing += (missing.empty() ? "" : ", ") + p.name;
  for (const auto& t : tensors)
    if (!shape.has(t.name)) unexpected += (unexpected.empty() ? "" : ", ") + t.name;
  if (!missing.empty()) throw SpecMismatch("checkpoint is missing tensors: " + missing);
  if (!unexpected.empty()) throw SpecMismatch("checkpoint has unexpected tensors: " + unexpected);
  Model m(spec);
  for (const auto& p : shape.params()) {
    const auto it = std::find_if(tensors.begin(), tensors.end(), [&](const NamedTensor& t) { return t.name == p.name; });
    if (it->value.dims() != p.value.dims())
      throw SpecMismatch("tensor " + p.name + " has dims " + shape_str(it->value.dims()) + ", spec expects " +
                         shape_str(p.value.dims()));
    m.add_param(p.name, it->value);
  }
  return m;
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::ios_base::failure("write failed for " + path);
}

inline void save_checkpoint(const Model& m, const std::string& path) { write_file_bytes(path, serialize_checkpoint(m)); }

inline Model load_checkpoint(const std::string& path) {
  RawCheckpoint ck = parse_checkpoint(read_file_bytes(path));
  return assemble_model(ck.spec, ck.tensors);
}

// Loads into an expected spec; any mismatch is reported rather than reshaped.
inline Model load_checkpoint(const std::string& path, const ModelSpec& expected) {
  RawCheckpoint ck = parse_checkpoint(read_file_bytes(path));
  Model m = assemble_model(expected, ck.tensors);
  if (!(ck.spec == expected)) {
    std::string diff;
    std::stringstream a(ck.spec.canonical_text()), b(expected.canonical_text());
    for (std::string la, lb; std::getline(a, la) && std::getline(b, lb);)
      if (la != lb) diff += " [" + la + " vs " + lb + "]";
    throw SpecMismatch("checkpoint spec differs from expected:" + diff);
  }
  return m;
}

}  // namespace stuffnet
