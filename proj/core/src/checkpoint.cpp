#include "featft/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

#include "featft/rng.hpp"
#include "featft/zoo.hpp"

namespace featft {

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated while reading ") + what, pos_);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(const char* what) { return take(1, what)[0]; }
  std::uint16_t u16(const char* what) {
    auto b = take(2, what);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }
  std::uint32_t u32(const char* what) {
    auto b = take(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
    return v;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_tensor(Writer& w, const std::string& name, const Tensor& t) {
  if (name.size() > 0xffff) throw ConfigError("tensor name too long: " + name.substr(0, 32) + "...");
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (const int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (const float v : t.values()) w.u32(std::bit_cast<std::uint32_t>(v));
}

}  // namespace

Checkpoint make_checkpoint(const Model& model, const TrainingMeta& meta) {
  Checkpoint cp{model.name(), {}, meta};
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    cp.tensors.emplace_back(model.spec->params[i].name, model.params[i]);
  }
  return cp;
}

Model model_from_checkpoint(const Checkpoint& cp, std::shared_ptr<const ModelSpec> spec) {
  if (cp.model_name != spec->name) {
    throw ConfigError("checkpoint holds model '" + cp.model_name + "', expected '" + spec->name + "'");
  }
  Model model{spec, {}};
  for (const ParamDecl& p : spec->params) {
    const auto it = std::find_if(cp.tensors.begin(), cp.tensors.end(), [&](const auto& nt) { return nt.first == p.name; });
    if (it == cp.tensors.end()) throw ConfigError("checkpoint lacks weight '" + p.name + "'");
    if (it->second.shape() != p.shape) {
      throw ConfigError("weight '" + p.name + "' has shape " + shape_string(it->second.shape()) + ", expected " +
                        shape_string(p.shape));
    }
    model.params.push_back(it->second);
  }
  return model;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& cp) {
  Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  const std::vector<std::string> meta = {
      "@model=" + cp.model_name,
      "@seed=" + std::to_string(cp.meta.seed),
      "@epochs=" + std::to_string(cp.meta.epochs),
      "@accuracy=" + format_double(cp.meta.accuracy),
  };
  w.u32(static_cast<std::uint32_t>(cp.tensors.size() + meta.size()));
  for (const auto& [name, t] : cp.tensors) write_tensor(w, name, t);
  for (const auto& m : meta) write_tensor(w, m, Tensor(Shape{0}));
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) throw FormatError("bad checkpoint magic", 0);
  const std::size_t version_at = r.pos();
  if (const auto v = r.u32("version"); v != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(v), version_at);
  }
  const std::uint32_t count = r.u32("tensor count");

  Checkpoint cp;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t entry_at = r.pos();
    const std::uint16_t name_len = r.u16("name length");
    const auto name_bytes = r.take(name_len, "name");
    std::string name(name_bytes.begin(), name_bytes.end());
    const std::uint8_t rank = r.u8("rank");
    Shape shape;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const std::uint32_t dim = r.u32("dims");
      if (dim > (1u << 28)) throw FormatError("implausible dimension in '" + name + "'", r.pos() - 4);
      shape.push_back(static_cast<int>(dim));
    }
    const std::size_t n = shape_size(shape);
    const auto raw = r.take(n * 4, "tensor values");
    std::vector<float> data(n);
    for (std::size_t j = 0; j < n; ++j) {
      const std::uint32_t u = static_cast<std::uint32_t>(raw[4 * j]) | (static_cast<std::uint32_t>(raw[4 * j + 1]) << 8) |
                              (static_cast<std::uint32_t>(raw[4 * j + 2]) << 16) |
                              (static_cast<std::uint32_t>(raw[4 * j + 3]) << 24);
      data[j] = std::bit_cast<float>(u);
    }

    if (!name.empty() && name[0] == '@') {
      const auto eq = name.find('=');
      if (eq == std::string::npos) throw FormatError("malformed metadata entry '" + name + "'", entry_at);
      const std::string key = name.substr(1, eq - 1);
      const std::string value = name.substr(eq + 1);
      if (key == "model") {
        cp.model_name = value;
      } else if (key == "seed") {
        cp.meta.seed = std::stoull(value);
      } else if (key == "epochs") {
        cp.meta.epochs = std::stoi(value);
      } else if (key == "accuracy") {
        cp.meta.accuracy = std::stod(value);
      }
      continue;
    }
    cp.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw FormatError("trailing bytes after last tensor", r.pos());
  return cp;
}

void save_checkpoint(const Checkpoint& cp, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(cp);
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

Model load_zoo_model(const std::filesystem::path& dir, const std::string& name) {
  return model_from_checkpoint(load_checkpoint(dir / (name + ".ftw")), zoo_spec(name));
}

std::string checkpoint_digest(const Checkpoint& cp) {
  const auto bytes = encode_checkpoint(cp);
  const std::uint64_t h = fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace featft
