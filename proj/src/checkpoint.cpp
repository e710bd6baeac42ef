#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <algorithm>
#include <stdexcept>

#include "dpbnet/seg_net.hpp"

namespace dpbn {

namespace {

constexpr char kMagic[4] = {'D', 'P', 'B', 'N'};

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
  void text(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> bytes) : buf_(std::move(bytes)) {}

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == buf_.size(); }

  const char* take(std::size_t n, const char* what) {
    if (buf_.size() - pos_ < n) {
      throw std::runtime_error("truncated checkpoint: need " + std::to_string(n) + " bytes for " + what +
                               " at offset " + std::to_string(pos_) + ", file has " + std::to_string(buf_.size()));
    }
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32(const char* what) {
    const auto* p = reinterpret_cast<const unsigned char*>(take(4, what));
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
           static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
  }
  double f64(const char* what) {
    const auto* p = reinterpret_cast<const unsigned char*>(take(8, what));
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return std::bit_cast<double>(bits);
  }
  std::string text(const char* what) {
    const std::uint32_t n = u32(what);
    const char* p = take(n, what);
    return std::string(p, n);
  }

 private:
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

void write_tensor(Writer& w, const std::string& name, const Tensor& t) {
  w.text(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (Real v : t.data()) w.f64(static_cast<double>(v));
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params, const NamedTensors& extra) {
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.text(params.arch.to_text());
  w.u32(static_cast<std::uint32_t>(params.tensors.size() + extra.size()));
  for (const auto& [name, t] : params.tensors) write_tensor(w, name, t);
  for (const auto& [name, t] : extra) write_tensor(w, name, t);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  Reader r(std::vector<char>(std::istreambuf_iterator<char>(in), {}));

  if (std::memcmp(r.take(4, "magic"), kMagic, 4) != 0) {
    throw std::runtime_error("not a DPBN checkpoint: bad magic at offset 0 in '" + path + "'");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) + " at offset 4 (expected " +
                             std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t arch_offset = r.offset();
  Architecture arch;
  try {
    arch = Architecture::from_text(r.text("architecture"));
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(std::string(e.what()) + " at offset " + std::to_string(arch_offset));
  }

  Checkpoint ck;
  ck.params = init_model(arch, 0);
  std::vector<char> seen(ck.params.tensors.size(), 0);
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    std::string name = r.text("tensor name");
    const std::uint32_t rank = r.u32("tensor rank");
    if (rank == 0 || rank > 8) {
      throw std::runtime_error("bad rank " + std::to_string(rank) + " for tensor '" + name + "' at offset " +
                               std::to_string(at));
    }
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t extent = r.u32("tensor shape");
      if (extent == 0 || extent > (1u << 30)) {
        throw std::runtime_error("bad extent for tensor '" + name + "' at offset " + std::to_string(at));
      }
      shape.push_back(static_cast<int>(extent));
    }
    Tensor t(shape);
    for (Real& v : t.data()) v = static_cast<Real>(r.f64("tensor data"));

    auto it = std::find_if(ck.params.tensors.begin(), ck.params.tensors.end(),
                           [&](const auto& p) { return p.first == name; });
    if (it == ck.params.tensors.end()) {
      ck.extra.emplace_back(std::move(name), std::move(t));
      continue;
    }
    if (it->second.shape() != t.shape()) {
      throw std::runtime_error("tensor '" + name + "' at offset " + std::to_string(at) + " has shape " +
                               shape_str(t.shape()) + ", architecture expects " + shape_str(it->second.shape()));
    }
    it->second = std::move(t);
    seen[static_cast<std::size_t>(it - ck.params.tensors.begin())] = 1;
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) throw std::runtime_error("checkpoint is missing tensor '" + ck.params.tensors[i].first + "'");
  }
  if (!r.done()) {
    throw std::runtime_error("trailing bytes after last tensor at offset " + std::to_string(r.offset()));
  }
  return ck;
}

}  // namespace dpbn
