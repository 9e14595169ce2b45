#include "bcosdiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace bcosdiff {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& b : blobs) {
    if (b.name == name) return &b;
  }
  return nullptr;
}

namespace {

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  template <typename T>
  void pod(T v) { os_.write(reinterpret_cast<const char*>(&v), sizeof v); }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}
  template <typename T>
  T pod() {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is_) fail("truncated");
    return v;
  }
  std::string str(std::uint64_t limit = std::uint64_t(1) << 30) {
    const auto n = pod<std::uint64_t>();
    if (n > limit) fail("implausible string length");
    std::string s(n, '\0');
    is_.read(s.data(), static_cast<std::streamsize>(n));
    if (!is_) fail("truncated");
    return s;
  }
  [[noreturn]] void fail(const std::string& why) const { throw DataError("checkpoint " + path_ + ": " + why); }

 private:
  std::istream& is_;
  std::string path_;
};

std::string meta_text(const std::map<std::string, std::string>& meta) {
  std::string s;
  for (const auto& [k, v] : meta) s += k + "=" + v + "\n";
  return s;
}

std::map<std::string, std::string> parse_meta(const std::string& text) {
  std::map<std::string, std::string> m;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) m[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return m;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint " + path);
    Writer w(os);
    os.write(Checkpoint::kMagic, 8);
    w.pod<std::uint32_t>(Checkpoint::kVersion);
    w.str(c.config.serialize());
    w.str(c.vocab.serialize());
    w.str(meta_text(c.meta));
    w.pod<std::uint64_t>(c.blobs.size());
    for (const auto& b : c.blobs) {
      w.str(b.name);
      w.pod<std::uint32_t>(static_cast<std::uint32_t>(b.dtype));
      w.pod<std::uint64_t>(b.value.shape().size());
      for (Index d : b.value.shape()) w.pod<std::uint64_t>(static_cast<std::uint64_t>(d));
      if (b.dtype == DType::kF32) {
        w.pod<std::uint64_t>(static_cast<std::uint64_t>(b.value.size()) * 4);
        for (Index i = 0; i < b.value.size(); ++i) w.pod<float>(static_cast<float>(b.value[i]));
      } else {
        w.pod<std::uint64_t>(static_cast<std::uint64_t>(b.value.size()) * 8);
        os.write(reinterpret_cast<const char*>(b.value.data()), b.value.size() * 8);
      }
    }
    if (!os) throw std::runtime_error("failed writing checkpoint " + path);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint not found: " + path);
  Reader r(is, path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, Checkpoint::kMagic, 8) != 0) r.fail("bad magic");
  const auto version = r.pod<std::uint32_t>();
  if (version != Checkpoint::kVersion) r.fail("unsupported version " + std::to_string(version));
  Checkpoint c;
  try {
    c.config = ModelConfig::parse(r.str());
  } catch (const ConfigError& e) {
    r.fail(e.what());
  }
  c.vocab = Vocabulary::parse(r.str());
  c.meta = parse_meta(r.str());
  const auto count = r.pod<std::uint64_t>();
  for (std::uint64_t k = 0; k < count; ++k) {
    NamedTensor b;
    b.name = r.str(4096);
    const auto dt = r.pod<std::uint32_t>();
    if (dt != 1 && dt != 2) r.fail("unknown dtype in blob " + b.name);
    b.dtype = static_cast<DType>(dt);
    const auto rank = r.pod<std::uint64_t>();
    if (rank > 8) r.fail("implausible rank in blob " + b.name);
    Shape shape;
    for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(static_cast<Index>(r.pod<std::uint64_t>()));
    const auto bytes = r.pod<std::uint64_t>();
    const std::uint64_t width = dt == 1 ? 4 : 8;
    if (bytes != static_cast<std::uint64_t>(numel(shape)) * width) r.fail("size mismatch in blob " + b.name);
    b.value = Tensor<double>(shape);
    if (dt == 1) {
      for (Index i = 0; i < b.value.size(); ++i) b.value[i] = r.pod<float>();
    } else {
      is.read(reinterpret_cast<char*>(b.value.data()), static_cast<std::streamsize>(bytes));
      if (!is) r.fail("truncated");
    }
    c.blobs.push_back(std::move(b));
  }
  return c;
}

}  // namespace bcosdiff
