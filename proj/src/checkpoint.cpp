#include "qdetr/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace qdetr {

namespace {

constexpr char kMagic[4] = {'Q', 'D', 'T', 'R'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& f, const std::string& path) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!f) throw io_error("truncated checkpoint " + path);
  return v;
}

}  // namespace

void save_checkpoint(const ParamStore& params, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot write checkpoint " + path);
  f.write(kMagic, 4);
  put<std::uint32_t>(f, kVersion);
  put<std::uint32_t>(f, static_cast<std::uint32_t>(params.all().size()));

  std::uint64_t offset = 0;
  for (const Param& p : params.all()) {
    put<std::uint16_t>(f, static_cast<std::uint16_t>(p.name.size()));
    f.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint32_t>(f, static_cast<std::uint32_t>(p.t.shape.size()));
    for (int d : p.t.shape) put<std::uint64_t>(f, static_cast<std::uint64_t>(d));
    put<std::uint64_t>(f, offset);
    offset += p.t.numel() * sizeof(float);
  }
  for (const Param& p : params.all()) {
    f.write(reinterpret_cast<const char*>(p.t.data()),
            static_cast<std::streamsize>(p.t.numel() * sizeof(float)));
  }
  if (!f) throw io_error("write failed for checkpoint " + path);
}

void load_checkpoint(ParamStore& params, const std::string& path, bool allow_missing_in_checkpoint) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open checkpoint " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0) {
    throw io_error("not a QDTR checkpoint: " + path);
  }
  const auto version = get<std::uint32_t>(f, path);
  if (version != kVersion) throw io_error("unsupported checkpoint version in " + path);
  const auto count = get<std::uint32_t>(f, path);

  struct Entry {
    std::string name;
    std::vector<int> shape;
    std::uint64_t offset;
    std::size_t numel;
  };
  std::vector<Entry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const auto len = get<std::uint16_t>(f, path);
    e.name.resize(len);
    f.read(e.name.data(), len);
    const auto rank = get<std::uint32_t>(f, path);
    e.numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto d = get<std::uint64_t>(f, path);
      e.shape.push_back(static_cast<int>(d));
      e.numel *= static_cast<std::size_t>(d);
    }
    e.offset = get<std::uint64_t>(f, path);
    if (!f) throw io_error("truncated checkpoint table in " + path);
    entries.push_back(std::move(e));
  }
  const std::streampos data_start = f.tellg();

  std::vector<char> seen(params.all().size(), 0);
  for (const Entry& e : entries) {
    Param* match = nullptr;
    for (std::size_t i = 0; i < params.all().size(); ++i) {
      if (params.all()[i].name == e.name) {
        match = &params.all()[i];
        seen[i] = 1;
        break;
      }
    }
    if (!match) throw io_error("checkpoint tensor '" + e.name + "' has no matching parameter");
    if (match->t.shape != e.shape) {
      throw io_error("checkpoint tensor '" + e.name + "' shape " + shape_str(e.shape) +
                     " mismatches parameter " + shape_str(match->t.shape));
    }
    f.seekg(data_start + static_cast<std::streamoff>(e.offset));
    f.read(reinterpret_cast<char*>(match->t.data()),
           static_cast<std::streamsize>(e.numel * sizeof(float)));
    if (!f) throw io_error("truncated data for tensor '" + e.name + "' in " + path);
  }

  if (!allow_missing_in_checkpoint) {
    for (std::size_t i = 0; i < params.all().size(); ++i) {
      if (!seen[i]) {
        throw io_error("parameter '" + params.all()[i].name + "' missing from checkpoint " + path);
      }
    }
  }
}

}  // namespace qdetr
