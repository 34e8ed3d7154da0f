#include "mmnar/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace mmnar {

namespace {

constexpr char kMagic[8] = {'M', 'M', 'N', 'R', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& buf, double d) {
  uint64_t v;
  std::memcpy(&v, &d, 8);
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > buf.size()) throw std::runtime_error("checkpoint: truncated file");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  double f64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    double d;
    std::memcpy(&d, &v, 8);
    return d;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

void atomic_write(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

void save_checkpoint(const ParamStore& params, const std::string& meta, const std::string& path) {
  std::string buf;
  buf.append(kMagic, 8);
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<uint32_t>(meta.size()));
  buf.append(meta);
  put_u32(buf, static_cast<uint32_t>(params.count()));
  for (const auto& p : params.all()) {
    put_u32(buf, static_cast<uint32_t>(p->name.size()));
    buf.append(p->name);
    put_u32(buf, static_cast<uint32_t>(p->value.rows));
    put_u32(buf, static_cast<uint32_t>(p->value.cols));
  }
  for (const auto& p : params.all())
    for (double d : p->value.data) put_f64(buf, d);
  atomic_write(path, buf);
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r{buf};
  if (r.bytes(8) != std::string(kMagic, 8)) throw std::runtime_error("checkpoint: bad magic in " + path);
  const uint32_t version = r.u32();
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  CheckpointData data;
  data.meta = r.bytes(r.u32());
  const uint32_t n = r.u32();
  std::vector<std::pair<std::string, std::pair<int, int>>> manifest;
  for (uint32_t i = 0; i < n; ++i) {
    std::string name = r.bytes(r.u32());
    const int rows = static_cast<int>(r.u32());
    const int cols = static_cast<int>(r.u32());
    manifest.emplace_back(std::move(name), std::make_pair(rows, cols));
  }
  for (auto& [name, shape] : manifest) {
    Tensor t(shape.first, shape.second);
    for (double& d : t.data) d = r.f64();
    data.params.emplace_back(name, std::move(t));
  }
  return data;
}

void load_checkpoint_into(const CheckpointData& data, ParamStore& params) {
  if (data.params.size() != params.count())
    throw std::runtime_error("checkpoint: manifest has " + std::to_string(data.params.size()) +
                             " parameters, store expects " + std::to_string(params.count()));
  for (size_t i = 0; i < data.params.size(); ++i) {
    Param& p = *params.all()[i];
    const auto& [name, value] = data.params[i];
    if (name != p.name)
      throw std::runtime_error("checkpoint: manifest entry " + name + " does not match " + p.name);
    if (!value.same_shape(p.value))
      throw std::runtime_error("checkpoint: shape mismatch for " + name + ": " + value.shape_str() +
                               " vs " + p.value.shape_str());
    p.value = value;
  }
}

}  // namespace mmnar
